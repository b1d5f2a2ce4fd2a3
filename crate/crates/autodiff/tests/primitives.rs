use proptest::prelude::*;
use saap_autodiff::{primitive_set, AutodiffError, NormKind, Tape, Tensor};

#[test]
fn catalogue_lists_required_primitives() {
    let names: Vec<&str> = primitive_set().iter().map(|p| p.name).collect();
    for required in [
        "matmul",
        "add",
        "mul",
        "activation",
        "softmax",
        "norm",
        "embedding",
        "cross_entropy",
    ] {
        assert!(names.contains(&required), "{required}");
    }
}

#[test]
fn matmul_shape() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::full(&[2, 3], 1.0));
    let b = tape.leaf(Tensor::full(&[3, 4], 1.0));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).unwrap().shape(), &[2, 4]);
    assert!(tape.value(c).unwrap().data().iter().all(|&x| x == 3.0));
}

#[test]
fn matmul_rejects_mismatched_inner_dims() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::full(&[2, 3], 1.0));
    let b = tape.leaf(Tensor::full(&[4, 4], 1.0));
    assert!(matches!(tape.matmul(a, b), Err(AutodiffError::ShapeMismatch { .. })));
}

#[test]
fn add_rejects_mismatched_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::full(&[2, 3], 1.0));
    let b = tape.leaf(Tensor::full(&[3, 2], 1.0));
    assert!(tape.add(a, b).is_err());
    assert!(tape.mul(a, b).is_err());
}

#[test]
fn softmax_survives_large_logits() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
    let s = tape.softmax(a).unwrap();
    let v = tape.value(s).unwrap();
    assert_eq!(v.data(), &[1.0, 0.0]);
}

#[test]
fn embedding_rejects_out_of_range_ids() {
    let mut tape = Tape::<f32>::new();
    let t = tape.leaf(Tensor::full(&[3, 2], 1.0));
    assert!(tape.embedding(t, &[0, 3]).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![3, 4], values).unwrap());
        let s = tape.softmax(a).unwrap();
        let v = tape.value(s).unwrap();
        for r in 0..3 {
            let sum: f64 = v.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn rms_norm_output_has_unit_rms(values in prop::collection::vec(-5.0f64..5.0, 32)) {
        prop_assume!(values.iter().map(|x| x * x).sum::<f64>() > 1e-2);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 16], values).unwrap());
        let g = tape.constant(Tensor::full(&[16], 1.0));
        let y = tape.norm(x, g, NormKind::Rms, 1e-10).unwrap();
        let v = tape.value(y).unwrap();
        for r in 0..2 {
            let rms = (v.row(r).iter().map(|x| x * x).sum::<f64>() / 16.0).sqrt();
            prop_assert!((rms - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn layer_norm_output_is_standardised(values in prop::collection::vec(-5.0f64..5.0, 16)) {
        let mean = values.iter().sum::<f64>() / 16.0;
        prop_assume!(values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() > 1e-2);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 16], values).unwrap());
        let g = tape.constant(Tensor::full(&[16], 1.0));
        let y = tape.norm(x, g, NormKind::Layer, 1e-10).unwrap();
        let v = tape.value(y).unwrap();
        let m = v.data().iter().sum::<f64>() / 16.0;
        let var = v.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / 16.0;
        prop_assert!(m.abs() <= 1e-5);
        prop_assert!((var - 1.0).abs() <= 1e-5);
    }
}
