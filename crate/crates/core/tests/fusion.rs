use proptest::prelude::*;
use saap_core::fusion::{fit_lambdas, fuse, FusionPolicy, LambdaMode, LambdaPair, VARIANCE_FLOOR};
use saap_core::groups::{discover_groups, GroupGraph};
use saap_core::importance::{SampleScores, ScoreOptions};
use saap_core::model::ModelConfig;
use saap_core::Error;

fn graph(layers: usize, heads: usize, mlp: usize) -> GroupGraph {
    discover_groups(&ModelConfig::new(4 * heads, layers, heads, mlp)).unwrap()
}

fn scores(vector: Vec<Vec<f64>>, element: Vec<Vec<f64>>) -> SampleScores {
    let g = vector[0].len();
    SampleScores {
        group_ids: (0..g).collect(),
        sample_ids: (0..vector.len()).collect(),
        vector,
        element,
        options: ScoreOptions::default(),
    }
}

/// Summed fusion objective of one population for given squared scales.
fn objective(s: &SampleScores, cols: &[usize], v_sq: f64, e_sq: f64) -> f64 {
    let pair = LambdaPair {
        vector_sq: v_sq,
        element_sq: e_sq,
    };
    s.vector
        .iter()
        .zip(&s.element)
        .flat_map(|(vr, er)| cols.iter().map(move |&j| pair.fuse(vr[j], er[j])))
        .sum()
}

#[test]
fn layer_mle_is_the_mean_score() {
    let g = graph(1, 1, 1);
    let s = scores(vec![vec![2.0, 8.0]], vec![vec![0.0, 0.0]]);
    let l = fit_lambdas(&s, &g, &FusionPolicy::default()).unwrap();
    let pair = l.for_column(0);
    assert_eq!(pair.vector_sq, 5.0);
    assert_eq!(pair.element_sq, VARIANCE_FLOOR);
}

#[test]
fn fixed_lambdas_pass_through() {
    let g = graph(1, 1, 1);
    let s = scores(vec![vec![2.0, 8.0]], vec![vec![3.0, 1.0]]);
    let l = fit_lambdas(&s, &g, &FusionPolicy::new(LambdaMode::Fixed { vector: 1.0, element: 1.0 })).unwrap();
    assert_eq!(
        l.for_column(1),
        LambdaPair {
            vector_sq: 1.0,
            element_sq: 1.0
        }
    );
}

#[test]
fn fused_value_by_hand() {
    let pair = LambdaPair {
        vector_sq: 5.0,
        element_sq: 1.0,
    };
    let v = pair.fuse(2.0, 1.0);
    assert!((v - (0.2 + 0.5 + 0.5 * 5f64.ln())).abs() < 1e-12);
    assert!((v - 1.5047).abs() < 1e-4);
}

#[test]
fn unit_scales_average_the_scores() {
    let g = graph(1, 1, 1);
    let s = scores(vec![vec![2.0, 6.0], vec![1.0, 0.5]], vec![vec![4.0, 1.0], vec![3.0, 0.0]]);
    let l = fit_lambdas(&s, &g, &FusionPolicy::new(LambdaMode::Fixed { vector: 1.0, element: 1.0 })).unwrap();
    let f = fuse(&s, &l).unwrap();
    for d in 0..2 {
        for j in 0..2 {
            assert_eq!(f.values[d][j], (s.vector[d][j] + s.element[d][j]) / 2.0);
        }
    }
}

#[test]
fn equal_inputs_in_one_population_fuse_equally() {
    let g = graph(1, 2, 2);
    let s = scores(vec![vec![1.0, 1.0, 3.0, 4.0]], vec![vec![2.0, 2.0, 1.0, 0.5]]);
    let f = fuse(&s, &fit_lambdas(&s, &g, &FusionPolicy::default()).unwrap()).unwrap();
    assert_eq!(f.values[0][0], f.values[0][1]);
}

#[test]
fn populations_follow_the_mode() {
    let g = graph(2, 1, 2);
    let s = scores(
        vec![vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]],
        vec![vec![1.0; 6]],
    );
    let layer = fit_lambdas(&s, &g, &FusionPolicy::default()).unwrap();
    assert_eq!(layer.populations.len(), 2);
    assert_eq!(layer.for_column(0).vector_sq, 2.0);
    assert_eq!(layer.for_column(5).vector_sq, 20.0);
    let global = fit_lambdas(&s, &g, &FusionPolicy::new(LambdaMode::GlobalMle)).unwrap();
    assert_eq!(global.populations.len(), 1);
    assert_eq!(global.for_column(2).vector_sq, 11.0);
    let per_group = fit_lambdas(&s, &g, &FusionPolicy::new(LambdaMode::PerGroupMle)).unwrap();
    assert_eq!(per_group.populations.len(), 6);
    assert_eq!(per_group.for_column(4).vector_sq, 20.0);
}

#[test]
fn empty_scores_are_rejected() {
    let g = graph(1, 1, 1);
    let s = SampleScores {
        group_ids: vec![],
        sample_ids: vec![],
        vector: vec![],
        element: vec![],
        options: ScoreOptions::default(),
    };
    assert!(matches!(
        fit_lambdas(&s, &g, &FusionPolicy::default()),
        Err(Error::EmptyPopulation(_))
    ));
}

#[test]
fn closed_form_matches_grid_search() {
    let g = graph(2, 2, 6);
    let vector: Vec<Vec<f64>> = (0..5)
        .map(|d| (0..16).map(|j| 0.01 * (1 + (d * 7 + j * 3) % 11) as f64 * (1 + j / 8) as f64).collect())
        .collect();
    let element: Vec<Vec<f64>> = (0..5)
        .map(|d| (0..16).map(|j| 0.3 * (1 + (d * 5 + j * 2) % 13) as f64).collect())
        .collect();
    let s = scores(vector, element);
    let lambdas = fit_lambdas(&s, &g, &FusionPolicy::default()).unwrap();
    for layer in 0..2 {
        let cols: Vec<usize> = (layer * 8..(layer + 1) * 8).collect();
        let closed = lambdas.for_column(cols[0]);
        let grid: Vec<f64> = (0..=4000).map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 4000.0)).collect();
        let best_v = grid
            .iter()
            .copied()
            .min_by(|&a, &b| {
                objective(&s, &cols, a * a, closed.element_sq)
                    .total_cmp(&objective(&s, &cols, b * b, closed.element_sq))
            })
            .unwrap();
        let best_e = grid
            .iter()
            .copied()
            .min_by(|&a, &b| {
                objective(&s, &cols, closed.vector_sq, a * a)
                    .total_cmp(&objective(&s, &cols, closed.vector_sq, b * b))
            })
            .unwrap();
        assert!((best_v * best_v / closed.vector_sq - 1.0).abs() < 0.01);
        assert!((best_e * best_e / closed.element_sq - 1.0).abs() < 0.01);
    }
}

fn ranking(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

proptest! {
    #[test]
    fn layer_ranking_survives_positive_rescaling(
        v in prop::collection::vec(0.01f64..10.0, 6),
        e in prop::collection::vec(0.01f64..10.0, 6),
        cv in 0.1f64..50.0,
        ce in 0.1f64..50.0,
    ) {
        let g = graph(1, 1, 2);
        let base = scores(vec![v[..3].to_vec(), v[3..].to_vec()], vec![e[..3].to_vec(), e[3..].to_vec()]);
        let scaled = scores(
            base.vector.iter().map(|r| r.iter().map(|x| x * cv).collect()).collect(),
            base.element.iter().map(|r| r.iter().map(|x| x * ce).collect()).collect(),
        );
        let p = FusionPolicy::default();
        let f0 = fuse(&base, &fit_lambdas(&base, &g, &p).unwrap()).unwrap();
        let f1 = fuse(&scaled, &fit_lambdas(&scaled, &g, &p).unwrap()).unwrap();
        for d in 0..2 {
            let l0 = fit_lambdas(&base, &g, &p).unwrap().for_column(0);
            let l1 = fit_lambdas(&scaled, &g, &p).unwrap().for_column(0);
            prop_assert!((l1.vector_sq / l0.vector_sq - cv).abs() < 1e-9 * cv);
            let r0 = f0.values[d].iter().map(|x| x - 0.5 * (l0.vector_sq * l0.element_sq).ln()).collect::<Vec<_>>();
            let r1 = f1.values[d].iter().map(|x| x - 0.5 * (l1.vector_sq * l1.element_sq).ln()).collect::<Vec<_>>();
            for j in 0..3 {
                prop_assert!((r0[j] - r1[j]).abs() < 1e-9 * r0[j].abs().max(1.0));
            }
            prop_assert_eq!(ranking(&f0.values[d]), ranking(&f1.values[d]));
        }
    }
}
