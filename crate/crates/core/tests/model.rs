use saap_autodiff::{finite_diff_grad, relative_error, Tensor};
use saap_core::model::checkpoint::{decode_model, encode_model};
use saap_core::model::{
    byte_tokenize, forward_logits, load_checkpoint, names, nll_loss, save_checkpoint, train_steps, Model,
    ModelConfig, TrainConfig,
};
use saap_core::Error;

fn tiny() -> ModelConfig {
    ModelConfig::new(16, 2, 2, 8).with_max_seq_len(16)
}

fn corpus(len: usize) -> Vec<u32> {
    let text = b"the whale swam slowly past the ship while the crew watched. ";
    text.iter().cycle().take(len).map(|&b| b as u32).collect()
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = Model::<f32>::init(tiny(), 7).unwrap();
    let b = Model::<f32>::init(tiny(), 7).unwrap();
    let c = Model::<f32>::init(tiny(), 8).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn head_width_follows_from_config() {
    let m = Model::<f32>::init(ModelConfig::new(64, 2, 4, 16), 0).unwrap();
    assert_eq!(m.config.d_head, 16);
    assert_eq!(m.param(&names::wq(0)).unwrap().shape(), &[64, 64]);
    assert_eq!(m.param(&names::wo(1)).unwrap().shape(), &[64, 64]);
}

#[test]
fn invalid_config_is_rejected() {
    assert!(matches!(
        Model::<f32>::init(ModelConfig::new(64, 2, 4, 2), 0),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn logits_are_finite_and_causal() {
    for cfg in [tiny(), ModelConfig::new(24, 3, 3, 12).with_max_seq_len(12), {
        let mut c = tiny();
        c.tie_embeddings = true;
        c.norm = saap_autodiff::NormKind::Layer;
        c.activation = saap_autodiff::Activation::Gelu;
        c
    }] {
        let m = Model::<f64>::init(cfg, 3).unwrap();
        let short = [5u32, 80, 13, 200, 1];
        let long = [5u32, 80, 13, 200, 1, 42, 99];
        let a = forward_logits(&m, &short).unwrap();
        let b = forward_logits(&m, &long).unwrap();
        assert!(b.all_finite());
        let v = m.config.vocab_size;
        for i in 0..short.len() * v {
            assert!((a.data()[i] - b.data()[i]).abs() <= 1e-6);
        }
    }
}

#[test]
fn forward_rejects_bad_tokens() {
    let m = Model::<f32>::init(tiny(), 0).unwrap();
    assert!(matches!(forward_logits(&m, &[256]), Err(Error::OutOfVocab { .. })));
    assert!(matches!(
        forward_logits(&m, &[1; 17]),
        Err(Error::SequenceTooLong { len: 17, max: 16 })
    ));
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut m = Model::<f64>::init(tiny(), 0).unwrap();
    let head = m.param_mut(names::LM_HEAD).unwrap();
    *head = Tensor::zeros(head.shape());
    let loss = nll_loss(&m, &[vec![1u32, 2, 3, 4], vec![9, 9, 9, 9]]).unwrap();
    assert!((loss - 256f64.ln()).abs() < 1e-3);
}

#[test]
fn nll_is_batch_order_invariant() {
    let m = Model::<f64>::init(tiny(), 1).unwrap();
    let a = vec![1u32, 2, 3, 4, 5];
    let b = vec![200u32, 100, 50];
    let c = vec![7u32, 7, 8, 9, 10];
    let x = nll_loss(&m, &[a.clone(), b.clone(), c.clone()]).unwrap();
    let y = nll_loss(&m, &[c, a, b]).unwrap();
    assert!((x - y).abs() < 1e-12);
}

#[test]
fn nll_rejects_empty_batch_and_short_sequences() {
    let m = Model::<f32>::init(tiny(), 0).unwrap();
    assert!(matches!(nll_loss::<f32, Vec<u32>>(&m, &[]), Err(Error::EmptyBatch)));
    assert!(nll_loss(&m, &[vec![1u32]]).is_err());
}

#[test]
fn model_gradient_matches_finite_differences() {
    let m = Model::<f64>::init(ModelConfig::new(8, 2, 2, 4).with_max_seq_len(4), 5).unwrap();
    let seq = [3u32, 1];
    let grads = saap_core::importance::per_sample_gradients(&m, &seq).unwrap();
    for name in [names::wq(0), names::down(1), names::LM_HEAD.to_string(), names::attn_norm(1)] {
        let x = m.param(&name).unwrap().clone();
        let fd = finite_diff_grad(
            |w: &Tensor<f64>| {
                let mut mm = m.clone();
                *mm.param_mut(&name).unwrap() = w.clone();
                nll_loss(&mm, &[seq]).unwrap()
            },
            &x,
            1e-5,
        )
        .unwrap();
        let err = relative_error(grads.get(&name).unwrap(), &fd, 1e-8);
        assert!(err <= 1e-6, "{name}: {err}");
    }
}

#[test]
fn zero_steps_leave_model_unchanged() {
    let m = Model::<f32>::init(tiny(), 0).unwrap();
    let cfg = TrainConfig {
        steps: 0,
        seq_len: 16,
        ..TrainConfig::default()
    };
    let (out, report) = train_steps(&m, &corpus(400), &cfg).unwrap();
    assert_eq!(out.hash(), m.hash());
    assert_eq!(report.final_loss, None);
}

#[test]
fn training_needs_ten_windows_of_text() {
    let m = Model::<f32>::init(tiny(), 0).unwrap();
    let err = train_steps(&m, &corpus(159), &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::CorpusTooSmall { tokens: 159, needed: 160 }));
}

#[test]
fn training_is_deterministic_and_lowers_loss() {
    let m = Model::<f32>::init(tiny(), 0).unwrap();
    let cfg = TrainConfig {
        steps: 60,
        batch_size: 4,
        seq_len: 16,
        lr: 1e-2,
        warmup_steps: 5,
        seed: 3,
        ..TrainConfig::default()
    };
    let data = corpus(2000);
    let (a, ra) = train_steps(&m, &data, &cfg).unwrap();
    let (b, _) = train_steps(&m, &data, &cfg).unwrap();
    assert_eq!(a.hash(), b.hash());
    let probe: Vec<Vec<u32>> = data.chunks(16).take(8).map(|c| c.to_vec()).collect();
    assert!(nll_loss(&a, &probe).unwrap() < nll_loss(&m, &probe).unwrap());
    assert!(ra.final_loss.unwrap() < ra.losses[0]);
}

#[test]
fn single_sequence_can_be_memorized() {
    let m = Model::<f32>::init(ModelConfig::new(32, 2, 2, 32).with_max_seq_len(16), 0).unwrap();
    let seq = byte_tokenize(b"call me ishmael.");
    let data: Vec<u32> = seq.iter().copied().cycle().take(16 * 12).collect();
    let cfg = TrainConfig {
        steps: 500,
        batch_size: 1,
        seq_len: 16,
        lr: 1e-2,
        warmup_steps: 10,
        seed: 0,
        ..TrainConfig::default()
    };
    let (trained, _) = train_steps(&m, &data, &cfg).unwrap();
    let loss = nll_loss(&trained, &[seq]).unwrap();
    assert!(loss < 0.1, "loss {loss}");
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let m32 = Model::<f32>::init(tiny(), 4).unwrap();
    let p = dir.path().join("m32.ckpt");
    save_checkpoint(&m32, &p).unwrap();
    let back: Model<f32> = load_checkpoint(&p).unwrap();
    assert_eq!(back, m32);
    for name in m32.params().keys() {
        assert_eq!(back.tensor_hash(name).unwrap(), m32.tensor_hash(name).unwrap());
    }
    let m64 = Model::<f64>::init(tiny(), 4).unwrap();
    let back: Model<f64> = decode_model(&encode_model(&m64).unwrap()).unwrap();
    assert_eq!(back.hash(), m64.hash());
    assert!(matches!(load_checkpoint::<f64>(&p), Err(Error::Checkpoint(_))));
}

#[test]
fn corrupt_checkpoints_fail_cleanly() {
    let m = Model::<f32>::init(tiny(), 4).unwrap();
    let bytes = encode_model(&m).unwrap();

    let mut bad_len = bytes.clone();
    bad_len[..8].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(matches!(decode_model::<f32>(&bad_len), Err(Error::Checkpoint(_))));

    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(decode_model::<f32>(truncated), Err(Error::Checkpoint(_))));

    assert!(matches!(decode_model::<f32>(&bytes[..5]), Err(Error::Checkpoint(_))));

    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[8..8 + header_len].to_vec()).unwrap();
    let swapped = header.replacen("\"dtype\":\"f32\",\"offsets\"", "\"dtype\":\"f33\",\"offsets\"", 1);
    let mut unknown = bytes[..8].to_vec();
    unknown.extend_from_slice(swapped.as_bytes());
    unknown.extend_from_slice(&bytes[8 + header_len..]);
    let err = decode_model::<f32>(&unknown).unwrap_err();
    assert!(err.to_string().contains("unknown dtype"), "{err}");
}

#[test]
fn overlapping_offsets_are_rejected() {
    use saap_core::model::checkpoint::{decode_container, encode_container, RawEntry};
    use std::collections::BTreeMap;
    let mut entries = BTreeMap::new();
    for name in ["a", "b"] {
        entries.insert(
            name.to_string(),
            RawEntry {
                dtype: "u8".into(),
                shape: vec![4],
                bytes: vec![1, 2, 3, 4],
            },
        );
    }
    let bytes = encode_container(&serde_json::json!({}), &entries).unwrap();
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[8..8 + header_len].to_vec()).unwrap();
    let moved = header.replace("[4,8]", "[2,6]");
    assert_eq!(moved.len(), header.len());
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(moved.as_bytes());
    out.extend_from_slice(&bytes[8 + header_len..]);
    let err = decode_container(&out).unwrap_err();
    assert!(err.to_string().contains("overlap"), "{err}");
}
