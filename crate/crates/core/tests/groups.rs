use std::collections::{BTreeMap, BTreeSet};

use saap_core::groups::{
    discover_groups, mask_group, mask_groups, read_group, verify_group_independence, write_group, GroupGraph,
    GroupKind,
};
use saap_core::model::forward::head_contribution;
use saap_core::model::{layer_outputs, Model, ModelConfig};
use saap_core::Error;

fn small() -> ModelConfig {
    ModelConfig::new(32, 3, 4, 16).with_max_seq_len(24)
}

fn probes(n: usize, len: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|i| (0..len).map(|j| ((i * 37 + j * 11) % 256) as u32).collect())
        .collect()
}

#[test]
fn minimal_layer_has_two_groups() {
    let g = discover_groups(&ModelConfig::new(8, 1, 1, 1)).unwrap();
    assert_eq!(g.len(), 2);
    assert_eq!(g.groups[0].kind, GroupKind::AttnHead);
    assert_eq!(g.groups[1].kind, GroupKind::MlpChannel);
}

#[test]
fn group_count_is_layers_times_heads_plus_channels() {
    let g = discover_groups(&ModelConfig::new(16, 2, 2, 8)).unwrap();
    assert_eq!(g.len(), 2 * (2 + 8));
}

#[test]
fn head_owns_q_k_v_columns_and_o_rows() {
    let g = discover_groups(&ModelConfig::new(64, 2, 4, 16)).unwrap();
    let head = &g.groups[g.layers[1].heads[2]];
    assert_eq!(head.param_count, 16 * 64 * 4);
    let axes: Vec<(String, usize, usize, usize)> = head
        .slices
        .iter()
        .map(|s| (s.tensor.clone(), s.axis, s.start, s.end))
        .collect();
    assert_eq!(
        axes,
        vec![
            ("layers.1.attn.wq".into(), 1, 32, 48),
            ("layers.1.attn.wk".into(), 1, 32, 48),
            ("layers.1.attn.wv".into(), 1, 32, 48),
            ("layers.1.attn.wo".into(), 0, 32, 48),
        ]
    );
    let ch = &g.groups[g.layers[0].channels[5]];
    assert_eq!(ch.param_count, 3 * 64);
}

#[test]
fn ordering_is_layer_kind_index() {
    let g = discover_groups(&small()).unwrap();
    let keys: Vec<(usize, GroupKind, usize)> = g.groups.iter().map(|c| (c.layer, c.kind, c.index)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert!(g.groups.iter().enumerate().all(|(i, c)| c.id == i));
}

#[test]
fn indivisible_heads_are_rejected() {
    let mut c = ModelConfig::new(30, 2, 4, 8);
    c.d_head = 7;
    assert!(matches!(discover_groups(&c), Err(Error::InvalidConfig(_))));
}

#[test]
fn slices_are_disjoint_and_account_for_every_prunable_element() {
    let cfg = small();
    let g = discover_groups(&cfg).unwrap();
    let model = Model::<f32>::init(cfg, 0).unwrap();
    let mut owned: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for grp in &g.groups {
        let mut n = 0;
        for s in &grp.slices {
            let shape = model.param(&s.tensor).unwrap().shape().to_vec();
            for i in s.indices(&shape).unwrap() {
                assert!(owned.entry(s.tensor.clone()).or_default().insert(i), "{} overlaps", s.tensor);
                n += 1;
            }
        }
        assert_eq!(n, grp.param_count);
    }
    let owned_total: usize = owned.values().map(|s| s.len()).sum();
    assert_eq!(owned_total, g.prunable_params);
    let unprunable: usize = model
        .params()
        .iter()
        .filter(|(name, _)| !owned.contains_key(*name))
        .map(|(_, t)| t.numel())
        .sum();
    let grouped: usize = g.groups.iter().map(|c| c.param_count).sum();
    assert_eq!(grouped + unprunable, model.count_params());
    assert_eq!(g.total_params, model.count_params());
    for name in ["tok_emb", "pos_emb", "final_norm", "lm_head", "layers.0.attn_norm"] {
        assert!(!owned.contains_key(name));
    }
}

#[test]
fn discovery_is_pure() {
    assert_eq!(discover_groups(&small()).unwrap(), discover_groups(&small()).unwrap());
}

#[test]
fn graph_json_round_trips() {
    let g = discover_groups(&small()).unwrap();
    let back: GroupGraph = serde_json::from_str(&g.to_json().unwrap()).unwrap();
    assert_eq!(back, g);
    assert!(g.to_json().unwrap().contains("\"attn-head\""));
}

#[test]
fn mask_then_restore_is_identity() {
    let cfg = small();
    let g = discover_groups(&cfg).unwrap();
    let model = Model::<f32>::init(cfg, 1).unwrap();
    for id in [0, 5, g.len() - 1] {
        let grp = &g.groups[id];
        let saved = read_group(&model, grp).unwrap();
        let mut masked = mask_group(&model, grp).unwrap();
        assert_ne!(masked.hash(), model.hash());
        assert!(read_group(&masked, grp).unwrap().iter().flatten().all(|&v| v == 0.0));
        write_group(&mut masked, grp, &saved).unwrap();
        assert_eq!(masked.hash(), model.hash());
    }
}

#[test]
fn masked_head_contributes_nothing() {
    let cfg = small();
    let g = discover_groups(&cfg).unwrap();
    let model = Model::<f64>::init(cfg, 2).unwrap();
    let grp = &g.groups[g.layers[1].heads[3]];
    let masked = mask_group(&model, grp).unwrap();
    let tokens = &probes(1, 20)[0];
    let before = head_contribution(&model, 1, 3, tokens).unwrap();
    assert!(before.data().iter().any(|&v| v != 0.0));
    let after = head_contribution(&masked, 1, 3, tokens).unwrap();
    assert!(after.data().iter().all(|&v| v == 0.0));
}

#[test]
fn masking_a_whole_layer_passes_the_residual_through() {
    let cfg = small();
    let g = discover_groups(&cfg).unwrap();
    let model = Model::<f32>::init(cfg, 3).unwrap();
    let all: Vec<_> = g
        .groups
        .iter()
        .filter(|c| c.layer == 1)
        .cloned()
        .collect();
    let masked = mask_groups(&model, &all).unwrap();
    let outs = layer_outputs(&masked, &probes(1, 16)[0]).unwrap();
    assert!(outs[1].max_abs_diff(&outs[0]) <= 1e-5);
}

#[test]
fn mask_rejects_out_of_bounds_slices() {
    let cfg = small();
    let g = discover_groups(&cfg).unwrap();
    let model = Model::<f32>::init(cfg, 3).unwrap();
    let mut bad = g.groups[0].clone();
    bad.slices[0].end = 1000;
    assert!(matches!(mask_group(&model, &bad), Err(Error::SliceOutOfBounds { .. })));
}

#[test]
fn every_kind_is_independent() {
    let cfg = small();
    let g = discover_groups(&cfg).unwrap();
    let model = Model::<f32>::init(cfg, 4).unwrap();
    let report = verify_group_independence(&model, &g, &probes(4, 24), 40, 9).unwrap();
    assert_eq!(report.checks.len(), 40);
    for kind in [GroupKind::AttnHead, GroupKind::MlpChannel] {
        assert!(report.checks.iter().any(|c| c.kind == kind));
    }
    assert!(report.max_diff <= 1e-5);
}

#[test]
fn all_heads_are_independent() {
    let cfg = small();
    let g = discover_groups(&cfg).unwrap();
    let model = Model::<f64>::init(cfg, 5).unwrap();
    let report = verify_group_independence(&model, &g, &probes(2, 24), usize::MAX, 0).unwrap();
    assert_eq!(report.checks.len(), g.len());
    assert!(report.max_diff <= 1e-5);
}
