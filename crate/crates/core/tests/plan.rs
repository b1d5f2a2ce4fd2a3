use std::cmp::Ordering;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saap_core::fusion::{fit_lambdas, fuse, FusionPolicy};
use saap_core::groups::{discover_groups, GroupGraph, GroupKind};
use saap_core::importance::{SampleScores, ScoreOptions};
use saap_core::model::{Model, ModelConfig};
use saap_core::plan::{
    fluctuation, fluctuation_of, plan_pruning, removal_order, stability, standardize, standardize_by, BudgetMode,
    PlanOptions, Population, Protection, PruningPlan, Ranking, StabilityRecord, PLAN_VERSION,
};
use saap_core::Error;

fn record(graph: &GroupGraph, asi: Vec<f64>, mean_fused: Vec<f64>) -> StabilityRecord {
    StabilityRecord {
        group_ids: (0..graph.len()).collect(),
        fluctuation: vec![0.0; graph.len()],
        asi,
        mean_fused,
        population: Population::PerLayerKind,
        ranking: Ranking::Asi,
    }
}

fn random_record(graph: &GroupGraph, seed: u64) -> StabilityRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let asi = (0..graph.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let fused = (0..graph.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    record(graph, asi, fused)
}

fn desk_graph() -> GroupGraph {
    discover_groups(&ModelConfig::desk()).unwrap()
}

#[test]
fn fluctuation_by_hand() {
    assert_eq!(fluctuation_of(&[1.0, 2.0, 3.0], 4.0).unwrap(), 4.0);
    assert_eq!(fluctuation_of(&[2.5, 2.5, 2.5], 9.0).unwrap(), 0.0);
    assert!(matches!(
        fluctuation_of(&[1.0], 1.0),
        Err(Error::TooFewSamples { needed: 2, got: 1 })
    ));
}

#[test]
fn fluctuation_matches_brute_force_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.gen_range(2..60);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0) * 10f64.powi(rng.gen_range(-3..3))).collect();
        let norm = rng.gen_range(0.1..10.0);
        let mut ss = 0.0;
        for i in 0..n {
            for j in 0..n {
                ss += (xs[i] - xs[j]) * (xs[i] - xs[j]);
            }
        }
        let brute = ss / (2.0 * n as f64 * (n as f64 - 1.0)) * norm;
        let got = fluctuation_of(&xs, norm).unwrap();
        assert!((got - brute).abs() <= 1e-12 * brute.abs().max(f64::MIN_POSITIVE), "{got} vs {brute}");
    }
}

#[test]
fn doubling_weights_quadruples_fluctuation() {
    let config = ModelConfig::new(8, 2, 2, 8);
    let graph = discover_groups(&config).unwrap();
    let model = Model::<f64>::init(config, 1).unwrap();
    let mut doubled = model.clone();
    for t in doubled.params_mut().values_mut() {
        for v in t.data_mut() {
            *v *= 2.0;
        }
    }
    let scores = SampleScores {
        group_ids: (0..graph.len()).collect(),
        sample_ids: vec![0, 1, 2],
        vector: (0..3).map(|d| (0..graph.len()).map(|j| ((d * 3 + j) % 5) as f64).collect()).collect(),
        element: (0..3).map(|d| (0..graph.len()).map(|j| ((d + j) % 4) as f64).collect()).collect(),
        options: ScoreOptions::default(),
    };
    let fused = fuse(&scores, &fit_lambdas(&scores, &graph, &FusionPolicy::default()).unwrap()).unwrap();
    let a = fluctuation(&fused, &model, &graph).unwrap();
    let b = fluctuation(&fused, &doubled, &graph).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((y - 4.0 * x).abs() <= 1e-12 * y.abs());
    }
}

#[test]
fn standardize_by_hand() {
    let z = standardize(&[1.0, 2.0, 3.0]);
    let k = 1.5f64.sqrt();
    assert!((z[0] + k).abs() < 1e-12 && z[1].abs() < 1e-12 && (z[2] - k).abs() < 1e-12);
    assert_eq!(standardize(&[7.0, 7.0, 7.0]), vec![0.0; 3]);
    assert!(standardize(&[]).is_empty());
}

#[test]
fn populations_are_standardized_separately() {
    let graph = discover_groups(&ModelConfig::new(8, 2, 2, 4)).unwrap();
    let values: Vec<f64> = (0..graph.len()).map(|j| (j * j) as f64).collect();
    let ids: Vec<usize> = (0..graph.len()).collect();
    for population in [Population::Global, Population::PerLayer, Population::PerLayerKind] {
        let z = standardize_by(&values, &ids, &graph, population).unwrap();
        let buckets: Vec<Vec<usize>> = match population {
            Population::Global => vec![ids.clone()],
            Population::PerLayer => (0..2)
                .map(|l| ids.iter().copied().filter(|&j| graph.groups[j].layer == l).collect())
                .collect(),
            Population::PerLayerKind => (0..2)
                .flat_map(|l| [GroupKind::AttnHead, GroupKind::MlpChannel].map(|k| graph.layers[l].of_kind(k).to_vec()))
                .collect(),
        };
        for b in buckets {
            let n = b.len() as f64;
            let mean = b.iter().map(|&j| z[j]).sum::<f64>() / n;
            let var = b.iter().map(|&j| (z[j] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9);
        }
    }
    assert_eq!("per-layer".parse::<Population>().unwrap(), Population::PerLayer);
    assert!("layer".parse::<Population>().is_err());
}

proptest! {
    #[test]
    fn standardize_has_zero_mean_unit_std(xs in prop::collection::vec(-1e3f64..1e3, 2..80)) {
        let z = standardize(&xs);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if z.iter().all(|&v| v == 0.0) {
            let m = xs.iter().sum::<f64>() / n;
            prop_assert!(xs.iter().all(|x| (x - m).abs() <= 1e-9 * m.abs().max(1.0)));
        } else {
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((std - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn standardize_is_affine_invariant(
        xs in prop::collection::vec(-100f64..100.0, 3..40),
        a in 0.01f64..100.0,
        b in -100f64..100.0,
    ) {
        prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-3));
        let z0 = standardize(&xs);
        let z1 = standardize(&xs.iter().map(|x| a * x + b).collect::<Vec<_>>());
        for (p, q) in z0.iter().zip(&z1) {
            prop_assert!((p - q).abs() < 1e-7);
        }
    }
}

#[test]
fn stability_modes_produce_standardized_rankings() {
    let config = ModelConfig::new(8, 2, 2, 6);
    let graph = discover_groups(&config).unwrap();
    let model = Model::<f64>::init(config, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scores = SampleScores {
        group_ids: (0..graph.len()).collect(),
        sample_ids: (0..4).collect(),
        vector: (0..4).map(|_| (0..graph.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).collect(),
        element: (0..4).map(|_| (0..graph.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).collect(),
        options: ScoreOptions::default(),
    };
    let fused = fuse(&scores, &fit_lambdas(&scores, &graph, &FusionPolicy::default()).unwrap()).unwrap();
    for ranking in [Ranking::Asi, Ranking::SeparateCal, Ranking::NoAsi, Ranking::Random { seed: 1 }] {
        let r = stability(&scores, &fused, &model, &graph, Population::PerLayerKind, ranking).unwrap();
        assert_eq!(r.asi.len(), graph.len());
        assert!(r.asi.iter().all(|v| v.is_finite()));
        if ranking == Ranking::Asi {
            assert!(r.fluctuation.iter().all(|&m| m >= 0.0));
            let heads = graph.layers[1].of_kind(GroupKind::MlpChannel);
            let mean = heads.iter().map(|&j| r.asi[j]).sum::<f64>() / heads.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
    }
    let a = stability(&scores, &fused, &model, &graph, Population::Global, Ranking::Random { seed: 5 }).unwrap();
    let b = stability(&scores, &fused, &model, &graph, Population::Global, Ranking::Random { seed: 5 }).unwrap();
    assert_eq!(a, b);
}

#[test]
fn protection_parses_and_lists_layers() {
    let p: Protection = "3,1".parse().unwrap();
    assert_eq!(p, Protection::default());
    assert_eq!(p.to_string(), "3,1");
    assert_eq!(p.layers(6).into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 5]);
    assert_eq!(Protection::new(4, 4).layers(6).len(), 6);
    assert!(Protection::NONE.layers(6).is_empty());
    assert!("3".parse::<Protection>().is_err());
    assert!("a,1".parse::<Protection>().is_err());
}

#[test]
fn protected_layers_are_never_selected() {
    let graph = desk_graph();
    for seed in 0..5 {
        let plan = plan_pruning(&random_record(&graph, seed), &graph, 0.2, Protection::new(1, 1), &PlanOptions::default())
            .unwrap();
        assert_eq!(plan.protected_layers, vec![0, 5]);
        assert!(plan.selected.iter().all(|s| s.layer != 0 && s.layer != 5));
        assert!(plan.layer_budgets.iter().all(|b| b.selected_params as f64 <= b.budget + 1e-9));
    }
}

#[test]
fn desk_ratio_lands_within_two_percent() {
    let graph = desk_graph();
    for ratio in [0.1, 0.2, 0.3, 0.5] {
        let plan = plan_pruning(&random_record(&graph, 1), &graph, ratio, Protection::new(1, 1), &PlanOptions::default())
            .unwrap();
        assert!((plan.achieved_ratio - ratio).abs() <= 0.02 * ratio, "{ratio}: {}", plan.achieved_ratio);
        let removed: usize = plan.selected.iter().map(|s| s.param_count).sum();
        assert_eq!(removed, plan.removed_params);
    }
}

#[test]
fn budget_below_one_group_selects_nothing() {
    let graph = discover_groups(&ModelConfig::new(8, 3, 2, 8)).unwrap();
    let plan = plan_pruning(&random_record(&graph, 0), &graph, 0.01, Protection::NONE, &PlanOptions::default()).unwrap();
    assert!(plan.selected.is_empty());
    for b in &plan.layer_budgets {
        assert_eq!(b.selected_params, 0);
        assert!(b.shortfall > 0.0 && b.shortfall == b.budget);
    }
}

#[test]
fn zero_ratio_gives_an_empty_plan() {
    let graph = desk_graph();
    let plan = plan_pruning(&random_record(&graph, 0), &graph, 0.0, Protection::new(1, 1), &PlanOptions::default()).unwrap();
    assert!(plan.selected.is_empty());
    assert_eq!(plan.achieved_ratio, 0.0);
}

#[test]
fn infeasible_ratios_are_rejected() {
    let graph = desk_graph();
    let r = random_record(&graph, 0);
    for (ratio, protection) in [(0.9, Protection::new(1, 1)), (1.0, Protection::NONE), (-0.1, Protection::NONE)] {
        assert!(matches!(
            plan_pruning(&r, &graph, ratio, protection, &PlanOptions::default()),
            Err(Error::InfeasibleRatio(_))
        ));
    }
    assert!(matches!(
        plan_pruning(&r, &graph, 0.1, Protection::new(3, 3), &PlanOptions::default()),
        Err(Error::InfeasibleRatio(_))
    ));
}

#[test]
fn survivor_minimums_hold_at_high_ratios() {
    let graph = desk_graph();
    let plan = plan_pruning(&random_record(&graph, 2), &graph, 0.45, Protection::new(1, 1), &PlanOptions::default()).unwrap();
    for b in &plan.layer_budgets {
        assert!(b.heads < 4 && b.channels <= 256 - 4);
    }
}

#[test]
fn removal_order_is_a_total_order() {
    let asi = [0.5, 0.5, 0.5, -1.0, 2.0, 0.5, -1.0, 2.0, 0.0, 0.5];
    let fused = [0.1, 0.1, 0.3, 0.2, 0.2, 0.0, 0.2, 0.1, 0.4, 0.3];
    let cmp = |a: usize, b: usize| removal_order(asi[a], fused[a], a, asi[b], fused[b], b);
    for a in 0..10 {
        assert_eq!(cmp(a, a), Ordering::Equal);
        for b in 0..10 {
            assert_eq!(cmp(a, b), cmp(b, a).reverse());
            if a != b {
                assert_ne!(cmp(a, b), Ordering::Equal);
            }
            for c in 0..10 {
                if cmp(a, b) == Ordering::Less && cmp(b, c) == Ordering::Less {
                    assert_eq!(cmp(a, c), Ordering::Less);
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut reference: Vec<usize> = (0..10).collect();
    reference.sort_by(|&a, &b| cmp(a, b));
    assert_eq!(reference, vec![7, 4, 5, 0, 1, 2, 9, 8, 3, 6]);
    for _ in 0..50 {
        let mut v: Vec<usize> = (0..10).collect();
        v.shuffle(&mut rng);
        v.sort_by(|&a, &b| cmp(a, b));
        assert_eq!(v, reference);
    }
}

#[test]
fn ties_at_the_cut_prefer_lower_fused_then_lower_id() {
    let graph = discover_groups(&ModelConfig::new(8, 1, 2, 12)).unwrap();
    let channels = graph.layers[0].of_kind(GroupKind::MlpChannel).to_vec();
    let mut asi = vec![0.0; graph.len()];
    let mut fused = vec![0.5; graph.len()];
    for &c in &channels {
        asi[c] = 1.0;
    }
    fused[channels[7]] = 0.1;
    let r = record(&graph, asi, fused);
    let per_channel = graph.groups[channels[0]].param_count as f64;
    let layer = graph.layer_params(0) as f64;
    let ratio = 2.0 * per_channel / layer;
    let plan = plan_pruning(&r, &graph, ratio, Protection::NONE, &PlanOptions::default()).unwrap();
    assert_eq!(plan.selected_ids(), vec![channels[7], channels[0]]);
}

#[test]
fn raising_a_group_above_the_cut_adds_it() {
    let graph = desk_graph();
    let r = random_record(&graph, 11);
    let opts = PlanOptions::default();
    let plan = plan_pruning(&r, &graph, 0.2, Protection::new(1, 1), &opts).unwrap();
    let chosen: std::collections::BTreeSet<usize> = plan.selected_ids().into_iter().collect();
    let mut checked = 0;
    for l in 1..5 {
        for kind in [GroupKind::AttnHead, GroupKind::MlpChannel] {
            let ids = graph.layers[l].of_kind(kind);
            let threshold = ids
                .iter()
                .filter(|id| chosen.contains(id))
                .map(|&id| r.asi[id])
                .fold(f64::INFINITY, f64::min);
            if let Some(&outsider) = ids.iter().find(|id| !chosen.contains(id)) {
                if threshold.is_finite() {
                    let mut raised = r.clone();
                    raised.asi[outsider] = threshold + 1.0;
                    let p = plan_pruning(&raised, &graph, 0.2, Protection::new(1, 1), &opts).unwrap();
                    assert!(p.selected_ids().contains(&outsider));
                    checked += 1;
                }
            }
        }
    }
    assert!(checked >= 4);
}

#[test]
fn fixed_uplift_on_a_llama_sized_layout() {
    let mut config = ModelConfig::new(4096, 32, 32, 11008);
    config.vocab_size = 32000;
    let graph = discover_groups(&config).unwrap();
    let r = random_record(&graph, 0);
    let opts = PlanOptions {
        budget: BudgetMode::Fixed { layer_ratio: 0.25 },
        ..Default::default()
    };
    let plan = plan_pruning(&r, &graph, 0.2, Protection::new(3, 1), &opts).unwrap();
    assert_eq!(plan.layer_budgets.len(), 28);
    for b in &plan.layer_budgets {
        let share = b.selected_params as f64 / graph.layer_params(b.layer) as f64;
        assert!((share - 0.25).abs() < 0.002, "layer {}: {share}", b.layer);
    }
    assert!(plan.selected.iter().all(|s| s.layer >= 3 && s.layer < 31));
}

#[test]
fn plan_json_round_trip_and_version_check() {
    let graph = desk_graph();
    let mut opts = PlanOptions::default();
    opts.seeds.insert("calibration".into(), 7);
    let plan = plan_pruning(&random_record(&graph, 3), &graph, 0.2, Protection::new(1, 1), &opts).unwrap();
    let json = plan.to_json().unwrap();
    let back = PruningPlan::from_json(&json).unwrap();
    assert_eq!(back, plan);
    assert_eq!(back.version, PLAN_VERSION);
    assert_eq!(back.provenance.seeds["calibration"], 7);
    let bumped = json.replacen(&format!("\"version\": {PLAN_VERSION}"), "\"version\": 99", 1);
    assert!(matches!(PruningPlan::from_json(&bumped), Err(Error::Validation(_))));
}
