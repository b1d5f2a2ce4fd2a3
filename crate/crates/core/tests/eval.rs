use saap_autodiff::Tensor;
use saap_core::eval::{
    compare, eval_windows, evaluate, generate_greedy, perplexity, perplexity_limited, throughput, EvalReport,
    Perplexity, Stage, REPORT_VERSION,
};
use saap_core::groups::{discover_groups, mask_groups};
use saap_core::model::{Model, ModelConfig};
use saap_core::prune::remove_groups;
use saap_core::Error;

fn small() -> Model<f32> {
    Model::init(ModelConfig::new(32, 3, 4, 48).with_max_seq_len(32), 2).unwrap()
}

fn text() -> Vec<u32> {
    "Call me Ishmael. Some years ago, never mind how long precisely, having little money in my purse"
        .repeat(6)
        .bytes()
        .map(u32::from)
        .collect()
}

#[test]
fn uniform_model_has_perplexity_of_the_vocabulary() {
    let mut model = small();
    let head = model.param_mut("lm_head").unwrap();
    *head = Tensor::zeros(head.shape());
    let p = perplexity(&model, &text()).unwrap();
    assert!((p.perplexity - 256.0).abs() < 1.0, "{}", p.perplexity);
    assert!((p.nll - 256f64.ln()).abs() < 1e-3);
}

#[test]
fn perplexity_is_exp_of_mean_nll_and_deterministic() {
    let model = small();
    let a = perplexity(&model, &text()).unwrap();
    let b = perplexity(&model, &text()).unwrap();
    assert_eq!(a, b);
    assert!((a.perplexity - a.nll.exp()).abs() <= 1e-12 * a.perplexity);
    let n = text().len();
    assert_eq!(a.windows, n.div_ceil(32));
    assert_eq!(a.tokens, n - a.windows);
}

#[test]
fn windows_drop_only_a_one_token_tail() {
    let corpus: Vec<u32> = (0..65).collect();
    let w = eval_windows(&corpus, 32, None);
    assert_eq!(w.len(), 2);
    assert_eq!(eval_windows(&corpus, 32, Some(1)).len(), 1);
    let corpus: Vec<u32> = (0..66).collect();
    assert_eq!(eval_windows(&corpus, 32, None).last().unwrap().len(), 2);
    assert!(perplexity(&small(), &[1]).is_err());
}

#[test]
fn limited_windows_score_a_prefix() {
    let model = small();
    let limited = perplexity_limited(&model, &text(), Some(3)).unwrap();
    let prefix = perplexity(&model, &text()[..96]).unwrap();
    assert_eq!(limited.windows, 3);
    assert!((limited.nll - prefix.nll).abs() < 1e-12);
}

#[test]
fn masked_and_pruned_models_agree_on_perplexity() {
    let model = small();
    let graph = discover_groups(&model.config).unwrap();
    let ids: Vec<usize> = vec![graph.layers[1].heads[2], graph.layers[1].channels[5], graph.layers[2].channels[0]];
    let groups: Vec<_> = ids.iter().map(|&id| graph.groups[id].clone()).collect();
    let masked = perplexity(&mask_groups(&model, &groups).unwrap(), &text()).unwrap();
    let pruned = perplexity(&remove_groups(&model, &graph, &ids).unwrap(), &text()).unwrap();
    assert!((masked.perplexity / pruned.perplexity - 1.0).abs() <= 1e-4);
}

#[test]
fn greedy_generation_and_throughput() {
    let model = small();
    let prompt: Vec<u32> = "The sea".bytes().map(u32::from).collect();
    let out = generate_greedy(&model, &prompt, 40).unwrap();
    assert_eq!(out.len(), 40);
    assert_eq!(out, generate_greedy(&model, &prompt, 40).unwrap());
    assert!(out.iter().all(|&t| t < 256));
    let tp = throughput(&model, &prompt, 8, 3).unwrap();
    assert_eq!(tp.runs.len(), 3);
    assert!(tp.median > 0.0 && tp.spread >= 0.0);
    assert!(throughput(&model, &prompt, 0, 3).is_err());
    assert!(throughput(&model, &prompt, 4, 2).is_err());
}

fn report(stage: Option<Stage>, ppl: f64, params: usize) -> EvalReport {
    let model = small();
    let p = Perplexity {
        perplexity: ppl,
        nll: ppl.ln(),
        tokens: 100,
        windows: 4,
    };
    let mut r = EvalReport::new(&model, Stage::Base, &p, None);
    r.stage = stage;
    r.params = params;
    r
}

#[test]
fn comparing_a_report_with_itself_gives_zero_deltas() {
    let r = evaluate(&small(), Stage::Base, &text(), Some(2), None).unwrap();
    assert_eq!(r.version, REPORT_VERSION);
    let c = compare(&[r.clone(), r]).unwrap();
    assert!(c.rows.iter().all(|row| row.ppl_delta == 0.0 && row.params_delta == 0));
    assert!(c.flags.contains(&"params-monotone".to_string()));
}

#[test]
fn comparison_flags() {
    let base = report(Some(Stage::Base), 5.0, 1000);
    let pruned = report(Some(Stage::Pruned), 9.0, 800);
    let recovered = report(Some(Stage::Recovered), 7.0, 800);
    let c = compare(&[base.clone(), pruned.clone(), recovered]).unwrap();
    assert_eq!(c.rows[1].ppl_delta, 4.0);
    assert_eq!(c.rows[2].params_delta, -200);
    assert!(c.flags.contains(&"recovery-improves-ppl".to_string()));
    assert!(c.flags.contains(&"params-monotone".to_string()));
    assert!(!c.flags.contains(&"incompatible-configs".to_string()));

    let worse = report(Some(Stage::Recovered), 9.5, 900);
    let c = compare(&[base.clone(), pruned, worse]).unwrap();
    assert!(c.flags.contains(&"recovery-does-not-improve-ppl".to_string()));
    assert!(c.flags.contains(&"params-not-monotone".to_string()));

    let mut other = report(Some(Stage::Pruned), 6.0, 500);
    other.d_model = 64;
    assert!(compare(&[base.clone(), other]).unwrap().flags.contains(&"incompatible-configs".to_string()));

    let mut csv = Vec::new();
    compare(&[base.clone(), base.clone()]).unwrap().write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("stage,perplexity,params"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn comparison_needs_stages_and_two_reports() {
    let base = report(Some(Stage::Base), 5.0, 10);
    assert!(matches!(compare(&[base.clone()]), Err(Error::Validation(_))));
    assert!(matches!(
        compare(&[base, report(None, 5.0, 10)]),
        Err(Error::Validation(_))
    ));
    assert_eq!("recovered".parse::<Stage>().unwrap(), Stage::Recovered);
    assert!("final".parse::<Stage>().is_err());
}

#[test]
fn report_json_round_trips() {
    let r = report(Some(Stage::Pruned), 7.25, 42);
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"stage\":\"pruned\""));
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}
