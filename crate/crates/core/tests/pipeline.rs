use clgp_core::baselines::{Baseline, Concentration};
use clgp_core::data::{format_dataset, gen_pcfg_triplets, gen_xor, make_split, parse_dataset, xor_answer_key, PcfgGrammar, SplitSpec};
use clgp_core::eval::{export_latents, export_trace, parse_latents, parse_trace, perplexity, run_experiment, ModelSpec};
use clgp_core::model::{predictive_probs, Checkpoint};
use clgp_core::optimizer::{train, TrainConfig};
use clgp_core::ModelKind;

fn short(kind: ModelKind) -> TrainConfig {
    TrainConfig { iterations: 30, mc_samples: 5, inducing: if kind == ModelKind::Clgp { Some(12) } else { None }, ..TrainConfig::for_model(kind) }
}

#[test]
fn train_checkpoint_predict_round_trip() {
    let data = parse_dataset(&format_dataset(&gen_xor(10))).unwrap();
    let key = xor_answer_key(10);
    for kind in [ModelKind::Clgp, ModelKind::Lgm] {
        let (state, trace) = train(&data, &short(kind), &mut |_| {}).unwrap();
        assert_eq!(trace.records.len(), 30);
        assert!(trace.records.iter().all(|r| r.elbo.is_finite()));

        let restored = Checkpoint::from_json(&Checkpoint { state: state.clone(), seed: 0 }.to_json()).unwrap();
        assert_eq!(restored.state, state);

        let a = predictive_probs(&state, &data, &key.targets(), 50, 1).unwrap();
        let b = predictive_probs(&restored.state, &data, &key.targets(), 50, 1).unwrap();
        assert_eq!(a, b);
        let p = perplexity(&a, &key).unwrap();
        assert!(p.perplexity.is_finite() && p.perplexity >= 1.0);

        assert_eq!(parse_trace(&export_trace(&trace)).unwrap(), trace);
        assert_eq!(parse_latents(&export_latents(&state)).unwrap().len(), data.n_rows());
    }
}

#[test]
fn pcfg_split_baselines_order_as_expected() {
    let data = gen_pcfg_triplets(&PcfgGrammar::default_grammar(), 600, 3).unwrap();
    let split = make_split(&data, &SplitSpec::new(0.2, 0)).unwrap();
    let ppl = |b: Baseline| run_experiment(&ModelSpec::Baseline { baseline: b }, &split.visible, &split.key, 1, 0).unwrap().mean;
    let uniform = ppl(Baseline::Uniform);
    let unigram = ppl(Baseline::DirMultUni { alpha: Concentration::from_ratio(1, 100).unwrap() });
    let bigram = ppl(Baseline::DirMultBi { alpha: Concentration::from_ratio(1, 1).unwrap() });
    assert!((uniform - 9.0).abs() < 1e-9, "{uniform}");
    assert!(unigram < uniform);
    assert!(bigram < unigram);
}

#[test]
fn gp_experiment_on_split_is_reproducible() {
    let data = gen_pcfg_triplets(&PcfgGrammar::default_grammar(), 60, 1).unwrap();
    let split = make_split(&data, &SplitSpec::new(0.2, 2)).unwrap();
    let spec = ModelSpec::gp(short(ModelKind::Clgp));
    let a = run_experiment(&spec, &split.visible, &split.key, 2, 5).unwrap();
    let b = run_experiment(&spec, &split.visible, &split.key, 2, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.repetitions.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![5, 6]);
}
