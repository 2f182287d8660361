use hfsynth::mcts::AttemptConfig;
use hfsynth::rl::{
    evaluate, generation_dir, latest_checkpoint, load_checkpoint, partition_levels, run, EvalMode, RlConfig, RunState,
};
use hfsynth::tnn::{TnnParams, TrainConfig};
use hfsynth::{build_dataset, EvalBounds};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> RlConfig {
    RlConfig {
        attempt: AttemptConfig { simulations: 40, ..AttemptConfig::default() },
        train: TrainConfig { batch_size: 16, ..TrainConfig::default() },
        problems_per_generation: 12,
        seed: 7,
        ..RlConfig::default()
    }
}

#[test]
fn resume_reproduces_next_generation_bitwise() {
    let d = build_dataset(6, &EvalBounds::default());
    let cfg = small_config();
    let p0 = TnnParams::random(&mut ChaCha8Rng::seed_from_u64(3));
    let dir = tempfile::tempdir().unwrap();

    let mut c = partition_levels(&d, 6);
    let mut full = RunState::new(p0.clone(), &cfg);
    run(&mut c, &mut full, 3, &cfg, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(full.metrics.len(), 3);
    assert_eq!(latest_checkpoint(dir.path()).unwrap().unwrap(), generation_dir(dir.path(), 3));

    for k in 1..3 {
        let mut resumed = load_checkpoint(&generation_dir(dir.path(), k)).unwrap();
        assert_eq!(resumed.generation, k);
        let mut c = partition_levels(&d, 6);
        run(&mut c, &mut resumed, 3, &cfg, None, |_| {}).unwrap();
        assert_eq!(resumed.params, full.params, "parameters after resuming from gen-{k}");
        for (a, b) in resumed.metrics.iter().zip(&full.metrics) {
            assert!(a.same_outcome(b), "{a:?} vs {b:?}");
        }
        assert_eq!(resumed.current_level, full.current_level);
        assert_eq!(resumed.buffer, full.buffer);
    }
}

#[test]
fn guided_evaluation_is_repeatable() {
    let d = build_dataset(6, &EvalBounds::default());
    let c = partition_levels(&d, 10);
    let p = TnnParams::random(&mut ChaCha8Rng::seed_from_u64(4));
    let cfg = AttemptConfig { simulations: 60, seed: 1, ..AttemptConfig::default() };
    let a = evaluate(&c, &p, &[1, 2], EvalMode::Guided, &cfg);
    let b = evaluate(&c, &p, &[1, 2], EvalMode::Guided, &cfg);
    assert_eq!(a, b);
    for r in a.iter() {
        if let Some(f) = &r.solution {
            assert_eq!(hfsynth::compute_graph(f, &EvalBounds::default()), Some(r.problem.graph));
        }
    }
}

#[test]
fn hidden_graph_policy_is_blind_to_target() {
    use hfsynth::lang::PartialFormula;
    use hfsynth::tnn::Predictor;
    let p = TnnParams::random(&mut ChaCha8Rng::seed_from_u64(5));
    let d = build_dataset(6, &EvalBounds::default());
    let c = partition_levels(&d, 1000);
    let same_size: Vec<_> = c.levels[0].iter().filter(|q| q.size == 6).take(5).collect();
    let state = PartialFormula::new().with(hfsynth::Token::from_index(8)).unwrap();
    let reference = Predictor::new(&p, same_size[0].graph, true).predict(state.tokens());
    for q in &same_size[1..] {
        assert_eq!(Predictor::new(&p, q.graph, true).predict(state.tokens()), reference);
    }
}
