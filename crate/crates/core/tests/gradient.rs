use hfsynth::lang::{PartialFormula, VOCAB_SIZE};
use hfsynth::tnn::{backward, loss, Example, TnnParams};
use hfsynth::Graph;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_example(rng: &mut ChaCha8Rng) -> Example {
    let budget = 14;
    let mut state = PartialFormula::new();
    let steps = rng.random_range(0..10);
    for _ in 0..steps {
        let legal = state.legal_next_tokens(budget - state.len());
        if legal.is_empty() {
            break;
        }
        state.push(legal[rng.random_range(0..legal.len())]).unwrap();
    }
    let mut legal = state.legal_next_tokens(budget - state.len());
    if legal.is_empty() {
        // complete formula: any nonempty support will do
        legal = vec![hfsynth::Token::from_index(0)];
    }
    let mut policy = vec![0.0; VOCAB_SIZE];
    for t in &legal {
        policy[t.index()] = rng.random_range(0.0..1.0);
    }
    let total: f64 = policy.iter().sum();
    policy.iter_mut().for_each(|p| *p /= total);
    Example {
        graph: Graph(rng.random()),
        tokens: state.tokens().to_vec(),
        policy,
        value: f64::from(rng.random_range(0..2u8)),
    }
}

fn max_relative_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = TnnParams::random(&mut rng);
    let batch: Vec<Example> = (0..3).map(|_| random_example(&mut rng)).collect();
    let analytic = backward(&batch, &params, false);
    let h = 1e-4;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = loss(&batch, &probe, false);
        probe.as_mut_slice()[i] = orig - h;
        let down = loss(&batch, &probe, false);
        probe.as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.as_slice()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

fn check(seed: u64) {
    let err = max_relative_error(seed);
    assert!(err < 1e-4, "seed {seed}: max relative error {err:e}");
}

// one test per seed so the harness can spread them over cores
#[test]
fn central_differences_seed_0() {
    check(0);
}

#[test]
fn central_differences_seed_1() {
    check(1);
}

#[test]
fn central_differences_seed_2() {
    check(2);
}

#[test]
fn central_differences_seed_3() {
    check(3);
}

#[test]
fn central_differences_seed_4() {
    check(4);
}
