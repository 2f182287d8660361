//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use hfsynth::mcts::AttemptConfig;
use hfsynth::rl::RlConfig;
use hfsynth::tnn::TrainConfig;
use hfsynth::{Error, EvalBounds, Result};

/// Every tunable of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub generations: usize,
    pub level_size: usize,
    pub threads: usize,
    pub rl: RlConfig,
}

const REQUIRED: [&str; 3] = ["dataset", "out-dir", "generations"];

const OPTIONAL: &[&str] = &[
    "level-size",
    "threads",
    "seed",
    "problems-per-generation",
    "promotion-threshold",
    "buffer-capacity",
    "simulations",
    "limit-factor",
    "c-puct",
    "dirichlet-alpha",
    "noise-eps",
    "max-bits",
    "max-iter",
    "fuel",
    "epochs",
    "batch-size",
    "learning-rate",
    "adam-beta1",
    "adam-beta2",
    "adam-epsilon",
    "train-window",
];

fn known(key: &str) -> bool {
    REQUIRED.contains(&key) || OPTIONAL.contains(&key)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", i + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !known(k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
            }
            if pairs.iter().any(|(seen, _)| seen == k) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        let get = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        for k in REQUIRED {
            if get(k).is_none() {
                return Err(Error::Config(format!("missing required key `{k}`")));
            }
        }
        let opt = |k: &str| get(k);
        let d = RlConfig::default();
        let (a, t, b) = (d.attempt, d.train, EvalBounds::default());
        macro_rules! field {
            ($key:expr, $default:expr) => {
                match opt($key) {
                    Some(v) => parse($key, v)?,
                    None => $default,
                }
            };
        }
        let cfg = RunConfig {
            dataset: PathBuf::from(get("dataset").expect("checked")),
            out_dir: PathBuf::from(get("out-dir").expect("checked")),
            generations: parse("generations", get("generations").expect("checked"))?,
            level_size: field!("level-size", 400),
            threads: field!("threads", 0),
            rl: RlConfig {
                attempt: AttemptConfig {
                    simulations: field!("simulations", a.simulations),
                    limit_factor: field!("limit-factor", a.limit_factor),
                    c_puct: field!("c-puct", a.c_puct),
                    dirichlet_alpha: field!("dirichlet-alpha", a.dirichlet_alpha),
                    noise_eps: field!("noise-eps", a.noise_eps),
                    bounds: EvalBounds {
                        max_bits: field!("max-bits", b.max_bits),
                        max_iter: field!("max-iter", b.max_iter),
                        fuel: field!("fuel", b.fuel),
                    },
                    seed: 0,
                },
                train: TrainConfig {
                    epochs: field!("epochs", t.epochs),
                    batch_size: field!("batch-size", t.batch_size),
                    learning_rate: field!("learning-rate", t.learning_rate),
                    beta1: field!("adam-beta1", t.beta1),
                    beta2: field!("adam-beta2", t.beta2),
                    epsilon: field!("adam-epsilon", t.epsilon),
                    window: field!("train-window", t.window),
                },
                problems_per_generation: field!("problems-per-generation", d.problems_per_generation),
                promotion_threshold: field!("promotion-threshold", d.promotion_threshold),
                buffer_capacity: field!("buffer-capacity", d.buffer_capacity),
                seed: field!("seed", d.seed),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        let a = &self.rl.attempt;
        if a.simulations == 0 {
            return fail("simulations must be at least 1");
        }
        if !(0.0..=1.0).contains(&a.noise_eps) {
            return fail("noise-eps must lie in [0, 1]");
        }
        if a.dirichlet_alpha <= 0.0 {
            return fail("dirichlet-alpha must be positive");
        }
        if self.level_size == 0 || self.rl.problems_per_generation == 0 {
            return fail("level-size and problems-per-generation must be positive");
        }
        if self.rl.train.batch_size == 0 {
            return fail("batch-size must be positive");
        }
        Ok(())
    }

    /// The fully resolved configuration, readable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let r = &self.rl;
        let (a, t, b) = (&r.attempt, &r.train, &r.attempt.bounds);
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        put("dataset", self.dataset.display().to_string());
        put("out-dir", self.out_dir.display().to_string());
        put("generations", self.generations.to_string());
        put("level-size", self.level_size.to_string());
        put("threads", self.threads.to_string());
        put("seed", r.seed.to_string());
        put("problems-per-generation", r.problems_per_generation.to_string());
        put("promotion-threshold", r.promotion_threshold.to_string());
        put("buffer-capacity", r.buffer_capacity.to_string());
        put("simulations", a.simulations.to_string());
        put("limit-factor", a.limit_factor.to_string());
        put("c-puct", a.c_puct.to_string());
        put("dirichlet-alpha", a.dirichlet_alpha.to_string());
        put("noise-eps", a.noise_eps.to_string());
        put("max-bits", b.max_bits.to_string());
        put("max-iter", b.max_iter.to_string());
        put("fuel", b.fuel.to_string());
        put("epochs", t.epochs.to_string());
        put("batch-size", t.batch_size.to_string());
        put("learning-rate", t.learning_rate.to_string());
        put("adam-beta1", t.beta1.to_string());
        put("adam-beta2", t.beta2.to_string());
        put("adam-epsilon", t.epsilon.to_string());
        put("train-window", t.window.to_string());
        s
    }

    /// Whether `other` describes the same run apart from its length.
    pub fn same_run(&self, other: &RunConfig) -> bool {
        RunConfig { generations: 0, threads: 0, ..self.clone() } == RunConfig { generations: 0, threads: 0, ..other.clone() }
    }
}
