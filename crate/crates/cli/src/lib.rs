//! Command implementations behind the `hfsynth` binary.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hfsynth::cost::{cost_report, measure_size, FormulaCounts};
use hfsynth::enumerate::{build_dataset_with_progress, comparison_report};
use hfsynth::mcts::{attempt_with_budget, AttemptConfig};
use hfsynth::rl::{
    evaluate, latest_checkpoint, load_checkpoint, metrics_csv, partition_levels, run, solved_per_level, EvalMode,
    RunState,
};
use hfsynth::tnn::{Predictor, TnnParams};
use hfsynth::{graph_by_ast, Dataset, Error, EvalBounds, Graph, Result};

pub use config::RunConfig;

/// Exit status when `synth` finds no solution.
pub const EXIT_UNSOLVED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hfsynth", version, about = "Synthesize set-theory formulas from truth graphs over 0..63")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enumerate formulas and keep one minimal representative per graph.
    GenDataset(GenDatasetArgs),
    /// Run curriculum training from a config file.
    Train(TrainArgs),
    /// Count solved problems per level in one evaluation mode.
    Eval(EvalArgs),
    /// Search for a formula with the given graph.
    Synth(SynthArgs),
    /// Summarise a dataset, or project the cost of exhaustive enumeration.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long, default_value_t = EvalBounds::default().max_bits)]
    pub max_bits: u64,
    #[arg(long, default_value_t = EvalBounds::default().max_iter)]
    pub max_iter: u64,
    #[arg(long, default_value_t = EvalBounds::default().fuel)]
    pub fuel: u64,
}

impl BoundsArgs {
    fn bounds(&self) -> EvalBounds {
        EvalBounds { max_bits: self.max_bits, max_iter: self.max_iter, fuel: self.fuel }
    }
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(3..=30))]
    pub max_size: u64,
    #[arg(long, short, default_value = "dataset.tsv")]
    pub out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[command(flatten)]
    pub bounds: BoundsArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from this checkpoint directory instead of the newest one.
    #[arg(long)]
    pub resume_from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A `gen-<n>` directory or a params.bin file; unused in breadth-first mode.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated 1-based levels.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub levels: Vec<usize>,
    #[arg(long)]
    pub mode: EvalMode,
    #[arg(long, default_value_t = 400)]
    pub level_size: usize,
    #[arg(long, default_value_t = 50_000)]
    pub simulations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Output CSV (default: eval-<mode>.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub bounds: BoundsArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Target graph as 16 hex digits, bit n = truth value at x = n.
    #[arg(long, value_parser = parse_graph)]
    pub graph: Graph,
    /// Token budget (also the big-step limit).
    #[arg(long, default_value_t = 12)]
    pub size_budget: usize,
    #[arg(long, default_value_t = 50_000)]
    pub simulations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Blind the network to the target graph.
    #[arg(long)]
    pub hidden_graph: bool,
    #[command(flatten)]
    pub bounds: BoundsArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Dataset to summarise.
    #[arg(long, required_unless_present = "estimate_size")]
    pub dataset: Option<PathBuf>,
    /// Project exhaustive enumeration cost up to this size instead.
    #[arg(long)]
    pub estimate_size: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub bounds: BoundsArgs,
}

fn parse_graph(s: &str) -> std::result::Result<Graph, String> {
    s.parse()
}

fn set_threads(n: usize) {
    if n > 0 {
        // fails only if a pool was already built, which keeps that pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Runs one parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::GenDataset(a) => cmd_gen_dataset(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Stats(a) => cmd_stats(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn cmd_gen_dataset(a: &GenDatasetArgs) -> Result<i32> {
    set_threads(a.threads);
    let progress = |size: usize, done: usize, total: usize| {
        if done == total || done.is_multiple_of(16) {
            eprintln!("size {size}: {done}/{total} work units");
        }
    };
    let d = build_dataset_with_progress(a.max_size as usize, &a.bounds.bounds(), &progress);
    d.save(&a.out)?;
    print!("{}", comparison_report(&d));
    eprintln!("wrote {} entries to {}", d.len(), a.out.display());
    Ok(0)
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = RunConfig::parse(&fs::read_to_string(&a.config)?)?;
    set_threads(cfg.threads);
    let dataset = Dataset::load(&cfg.dataset)?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let mut curriculum = partition_levels(&dataset, cfg.level_size);
    fs::create_dir_all(&cfg.out_dir)?;
    let stored = cfg.out_dir.join("config.cfg");
    if stored.exists() {
        let previous = RunConfig::parse(&fs::read_to_string(&stored)?)?;
        if !previous.same_run(&cfg) {
            return Err(Error::Config(format!(
                "{} holds a run with a different configuration",
                cfg.out_dir.display()
            )));
        }
    }
    fs::write(&stored, cfg.to_text())?;

    let resume = match &a.resume_from {
        Some(dir) => Some(dir.clone()),
        None => latest_checkpoint(&cfg.out_dir)?,
    };
    let mut state = match resume {
        Some(dir) => {
            eprintln!("resuming from {}", dir.display());
            load_checkpoint(&dir)?
        }
        None => {
            let mut init = ChaCha8Rng::seed_from_u64(hfsynth::rl::mix_seed(&[cfg.rl.seed, u64::MAX]));
            RunState::new(TnnParams::random(&mut init), &cfg.rl)
        }
    };
    if state.current_level > curriculum.num_levels() {
        return Err(Error::Config("checkpoint level exceeds the dataset's levels".into()));
    }
    let levels = curriculum.num_levels();
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut rows = state.metrics.clone();
    run(&mut curriculum, &mut state, cfg.generations, &cfg.rl, Some(&cfg.out_dir), |m| {
        eprintln!(
            "generation {} level {} solved {}/{} (final {}) in {:.1}s",
            m.generation, m.level, m.solved_any, m.attempted, m.solved_final, m.wall_seconds
        );
        rows.push(m.clone());
        if let Err(e) = fs::write(&metrics_path, metrics_csv(&rows, levels)) {
            eprintln!("warning: could not write {}: {e}", metrics_path.display());
        }
    })?;
    fs::write(&metrics_path, metrics_csv(&state.metrics, levels))?;
    Ok(0)
}

fn load_params(path: &Path) -> Result<TnnParams> {
    if path.is_dir() {
        TnnParams::load(&path.join("params.bin"))
    } else {
        TnnParams::load(path)
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    set_threads(a.threads);
    let dataset = Dataset::load(&a.dataset)?;
    let curriculum = partition_levels(&dataset, a.level_size);
    for &l in &a.levels {
        if l == 0 || l > curriculum.num_levels() {
            return Err(Error::Config(format!("level {l} outside 1..={}", curriculum.num_levels())));
        }
    }
    let params = match (&a.checkpoint, a.mode) {
        (Some(p), _) => load_params(p)?,
        (None, EvalMode::BreadthFirst) => TnnParams::zeros(),
        (None, _) => return Err(Error::Config("--checkpoint is required for this mode".into())),
    };
    let cfg = AttemptConfig { simulations: a.simulations, seed: a.seed, bounds: a.bounds.bounds(), ..AttemptConfig::default() };
    let records = evaluate(&curriculum, &params, &a.levels, a.mode, &cfg);
    for r in &records {
        if let Some(f) = &r.solution {
            if graph_by_ast(f, &cfg.bounds) != Some(r.problem.graph) {
                return Err(Error::Config(format!("solution {} failed re-verification", f.pretty())));
            }
        }
    }
    let solved = solved_per_level(&records, &a.levels);
    let mut csv = String::from("mode,level,problems,solved\n");
    for (&l, &s) in a.levels.iter().zip(&solved) {
        let n = curriculum.levels[l - 1].len();
        println!("{} level {l}: {s}/{n}", a.mode.name());
        csv.push_str(&format!("{},{l},{n},{s}\n", a.mode.name()));
    }
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("eval-{}.csv", a.mode.name())));
    fs::write(&out, csv)?;
    Ok(0)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let params = load_params(&a.checkpoint)?;
    let cfg = AttemptConfig { simulations: a.simulations, seed: a.seed, bounds: a.bounds.bounds(), ..AttemptConfig::default() };
    let mut pred = Predictor::new(&params, a.graph, a.hidden_graph);
    let out = attempt_with_budget(a.graph, a.size_budget, &mut pred, &cfg, false);
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    match out.solution {
        Some(f) => {
            let check = graph_by_ast(&f, &cfg.bounds);
            if check != Some(a.graph) {
                return Err(Error::Config(format!("solution {} failed re-verification", f.pretty())));
            }
            writeln!(w, "prefix: {}", hfsynth::lang::tokens_to_string(&f.to_prefix()))?;
            writeln!(w, "formula: {}", f.pretty())?;
            writeln!(w, "size: {}", f.size())?;
            writeln!(w, "graph: {} (verified)", a.graph)?;
            Ok(0)
        }
        None => {
            writeln!(w, "no solution found for graph {} within {} tokens", a.graph, a.size_budget)?;
            Ok(EXIT_UNSOLVED)
        }
    }
}

pub fn cmd_stats(a: &StatsArgs) -> Result<i32> {
    let b = a.bounds.bounds();
    if let Some(max) = a.estimate_size {
        if !(3..=30).contains(&max) {
            return Err(Error::Config("--estimate-size must lie in 3..=30".into()));
        }
        let counts = FormulaCounts::new(max);
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let costs: Vec<_> = (3..=max)
            .map(|s| {
                eprintln!("sampling size {s}");
                measure_size(&counts, s, a.samples, &b, &mut rng)
            })
            .collect();
        print!("{}", cost_report(&costs));
    }
    if let Some(path) = &a.dataset {
        let d = Dataset::load(path)?;
        println!("entries\t{}", d.len());
        print!("{}", comparison_report(&d));
    }
    Ok(0)
}
