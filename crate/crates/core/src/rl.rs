//! Curriculum reinforcement learning: levels, replay buffer, generations
//! of exploration and training, checkpoints, and evaluation.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::enumerate::{Dataset, Graph};
use crate::error::{Error, Result};
use crate::lang::{Token, VOCAB_SIZE};
use crate::mcts::{attempt, bfs_attempt, AttemptConfig};
use crate::tnn::{train_phase, Example, Predictor, TnnParams, TrainConfig};

/// A synthesis problem: a target graph and the size of its representative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Problem {
    /// Position in the global (size, graph) order.
    pub id: usize,
    pub graph: Graph,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Curriculum {
    pub levels: Vec<Vec<Problem>>,
    pub level_size: usize,
    /// 1-based index of the highest accessible level.
    pub current_level: usize,
}

/// Sorts the dataset by (size, graph) and cuts it into levels.
pub fn partition_levels(d: &Dataset, level_size: usize) -> Curriculum {
    assert!(level_size > 0, "level size must be positive");
    let mut all: Vec<(usize, Graph)> = d.entries.iter().map(|(g, f)| (f.size(), *g)).collect();
    all.sort();
    let problems: Vec<Problem> =
        all.into_iter().enumerate().map(|(id, (size, graph))| Problem { id, graph, size }).collect();
    let levels = problems.chunks(level_size).map(|c| c.to_vec()).collect();
    Curriculum { levels, level_size, current_level: 1 }
}

impl Curriculum {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Examples, newest first, bounded by `capacity`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    examples: VecDeque<Example>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        ReplayBuffer { examples: VecDeque::new(), capacity }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Inserts examples given in chronological order; the last becomes newest.
    pub fn extend(&mut self, examples: impl IntoIterator<Item = Example>) {
        for ex in examples {
            self.examples.push_front(ex);
        }
        self.examples.truncate(self.capacity);
    }

    /// Newest first.
    pub fn as_slice(&mut self) -> &[Example] {
        self.examples.make_contiguous()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Example> {
        self.examples.iter()
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(BUFFER_MAGIC);
        out.extend_from_slice(&(self.capacity as u64).to_le_bytes());
        out.extend_from_slice(&(self.examples.len() as u64).to_le_bytes());
        for ex in &self.examples {
            out.extend_from_slice(&ex.graph.0.to_le_bytes());
            out.push(ex.tokens.len() as u8);
            out.extend(ex.tokens.iter().map(|t| t.index() as u8));
            let support: Vec<usize> = (0..VOCAB_SIZE).filter(|&i| ex.policy[i] != 0.0).collect();
            out.push(support.len() as u8);
            for i in support {
                out.push(i as u8);
                out.extend_from_slice(&ex.policy[i].to_le_bytes());
            }
            out.extend_from_slice(&ex.value.to_le_bytes());
        }
    }

    fn read_from(bytes: &[u8]) -> Result<ReplayBuffer> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        if r.take(BUFFER_MAGIC.len())? != BUFFER_MAGIC {
            return Err(Error::Corrupt("bad replay buffer magic".into()));
        }
        let capacity = r.u64()? as usize;
        let n = r.u64()? as usize;
        let mut examples = VecDeque::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let graph = Graph(r.u64()?);
            let ntok = r.u8()? as usize;
            let tokens = (0..ntok)
                .map(|_| {
                    let i = r.u8()? as usize;
                    if i >= VOCAB_SIZE {
                        return Err(Error::Corrupt(format!("token index {i}")));
                    }
                    Ok(Token::from_index(i))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut policy = vec![0.0; VOCAB_SIZE];
            for _ in 0..r.u8()? {
                let i = r.u8()? as usize;
                if i >= VOCAB_SIZE {
                    return Err(Error::Corrupt(format!("policy index {i}")));
                }
                policy[i] = r.f64()?;
            }
            let value = r.f64()?;
            examples.push_back(Example { graph, tokens, policy, value });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes in replay buffer".into()));
        }
        Ok(ReplayBuffer { examples, capacity })
    }
}

const BUFFER_MAGIC: &[u8; 8] = b"HFSYNBUF";

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationMetrics {
    /// 1-based.
    pub generation: usize,
    /// Highest accessible level during the exploration phase.
    pub level: usize,
    pub attempted: usize,
    pub solved_final: usize,
    pub solved_any: usize,
    /// Solved (any) per level, over all levels.
    pub per_level: Vec<usize>,
    pub wall_seconds: f64,
}

impl GenerationMetrics {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &GenerationMetrics) -> bool {
        GenerationMetrics { wall_seconds: 0.0, ..self.clone() } == GenerationMetrics { wall_seconds: 0.0, ..other.clone() }
    }
}

pub fn metrics_csv(rows: &[GenerationMetrics], num_levels: usize) -> String {
    let mut s = String::from("generation,level,attempted,solved_final,solved_any,wall_seconds");
    for l in 1..=num_levels {
        write!(s, ",level_{l}").expect("write to string");
    }
    s.push('\n');
    for m in rows {
        write!(
            s,
            "{},{},{},{},{},{:.3}",
            m.generation, m.level, m.attempted, m.solved_final, m.solved_any, m.wall_seconds
        )
        .expect("write to string");
        for l in 0..num_levels {
            write!(s, ",{}", m.per_level.get(l).copied().unwrap_or(0)).expect("write to string");
        }
        s.push('\n');
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<GenerationMetrics>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse { line: 1, message: "empty metrics file".into() })?;
    let ncols = header.split(',').count();
    if !header.starts_with("generation,level,attempted,solved_final,solved_any,wall_seconds") {
        return Err(Error::Parse { line: 1, message: "unexpected metrics header".into() });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let bad = |message: &str| Error::Parse { line: i + 1, message: message.to_string() };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != ncols {
            return Err(bad("wrong number of columns"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("expected an integer"));
        rows.push(GenerationMetrics {
            generation: int(cols[0])?,
            level: int(cols[1])?,
            attempted: int(cols[2])?,
            solved_final: int(cols[3])?,
            solved_any: int(cols[4])?,
            wall_seconds: cols[5].parse().map_err(|_| bad("expected a number"))?,
            per_level: cols[6..].iter().map(|c| int(c)).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// Stable 64-bit mix of a few integers (SplitMix64 finaliser chain).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlConfig {
    pub attempt: AttemptConfig,
    pub train: TrainConfig,
    pub problems_per_generation: usize,
    /// Promotion needs strictly more than this fraction solved.
    pub promotion_threshold: f64,
    pub buffer_capacity: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            attempt: AttemptConfig::default(),
            train: TrainConfig::default(),
            problems_per_generation: 400,
            promotion_threshold: 0.75,
            buffer_capacity: 200_000,
            seed: 0,
        }
    }
}

/// How many problems each accessible level contributes: an equal share,
/// with the remainder going one each to the lowest levels.
pub fn level_quotas(total: usize, accessible: usize) -> Vec<usize> {
    (0..accessible).map(|i| total / accessible + usize::from(i < total % accessible)).collect()
}

/// One scheduled attempt of an exploration phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    /// 0-based level index.
    pub level: usize,
    pub problem: Problem,
    /// How many earlier draws of this phase picked the same problem.
    pub repeat: usize,
}

/// Draws uniformly without replacement within each level; a quota larger
/// than its level takes whole shuffled passes before a final partial one.
pub fn sample_problems(c: &Curriculum, total: usize, rng: &mut ChaCha8Rng) -> Vec<Draw> {
    let accessible = c.current_level.min(c.num_levels());
    let mut draws = Vec::with_capacity(total);
    for (level, quota) in level_quotas(total, accessible).into_iter().enumerate() {
        let pool = &c.levels[level];
        let mut taken = 0;
        let mut pass = 0;
        while taken < quota {
            let k = (quota - taken).min(pool.len());
            for i in index::sample(rng, pool.len(), k) {
                draws.push(Draw { level, problem: pool[i], repeat: pass });
            }
            taken += k;
            pass += 1;
        }
    }
    draws
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttemptRecord {
    pub draw: Draw,
    pub solved: bool,
    pub solved_final: bool,
}

fn map_ordered<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Runs the exploration attempts of one generation. Examples come back in
/// draw order with value targets filled in.
pub fn exploration_phase(
    c: &Curriculum,
    params: &TnnParams,
    cfg: &RlConfig,
    generation: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Example>, Vec<AttemptRecord>, GenerationMetrics) {
    let start = Instant::now();
    let draws = sample_problems(c, cfg.problems_per_generation, rng);
    let results = map_ordered(&draws, |d| {
        let seed = mix_seed(&[cfg.seed, generation as u64, d.problem.id as u64, d.repeat as u64]);
        let acfg = AttemptConfig { seed, ..cfg.attempt };
        let mut pred = Predictor::new(params, d.problem.graph, false);
        attempt(d.problem.graph, d.problem.size, &mut pred, &acfg, true)
    });
    let mut per_level = vec![0; c.num_levels()];
    let mut examples = Vec::new();
    let mut records = Vec::with_capacity(draws.len());
    for (d, out) in draws.iter().zip(results) {
        if out.solved {
            per_level[d.level] += 1;
        }
        records.push(AttemptRecord { draw: *d, solved: out.solved, solved_final: out.solved_final });
        examples.extend(out.examples);
    }
    let metrics = GenerationMetrics {
        generation,
        level: c.current_level,
        attempted: records.len(),
        solved_final: records.iter().filter(|r| r.solved_final).count(),
        solved_any: records.iter().filter(|r| r.solved).count(),
        per_level,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    (examples, records, metrics)
}

/// Advances the curriculum iff strictly more than the threshold fraction
/// of attempts succeeded; never beyond the last level.
pub fn promote_if_passed(c: &mut Curriculum, m: &GenerationMetrics, threshold: f64) -> bool {
    let passed = m.solved_any as f64 > threshold * m.attempted as f64;
    if passed && c.current_level < c.num_levels() {
        c.current_level += 1;
        return true;
    }
    false
}

/// Everything needed to continue a run after a generation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub generation: usize,
    pub params: TnnParams,
    pub buffer: ReplayBuffer,
    pub current_level: usize,
    pub metrics: Vec<GenerationMetrics>,
    pub rng: ChaCha8Rng,
}

impl RunState {
    pub fn new(params: TnnParams, cfg: &RlConfig) -> RunState {
        RunState {
            generation: 0,
            params,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            current_level: 1,
            metrics: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }
}

pub fn generation_dir(root: &Path, generation: usize) -> PathBuf {
    root.join(format!("gen-{generation}"))
}

fn rng_to_text(rng: &ChaCha8Rng) -> String {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    format!("seed {seed}\nstream {}\nword-pos {}\n", rng.get_stream(), rng.get_word_pos())
}

fn rng_from_text(text: &str) -> Result<ChaCha8Rng> {
    let bad = |m: &str| Error::Corrupt(format!("rng-state: {m}"));
    let mut seed = None;
    let mut stream = None;
    let mut pos = None;
    for line in text.lines() {
        match line.split_once(' ') {
            Some(("seed", v)) if v.len() == 64 => {
                let mut s = [0u8; 32];
                for (i, b) in s.iter_mut().enumerate() {
                    *b = u8::from_str_radix(&v[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
                }
                seed = Some(s);
            }
            Some(("stream", v)) => stream = Some(v.parse::<u64>().map_err(|_| bad("stream"))?),
            Some(("word-pos", v)) => pos = Some(v.parse::<u128>().map_err(|_| bad("word-pos"))?),
            _ => return Err(bad("unexpected line")),
        }
    }
    let mut rng = ChaCha8Rng::from_seed(seed.ok_or_else(|| bad("missing seed"))?);
    rng.set_stream(stream.ok_or_else(|| bad("missing stream"))?);
    rng.set_word_pos(pos.ok_or_else(|| bad("missing word-pos"))?);
    Ok(rng)
}

/// Writes `gen-<n>/` with parameters, metrics, RNG state, replay buffer,
/// and curriculum position. Files are written to a temporary directory
/// that is renamed into place, so a partial checkpoint is never visible.
pub fn save_checkpoint(root: &Path, state: &RunState, num_levels: usize) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let dir = generation_dir(root, state.generation);
    let tmp = root.join(format!(".gen-{}.tmp", state.generation));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp)?;
    state.params.save(&tmp.join("params.bin"))?;
    fs::write(tmp.join("metrics.csv"), metrics_csv(&state.metrics, num_levels))?;
    fs::write(tmp.join("rng-state"), rng_to_text(&state.rng))?;
    let mut buf = Vec::new();
    state.buffer.write_to(&mut buf);
    let mut f = fs::File::create(tmp.join("buffer.bin"))?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::write(
        tmp.join("state"),
        format!("generation {}\ncurrent-level {}\n", state.generation, state.current_level),
    )?;
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::rename(&tmp, &dir)?;
    Ok(dir)
}

pub fn load_checkpoint(dir: &Path) -> Result<RunState> {
    let params = TnnParams::load(&dir.join("params.bin"))?;
    let metrics = parse_metrics_csv(&fs::read_to_string(dir.join("metrics.csv"))?)?;
    let rng = rng_from_text(&fs::read_to_string(dir.join("rng-state"))?)?;
    let mut bytes = Vec::new();
    fs::File::open(dir.join("buffer.bin"))?.read_to_end(&mut bytes)?;
    let buffer = ReplayBuffer::read_from(&bytes)?;
    let text = fs::read_to_string(dir.join("state"))?;
    let field = |key: &str| -> Result<usize> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|v| v.trim().parse().ok()))
            .ok_or_else(|| Error::Corrupt(format!("state: missing {key}")))
    };
    Ok(RunState {
        generation: field("generation ")?,
        current_level: field("current-level ")?,
        params,
        buffer,
        metrics,
        rng,
    })
}

/// The newest `gen-<n>` checkpoint under `root`, if any.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(n) = name.to_str().and_then(|s| s.strip_prefix("gen-")).and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(m, _)| n > *m) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Runs one generation: exploration, buffer insertion, training, promotion.
pub fn run_generation(c: &mut Curriculum, state: &mut RunState, cfg: &RlConfig) -> GenerationMetrics {
    c.current_level = state.current_level;
    let generation = state.generation + 1;
    let start = Instant::now();
    let (examples, _, mut metrics) = exploration_phase(c, &state.params, cfg, generation, &mut state.rng);
    state.buffer.extend(examples);
    state.params = train_phase(state.buffer.as_slice(), &state.params, &cfg.train, &mut state.rng);
    promote_if_passed(c, &metrics, cfg.promotion_threshold);
    metrics.wall_seconds = start.elapsed().as_secs_f64();
    state.current_level = c.current_level;
    state.generation = generation;
    state.metrics.push(metrics.clone());
    metrics
}

/// Runs generations until `state.generation == generations`, checkpointing
/// after each one when `checkpoint_root` is given.
pub fn run(
    c: &mut Curriculum,
    state: &mut RunState,
    generations: usize,
    cfg: &RlConfig,
    checkpoint_root: Option<&Path>,
    mut on_generation: impl FnMut(&GenerationMetrics),
) -> Result<()> {
    while state.generation < generations {
        let m = run_generation(c, state, cfg);
        if let Some(root) = checkpoint_root {
            save_checkpoint(root, state, c.num_levels())?;
        }
        on_generation(&m);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Guided,
    HiddenGraph,
    BreadthFirst,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Guided => "guided",
            EvalMode::HiddenGraph => "hidden-graph",
            EvalMode::BreadthFirst => "breadth-first",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "guided" => Ok(EvalMode::Guided),
            "hidden-graph" => Ok(EvalMode::HiddenGraph),
            "breadth-first" => Ok(EvalMode::BreadthFirst),
            _ => Err(format!("unknown mode `{s}` (expected guided, hidden-graph or breadth-first)")),
        }
    }
}

/// Per-problem outcome of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub level: usize,
    pub problem: Problem,
    pub solution: Option<crate::lang::Formula>,
}

/// Attempts every problem of the given 1-based levels without root noise.
pub fn evaluate(
    c: &Curriculum,
    params: &TnnParams,
    levels: &[usize],
    mode: EvalMode,
    cfg: &AttemptConfig,
) -> Vec<EvalRecord> {
    let jobs: Vec<(usize, Problem)> =
        levels.iter().flat_map(|&l| c.levels[l - 1].iter().map(move |p| (l, *p))).collect();
    map_ordered(&jobs, |&(level, problem)| {
        let acfg = AttemptConfig { seed: mix_seed(&[cfg.seed, problem.id as u64]), ..*cfg };
        let solution = match mode {
            EvalMode::Guided | EvalMode::HiddenGraph => {
                let mut pred = Predictor::new(params, problem.graph, mode == EvalMode::HiddenGraph);
                attempt(problem.graph, problem.size, &mut pred, &acfg, false).solution
            }
            EvalMode::BreadthFirst => bfs_attempt(problem.graph, problem.size, &acfg),
        };
        EvalRecord { level, problem, solution }
    })
}

/// Solved counts per requested level, in the order given.
pub fn solved_per_level(records: &[EvalRecord], levels: &[usize]) -> Vec<usize> {
    levels.iter().map(|&l| records.iter().filter(|r| r.level == l && r.solution.is_some()).count()).collect()
}
