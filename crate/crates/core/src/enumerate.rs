//! Exhaustive formula generation, graph computation and graph-level
//! deduplication into a problem dataset.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hf::{EvalBounds, HfNat, Program};
use crate::lang::{parse_tokens, tokens_to_string, Formula, Hole, HoleKind, PartialFormula, Token, MAX_DEPTH};

pub const GRAMMAR_VERSION: u32 = 1;

/// Truth values of a one-variable formula at x = 0..63; bit n is the value at x = n.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Graph(pub u64);

impl Graph {
    pub const ALL_TRUE: Graph = Graph(u64::MAX);

    pub fn from_fn(f: impl Fn(u64) -> bool) -> Graph {
        Graph((0..64).filter(|&n| f(n)).fold(0, |m, n| m | 1 << n))
    }

    pub fn get(self, n: u32) -> bool {
        self.0 >> n & 1 == 1
    }
}

impl fmt::Display for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for Graph {
    type Err = String;

    fn from_str(s: &str) -> Result<Graph, String> {
        if s.len() != 16 || !s.bytes().all(|c| c.is_ascii_hexdigit()) {
            return Err(format!("expected 16 hex digits, got `{s}`"));
        }
        u64::from_str_radix(s, 16).map(Graph).map_err(|e| e.to_string())
    }
}

/// The graph of `f`, or `None` when any of the 64 evaluations is undefined.
pub fn compute_graph(f: &Formula, b: &EvalBounds) -> Option<Graph> {
    Program::new(&f.to_prefix()).graph(b).map(Graph)
}

/// [`compute_graph`] through the tree-walking evaluator instead of the flat
/// one; used to re-verify reported solutions independently.
pub fn graph_by_ast(f: &Formula, b: &EvalBounds) -> Option<Graph> {
    let mut mask = 0u64;
    for x in 0..64u64 {
        if crate::hf::eval_formula(f, &crate::hf::Env::new(HfNat::from(x)), b)? {
            mask |= 1 << x;
        }
    }
    Some(Graph(mask))
}

/// Graph of a complete token sequence.
pub fn graph_of_tokens(tokens: &[Token], b: &EvalBounds) -> Option<Graph> {
    Program::new(tokens).graph(b).map(Graph)
}

/// Every formula of size at most `max_size`, ordered by size and then
/// lexicographically by prefix tokens.
pub fn enumerate_formulas(max_size: usize) -> FormulaIter {
    FormulaIter { max_size, size: 3, stack: vec![PartialFormula::new()] }
}

/// Depth-first walk over [`PartialFormula::legal_next_tokens`], one size at a time.
pub struct FormulaIter {
    max_size: usize,
    size: usize,
    stack: Vec<PartialFormula>,
}

impl Iterator for FormulaIter {
    type Item = Formula;

    fn next(&mut self) -> Option<Formula> {
        loop {
            if self.size > self.max_size {
                return None;
            }
            let Some(p) = self.stack.pop() else {
                self.size += 1;
                self.stack.push(PartialFormula::new());
                continue;
            };
            if p.is_complete() {
                if p.len() == self.size {
                    return Some(p.to_formula().expect("complete"));
                }
                continue;
            }
            let legal = p.legal_next_tokens(self.size - p.len());
            for t in legal.into_iter().rev() {
                self.stack.push(p.with(t).expect("legal token"));
            }
        }
    }
}

/// Exact-size depth-first generator over raw token buffers.
///
/// Produces the same sequences, in the same order, as [`FormulaIter`]
/// restricted to one size, without allocating per node.
struct Walker {
    size: usize,
    tokens: Vec<Token>,
    holes: Vec<Hole>,
    min: usize,
}

const FORMULA_STARTS: [usize; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];
const TERM_STARTS: [usize; 10] = [12, 13, 14, 15, 16, 17, 18, 19, 20, 21];

impl Walker {
    fn new(size: usize, prefix: &[Token]) -> Option<Walker> {
        let p = PartialFormula::from_tokens(prefix).ok()?;
        let holes: Vec<Hole> = p.holes().collect::<Vec<_>>().into_iter().rev().collect();
        let w = Walker { size, tokens: prefix.to_vec(), holes, min: p.min_completion_size() };
        w.feasible().then_some(w)
    }

    fn feasible(&self) -> bool {
        let rem = self.size.checked_sub(self.tokens.len());
        match rem {
            None => false,
            Some(rem) => self.min <= rem && (self.min > 0 || rem == 0),
        }
    }

    /// Legal continuations that can still end at exactly `size` tokens.
    fn choices(&self) -> impl Iterator<Item = Token> + '_ {
        let hole = *self.holes.last().expect("incomplete");
        let candidates: &[usize] = match hole.kind {
            HoleKind::Formula => &FORMULA_STARTS,
            HoleKind::Term => &TERM_STARTS,
        };
        let rem = self.size - self.tokens.len() - 1;
        let base = self.min - if hole.kind == HoleKind::Term { 1 } else { 3 };
        candidates.iter().map(|&i| Token::from_index(i)).filter(move |&t| {
            let extra = match t {
                Token::Var(k) => {
                    if k > hole.depth {
                        return false;
                    }
                    0
                }
                Token::Quant(_) => {
                    if hole.depth >= MAX_DEPTH {
                        return false;
                    }
                    4
                }
                Token::Imp | Token::And => 6,
                Token::Pow | Token::Sing => 1,
                _ => 2,
            };
            let min_after = base + extra;
            min_after <= rem && (min_after > 0 || rem == 0)
        })
    }

    fn push(&mut self, t: Token) -> (Hole, usize) {
        let hole = self.holes.pop().expect("incomplete");
        let d = hole.depth;
        let term = Hole { kind: HoleKind::Term, depth: d };
        let formula = Hole { kind: HoleKind::Formula, depth: d };
        let before = self.min;
        match t {
            Token::Rel(_) | Token::Cup => {
                self.holes.extend([term, term]);
                self.min = self.min - hole_cost(hole) + 2;
            }
            Token::Imp | Token::And => {
                self.holes.extend([formula, formula]);
                self.min = self.min - 3 + 6;
            }
            Token::Quant(_) => {
                self.holes.push(Hole { kind: HoleKind::Formula, depth: d + 1 });
                self.holes.push(term);
                self.min = self.min - 3 + 4;
            }
            Token::Pow | Token::Sing => {
                self.holes.push(term);
            }
            Token::Var(_) => {
                self.min -= 1;
            }
        }
        self.tokens.push(t);
        (hole, before)
    }

    fn pop(&mut self, t: Token, hole: Hole, min_before: usize) {
        self.tokens.pop();
        let opened = match t {
            Token::Var(_) => 0,
            Token::Pow | Token::Sing => 1,
            _ => 2,
        };
        let len = self.holes.len() - opened;
        self.holes.truncate(len);
        self.holes.push(hole);
        self.min = min_before;
    }

    fn run(&mut self, visit: &mut dyn FnMut(&[Token])) {
        if self.holes.is_empty() {
            if self.tokens.len() == self.size {
                visit(&self.tokens);
            }
            return;
        }
        let mut mask = self.choices().fold(0u32, |m, t| m | 1 << t.index());
        while mask != 0 {
            let t = Token::from_index(mask.trailing_zeros() as usize);
            mask &= mask - 1;
            let (hole, before) = self.push(t);
            self.run(visit);
            self.pop(t, hole, before);
        }
    }
}

fn hole_cost(h: Hole) -> usize {
    match h.kind {
        HoleKind::Term => 1,
        HoleKind::Formula => 3,
    }
}

/// Calls `visit` on every complete formula of exactly `size` tokens that
/// starts with `prefix`, in lexicographic order.
pub fn for_each_with_prefix(size: usize, prefix: &[Token], visit: &mut dyn FnMut(&[Token])) {
    if let Some(mut w) = Walker::new(size, prefix) {
        w.run(visit);
    }
}

/// One representative per distinct graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub entries: BTreeMap<Graph, Formula>,
    pub meta: DatasetMeta,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub grammar_version: u32,
    pub bounds: EvalBounds,
    pub max_size: usize,
    /// Formulas generated before omission and deduplication.
    pub enumerated: u64,
    /// Formulas dropped because some evaluation was undefined.
    pub omitted: u64,
}

/// Per-unit result of a parallel build: graphs in first-seen order.
#[derive(Default)]
struct UnitResult {
    enumerated: u64,
    omitted: u64,
    firsts: Vec<(u64, Vec<Token>)>,
}

fn run_unit(size: usize, prefix: &[Token], b: &EvalBounds) -> UnitResult {
    let mut out = UnitResult::default();
    let mut seen: HashMap<u64, ()> = HashMap::new();
    let mut program = Program::new(&[]);
    for_each_with_prefix(size, prefix, &mut |tokens| {
        out.enumerated += 1;
        program.load(tokens);
        match program.graph(b) {
            None => out.omitted += 1,
            Some(g) => {
                if seen.insert(g, ()).is_none() {
                    out.firsts.push((g, tokens.to_vec()));
                }
            }
        }
    });
    out
}

/// Work units for one size: every feasible two-token prefix, in lexicographic order.
pub fn work_units(size: usize) -> Vec<Vec<Token>> {
    let mut units = Vec::new();
    let Some(root) = Walker::new(size, &[]) else {
        return units;
    };
    for t in root.choices() {
        let one = [t];
        let Some(w) = Walker::new(size, &one) else { continue };
        if w.holes.is_empty() {
            units.push(one.to_vec());
            continue;
        }
        for u in w.choices() {
            units.push(vec![t, u]);
        }
    }
    units
}

/// Progress callback: (size, units done, units total).
pub type Progress<'a> = &'a (dyn Fn(usize, usize, usize) + Sync);

pub fn build_dataset(max_size: usize, b: &EvalBounds) -> Dataset {
    build_dataset_with_progress(max_size, b, &|_, _, _| {})
}

/// Builds the dataset; workers are split by two-token prefixes and merged in
/// prefix order, so the result does not depend on scheduling.
pub fn build_dataset_with_progress(max_size: usize, b: &EvalBounds, progress: Progress<'_>) -> Dataset {
    let mut entries: BTreeMap<Graph, Formula> = BTreeMap::new();
    let mut meta = DatasetMeta {
        grammar_version: GRAMMAR_VERSION,
        bounds: *b,
        max_size,
        enumerated: 0,
        omitted: 0,
    };
    for size in 3..=max_size {
        let units = work_units(size);
        let total = units.len();
        let done = std::sync::atomic::AtomicUsize::new(0);
        let job = |u: &Vec<Token>| {
            let r = run_unit(size, u, b);
            let k = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            progress(size, k, total);
            r
        };
        #[cfg(feature = "parallel")]
        let results: Vec<UnitResult> = {
            use rayon::prelude::*;
            units.par_iter().map(job).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<UnitResult> = units.iter().map(job).collect();
        for r in results {
            meta.enumerated += r.enumerated;
            meta.omitted += r.omitted;
            for (g, tokens) in r.firsts {
                entries
                    .entry(Graph(g))
                    .or_insert_with(|| Formula::from_prefix(&tokens).expect("generated formula"));
            }
        }
    }
    Dataset { entries, meta }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Representatives counted by size.
    pub fn size_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for f in self.entries.values() {
            *h.entry(f.size()).or_insert(0) += 1;
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        let m = &self.meta;
        writeln!(w, "# grammar-version {}", m.grammar_version)?;
        writeln!(
            w,
            "# bounds max_bits={} max_iter={} fuel={}",
            m.bounds.max_bits, m.bounds.max_iter, m.bounds.fuel
        )?;
        writeln!(w, "# max-size {}", m.max_size)?;
        writeln!(w, "# enumerated {}", m.enumerated)?;
        writeln!(w, "# omitted {}", m.omitted)?;
        for (g, f) in &self.entries {
            writeln!(w, "{g}\t{}", tokens_to_string(&f.to_prefix()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::read_from(BufReader::new(fs::File::open(path)?))
    }

    /// Parses the TSV format and re-checks every representative's graph.
    pub fn read_from(r: impl BufRead) -> Result<Dataset> {
        let mut meta = DatasetMeta {
            grammar_version: GRAMMAR_VERSION,
            bounds: EvalBounds::default(),
            max_size: 0,
            enumerated: 0,
            omitted: 0,
        };
        let mut entries = BTreeMap::new();
        let mut last: Option<Graph> = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let bad = |message: String| Error::Parse { line: lineno, message };
            if let Some(header) = line.strip_prefix('#') {
                parse_header(header.trim(), &mut meta).map_err(bad)?;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (g, text) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected `<graph>\\t<prefix>`".into()))?;
            let graph: Graph = g.parse().map_err(bad)?;
            let tokens = parse_tokens(text).map_err(|e| bad(e.to_string()))?;
            let formula = Formula::from_prefix(&tokens).map_err(|e| bad(e.to_string()))?;
            if last.is_some_and(|prev| prev >= graph) {
                return Err(bad("graphs must be strictly ascending".into()));
            }
            last = Some(graph);
            match compute_graph(&formula, &meta.bounds) {
                Some(actual) if actual == graph => {}
                other => {
                    return Err(Error::Integrity {
                        line: lineno,
                        message: format!(
                            "`{text}` evaluates to {}, not {graph}",
                            other.map_or("undefined".to_string(), |g| g.to_string())
                        ),
                    })
                }
            }
            entries.insert(graph, formula);
        }
        Ok(Dataset { entries, meta })
    }
}

fn parse_header(h: &str, meta: &mut DatasetMeta) -> Result<(), String> {
    let (key, rest) = h.split_once(' ').unwrap_or((h, ""));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|e| format!("{key}: {e}"));
    match key {
        "grammar-version" => {
            let v = num(rest)? as u32;
            if v != GRAMMAR_VERSION {
                return Err(format!("unsupported grammar version {v}"));
            }
            meta.grammar_version = v;
        }
        "bounds" => {
            for kv in rest.split_whitespace() {
                let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad bound `{kv}`"))?;
                let v = num(v)?;
                if v == 0 {
                    return Err(format!("bound {k} must be positive"));
                }
                match k {
                    "max_bits" => meta.bounds.max_bits = v,
                    "max_iter" => meta.bounds.max_iter = v,
                    "fuel" => meta.bounds.fuel = v,
                    _ => return Err(format!("unknown bound `{k}`")),
                }
            }
        }
        "max-size" => meta.max_size = num(rest)? as usize,
        "enumerated" => meta.enumerated = num(rest)?,
        "omitted" => meta.omitted = num(rest)?,
        // free-form comments are allowed
        _ => {}
    }
    Ok(())
}

/// Reference histogram of distinct graphs by size, sizes 3..=15.
pub const REFERENCE_HISTOGRAM: [(usize, usize); 13] = [
    (3, 6),
    (4, 8),
    (5, 22),
    (6, 60),
    (7, 88),
    (8, 260),
    (9, 472),
    (10, 960),
    (11, 638),
    (12, 992),
    (13, 1582),
    (14, 1056),
    (15, 606),
];

/// Side-by-side comparison of this dataset's histogram with the reference row.
pub fn comparison_report(d: &Dataset) -> String {
    let hist = d.size_histogram();
    let mut out = String::new();
    out.push_str("size\tours\treference\n");
    for &(size, reference) in &REFERENCE_HISTOGRAM {
        let ours = if size <= d.meta.max_size {
            hist.get(&size).copied().unwrap_or(0).to_string()
        } else {
            "-".to_string()
        };
        out.push_str(&format!("{size}\t{ours}\t{reference}\n"));
    }
    let ref_total: usize = REFERENCE_HISTOGRAM.iter().map(|&(_, c)| c).sum();
    out.push_str(&format!("total\t{}\t{ref_total}\n", d.len()));
    out.push_str(&format!("max_size\t{}\n", d.meta.max_size));
    out.push_str(&format!("enumerated\t{}\n", d.meta.enumerated));
    out.push_str(&format!("omitted\t{}\n", d.meta.omitted));
    let b = d.meta.bounds;
    out.push_str(&format!(
        "bounds\tmax_bits={} max_iter={} fuel={}\n",
        b.max_bits, b.max_iter, b.fuel
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Token> {
        parse_tokens(s).unwrap()
    }

    #[test]
    fn small_enumeration_counts() {
        let all: Vec<Formula> = enumerate_formulas(4).collect();
        assert_eq!(all.iter().filter(|f| f.size() == 3).count(), 6);
        assert_eq!(all.iter().filter(|f| f.size() == 4).count(), 24);
        assert_eq!(all[0].to_prefix(), toks("in x x"));
        assert!(all.iter().any(|f| f.to_prefix() == toks("in x pow x")));
        assert!(all.iter().any(|f| f.to_prefix() == toks("sub sing x x")));
    }

    #[test]
    fn walker_matches_iterator() {
        for size in 3..=7 {
            let from_iter: Vec<Vec<Token>> = enumerate_formulas(size)
                .filter(|f| f.size() == size)
                .map(|f| f.to_prefix())
                .collect();
            let mut from_walker = Vec::new();
            for_each_with_prefix(size, &[], &mut |t| from_walker.push(t.to_vec()));
            assert_eq!(from_iter, from_walker, "size {size}");
            let mut from_units = Vec::new();
            for u in work_units(size) {
                for_each_with_prefix(size, &u, &mut |t| from_units.push(t.to_vec()));
            }
            assert_eq!(from_iter, from_units, "size {size}");
        }
    }

    #[test]
    fn graphs() {
        let b = EvalBounds::default();
        let f = |s: &str| Formula::from_prefix(&toks(s)).unwrap();
        assert_eq!(compute_graph(&f("eq x x"), &b), Some(Graph::ALL_TRUE));
        assert_eq!(compute_graph(&f("in x x"), &b), Some(Graph(0)));
        assert_eq!(compute_graph(&f("exs pow pow x in v1 v1"), &b), None);
    }

    #[test]
    fn size_three_dataset() {
        let d = build_dataset(3, &EvalBounds::default());
        assert_eq!(d.len(), 2);
        assert_eq!(d.entries[&Graph(0)].to_prefix(), toks("in x x"));
        assert_eq!(d.entries[&Graph::ALL_TRUE].to_prefix(), toks("notin x x"));
        assert_eq!(d.size_histogram(), BTreeMap::from([(3, 2)]));
        assert_eq!(d.meta.enumerated, 6);
        assert_eq!(d.meta.omitted, 0);
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let d = build_dataset(5, &EvalBounds::default());
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&buf[..]).unwrap();
        assert_eq!(back, d);

        let one = Dataset::read_from("0000000000000000\tin x x\n".as_bytes()).unwrap();
        assert_eq!(one.entries[&Graph(0)].to_prefix(), toks("in x x"));

        let err = Dataset::read_from("# max-size 3\n000000000000000\tin x x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = Dataset::read_from("ffffffffffffffff\tin x x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Integrity { line: 1, .. }), "{err}");
        let err = Dataset::read_from("0000000000000000\tin x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn empty_histogram() {
        let d = Dataset::read_from("".as_bytes()).unwrap();
        assert!(d.size_histogram().is_empty());
    }

    #[test]
    fn graph_hex() {
        assert_eq!("00000000000000ff".parse::<Graph>(), Ok(Graph(255)));
        assert!("0xff".parse::<Graph>().is_err());
        assert_eq!(Graph(255).to_string(), "00000000000000ff");
    }
}
