//! PUCT tree search over token-append actions, big-step attempts, and the
//! breadth-first baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::enumerate::{graph_of_tokens, Graph};
use crate::hf::EvalBounds;
use crate::lang::{Formula, PartialFormula, Token, VOCAB_SIZE};
use crate::tnn::{Example, Prediction, Predictor};

/// Source of priors and leaf values for the search.
pub trait Evaluator {
    fn evaluate(&mut self, tokens: &[Token]) -> Prediction;
}

impl Evaluator for Predictor<'_> {
    fn evaluate(&mut self, tokens: &[Token]) -> Prediction {
        self.predict(tokens)
    }
}

/// Uniform policy and value 1/2 everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformEvaluator;

impl Evaluator for UniformEvaluator {
    fn evaluate(&mut self, _tokens: &[Token]) -> Prediction {
        Prediction { policy: vec![1.0 / VOCAB_SIZE as f64; VOCAB_SIZE], value: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttemptConfig {
    pub simulations: usize,
    /// Token budget and big-step limit are this times the source size.
    pub limit_factor: usize,
    pub c_puct: f64,
    pub dirichlet_alpha: f64,
    pub noise_eps: f64,
    pub bounds: EvalBounds,
    pub seed: u64,
}

impl Default for AttemptConfig {
    fn default() -> Self {
        AttemptConfig {
            simulations: 50_000,
            limit_factor: 2,
            c_puct: 1.5,
            dirichlet_alpha: 0.3,
            noise_eps: 0.25,
            bounds: EvalBounds::default(),
            seed: 0,
        }
    }
}

/// 1.0 iff the complete formula's graph is defined and equals `target`.
pub fn reward(state: &PartialFormula, target: Graph, b: &EvalBounds) -> f64 {
    assert!(state.is_complete(), "reward of an incomplete formula");
    match graph_of_tokens(state.tokens(), b) {
        Some(g) if g == target => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone)]
struct Edge {
    token: Token,
    prior: f64,
    n: u32,
    w: f64,
    child: Option<u32>,
}

#[derive(Debug, Clone)]
struct Node {
    edges: Vec<Edge>,
    /// Cached reward of a complete formula.
    terminal: Option<f64>,
    /// Value backed up by the simulation that created the node.
    value: f64,
}

/// Result of one search call.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// Root visit counts indexed by token; includes visits kept from a
    /// reused subtree.
    pub visits: [u32; VOCAB_SIZE],
    /// First complete formula with reward 1 reached by any simulation.
    pub found: Option<Formula>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeadEnd;

/// A search tree rooted at a partial formula, kept across big steps.
pub struct SearchTree {
    nodes: Vec<Node>,
    root: u32,
    state: PartialFormula,
    budget: usize,
    target: Graph,
}

impl SearchTree {
    pub fn new(root: PartialFormula, target: Graph, budget: usize) -> SearchTree {
        SearchTree { nodes: Vec::new(), root: u32::MAX, state: root, budget, target }
    }

    pub fn state(&self) -> &PartialFormula {
        &self.state
    }

    fn expand(&mut self, state: &PartialFormula, eval: &mut dyn Evaluator, cfg: &AttemptConfig) -> (u32, f64) {
        if state.is_complete() {
            let r = reward(state, self.target, &cfg.bounds);
            self.nodes.push(Node { edges: Vec::new(), terminal: Some(r), value: r });
            return (self.nodes.len() as u32 - 1, r);
        }
        let legal = state.legal_next_tokens(self.budget.saturating_sub(state.len()));
        let pred = eval.evaluate(state.tokens());
        let mass: f64 = legal.iter().map(|t| pred.policy[t.index()]).sum();
        let edges = legal
            .iter()
            .map(|&t| Edge {
                token: t,
                prior: if mass > 0.0 { pred.policy[t.index()] / mass } else { 1.0 / legal.len() as f64 },
                n: 0,
                w: 0.0,
                child: None,
            })
            .collect();
        self.nodes.push(Node { edges, terminal: None, value: pred.value });
        (self.nodes.len() as u32 - 1, pred.value)
    }

    fn select(&self, node: u32, priors: &[f64], c_puct: f64) -> usize {
        let edges = &self.nodes[node as usize].edges;
        let parent = 1 + edges.iter().map(|e| e.n as u64).sum::<u64>();
        let sqrt_n = (parent as f64).sqrt();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, e) in edges.iter().enumerate() {
            let q = if e.n > 0 { e.w / e.n as f64 } else { 0.0 };
            let score = q + c_puct * priors[i] * sqrt_n / (1.0 + e.n as f64);
            if score > best_score {
                best = i;
                best_score = score;
            }
        }
        best
    }

    /// Runs `cfg.simulations` simulations from the current root.
    pub fn search(
        &mut self,
        eval: &mut dyn Evaluator,
        cfg: &AttemptConfig,
        noise: bool,
        rng: &mut impl Rng,
    ) -> Result<SearchResult, DeadEnd> {
        if self.state.is_complete() || self.state.legal_mask(self.budget.saturating_sub(self.state.len())) == 0 {
            return Err(DeadEnd);
        }
        if self.root == u32::MAX {
            let state = self.state.clone();
            self.root = self.expand(&state, eval, cfg).0;
        }
        let mut root_priors: Vec<f64> = self.nodes[self.root as usize].edges.iter().map(|e| e.prior).collect();
        if noise && cfg.noise_eps > 0.0 {
            let dir = dirichlet(root_priors.len(), cfg.dirichlet_alpha, rng);
            for (p, d) in root_priors.iter_mut().zip(dir) {
                *p = (1.0 - cfg.noise_eps) * *p + cfg.noise_eps * d;
            }
        }
        let mut found = None;
        let mut path: Vec<(u32, usize)> = Vec::new();
        let mut scratch_priors = Vec::new();
        for _ in 0..cfg.simulations {
            path.clear();
            let mut state = self.state.clone();
            let mut node = self.root;
            let value = loop {
                let e = if node == self.root {
                    self.select(node, &root_priors, cfg.c_puct)
                } else {
                    scratch_priors.clear();
                    scratch_priors.extend(self.nodes[node as usize].edges.iter().map(|e| e.prior));
                    self.select(node, &scratch_priors, cfg.c_puct)
                };
                path.push((node, e));
                let edge = &self.nodes[node as usize].edges[e];
                state.push(edge.token).expect("edges hold legal tokens");
                match edge.child {
                    Some(child) => {
                        if let Some(r) = self.nodes[child as usize].terminal {
                            break r;
                        }
                        node = child;
                    }
                    None => {
                        let (child, v) = self.expand(&state, eval, cfg);
                        self.nodes[node as usize].edges[e].child = Some(child);
                        if self.nodes[child as usize].terminal == Some(1.0) && found.is_none() {
                            found = Some(state.to_formula().expect("complete"));
                        }
                        break v;
                    }
                }
            };
            for &(n, e) in &path {
                let edge = &mut self.nodes[n as usize].edges[e];
                edge.n += 1;
                edge.w += value;
            }
        }
        Ok(SearchResult { visits: self.root_visits(), found })
    }

    fn root_visits(&self) -> [u32; VOCAB_SIZE] {
        let mut v = [0; VOCAB_SIZE];
        for e in &self.nodes[self.root as usize].edges {
            v[e.token.index()] = e.n;
        }
        v
    }

    /// Commits `t` at the root, keeping only the chosen child's subtree.
    pub fn advance(&mut self, t: Token) {
        self.state.push(t).expect("advance with a legal token");
        let child = if self.root == u32::MAX {
            None
        } else {
            self.nodes[self.root as usize].edges.iter().find(|e| e.token == t).and_then(|e| e.child)
        };
        let mut fresh = Vec::new();
        self.root = match child {
            Some(c) if self.nodes[c as usize].terminal.is_none() => copy_subtree(&self.nodes, c, &mut fresh),
            _ => u32::MAX,
        };
        self.nodes = fresh;
    }

    /// Checks, for every edge into an expanded node, that its visits equal
    /// 1 + the child's edge visits and its total value equals the
    /// expansion value plus the child's edge values (for a terminal child:
    /// visits times the reward). Returns the number of edges checked.
    pub fn check_conservation(&self) -> Result<usize, String> {
        let mut checked = 0;
        for node in &self.nodes {
            for e in &node.edges {
                let Some(c) = e.child else { continue };
                let child = &self.nodes[c as usize];
                let (n, w) = match child.terminal {
                    Some(r) => (e.n, e.n as f64 * r),
                    None => (
                        1 + child.edges.iter().map(|x| x.n).sum::<u32>(),
                        child.value + child.edges.iter().map(|x| x.w).sum::<f64>(),
                    ),
                };
                if e.n != n {
                    return Err(format!("edge {} has {} visits, expected {n}", e.token, e.n));
                }
                if (e.w - w).abs() > 1e-9 * (1.0 + w.abs()) {
                    return Err(format!("edge {} has value {}, expected {w}", e.token, e.w));
                }
                checked += 1;
            }
        }
        Ok(checked)
    }

    /// Mean value of each root edge with at least one visit.
    pub fn root_q(&self) -> Vec<(Token, Option<f64>)> {
        self.nodes[self.root as usize]
            .edges
            .iter()
            .map(|e| (e.token, (e.n > 0).then(|| e.w / e.n as f64)))
            .collect()
    }
}

fn copy_subtree(nodes: &[Node], root: u32, out: &mut Vec<Node>) -> u32 {
    let idx = out.len() as u32;
    out.push(nodes[root as usize].clone());
    for i in 0..nodes[root as usize].edges.len() {
        if let Some(c) = nodes[root as usize].edges[i].child {
            let nc = copy_subtree(nodes, c, out);
            out[idx as usize].edges[i].child = Some(nc);
        }
    }
    idx
}

/// A Dirichlet(α, …, α) sample of length `n`, via normalised Gamma draws.
fn dirichlet(n: usize, alpha: f64, rng: &mut impl Rng) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("positive alpha");
    let mut v: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    } else {
        v.iter_mut().for_each(|x| *x = 1.0 / n as f64);
    }
    v
}

/// Picks the most visited token (smallest token on ties) and builds the
/// training example; the value target is filled in by the caller.
pub fn choose(state: &PartialFormula, target: Graph, visits: &[u32; VOCAB_SIZE]) -> (Token, Example) {
    let mut best = None;
    for (i, &n) in visits.iter().enumerate() {
        if n > 0 && best.is_none_or(|(_, m)| n > m) {
            best = Some((i, n));
        }
    }
    let (idx, _) = best.expect("at least one visit");
    let total: u32 = visits.iter().sum();
    let policy = visits.iter().map(|&n| n as f64 / total as f64).collect();
    let example = Example { graph: target, tokens: state.tokens().to_vec(), policy, value: 0.0 };
    (Token::from_index(idx), example)
}

/// One search call followed by committing the most visited action.
pub fn big_step(
    tree: &mut SearchTree,
    eval: &mut dyn Evaluator,
    cfg: &AttemptConfig,
    noise: bool,
    rng: &mut impl Rng,
) -> Result<(Token, Example, Option<Formula>), DeadEnd> {
    let result = tree.search(eval, cfg, noise, rng)?;
    let (t, example) = choose(tree.state(), tree.target, &result.visits);
    tree.advance(t);
    Ok((t, example, result.found))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttemptOutcome {
    /// The constructed formula or an in-search hit had reward 1.
    pub solved: bool,
    /// The constructed formula itself had reward 1.
    pub solved_final: bool,
    /// The first reward-1 formula reached during the attempt.
    pub solution: Option<Formula>,
    pub examples: Vec<Example>,
    pub big_steps: usize,
}

/// A series of big steps towards a formula whose graph is `target`; the
/// token budget and big-step limit are `limit_factor·source_size`.
pub fn attempt(
    target: Graph,
    source_size: usize,
    eval: &mut dyn Evaluator,
    cfg: &AttemptConfig,
    noise: bool,
) -> AttemptOutcome {
    attempt_with_budget(target, cfg.limit_factor * source_size, eval, cfg, noise)
}

/// [`attempt`] with an explicit token budget.
pub fn attempt_with_budget(
    target: Graph,
    budget: usize,
    eval: &mut dyn Evaluator,
    cfg: &AttemptConfig,
    noise: bool,
) -> AttemptOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tree = SearchTree::new(PartialFormula::new(), target, budget);
    let mut examples = Vec::new();
    let mut found: Option<Formula> = None;
    let mut steps = 0;
    while steps < budget && !tree.state().is_complete() {
        match big_step(&mut tree, eval, cfg, noise, &mut rng) {
            Ok((_, example, hit)) => {
                examples.push(example);
                if found.is_none() {
                    found = hit;
                }
            }
            Err(DeadEnd) => break,
        }
        steps += 1;
    }
    let final_state = tree.state();
    let solved_final = final_state.is_complete() && reward(final_state, target, &cfg.bounds) == 1.0;
    // a committed terminal was expanded during search, so it is never
    // earlier than the first hit
    let solution = found.or_else(|| solved_final.then(|| final_state.to_formula().expect("complete")));
    let solved = solution.is_some();
    for ex in &mut examples {
        ex.value = if solved { 1.0 } else { 0.0 };
    }
    AttemptOutcome { solved, solved_final, solution, examples, big_steps: steps }
}

/// Breadth-first search over token sequences (by length, then token order).
/// Each expanded incomplete prefix costs one unit of `max_expansions`;
/// complete children are checked as they are generated.
pub fn bfs_search(target: Graph, budget: usize, max_expansions: u64, b: &EvalBounds) -> Option<Formula> {
    let mut expansions = 0u64;
    // all incomplete prefixes of one length, in token order, form one BFS layer
    fn layer(
        state: &mut PartialFormula,
        len: usize,
        budget: usize,
        target: Graph,
        b: &EvalBounds,
        expansions: &mut u64,
        max: u64,
        any: &mut bool,
    ) -> Option<Option<Formula>> {
        if state.len() == len {
            *any = true;
            if *expansions >= max {
                return Some(None);
            }
            *expansions += 1;
            for t in state.legal_next_tokens(budget - state.len()) {
                let child = state.with(t).expect("legal");
                if child.is_complete() && reward(&child, target, b) == 1.0 {
                    return Some(Some(child.to_formula().expect("complete")));
                }
            }
            return None;
        }
        for t in state.legal_next_tokens(budget - state.len()) {
            let mut child = state.with(t).expect("legal");
            if child.is_complete() {
                continue;
            }
            if let Some(r) = layer(&mut child, len, budget, target, b, expansions, max, any) {
                return Some(r);
            }
        }
        None
    }
    for len in 0..budget {
        let mut any = false;
        let mut root = PartialFormula::new();
        if let Some(r) = layer(&mut root, len, budget, target, b, &mut expansions, max_expansions, &mut any) {
            return r;
        }
        if !any {
            break;
        }
    }
    None
}

/// The baseline at expansion parity: `limit_factor·size·simulations`
/// expansions and the same token budget as a guided attempt.
pub fn bfs_attempt(target: Graph, source_size: usize, cfg: &AttemptConfig) -> Option<Formula> {
    let budget = cfg.limit_factor * source_size;
    let expansions = (budget as u64) * cfg.simulations as u64;
    bfs_search(target, budget, expansions, &cfg.bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse_tokens;
    use crate::tnn::TnnParams;

    fn state(s: &str) -> PartialFormula {
        PartialFormula::from_tokens(&parse_tokens(s).unwrap()).unwrap()
    }

    fn cfg(simulations: usize) -> AttemptConfig {
        AttemptConfig { simulations, ..AttemptConfig::default() }
    }

    const AT_LEAST_TWO: u64 = {
        let mut m = 0u64;
        let mut n = 0;
        while n < 64 {
            if (n as u64).count_ones() >= 2 {
                m |= 1 << n;
            }
            n += 1;
        }
        m
    };

    #[test]
    fn reward_examples() {
        let b = EvalBounds::default();
        assert_eq!(reward(&state("sub x x"), Graph::ALL_TRUE, &b), 1.0);
        assert_eq!(reward(&state("in x x"), Graph::ALL_TRUE, &b), 0.0);
        assert_eq!(reward(&state("in x x"), Graph(0), &b), 1.0);
        // undefined at x = 63
        let omitted = state("exe pow pow pow x eq x x");
        assert!(graph_of_tokens(omitted.tokens(), &b).is_none());
        assert_eq!(reward(&omitted, Graph(0), &b), 0.0);
        assert_eq!(reward(&omitted, Graph::ALL_TRUE, &b), 0.0);
    }

    #[test]
    fn fresh_root_visits_sum_to_simulations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tree = SearchTree::new(PartialFormula::new(), Graph(AT_LEAST_TWO), 12);
        let r = tree.search(&mut UniformEvaluator, &cfg(3000), true, &mut rng).unwrap();
        assert_eq!(r.visits.iter().sum::<u32>(), 3000);
        assert!(tree.check_conservation().unwrap() > 100);
    }

    #[test]
    fn reused_subtree_keeps_visits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tree = SearchTree::new(PartialFormula::new(), Graph(AT_LEAST_TWO), 12);
        let c = cfg(2000);
        let r = tree.search(&mut UniformEvaluator, &c, false, &mut rng).unwrap();
        let (t, _) = choose(tree.state(), Graph(AT_LEAST_TWO), &r.visits);
        let kept = r.visits[t.index()];
        tree.advance(t);
        tree.check_conservation().unwrap();
        let r2 = tree.search(&mut UniformEvaluator, &c, false, &mut rng).unwrap();
        // the retained child had `kept` visits, one of them its expansion
        assert_eq!(r2.visits.iter().sum::<u32>(), kept - 1 + 2000);
        tree.check_conservation().unwrap();
    }

    #[test]
    fn toy_search_finds_in_x_x() {
        let r = SearchTree::new(PartialFormula::new(), Graph(0), 3)
            .search(&mut UniformEvaluator, &cfg(50_000), true, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let f = r.found.expect("reward-1 terminal");
        assert_eq!(f.to_prefix(), parse_tokens("in x x").unwrap());
    }

    #[test]
    fn uniform_search_is_deterministic() {
        let run = || {
            SearchTree::new(PartialFormula::new(), Graph(AT_LEAST_TWO), 10)
                .search(&mut UniformEvaluator, &cfg(5000), false, &mut ChaCha8Rng::seed_from_u64(4))
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn q_converges_on_two_level_toy() {
        // after "in x" with two tokens left: x (terminal), pow x, sing x
        let root = state("in x");
        // x ∈ x never holds; x ∈ ℘(x) and x ∈ {x} always do
        let target = Graph::ALL_TRUE;
        let mut tree = SearchTree::new(root, target, 4);
        tree.search(&mut UniformEvaluator, &cfg(10_000), false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let truth = |t: Token| match t {
            Token::Var(0) => 0.0,
            _ => 1.0,
        };
        for (t, q) in tree.root_q() {
            let q = q.expect("every edge visited");
            assert!((q - truth(t)).abs() < 0.05, "{t}: {q}");
        }
    }

    #[test]
    fn choose_normalises_and_breaks_ties_by_token_order() {
        let s = PartialFormula::new();
        let mut v = [0u32; VOCAB_SIZE];
        v[0] = 49_000;
        v[1] = 1000;
        let (t, ex) = choose(&s, Graph(0), &v);
        assert_eq!(t, Token::from_index(0));
        assert!((ex.policy[0] - 0.98).abs() < 1e-12 && (ex.policy[1] - 0.02).abs() < 1e-12);
        let mut v = [0u32; VOCAB_SIZE];
        v[4] = 7;
        v[2] = 7;
        assert_eq!(choose(&s, Graph(0), &v).0, Token::from_index(2));
    }

    #[test]
    fn examples_are_supported_on_legal_tokens() {
        let p = TnnParams::random(&mut ChaCha8Rng::seed_from_u64(6));
        let mut pred = Predictor::new(&p, Graph(AT_LEAST_TWO), false);
        let out = attempt(Graph(AT_LEAST_TWO), 6, &mut pred, &AttemptConfig { seed: 9, ..cfg(300) }, true);
        assert_eq!(out.examples.len(), out.big_steps);
        let mut s = PartialFormula::new();
        for ex in &out.examples {
            assert_eq!(ex.tokens, s.tokens());
            assert!((ex.policy.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let legal = s.legal_mask(12 - s.len());
            for (i, &p) in ex.policy.iter().enumerate() {
                assert!(p == 0.0 || legal & (1 << i) != 0);
            }
            assert!(s.min_completion_size() <= 12 - s.len());
            let next = (0..VOCAB_SIZE).max_by(|&a, &b| ex.policy[a].total_cmp(&ex.policy[b]).then(b.cmp(&a))).unwrap();
            s.push(Token::from_index(next)).unwrap();
            assert!(ex.value == if out.solved { 1.0 } else { 0.0 });
        }
        if let Some(f) = &out.solution {
            assert_eq!(crate::compute_graph(f, &EvalBounds::default()), Some(Graph(AT_LEAST_TWO)));
        }
    }

    #[test]
    fn attempt_solves_all_true() {
        let out = attempt(Graph::ALL_TRUE, 3, &mut UniformEvaluator, &cfg(2000), false);
        assert!(out.solved);
        assert!(out.big_steps <= 6);
        let f = out.solution.unwrap();
        assert_eq!(f.size(), 3);
        assert_eq!(crate::compute_graph(&f, &EvalBounds::default()), Some(Graph::ALL_TRUE));
    }

    #[test]
    fn dead_end_root() {
        let mut tree = SearchTree::new(PartialFormula::new(), Graph(0), 2);
        assert_eq!(
            tree.search(&mut UniformEvaluator, &cfg(10), false, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(DeadEnd)
        );
        let out = attempt(Graph(0), 1, &mut UniformEvaluator, &cfg(10), false);
        assert!(!out.solved && out.examples.is_empty());
    }

    #[test]
    fn bfs_examples() {
        let b = EvalBounds::default();
        // root, six relations, then "in x" generates "in x x"
        let f = bfs_search(Graph(0), 3, 8, &b).unwrap();
        assert_eq!(f.to_prefix(), parse_tokens("in x x").unwrap());
        assert!(bfs_search(Graph(0), 3, 7, &b).is_none());
        assert!(bfs_search(Graph(0), 3, 0, &b).is_none());
        assert!(bfs_search(Graph::ALL_TRUE, 3, 1000, &b).is_some());
        // no size-3 formula has this graph, and budget 3 exhausts the space
        assert!(bfs_search(Graph(AT_LEAST_TWO), 3, 1_000_000, &b).is_none());
    }

    #[test]
    fn bfs_finds_minimal_popcount_formula_with_enough_budget() {
        let b = EvalBounds::default();
        let f = bfs_search(Graph(AT_LEAST_TWO), 6, 2_000_000, &b).unwrap();
        assert_eq!(crate::compute_graph(&f, &b), Some(Graph(AT_LEAST_TWO)));
        assert_eq!(f.size(), 6);
    }
}
