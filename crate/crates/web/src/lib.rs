//! Browser bindings: inspect a formula's graph and search for a formula
//! matching a graph drawn on an 8x8 grid.

use wasm_bindgen::prelude::*;

use hfsynth::lang::{parse_tokens, tokens_to_string, PartialFormula};
use hfsynth::mcts::{attempt_with_budget, bfs_search, AttemptConfig, UniformEvaluator};
use hfsynth::{compute_graph, EvalBounds, Formula, Graph};

/// Summary of one formula.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormulaInfo {
    pretty: String,
    size: usize,
    graph: Option<Graph>,
}

#[wasm_bindgen]
impl FormulaInfo {
    #[wasm_bindgen(getter)]
    pub fn pretty(&self) -> String {
        self.pretty.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// 16 hex digits, or an empty string when evaluation exceeded the bounds.
    #[wasm_bindgen(getter)]
    pub fn graph(&self) -> String {
        self.graph.map(|g| g.to_string()).unwrap_or_default()
    }

    /// One byte per x in 0..63: 1 true, 0 false; empty when undefined.
    #[wasm_bindgen(getter)]
    pub fn points(&self) -> Vec<u8> {
        match self.graph {
            Some(g) => (0..64).map(|n| u8::from(g.get(n))).collect(),
            None => Vec::new(),
        }
    }
}

fn info(f: &Formula) -> FormulaInfo {
    FormulaInfo { pretty: f.pretty(), size: f.size(), graph: compute_graph(f, &EvalBounds::default()) }
}

/// Parses a prefix formula such as `exe x neq sing v1 x` and evaluates it.
#[wasm_bindgen]
pub fn formula_info(prefix: &str) -> Result<FormulaInfo, String> {
    let tokens = parse_tokens(prefix).map_err(|e| e.to_string())?;
    let state = PartialFormula::from_tokens(&tokens).map_err(|e| e.to_string())?;
    let f = state.to_formula().map_err(|e| e.to_string())?;
    Ok(info(&f))
}

fn parse_graph(hex: &str) -> Result<Graph, String> {
    hex.trim().parse()
}

/// Breadth-first search for the smallest formula with the given graph.
#[wasm_bindgen]
pub fn synthesize_bfs(graph_hex: &str, max_size: usize, max_expansions: u32) -> Result<String, String> {
    let g = parse_graph(graph_hex)?;
    bfs_search(g, max_size, u64::from(max_expansions), &EvalBounds::default())
        .map(|f| tokens_to_string(&f.to_prefix()))
        .ok_or_else(|| format!("no formula of at most {max_size} tokens found"))
}

/// Tree search with a uniform prior (no trained network in the browser).
#[wasm_bindgen]
pub fn synthesize_mcts(graph_hex: &str, max_size: usize, simulations: u32, seed: u32) -> Result<String, String> {
    let g = parse_graph(graph_hex)?;
    let cfg = AttemptConfig { simulations: simulations as usize, seed: u64::from(seed), ..AttemptConfig::default() };
    let out = attempt_with_budget(g, max_size, &mut UniformEvaluator, &cfg, false);
    out.solution
        .map(|f| tokens_to_string(&f.to_prefix()))
        .ok_or_else(|| format!("no formula found within {max_size} tokens"))
}
