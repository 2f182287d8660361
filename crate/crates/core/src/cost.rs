//! Exact formula counts by size and a uniform sampler over formulas of one
//! size, used to project the cost of exhaustive enumeration.

use std::time::Instant;

use rand::{Rng, RngExt};

use crate::hf::{EvalBounds, Program};
use crate::lang::{QuantKind, Rel, Token, MAX_DEPTH};

const DEPTHS: usize = MAX_DEPTH as usize + 1;

/// Number of terms and formulas of each exact size, per binder depth.
#[derive(Debug, Clone)]
pub struct FormulaCounts {
    term: Vec<[u128; DEPTHS]>,
    formula: Vec<[u128; DEPTHS]>,
}

impl FormulaCounts {
    pub fn new(max_size: usize) -> FormulaCounts {
        let mut term = vec![[0u128; DEPTHS]; max_size + 1];
        let mut formula = vec![[0u128; DEPTHS]; max_size + 1];
        for s in 1..=max_size {
            for d in 0..DEPTHS {
                let mut v = if s == 1 { d as u128 + 1 } else { 2 * term[s - 1][d] };
                for a in 1..s.saturating_sub(1) {
                    v += term[a][d] * term[s - 1 - a][d];
                }
                term[s][d] = v;
            }
        }
        for s in 1..=max_size {
            for d in (0..DEPTHS).rev() {
                let mut v = 0;
                for a in 1..s.saturating_sub(1) {
                    let b = s - 1 - a;
                    v += 6 * term[a][d] * term[b][d] + 2 * formula[a][d] * formula[b][d];
                    if d + 1 < DEPTHS {
                        v += 4 * term[a][d] * formula[b][d + 1];
                    }
                }
                formula[s][d] = v;
            }
        }
        FormulaCounts { term, formula }
    }

    /// Closed formulas (free variable x only) of exactly `size` tokens.
    pub fn formulas(&self, size: usize) -> u128 {
        self.formula[size][0]
    }

    /// A uniformly random formula of exactly `size` tokens, as a prefix.
    pub fn sample(&self, size: usize, rng: &mut impl Rng) -> Vec<Token> {
        assert!(self.formulas(size) > 0, "no formulas of size {size}");
        let mut out = Vec::with_capacity(size);
        self.sample_formula(size, 0, rng, &mut out);
        out
    }

    fn sample_term(&self, s: usize, d: usize, rng: &mut impl Rng, out: &mut Vec<Token>) {
        let mut u = rng.random_range(0..self.term[s][d]);
        if s == 1 {
            out.push(Token::Var(u as u8));
            return;
        }
        for t in [Token::Pow, Token::Sing] {
            if u < self.term[s - 1][d] {
                out.push(t);
                return self.sample_term(s - 1, d, rng, out);
            }
            u -= self.term[s - 1][d];
        }
        for a in 1..s - 1 {
            let w = self.term[a][d] * self.term[s - 1 - a][d];
            if u < w {
                out.push(Token::Cup);
                self.sample_term(a, d, rng, out);
                return self.sample_term(s - 1 - a, d, rng, out);
            }
            u -= w;
        }
        unreachable!("term weights sum to the count");
    }

    fn sample_formula(&self, s: usize, d: usize, rng: &mut impl Rng, out: &mut Vec<Token>) {
        let mut u = rng.random_range(0..self.formula[s][d]);
        for a in 1..s - 1 {
            let b = s - 1 - a;
            let pair = self.term[a][d] * self.term[b][d];
            for r in Rel::ALL {
                if u < pair {
                    out.push(Token::Rel(r));
                    self.sample_term(a, d, rng, out);
                    return self.sample_term(b, d, rng, out);
                }
                u -= pair;
            }
            let pair = self.formula[a][d] * self.formula[b][d];
            for t in [Token::Imp, Token::And] {
                if u < pair {
                    out.push(t);
                    self.sample_formula(a, d, rng, out);
                    return self.sample_formula(b, d, rng, out);
                }
                u -= pair;
            }
            if d + 1 < DEPTHS {
                let pair = self.term[a][d] * self.formula[b][d + 1];
                for q in QuantKind::ALL {
                    if u < pair {
                        out.push(Token::Quant(q));
                        self.sample_term(a, d, rng, out);
                        return self.sample_formula(b, d + 1, rng, out);
                    }
                    u -= pair;
                }
            }
        }
        unreachable!("formula weights sum to the count");
    }
}

/// Measured graph-evaluation cost of one formula size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeCost {
    pub size: usize,
    pub count: u128,
    pub samples: usize,
    pub mean_seconds: f64,
    pub omitted_fraction: f64,
}

impl SizeCost {
    /// Projected single-core seconds to evaluate every formula of this size.
    pub fn projected_seconds(&self) -> f64 {
        self.count as f64 * self.mean_seconds
    }
}

/// Times graph evaluation on `samples` uniform formulas of `size` tokens.
pub fn measure_size(counts: &FormulaCounts, size: usize, samples: usize, b: &EvalBounds, rng: &mut impl Rng) -> SizeCost {
    let mut total = 0.0;
    let mut omitted = 0;
    let mut program = Program::new(&[]);
    for _ in 0..samples {
        let tokens = counts.sample(size, rng);
        program.load(&tokens);
        let start = Instant::now();
        if program.graph(b).is_none() {
            omitted += 1;
        }
        total += start.elapsed().as_secs_f64();
    }
    SizeCost {
        size,
        count: counts.formulas(size),
        samples,
        mean_seconds: total / samples.max(1) as f64,
        omitted_fraction: omitted as f64 / samples.max(1) as f64,
    }
}

/// Text table of per-size projections and their sum.
pub fn cost_report(costs: &[SizeCost]) -> String {
    let mut out = String::from("size\tformulas\tsamples\tmean_us\tomitted_frac\tprojected_core_hours\n");
    for c in costs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.2}\t{:.3}\t{:.2}\n",
            c.size,
            c.count,
            c.samples,
            c.mean_seconds * 1e6,
            c.omitted_fraction,
            c.projected_seconds() / 3600.0
        ));
    }
    let total: f64 = costs.iter().map(SizeCost::projected_seconds).sum();
    out.push_str(&format!("total\t\t\t\t\t{:.2}\n", total / 3600.0));
    out
}
