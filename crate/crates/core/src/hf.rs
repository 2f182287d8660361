//! Hereditarily finite sets under the Ackermann encoding, and the bounded
//! evaluator for terms and formulas.
//!
//! A natural number `n` denotes the set `{m : bit m of n is 1}`. All set
//! operations are therefore bit operations; the only ones that can grow a
//! value are `{t}` and `℘(t)`, and both are refused once the result would
//! exceed [`EvalBounds::max_bits`].

use std::fmt;
use std::sync::Arc;

use crate::lang::{Formula, Rel, Term, Token};

/// An arbitrary-precision natural number read as a hereditarily finite set.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct HfNat(Repr);

#[derive(Clone, PartialEq, Eq, Hash)]
enum Repr {
    Small(u64),
    /// Little-endian limbs, at least two, top limb nonzero.
    Big(Arc<[u64]>),
}

impl HfNat {
    pub const EMPTY: HfNat = HfNat(Repr::Small(0));

    pub fn from_limbs(mut limbs: Vec<u64>) -> HfNat {
        while limbs.len() > 1 && *limbs.last().unwrap() == 0 {
            limbs.pop();
        }
        match limbs.len() {
            0 => HfNat::EMPTY,
            1 => HfNat(Repr::Small(limbs[0])),
            _ => HfNat(Repr::Big(limbs.into())),
        }
    }

    pub fn limbs(&self) -> &[u64] {
        match &self.0 {
            Repr::Small(v) => std::slice::from_ref(v),
            Repr::Big(l) => l,
        }
    }

    pub fn to_u64(&self) -> Option<u64> {
        match self.0 {
            Repr::Small(v) => Some(v),
            Repr::Big(_) => None,
        }
    }

    /// Position of the highest set bit plus one; 0 for the empty set.
    pub fn bit_len(&self) -> u64 {
        let limbs = self.limbs();
        let top = *limbs.last().unwrap();
        if top == 0 {
            return 0;
        }
        (limbs.len() as u64 - 1) * 64 + (64 - top.leading_zeros() as u64)
    }

    /// Cardinality of the set.
    pub fn popcount(&self) -> u64 {
        self.limbs().iter().map(|l| l.count_ones() as u64).sum()
    }

    pub fn bit(&self, i: u64) -> bool {
        let limbs = self.limbs();
        let (word, off) = ((i / 64) as usize, i % 64);
        word < limbs.len() && limbs[word] >> off & 1 == 1
    }

    fn power_of_two(e: u64) -> HfNat {
        if e < 64 {
            return HfNat(Repr::Small(1 << e));
        }
        let mut limbs = vec![0u64; (e / 64) as usize + 1];
        limbs[(e / 64) as usize] = 1 << (e % 64);
        HfNat::from_limbs(limbs)
    }
}

impl From<u64> for HfNat {
    fn from(v: u64) -> HfNat {
        HfNat(Repr::Small(v))
    }
}

impl fmt::Debug for HfNat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for HfNat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Repr::Small(v) => write!(f, "{v}"),
            Repr::Big(limbs) => {
                write!(f, "0x{:x}", limbs.last().unwrap())?;
                for l in limbs.iter().rev().skip(1) {
                    write!(f, "{l:016x}")?;
                }
                Ok(())
            }
        }
    }
}

/// Limits beyond which evaluation is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EvalBounds {
    /// Largest bit-length any value may have.
    pub max_bits: u64,
    /// Most iterations a single quantifier may run.
    pub max_iter: u64,
    /// Most atom evaluations in one formula evaluation.
    pub fuel: u64,
}

impl Default for EvalBounds {
    fn default() -> Self {
        EvalBounds { max_bits: 65536, max_iter: 65536, fuel: 1_000_000 }
    }
}

impl EvalBounds {
    /// Largest cardinality whose subsets can all be iterated.
    fn max_submask_popcount(&self) -> u64 {
        63 - self.max_iter.leading_zeros() as u64
    }
}

/// `m ∈ n`.
pub fn mem(m: &HfNat, n: &HfNat) -> bool {
    match m.0 {
        Repr::Small(i) => n.bit(i),
        Repr::Big(_) => false,
    }
}

/// `m ⊆ n`.
pub fn subset(m: &HfNat, n: &HfNat) -> bool {
    if let (Repr::Small(a), Repr::Small(b)) = (&m.0, &n.0) {
        return a & !b == 0;
    }
    let (ml, nl) = (m.limbs(), n.limbs());
    ml.iter()
        .enumerate()
        .all(|(i, &w)| w & !nl.get(i).copied().unwrap_or(0) == 0)
}

/// `a ∪ b`.
pub fn union(a: &HfNat, b: &HfNat) -> HfNat {
    if let (Repr::Small(x), Repr::Small(y)) = (&a.0, &b.0) {
        return HfNat(Repr::Small(x | y));
    }
    let (al, bl) = (a.limbs(), b.limbs());
    let (long, short) = if al.len() >= bl.len() { (al, bl) } else { (bl, al) };
    let mut out = long.to_vec();
    for (o, s) in out.iter_mut().zip(short) {
        *o |= s;
    }
    HfNat::from_limbs(out)
}

/// `{a}`, or `None` when `2^a` would exceed the bit bound.
pub fn singleton(a: &HfNat, b: &EvalBounds) -> Option<HfNat> {
    let e = a.to_u64()?;
    if e >= b.max_bits {
        return None;
    }
    Some(HfNat::power_of_two(e))
}

/// `℘(a)` for every `a < 64`; entry i is the product over set bits j of i of `1 + 2^(2^j)`.
static SMALL_POWERSETS: [u64; 64] = {
    let mut table = [0u64; 64];
    let mut a = 0;
    while a < 64 {
        let mut acc = 0u64;
        let mut m = 0u64;
        while m < 64 {
            if m & !(a as u64) == 0 {
                acc |= 1 << m;
            }
            m += 1;
        }
        table[a] = acc;
        a += 1;
    }
    table
};

/// `℘(a)`: bit m is set exactly when m is a submask of a. `None` when the
/// result would exceed the bit bound.
pub fn powerset(a: &HfNat, b: &EvalBounds) -> Option<HfNat> {
    let a = a.to_u64()?;
    if a >= b.max_bits {
        return None;
    }
    if a < 64 {
        return Some(HfNat(Repr::Small(SMALL_POWERSETS[a as usize])));
    }
    let mut limbs = vec![0u64; (a / 64) as usize + 1];
    let mut m = 0u64;
    loop {
        limbs[(m / 64) as usize] |= 1 << (m % 64);
        if m == a {
            break;
        }
        m = ((m | !a).wrapping_add(1)) & a;
    }
    Some(HfNat::from_limbs(limbs))
}

/// Elements of `n`, ascending.
pub fn elements(n: &HfNat) -> Vec<HfNat> {
    Members::elements(n).collect()
}

/// Subsets of `n`, ascending, or `None` when there are more than `max_iter`.
pub fn submasks(n: &HfNat, b: &EvalBounds) -> Option<Vec<HfNat>> {
    Members::submasks(n, b).map(Iterator::collect)
}

/// Ascending iteration over the elements or the subsets of a value.
pub enum Members<'a> {
    SmallBits(u64),
    BigBits { limbs: &'a [u64], word: usize, rest: u64 },
    SmallSubmasks { n: u64, next: Option<u64> },
    BigSubmasks { positions: Vec<u64>, counter: u64, total: u64 },
}

impl<'a> Members<'a> {
    pub fn elements(n: &'a HfNat) -> Members<'a> {
        match &n.0 {
            Repr::Small(v) => Members::SmallBits(*v),
            Repr::Big(limbs) => Members::BigBits { limbs, word: 0, rest: limbs[0] },
        }
    }

    pub fn submasks(n: &'a HfNat, b: &EvalBounds) -> Option<Members<'a>> {
        if n.popcount() > b.max_submask_popcount() {
            return None;
        }
        Some(match n.0 {
            Repr::Small(v) => Members::SmallSubmasks { n: v, next: Some(0) },
            Repr::Big(_) => {
                let positions: Vec<u64> = Members::elements(n)
                    .map(|e| e.to_u64().expect("bit positions are small"))
                    .collect();
                let total = 1u64 << positions.len();
                Members::BigSubmasks { positions, counter: 0, total }
            }
        })
    }

    /// The number of elements or submasks that will be produced in total.
    pub fn count(n: &HfNat, subsets: bool) -> u64 {
        let p = n.popcount();
        if subsets {
            1u64.checked_shl(p as u32).unwrap_or(u64::MAX)
        } else {
            p
        }
    }
}

impl Iterator for Members<'_> {
    type Item = HfNat;

    fn next(&mut self) -> Option<HfNat> {
        match self {
            Members::SmallBits(rest) => {
                if *rest == 0 {
                    return None;
                }
                let i = rest.trailing_zeros() as u64;
                *rest &= *rest - 1;
                Some(HfNat(Repr::Small(i)))
            }
            Members::BigBits { limbs, word, rest } => loop {
                if *rest != 0 {
                    let i = rest.trailing_zeros() as u64;
                    *rest &= *rest - 1;
                    return Some(HfNat(Repr::Small(*word as u64 * 64 + i)));
                }
                *word += 1;
                if *word >= limbs.len() {
                    return None;
                }
                *rest = limbs[*word];
            },
            Members::SmallSubmasks { n, next } => {
                let m = (*next)?;
                *next = if m == *n { None } else { Some(((m | !*n).wrapping_add(1)) & *n) };
                Some(HfNat(Repr::Small(m)))
            }
            Members::BigSubmasks { positions, counter, total } => {
                if *counter >= *total {
                    return None;
                }
                // depositing counter bits into ascending positions preserves order
                let top = positions.last().copied().unwrap_or(0);
                let mut limbs = vec![0u64; (top / 64) as usize + 1];
                for (j, &p) in positions.iter().enumerate() {
                    if *counter >> j & 1 == 1 {
                        limbs[(p / 64) as usize] |= 1 << (p % 64);
                    }
                }
                *counter += 1;
                Some(HfNat::from_limbs(limbs))
            }
        }
    }
}

fn relation(r: Rel, a: &HfNat, b: &HfNat) -> bool {
    match r {
        Rel::In => mem(a, b),
        Rel::NotIn => !mem(a, b),
        Rel::Sub => subset(a, b),
        Rel::NotSub => !subset(a, b),
        Rel::Eq => a == b,
        Rel::Neq => a != b,
    }
}

/// Variable bindings: slot 0 holds `x`, slot i the value bound by the i-th
/// binder counted from the outside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Env(Vec<HfNat>);

impl Env {
    pub fn new(x: HfNat) -> Env {
        Env(vec![x])
    }

    pub fn depth(&self) -> usize {
        self.0.len() - 1
    }

    pub fn push(&mut self, v: HfNat) {
        self.0.push(v);
    }

    pub fn pop(&mut self) {
        assert!(self.0.len() > 1, "cannot pop the free variable");
        self.0.pop();
    }

    /// Value of the variable with binder index `k`.
    pub fn lookup(&self, k: u8) -> &HfNat {
        if k == 0 {
            &self.0[0]
        } else {
            &self.0[self.0.len() - k as usize]
        }
    }
}

/// Evaluates a term; `None` means a bound was exceeded.
pub fn eval_term(t: &Term, env: &Env, b: &EvalBounds) -> Option<HfNat> {
    match t {
        Term::Var(k) => Some(env.lookup(*k).clone()),
        Term::Pow(t) => powerset(&eval_term(t, env, b)?, b),
        Term::Sing(t) => singleton(&eval_term(t, env, b)?, b),
        Term::Union(l, r) => Some(union(&eval_term(l, env, b)?, &eval_term(r, env, b)?)),
    }
}

/// Evaluates a formula with a fresh fuel budget; `None` means undefined.
pub fn eval_formula(f: &Formula, env: &Env, b: &EvalBounds) -> Option<bool> {
    let mut env = env.clone();
    let mut fuel = b.fuel;
    eval_formula_with(f, &mut env, b, &mut fuel)
}

fn eval_formula_with(f: &Formula, env: &mut Env, b: &EvalBounds, fuel: &mut u64) -> Option<bool> {
    match f {
        Formula::Atom(r, l, rt) => {
            *fuel = fuel.checked_sub(1)?;
            let lv = eval_term(l, env, b)?;
            let rv = eval_term(rt, env, b)?;
            Some(relation(*r, &lv, &rv))
        }
        Formula::Imp(a, c) => {
            if !eval_formula_with(a, env, b, fuel)? {
                return Some(true);
            }
            eval_formula_with(c, env, b, fuel)
        }
        Formula::And(l, r) => {
            if !eval_formula_with(l, env, b, fuel)? {
                return Some(false);
            }
            eval_formula_with(r, env, b, fuel)
        }
        Formula::Quant(q, bound, body) => {
            let s = eval_term(bound, env, b)?;
            let members = if q.over_subsets() {
                Members::submasks(&s, b)?
            } else {
                if s.popcount() > b.max_iter {
                    return None;
                }
                Members::elements(&s)
            };
            let forall = q.is_forall();
            for y in members {
                env.push(y);
                let r = eval_formula_with(body, env, b, fuel);
                env.pop();
                if r? != forall {
                    return Some(!forall);
                }
            }
            Some(forall)
        }
    }
}

/// A complete formula flattened for repeated evaluation at many points.
///
/// Evaluation walks the prefix tokens directly; `skip[i]` is the index just
/// past the subtree rooted at `i`.
#[derive(Debug, Clone)]
pub struct Program {
    tokens: Vec<Token>,
    skip: Vec<u16>,
}

impl Program {
    /// `tokens` must be a complete formula.
    pub fn new(tokens: &[Token]) -> Program {
        let mut p = Program { tokens: Vec::new(), skip: Vec::new() };
        p.load(tokens);
        p
    }

    /// Replaces the program, reusing allocations.
    pub fn load(&mut self, tokens: &[Token]) {
        self.tokens.clear();
        self.tokens.extend_from_slice(tokens);
        self.skip.clear();
        self.skip.resize(tokens.len(), 0);
        let mut i = tokens.len();
        // children of i start at i+1; fill ends right to left
        while i > 0 {
            i -= 1;
            let end = match tokens[i].arity() {
                0 => i + 1,
                1 => self.skip[i + 1] as usize,
                _ => {
                    let second = self.skip[i + 1] as usize;
                    self.skip[second] as usize
                }
            };
            self.skip[i] = end as u16;
        }
        debug_assert_eq!(self.skip.first().copied().unwrap_or(0) as usize, tokens.len());
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Truth value at `x`, or `None` if undefined.
    pub fn eval(&self, x: &HfNat, b: &EvalBounds) -> Option<bool> {
        let mut st = FlatEval {
            p: self,
            b,
            fuel: b.fuel,
            env: Vec::with_capacity(8),
        };
        st.env.push(x.clone());
        st.formula(0)
    }

    /// Evaluates at x = 0..63; `None` if any point is undefined.
    pub fn graph(&self, b: &EvalBounds) -> Option<u64> {
        let mut mask = 0u64;
        let mut st = FlatEval { p: self, b, fuel: 0, env: Vec::with_capacity(8) };
        // high points are the likeliest to fail, so try them first
        for x in (0..64u64).rev() {
            st.fuel = b.fuel;
            st.env.clear();
            st.env.push(HfNat::from(x));
            if st.formula(0)? {
                mask |= 1 << x;
            }
        }
        Some(mask)
    }
}

struct FlatEval<'a> {
    p: &'a Program,
    b: &'a EvalBounds,
    fuel: u64,
    env: Vec<HfNat>,
}

impl FlatEval<'_> {
    fn var(&self, k: u8) -> &HfNat {
        if k == 0 {
            &self.env[0]
        } else {
            &self.env[self.env.len() - k as usize]
        }
    }

    fn term(&self, i: usize) -> Option<HfNat> {
        match self.p.tokens[i] {
            Token::Var(k) => Some(self.var(k).clone()),
            Token::Pow => powerset(&self.term(i + 1)?, self.b),
            Token::Sing => singleton(&self.term(i + 1)?, self.b),
            Token::Cup => {
                let l = self.term(i + 1)?;
                let r = self.term(self.p.skip[i + 1] as usize)?;
                Some(union(&l, &r))
            }
            _ => unreachable!("formula token in term position"),
        }
    }

    fn formula(&mut self, i: usize) -> Option<bool> {
        let second = self.p.skip[i + 1] as usize;
        match self.p.tokens[i] {
            Token::Rel(r) => {
                self.fuel = self.fuel.checked_sub(1)?;
                // fast path for variables, which dominate atoms
                if let (Token::Var(a), Token::Var(c)) = (self.p.tokens[i + 1], self.p.tokens[i + 2]) {
                    return Some(relation(r, self.var(a), self.var(c)));
                }
                let l = self.term(i + 1)?;
                let rv = self.term(second)?;
                Some(relation(r, &l, &rv))
            }
            Token::Imp => {
                if !self.formula(i + 1)? {
                    return Some(true);
                }
                self.formula(second)
            }
            Token::And => {
                if !self.formula(i + 1)? {
                    return Some(false);
                }
                self.formula(second)
            }
            Token::Quant(q) => {
                let body = second;
                let s = self.term(i + 1)?;
                let forall = q.is_forall();
                let members = if q.over_subsets() {
                    Members::submasks(&s, self.b)?
                } else {
                    if s.popcount() > self.b.max_iter {
                        return None;
                    }
                    Members::elements(&s)
                };
                for y in members {
                    self.env.push(y);
                    let r = self.formula(body);
                    self.env.pop();
                    if r? != forall {
                        return Some(!forall);
                    }
                }
                Some(forall)
            }
            _ => unreachable!("term token in formula position"),
        }
    }
}
