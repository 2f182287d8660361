//! Terms, formulas, prefix tokens and the left-to-right completion engine.
//!
//! Variables use binder-depth indices: `Var(0)` is always the free variable
//! `x`, and `Var(k)` for `k >= 1` is the k-th enclosing quantifier counted
//! from the innermost one outwards.

use std::fmt;
use std::str::FromStr;

use crate::error::ParseError;

/// Maximum number of nested binders a formula may open.
pub const MAX_DEPTH: u8 = 6;

/// Number of distinct tokens; also the width of the policy head.
pub const VOCAB_SIZE: usize = 15 + MAX_DEPTH as usize + 1;

/// Atomic relations, in token order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rel {
    In,
    NotIn,
    Sub,
    NotSub,
    Eq,
    Neq,
}

impl Rel {
    pub const ALL: [Rel; 6] = [Rel::In, Rel::NotIn, Rel::Sub, Rel::NotSub, Rel::Eq, Rel::Neq];
}

/// The four bounded quantifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QuantKind {
    /// `∀y∈s`
    ForallElem,
    /// `∃y∈s`
    ExistsElem,
    /// `∀y⊆s`
    ForallSub,
    /// `∃y⊆s`
    ExistsSub,
}

impl QuantKind {
    pub const ALL: [QuantKind; 4] = [
        QuantKind::ForallElem,
        QuantKind::ExistsElem,
        QuantKind::ForallSub,
        QuantKind::ExistsSub,
    ];

    pub fn is_forall(self) -> bool {
        matches!(self, QuantKind::ForallElem | QuantKind::ForallSub)
    }

    pub fn over_subsets(self) -> bool {
        matches!(self, QuantKind::ForallSub | QuantKind::ExistsSub)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Var(u8),
    Pow(Box<Term>),
    Sing(Box<Term>),
    Union(Box<Term>, Box<Term>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Formula {
    Atom(Rel, Term, Term),
    Imp(Box<Formula>, Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Quant(QuantKind, Term, Box<Formula>),
}

/// One prefix token. The derived ordering is the canonical token order used
/// for lexicographic enumeration and for policy indexing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Token {
    Rel(Rel),
    Imp,
    And,
    Quant(QuantKind),
    Pow,
    Sing,
    Cup,
    Var(u8),
}

/// Syntactic category of an unfilled argument position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HoleKind {
    Term,
    Formula,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Hole {
    pub kind: HoleKind,
    /// Number of binders enclosing the hole.
    pub depth: u8,
}

impl Hole {
    fn cost(self) -> usize {
        match self.kind {
            HoleKind::Term => 1,
            HoleKind::Formula => 3,
        }
    }
}

impl Token {
    /// Every token in canonical order.
    pub fn all() -> impl Iterator<Item = Token> {
        (0..VOCAB_SIZE).map(Token::from_index)
    }

    pub fn index(self) -> usize {
        match self {
            Token::Rel(r) => r as usize,
            Token::Imp => 6,
            Token::And => 7,
            Token::Quant(q) => 8 + q as usize,
            Token::Pow => 12,
            Token::Sing => 13,
            Token::Cup => 14,
            Token::Var(k) => 15 + k as usize,
        }
    }

    /// Inverse of [`Token::index`]. Panics on an index outside the vocabulary.
    pub fn from_index(i: usize) -> Token {
        match i {
            0..=5 => Token::Rel(Rel::ALL[i]),
            6 => Token::Imp,
            7 => Token::And,
            8..=11 => Token::Quant(QuantKind::ALL[i - 8]),
            12 => Token::Pow,
            13 => Token::Sing,
            14 => Token::Cup,
            _ if i < VOCAB_SIZE => Token::Var((i - 15) as u8),
            _ => panic!("token index {i} outside vocabulary"),
        }
    }

    /// The category of hole this token fills.
    pub fn category(self) -> HoleKind {
        match self {
            Token::Rel(_) | Token::Imp | Token::And | Token::Quant(_) => HoleKind::Formula,
            Token::Pow | Token::Sing | Token::Cup | Token::Var(_) => HoleKind::Term,
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Token::Var(_) => 0,
            Token::Pow | Token::Sing => 1,
            _ => 2,
        }
    }

    /// Argument holes opened by this token when it fills a hole at `depth`,
    /// left to right.
    fn args(self, depth: u8) -> ([Option<Hole>; 2], usize) {
        let term = Hole { kind: HoleKind::Term, depth };
        let formula = Hole { kind: HoleKind::Formula, depth };
        match self {
            Token::Rel(_) => ([Some(term), Some(term)], 2),
            Token::Imp | Token::And => ([Some(formula), Some(formula)], 6),
            Token::Quant(_) => (
                [Some(term), Some(Hole { kind: HoleKind::Formula, depth: depth + 1 })],
                4,
            ),
            Token::Pow | Token::Sing => ([Some(term), None], 1),
            Token::Cup => ([Some(term), Some(term)], 2),
            Token::Var(_) => ([None, None], 0),
        }
    }

    pub fn tag(self) -> String {
        match self {
            Token::Var(0) => "x".to_string(),
            Token::Var(k) => format!("v{k}"),
            other => other.static_tag().to_string(),
        }
    }

    fn static_tag(self) -> &'static str {
        match self {
            Token::Rel(Rel::In) => "in",
            Token::Rel(Rel::NotIn) => "notin",
            Token::Rel(Rel::Sub) => "sub",
            Token::Rel(Rel::NotSub) => "notsub",
            Token::Rel(Rel::Eq) => "eq",
            Token::Rel(Rel::Neq) => "neq",
            Token::Imp => "imp",
            Token::And => "and",
            Token::Quant(QuantKind::ForallElem) => "fae",
            Token::Quant(QuantKind::ExistsElem) => "exe",
            Token::Quant(QuantKind::ForallSub) => "fas",
            Token::Quant(QuantKind::ExistsSub) => "exs",
            Token::Pow => "pow",
            Token::Sing => "sing",
            Token::Cup => "cup",
            Token::Var(_) => "var",
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Var(0) => f.write_str("x"),
            Token::Var(k) => write!(f, "v{k}"),
            other => f.write_str(other.static_tag()),
        }
    }
}

impl FromStr for Token {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Token, ParseError> {
        if s == "x" {
            return Ok(Token::Var(0));
        }
        if let Some(k) = s.strip_prefix('v') {
            return match k.parse::<u8>() {
                Ok(k) if (1..=MAX_DEPTH).contains(&k) => Ok(Token::Var(k)),
                _ => Err(ParseError::UnknownToken(s.to_string())),
            };
        }
        Token::all()
            .find(|t| !matches!(t, Token::Var(_)) && t.static_tag() == s)
            .ok_or_else(|| ParseError::UnknownToken(s.to_string()))
    }
}

/// Parses whitespace-separated token tags.
pub fn parse_tokens(text: &str) -> Result<Vec<Token>, ParseError> {
    text.split_whitespace().map(str::parse).collect()
}

/// Renders tokens in the textual prefix format.
pub fn tokens_to_string(tokens: &[Token]) -> String {
    let mut out = String::with_capacity(tokens.len() * 4);
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&t.to_string());
    }
    out
}

impl Term {
    pub fn size(&self) -> usize {
        match self {
            Term::Var(_) => 1,
            Term::Pow(t) | Term::Sing(t) => 1 + t.size(),
            Term::Union(a, b) => 1 + a.size() + b.size(),
        }
    }

    fn write_prefix(&self, out: &mut Vec<Token>) {
        match self {
            Term::Var(k) => out.push(Token::Var(*k)),
            Term::Pow(t) => {
                out.push(Token::Pow);
                t.write_prefix(out);
            }
            Term::Sing(t) => {
                out.push(Token::Sing);
                t.write_prefix(out);
            }
            Term::Union(a, b) => {
                out.push(Token::Cup);
                a.write_prefix(out);
                b.write_prefix(out);
            }
        }
    }

    /// Largest variable index occurring in the term.
    pub fn max_var(&self) -> u8 {
        match self {
            Term::Var(k) => *k,
            Term::Pow(t) | Term::Sing(t) => t.max_var(),
            Term::Union(a, b) => a.max_var().max(b.max_var()),
        }
    }
}

impl Formula {
    /// Number of prefix tokens.
    pub fn size(&self) -> usize {
        match self {
            Formula::Atom(_, a, b) => 1 + a.size() + b.size(),
            Formula::Imp(a, b) | Formula::And(a, b) => 1 + a.size() + b.size(),
            Formula::Quant(_, t, body) => 1 + t.size() + body.size(),
        }
    }

    pub fn to_prefix(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(16);
        self.write_prefix(&mut out);
        out
    }

    fn write_prefix(&self, out: &mut Vec<Token>) {
        match self {
            Formula::Atom(r, a, b) => {
                out.push(Token::Rel(*r));
                a.write_prefix(out);
                b.write_prefix(out);
            }
            Formula::Imp(a, b) => {
                out.push(Token::Imp);
                a.write_prefix(out);
                b.write_prefix(out);
            }
            Formula::And(a, b) => {
                out.push(Token::And);
                a.write_prefix(out);
                b.write_prefix(out);
            }
            Formula::Quant(q, t, body) => {
                out.push(Token::Quant(*q));
                t.write_prefix(out);
                body.write_prefix(out);
            }
        }
    }

    /// Parses a complete formula from its prefix tokens.
    pub fn from_prefix(tokens: &[Token]) -> Result<Formula, ParseError> {
        let partial = PartialFormula::from_tokens(tokens)?;
        partial.to_formula()
    }

    /// Infix rendering with named binders: `x`, then `y`, `z`, `v3`, ...
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        pretty_formula(self, 0, false, &mut out);
        out
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pretty())
    }
}

fn binder_name(level: u8) -> String {
    match level {
        0 => "x".to_string(),
        1 => "y".to_string(),
        2 => "z".to_string(),
        l => format!("v{l}"),
    }
}

fn pretty_term(t: &Term, depth: u8, out: &mut String) {
    match t {
        // index k at depth d names the binder opened at level d - k + 1
        Term::Var(0) => out.push('x'),
        Term::Var(k) => out.push_str(&binder_name(depth + 1 - k)),
        Term::Pow(t) => {
            out.push_str("℘(");
            pretty_term(t, depth, out);
            out.push(')');
        }
        Term::Sing(t) => {
            out.push('{');
            pretty_term(t, depth, out);
            out.push('}');
        }
        Term::Union(a, b) => {
            out.push('(');
            pretty_term(a, depth, out);
            out.push_str(" ∪ ");
            pretty_term(b, depth, out);
            out.push(')');
        }
    }
}

fn pretty_formula(f: &Formula, depth: u8, nested: bool, out: &mut String) {
    match f {
        Formula::Atom(r, a, b) => {
            pretty_term(a, depth, out);
            out.push_str(match r {
                Rel::In => " ∈ ",
                Rel::NotIn => " ∉ ",
                Rel::Sub => " ⊆ ",
                Rel::NotSub => " ⊄ ",
                Rel::Eq => " = ",
                Rel::Neq => " ≠ ",
            });
            pretty_term(b, depth, out);
        }
        Formula::Imp(a, b) | Formula::And(a, b) => {
            out.push('(');
            pretty_formula(a, depth, true, out);
            out.push_str(if matches!(f, Formula::Imp(..)) { " → " } else { " ∧ " });
            pretty_formula(b, depth, true, out);
            out.push(')');
        }
        Formula::Quant(q, t, body) => {
            if nested {
                out.push('(');
            }
            out.push(if q.is_forall() { '∀' } else { '∃' });
            out.push_str(&binder_name(depth + 1));
            out.push(if q.over_subsets() { '⊆' } else { '∈' });
            pretty_term(t, depth, out);
            out.push_str(". ");
            pretty_formula(body, depth + 1, false, out);
            if nested {
                out.push(')');
            }
        }
    }
}

/// A prefix token sequence together with its pending holes.
///
/// `holes` is kept as a stack whose top is the leftmost hole, so the next
/// token always fills `holes.last()`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PartialFormula {
    tokens: Vec<Token>,
    holes: Vec<Hole>,
    min_completion: usize,
}

impl Default for PartialFormula {
    fn default() -> Self {
        PartialFormula::new()
    }
}

impl PartialFormula {
    /// The empty prefix: a single formula hole at depth 0.
    pub fn new() -> PartialFormula {
        PartialFormula {
            tokens: Vec::new(),
            holes: vec![Hole { kind: HoleKind::Formula, depth: 0 }],
            min_completion: 3,
        }
    }

    pub fn from_tokens(tokens: &[Token]) -> Result<PartialFormula, ParseError> {
        let mut p = PartialFormula::new();
        for (i, &t) in tokens.iter().enumerate() {
            if !p.accepts(t) {
                return Err(ParseError::IllegalToken(i));
            }
            p.push_unchecked(t);
        }
        Ok(p)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Pending holes, leftmost first.
    pub fn holes(&self) -> impl Iterator<Item = Hole> + '_ {
        self.holes.iter().rev().copied()
    }

    pub fn next_hole(&self) -> Option<Hole> {
        self.holes.last().copied()
    }

    pub fn is_complete(&self) -> bool {
        self.holes.is_empty()
    }

    /// Fewest extra tokens needed to finish the formula.
    pub fn min_completion_size(&self) -> usize {
        self.min_completion
    }

    /// Whether `t` may fill the leftmost hole, ignoring any size budget.
    pub fn accepts(&self, t: Token) -> bool {
        let Some(hole) = self.next_hole() else {
            return false;
        };
        if t.category() != hole.kind {
            return false;
        }
        match t {
            Token::Var(k) => k <= hole.depth,
            Token::Quant(_) => hole.depth < MAX_DEPTH,
            _ => true,
        }
    }

    /// Minimum completion size after appending `t` (which must be accepted).
    fn min_completion_after(&self, t: Token) -> usize {
        let hole = self.holes.last().expect("incomplete");
        self.min_completion - hole.cost() + t.args(hole.depth).1
    }

    /// Appends `t`, failing if it cannot fill the leftmost hole.
    pub fn push(&mut self, t: Token) -> Result<(), ParseError> {
        if !self.accepts(t) {
            return Err(ParseError::IllegalToken(self.tokens.len()));
        }
        self.push_unchecked(t);
        Ok(())
    }

    pub fn with(&self, t: Token) -> Result<PartialFormula, ParseError> {
        let mut next = self.clone();
        next.push(t)?;
        Ok(next)
    }

    fn push_unchecked(&mut self, t: Token) {
        let hole = self.holes.pop().expect("accepted token implies a hole");
        let (args, cost) = t.args(hole.depth);
        self.min_completion = self.min_completion - hole.cost() + cost;
        for arg in args.iter().rev().flatten() {
            self.holes.push(*arg);
        }
        self.tokens.push(t);
    }

    /// Tokens that keep the prefix completable within `remaining_budget`
    /// further tokens, in canonical order.
    pub fn legal_next_tokens(&self, remaining_budget: usize) -> Vec<Token> {
        let mask = self.legal_mask(remaining_budget);
        (0..VOCAB_SIZE)
            .filter(|i| mask & (1 << i) != 0)
            .map(Token::from_index)
            .collect()
    }

    /// Bitmask form of [`PartialFormula::legal_next_tokens`], bit i = token index i.
    pub fn legal_mask(&self, remaining_budget: usize) -> u32 {
        let Some(hole) = self.next_hole() else {
            return 0;
        };
        let candidates: &[usize] = match hole.kind {
            HoleKind::Formula => &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],
            HoleKind::Term => &[12, 13, 14, 15, 16, 17, 18, 19, 20, 21],
        };
        let mut mask = 0u32;
        for &i in candidates {
            let t = Token::from_index(i);
            if self.accepts(t) && self.min_completion_after(t) < remaining_budget {
                mask |= 1 << i;
            }
        }
        mask
    }

    pub fn to_formula(&self) -> Result<Formula, ParseError> {
        if !self.is_complete() {
            return Err(ParseError::Incomplete);
        }
        let mut pos = 0;
        let f = build_formula(&self.tokens, &mut pos);
        debug_assert_eq!(pos, self.tokens.len());
        Ok(f)
    }
}

impl fmt::Display for PartialFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&tokens_to_string(&self.tokens))
    }
}

// Callers guarantee a complete, well-formed prefix.
fn build_term(tokens: &[Token], pos: &mut usize) -> Term {
    let t = tokens[*pos];
    *pos += 1;
    match t {
        Token::Var(k) => Term::Var(k),
        Token::Pow => Term::Pow(Box::new(build_term(tokens, pos))),
        Token::Sing => Term::Sing(Box::new(build_term(tokens, pos))),
        Token::Cup => {
            let a = build_term(tokens, pos);
            let b = build_term(tokens, pos);
            Term::Union(Box::new(a), Box::new(b))
        }
        _ => unreachable!("formula token in term position"),
    }
}

fn build_formula(tokens: &[Token], pos: &mut usize) -> Formula {
    let t = tokens[*pos];
    *pos += 1;
    match t {
        Token::Rel(r) => {
            let a = build_term(tokens, pos);
            let b = build_term(tokens, pos);
            Formula::Atom(r, a, b)
        }
        Token::Imp | Token::And => {
            let a = Box::new(build_formula(tokens, pos));
            let b = Box::new(build_formula(tokens, pos));
            if t == Token::Imp {
                Formula::Imp(a, b)
            } else {
                Formula::And(a, b)
            }
        }
        Token::Quant(q) => {
            let bound = build_term(tokens, pos);
            let body = build_formula(tokens, pos);
            Formula::Quant(q, bound, Box::new(body))
        }
        _ => unreachable!("term token in formula position"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Token> {
        parse_tokens(s).unwrap()
    }

    fn x() -> Term {
        Term::Var(0)
    }

    #[test]
    fn sizes() {
        assert_eq!(Formula::Atom(Rel::In, x(), x()).size(), 3);
        let psi = Formula::Quant(
            QuantKind::ExistsElem,
            x(),
            Box::new(Formula::Atom(Rel::Neq, Term::Sing(Box::new(Term::Var(1))), x())),
        );
        assert_eq!(psi.size(), 6);
        let phi = Formula::Quant(
            QuantKind::ExistsElem,
            x(),
            Box::new(Formula::Atom(Rel::NotSub, x(), Term::Pow(Box::new(Term::Var(1))))),
        );
        assert_eq!(phi.size(), 6);
        assert_eq!(tokens_to_string(&psi.to_prefix()), "exe x neq sing v1 x");
    }

    #[test]
    fn prefix_of_small_atoms() {
        assert_eq!(Formula::Atom(Rel::In, x(), x()).to_prefix(), toks("in x x"));
        assert_eq!(Formula::Atom(Rel::Eq, x(), x()).to_prefix(), toks("eq x x"));
    }

    #[test]
    fn token_order_and_index() {
        let all: Vec<Token> = Token::all().collect();
        assert_eq!(all.len(), VOCAB_SIZE);
        assert_eq!(VOCAB_SIZE, 22);
        for w in all.windows(2) {
            assert!(w[0] < w[1]);
        }
        for (i, t) in all.iter().enumerate() {
            assert_eq!(t.index(), i);
            assert_eq!(t.to_string().parse::<Token>().unwrap(), *t);
        }
        assert!("v7".parse::<Token>().is_err());
        assert!("v0".parse::<Token>().is_err());
        assert!("foo".parse::<Token>().is_err());
    }

    #[test]
    fn parse_partial() {
        let p = PartialFormula::from_tokens(&toks("exe x")).unwrap();
        let holes: Vec<Hole> = p.holes().collect();
        assert_eq!(holes, vec![Hole { kind: HoleKind::Formula, depth: 1 }]);
        assert_eq!(p.min_completion_size(), 3);

        let p = PartialFormula::from_tokens(&toks("in x x")).unwrap();
        assert!(p.is_complete());
        assert_eq!(p.min_completion_size(), 0);
        assert_eq!(p.to_formula().unwrap(), Formula::Atom(Rel::In, x(), x()));

        assert_eq!(
            PartialFormula::from_tokens(&toks("in v2")),
            Err(ParseError::IllegalToken(1))
        );
        assert_eq!(
            PartialFormula::from_tokens(&toks("x")),
            Err(ParseError::IllegalToken(0))
        );
        assert_eq!(
            PartialFormula::from_tokens(&toks("in x x x")),
            Err(ParseError::IllegalToken(3))
        );
        assert_eq!(PartialFormula::from_tokens(&toks("and")).unwrap().min_completion_size(), 6);
    }

    #[test]
    fn legal_tokens_examples() {
        let empty = PartialFormula::new();
        let legal = empty.legal_next_tokens(3);
        assert_eq!(legal, Rel::ALL.iter().map(|&r| Token::Rel(r)).collect::<Vec<_>>());

        let p = PartialFormula::from_tokens(&toks("in")).unwrap();
        assert_eq!(p.legal_next_tokens(2), vec![Token::Var(0)]);

        let p = PartialFormula::from_tokens(&toks("exe x")).unwrap();
        let legal = p.legal_next_tokens(3);
        assert_eq!(legal.len(), 6);
        let p = p.with(Token::Rel(Rel::In)).unwrap();
        assert_eq!(p.legal_next_tokens(2), vec![Token::Var(0), Token::Var(1)]);
        assert!(p.legal_next_tokens(0).is_empty());
    }

    #[test]
    fn quantifiers_respect_max_depth() {
        let mut p = PartialFormula::new();
        for _ in 0..MAX_DEPTH {
            p.push(Token::Quant(QuantKind::ExistsElem)).unwrap();
            p.push(Token::Var(0)).unwrap();
        }
        assert!(!p.accepts(Token::Quant(QuantKind::ForallSub)));
        assert!(p.accepts(Token::Rel(Rel::In)));
        p.push(Token::Rel(Rel::In)).unwrap();
        assert!(p.accepts(Token::Var(MAX_DEPTH)));
    }

    #[test]
    fn pretty_printing() {
        let f = |s: &str| Formula::from_prefix(&toks(s)).unwrap().pretty();
        assert_eq!(f("in x x"), "x ∈ x");
        assert_eq!(f("exe x neq sing v1 x"), "∃y∈x. {y} ≠ x");
        assert_eq!(f("exe x notsub x pow v1"), "∃y∈x. x ⊄ ℘(y)");
        assert_eq!(f("fas x exe v1 in v2 v1"), "∀y⊆x. ∃z∈y. y ∈ z");
        assert_eq!(f("imp in x x and sub x x eq x cup x x"), "(x ∈ x → (x ⊆ x ∧ x = (x ∪ x)))");
        assert_eq!(f("and exe x in v1 x sub x x"), "((∃y∈x. y ∈ x) ∧ x ⊆ x)");
    }

    /// Enumerates every token sequence reachable by legal moves under `budget`.
    fn walk(p: &PartialFormula, budget: usize, out: &mut Vec<Vec<Token>>) {
        if p.is_complete() {
            out.push(p.tokens().to_vec());
            return;
        }
        let legal = p.legal_next_tokens(budget - p.len());
        assert!(!legal.is_empty(), "dead end at {p}");
        for t in legal {
            walk(&p.with(t).unwrap(), budget, out);
        }
    }

    /// Exhaustively checks legality against a brute-force completability test.
    fn completable_within(p: &PartialFormula, budget: usize) -> bool {
        if p.is_complete() {
            return p.len() <= budget;
        }
        if p.len() >= budget {
            return false;
        }
        Token::all().any(|t| p.accepts(t) && completable_within(&p.with(t).unwrap(), budget))
    }

    #[test]
    fn legal_moves_are_exactly_completable_moves() {
        for budget in 3..=8 {
            let mut stack = vec![PartialFormula::new()];
            while let Some(p) = stack.pop() {
                if p.is_complete() {
                    continue;
                }
                let legal = p.legal_next_tokens(budget - p.len());
                for t in Token::all() {
                    let brute = p.accepts(t) && completable_within(&p.with(t).unwrap(), budget);
                    assert_eq!(legal.contains(&t), brute, "budget {budget} at {p} token {t}");
                }
                stack.extend(legal.into_iter().map(|t| p.with(t).unwrap()));
            }
        }
    }

    #[test]
    fn legal_walks_terminate_within_budget() {
        for budget in 3..=7 {
            let mut out = Vec::new();
            walk(&PartialFormula::new(), budget, &mut out);
            for seq in &out {
                assert!(seq.len() <= budget);
                let f = Formula::from_prefix(seq).unwrap();
                assert_eq!(f.to_prefix(), *seq);
                assert_eq!(f.size(), seq.len());
                // prefix-free: no proper prefix is complete
                for k in 1..seq.len() {
                    assert!(!PartialFormula::from_tokens(&seq[..k]).unwrap().is_complete());
                }
            }
        }
    }
}
