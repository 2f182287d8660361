//! Neural-guided synthesis of bounded set-theory formulas over the
//! hereditarily finite sets `0..63` (Ackermann encoding).

pub mod cost;
pub mod enumerate;
pub mod error;
pub mod hf;
pub mod lang;
pub mod mcts;
pub mod rl;
pub mod tnn;

pub use enumerate::{build_dataset, compute_graph, enumerate_formulas, graph_by_ast, Dataset, Graph};
pub use error::{Error, ParseError, Result};
pub use hf::{EvalBounds, HfNat};
pub use lang::{Formula, PartialFormula, Term, Token};
