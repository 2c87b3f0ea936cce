//! Index-notation front end: parsing, dense reference evaluation and
//! lowering to block graphs.

pub mod ast;
pub mod lower;
pub mod reference;

pub use ast::{parse_einsum, Access, Assignment, Expr, ParseError, Sign};
pub use lower::{default_schedule, lower, CompiledGraph, LowerError, LowerOptions};
pub use reference::{reference_eval, var_dims, RefError};
