//! Command surface: training runs, compression and generation, cost
//! reports, and the synthetic needle-retrieval evaluation.

pub mod commands;
mod eval;
pub mod needle;

pub use eval::{answer_needles, answer_needles_multi_turn};
