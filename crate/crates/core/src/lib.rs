//! Recurrent cells with Beta-distributed gates built from Gamma draws,
//! their baselines, and the tooling to train and inspect them.

pub mod cells;
pub mod check;
pub mod data;
pub mod diagnostics;
pub mod objectives;
pub mod run;
pub mod special;
pub mod stochastic;
pub mod tape;
