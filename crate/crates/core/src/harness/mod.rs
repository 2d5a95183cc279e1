//! Synthetic data, training, evaluation, gradient checks and file I/O used
//! by the `tinysep` command line tool.

pub mod attention;
pub mod eval;
pub mod gradcheck;
pub mod report;
pub mod run;
pub mod synth;
pub mod train;
pub mod wav;
