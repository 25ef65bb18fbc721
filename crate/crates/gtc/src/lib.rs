//! File formats, run directories and the command-line front end for `gtc-core`.
//!
//! Every command writes a fresh timestamped directory under `$GTC_RUNS_DIR`
//! (default `./runs`) holding the resolved config, the split, per-epoch
//! metrics, the checkpoint, a results table and plot data.

pub mod cli;
pub mod io;
pub mod runs;
