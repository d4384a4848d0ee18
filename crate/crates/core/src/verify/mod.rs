//! Oracles, finite differences, operation counting and benchmarks.

pub mod bench;
pub mod cost_model;
pub mod counter;
pub mod fd;
pub mod full_attention;
pub mod gradcheck;
pub mod oracle;
pub mod selftest;

pub use bench::{bench_csv, bench_point, default_grid, run_bench, BenchConfig, BenchPoint, BenchRow, Timing};
pub use cost_model::{attention_cost, cost_model, BlockCost, CostPrediction};
pub use counter::{measure, CostCounter};
pub use fd::{finite_diff_grad, max_rel_error};
pub use full_attention::{check_guard, full_attention_oracle, FULL_ATTENTION_GUARD};
pub use gradcheck::{gradcheck, gradcheck_with, Fault, GradCheckReport};
pub use selftest::{selftest, Check, SelfTestReport};
