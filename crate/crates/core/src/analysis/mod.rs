//! Measurable versions of the routing claims: selection probabilities under
//! cost noise, expert-load statistics, and router overhead timing.

mod bench;
mod load;
mod normal;
mod selection;

pub use bench::{
    overhead_benchmark, write_bench_csv, BenchConfig, BenchOptions, BenchResult, BENCH_CSV_HEADER, MIN_REPETITIONS,
};
pub use load::{load_stats, LoadStats};
pub use normal::std_normal_cdf;
pub use selection::{monte_carlo_selection, selection_prob_formula, SelectionProbs};
