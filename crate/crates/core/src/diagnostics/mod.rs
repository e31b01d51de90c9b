//! Subspace alignment, the analytic cost model and a latency harness.

mod bench;
mod complexity;
mod spa;

pub use bench::{bench_predict, BenchConfig, BenchReport, BenchRow};
pub use complexity::{complexity_terms, crossover_samples, CostDims, CostModel, CostTerms};
pub use spa::{row_space_basis, spa_cosine, spa_profile, SpaProfile};
