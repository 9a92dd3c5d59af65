//! Training, evaluation and metrics.

mod eval;
mod forecast;
mod grid;
pub mod metrics;
mod model;
mod train;

pub use eval::{evaluate, evaluate_on, EvalConfig, EvalReport, HorizonMetrics, Scored, Timings, REPORT};
pub use forecast::{fit_new_periodic, forecast_new_roads, write_forecasts};
pub use grid::{sample_std, seed_grid, GridCell, SeedGrid, SEED_GRID};
pub use metrics::{horizon_metrics, median_mae_12, metrics, Metrics};
pub use model::{embed_roads, Forecaster, Forecasts, FORECASTER_KIND};
pub use train::{read_train_log, train, write_train_log, TrainConfig, TrainOutcome, TrainRecord, TRAIN_LOG};
