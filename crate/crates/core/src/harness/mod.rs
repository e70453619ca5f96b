//! Offline evaluation: traffic I/O, synthetic data, episodes, metrics,
//! experiment orchestration and the property suites.

pub mod data;
pub mod episode;
pub mod experiment;
pub mod metrics;
pub mod synth;
pub mod verify;

pub use data::{load_traffic, read_campaigns, read_traffic, write_campaigns, write_traffic, write_traffic_file, LoadOptions};
pub use episode::{plot_rows, read_episode_log, run_episode, write_episode_log, write_plot, EpisodeLogRow, EpisodeResult, PlotRow};
pub use experiment::{prepare_periods, run_experiment, run_experiment_on, synthetic_periods, ExperimentConfig, ExperimentOutput, Method, ReportRow, Setting};
pub use metrics::{compute_metrics, CampaignMetrics, MetricsReport};
pub use synth::{assumption1_check, synth_generate, SynthConfig};
pub use verify::{run_suites, SuiteReport, VerifyConfig};
