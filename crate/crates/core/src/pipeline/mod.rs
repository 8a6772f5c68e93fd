//! Model assembly, configuration, losses, metrics and training.

pub mod config;
pub mod io;
pub mod loss;
pub mod memory;
pub mod model;
pub mod scene;
pub mod suite;
pub mod train;

pub use config::{Aggregation, Dtype, LossKind, PipelineConfig, SpatialMode};
pub use io::{checkpoint_config, load_checkpoint, read_ppm, save_checkpoint, write_ppm};
pub use loss::{interior_psnr, loss, loss_var, metrics, psnr, ssim, Metrics};
pub use memory::{bench_memory, MemoryReport, MemoryRow};
pub use model::{param_summary, Architecture, ForwardPass, Model};
pub use scene::{translating_squares, Background, RenderedScene, Shape, Sprite, SyntheticScene};
pub use train::{examples_from_scene, train, Example, StepRecord, TrainReport};
