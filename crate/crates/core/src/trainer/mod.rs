pub mod alpha;
pub mod optim;
pub mod schedule;
pub mod source;
pub mod train;

pub use alpha::{AlphaMode, AlphaState};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use schedule::{cosine_warmup_lr, CosineWarmup};
pub use source::{LocalTapSource, TapSource};
pub use train::{train_carryon, train_joint, Corpora, CurvePoint, TrainConfig, TrainReport};
