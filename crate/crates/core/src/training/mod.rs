//! Losses, metrics, optimizer, synthetic rain and the training loop.

mod loss;
mod metrics;
mod optim;
mod synth;
mod trainer;

pub use loss::{loss_total, loss_values, LossBreakdown, LossTerm, LossWeights};
pub use metrics::{luma, psnr_y, ssim_y, ssim_y_reference, SSIM_WINDOW};
pub use optim::{adam_step, cosine_lr, Adam, AdamState};
pub use synth::{synth_rain, Background, RainSample, RainSynthParams};
pub use trainer::{evaluate, train, Evaluation, LogEntry, Pair, Stage, TrainConfig, TrainReport, Trainer};
