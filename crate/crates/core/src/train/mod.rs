//! Objectives, optimizers and the LSI training loop.

pub mod losses;
mod lsi;
pub mod optim;

pub use lsi::{
    evaluate, evaluate_with, occupancy_std, plateaued, summed_batch, train_lsi, EpochLog, EvalStats, LatentTargets,
    LsiConfig, LsiModel, TrainReport,
};
pub(crate) use lsi::encoder_objective;
