//! Depth-adaptive LSTM with portion-gated partial state updates.
//!
//! The crate provides the gated cell and the two-layer hierarchy built
//! from it, stacked and deep-transition baselines, tape-based training with
//! a finite-difference gradient checker, sequence datasets with a
//! controllable transient ratio, and analytic effective-multiplication
//! accounting.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below are the concrete types used by the experiment pipeline.

pub mod architecture;
pub mod cells;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod scalar;
pub mod tape;
pub mod training;
pub mod tensor;

pub use architecture::{
    da_lstm_step, da_lstm_step_with, deep_transition_step, forward_sequence, forward_sequence_with, stacked_step,
    Arch, Model, ModelConfig, ModelParams, RecurrentState, StepTrace, UpdateMode,
};
pub use cells::{da_step, lstm_step, portion_gate, soft_mask, thres, CellParams, CellState, MaskConstants};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{Error, Result};
pub use metrics::{effective_mults, CostModel};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{init_params, matmul, InitScheme, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type CellParams64 = CellParams<f64>;
pub type CellState64 = CellState<f64>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type ModelParams64 = ModelParams<f64>;
