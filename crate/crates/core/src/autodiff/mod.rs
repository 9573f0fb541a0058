//! Reverse-mode automatic differentiation, layer kernels and optimizers.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{apply_stat_updates, Graph, Mode, StatUpdate};
pub use layers::{BatchNorm, Conv1d, Linear, LstmCell, LstmState};
pub use optim::{clip_global_norm, AdamConfig, AdamState, EmaState, LrSchedule};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use tape::{Padding, Tape, Var};
pub use tensor::Tensor;
