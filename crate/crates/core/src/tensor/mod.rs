//! f64 tensors, a reverse-mode tape, gradient checking, Adam, and checkpoint
//! serialization — the numeric substrate for the encoder/decoder.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod value;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use params::{ParamStore, ParamVars};
pub use tape::{EmptyRow, Gradients, Tape, Var};
pub use value::Tensor;
