//! Numeric engine: tape, parameters, Adam, gradient checks, checkpoints.

mod adam;
mod checkpoint;
mod gradcheck;
mod params;
mod tape;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use params::{ParamId, ParamStore};
pub use tape::{Axis, CustomOp, Gradients, Tape, Var};

pub(crate) use tape::{bce_row, stable_sigmoid};
