//! On-disk formats: `.flo` flow, GMT1 tensors, PNG masks and frames,
//! checkpoint directories.

mod checkpoint;
mod flo;
mod gmt;
mod mask;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, MANIFEST_FILE};
pub use flo::{read_flo, write_flo, FlowField, FLO_MAGIC};
pub use gmt::{read_gmt, write_gmt, DType, TensorFile, GMT_MAGIC};
pub use mask::{
    read_frame, read_gray_png, read_mask, read_probability_png, write_frame, write_mask,
    write_probability_png, BinaryMask, MASK_THRESHOLD,
};
