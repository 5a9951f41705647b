//! On-disk formats: binary tensor files and checkpoints, 8-bit portable
//! pixmaps/graymaps, and line-delimited JSON records.

mod jsonl;
mod pnm;
mod tensorfile;

pub use jsonl::{read_jsonl, JsonlWriter};
pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, quantize, read_pgm, read_ppm, write_pgm, write_ppm, PnmError};
pub use tensorfile::{
    decode_tensor, encode_tensor,
    read_checkpoint, read_tensor_file, write_checkpoint, write_tensor_file, Checkpoint, FileTensor, TensorFileError,
};
