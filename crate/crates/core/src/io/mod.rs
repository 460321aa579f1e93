//! On-disk formats: ASCII PLY point clouds and binary `.dimg` depth images.

mod dimg;
mod ply;

pub use dimg::{decode_dimg, encode_dimg, read_dimg, write_dimg, DIMG_MAGIC};
pub use ply::{format_ply, parse_ply, read_ply, write_ply};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
