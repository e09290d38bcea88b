//! The IDX binary format used by the MNIST distribution.
//!
//! Header: two zero bytes, a type code (`0x08` = unsigned byte), the number
//! of dimensions, then one big-endian `u32` per dimension, then the payload.

use std::fs;
use std::path::Path;

use super::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const UBYTE: u8 = 0x08;

fn parse_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Validates the header and returns `(dims, payload offset)`.
fn header(bytes: &[u8], want_rank: usize) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(parse_error(bytes.len(), "file ends inside the IDX header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_error(0, "IDX magic must start with two zero bytes"));
    }
    if bytes[2] != UBYTE {
        return Err(parse_error(2, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank != want_rank {
        return Err(parse_error(3, format!("expected {want_rank} dimensions, found {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 4 + 4 * i;
        let raw = bytes
            .get(at..at + 4)
            .ok_or_else(|| parse_error(bytes.len(), "file ends inside the dimension table"))?;
        dims.push(u32::from_be_bytes(raw.try_into().expect("4 bytes")) as usize);
    }
    let start = 4 + 4 * rank;
    let need = dims.iter().product::<usize>();
    let have = bytes.len() - start;
    if have != need {
        return Err(parse_error(
            start + have.min(need),
            format!("payload holds {have} bytes, header declares {need}"),
        ));
    }
    Ok((dims, start))
}

/// Decodes an image file into `N×1×H×W` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (dims, start) = header(bytes, 3)?;
    let data = bytes[start..].iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)
}

/// Decodes a label file; every label must be below `classes`.
pub fn parse_idx_labels(bytes: &[u8], classes: usize) -> Result<Vec<usize>> {
    let (_, start) = header(bytes, 1)?;
    bytes[start..]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (b as usize) < classes {
                Ok(b as usize)
            } else {
                Err(parse_error(start + i, format!("label {b} out of range for {classes} classes")))
            }
        })
        .collect()
}

/// Loads `split` ("train" or "test") from the standard MNIST file names in
/// `dir`.
pub fn load_mnist_idx(dir: &Path, split: &str) -> Result<Dataset> {
    let prefix = match split {
        "train" => "train",
        "test" => "t10k",
        other => return Err(Error::arg(format!("unknown MNIST split `{other}`"))),
    };
    let read = |name: String| {
        let p = dir.join(&name);
        fs::read(&p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))
    };
    let images = parse_idx_images(&read(format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = parse_idx_labels(&read(format!("{prefix}-labels-idx1-ubyte"))?, 10)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::dim(format!(
            "{} images but {} labels in MNIST {split}",
            images.shape()[0],
            labels.len()
        )));
    }
    Dataset::new(images, labels, 10, split, Normalization::mnist())
}
