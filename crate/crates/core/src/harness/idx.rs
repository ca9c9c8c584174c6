//! IDX (MNIST) file reading and writing.
//!
//! Big-endian header: magic `0x00000803` for 3-d unsigned-byte image arrays,
//! `0x00000801` for 1-d label arrays, followed by one `u32` per dimension and
//! then the raw bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Dataset, Sample};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(offset, "file ends inside the header"))
}

/// Returns the dimensions and the payload offset.
fn parse_header(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, usize)> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::format(
            0,
            format!("magic number {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let payload = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    let actual = bytes.len() - payload;
    if actual != expected {
        return Err(Error::format(
            payload + actual.min(expected),
            format!("payload has {actual} bytes, header announces {expected}"),
        ));
    }
    Ok((dims, payload))
}

/// Images scaled to `[0, 1]`, one feature vector per image.
pub fn parse_images(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let (dims, payload) = parse_header(bytes, IMAGES_MAGIC)?;
    let pixels = dims[1] * dims[2];
    if pixels == 0 {
        return Ok(vec![Vec::new(); dims[0]]);
    }
    Ok(bytes[payload..]
        .chunks_exact(pixels)
        .map(|img| img.iter().map(|&p| p as f64 / 255.0).collect())
        .collect())
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, payload) = parse_header(bytes, LABELS_MAGIC)?;
    bytes[payload..]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if (l as usize) < MNIST_CLASSES {
                Ok(l as usize)
            } else {
                Err(Error::format(payload + i, format!("label {l} outside 0-9")))
            }
        })
        .collect()
}

/// Loads an image/label file pair into a 10-class dataset.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let features = parse_images(&fs::read(images)?)?;
    let labels = parse_labels(&fs::read(labels)?)?;
    if features.len() != labels.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", features.len(), labels.len()),
        ));
    }
    let samples = features
        .into_iter()
        .zip(labels)
        .map(|(f, l)| Sample::new(f, l))
        .collect();
    Dataset::new(samples, MNIST_CLASSES)
}

pub fn encode_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend(IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    for img in images {
        if img.len() != rows * cols {
            return Err(Error::input("image size does not match rows * cols"));
        }
        out.extend_from_slice(img);
    }
    Ok(out)
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}
