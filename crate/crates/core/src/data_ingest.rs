//! IDX file readers for MNIST-style datasets.
//!
//! Images: big-endian magic `0x00000803`, then `N`, `rows`, `cols` as
//! big-endian `u32`, then `N·rows·cols` unsigned bytes. Labels: magic
//! `0x00000801`, `N`, then `N` bytes. Pixels are scaled to `[0, 1]`;
//! standardization is left to the caller.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::trainer::Dataset;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated {what} header: {} bytes", bytes.len())))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = read_u32(bytes, 0, what)?;
    if magic != expected {
        let hint = match magic {
            IMAGE_MAGIC => " (this is an image file)",
            LABEL_MAGIC => " (this is a label file)",
            _ => "",
        };
        return Err(Error::Format(format!(
            "{what} file has magic {magic:#010x}, expected {expected:#010x}{hint}"
        )));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let body = &bytes[header..];
    match body.len().cmp(&len) {
        std::cmp::Ordering::Less => Err(Error::Format(format!(
            "truncated {what} payload: expected {len} bytes, found {}",
            body.len()
        ))),
        std::cmp::Ordering::Greater => Err(Error::Format(format!(
            "{what} payload has {} bytes beyond the {len} declared",
            body.len() - len
        ))),
        std::cmp::Ordering::Equal => Ok(body),
    }
}

/// Parses an IDX image file into an `N × rows × cols` tensor in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IMAGE_MAGIC, "image")?;
    let n = read_u32(bytes, 4, "image")? as usize;
    let rows = read_u32(bytes, 8, "image")? as usize;
    let cols = read_u32(bytes, 12, "image")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!("image dimensions {rows}×{cols} are empty")));
    }
    let len = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Dimension(format!("{n}×{rows}×{cols} images overflow")))?;
    let body = payload(bytes, 16, len, "image")?;
    Tensor::new(vec![n, rows, cols], body.iter().map(|&b| f32::from(b) / 255.0).collect())
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABEL_MAGIC, "label")?;
    let n = read_u32(bytes, 4, "label")? as usize;
    Ok(payload(bytes, 8, n, "label")?.iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    parse_idx_images(&read(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    parse_idx_labels(&read(path.as_ref())?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io_at(path, e))
}

/// Pairs an image file with a label file.
pub fn load_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>, classes: usize) -> Result<Dataset> {
    let images = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Pairing(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    Dataset::new(images, labels, classes)
}

/// Finds `<prefix>-images-idx3-ubyte` (or the `.idx3-ubyte` spelling) in `dir`.
pub fn mnist_paths(dir: impl AsRef<Path>, split: Split) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let find = |kind: &str, dims: &str| {
        let candidates = [
            format!("{}-{kind}-{dims}-ubyte", split.prefix()),
            format!("{}-{kind}.{dims}-ubyte", split.prefix()),
        ];
        candidates
            .iter()
            .map(|name| dir.join(name))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("no {} in {}", candidates[0], dir.display()),
                ))
            })
    };
    Ok((find("images", "idx3")?, find("labels", "idx1")?))
}

/// Loads one MNIST split with pixels in `[0, 1]`, shaped `N × 28 × 28`.
pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split)?;
    load_dataset(images, labels, MNIST_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IMAGE_MAGIC.to_be_bytes().to_vec();
        for v in [n, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend(pixels);
        b
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut b = LABEL_MAGIC.to_be_bytes().to_vec();
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn two_image_fixture() {
        let bytes = [
            0x00, 0x00, 0x08, 0x03, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x02, //
            0, 255, 51, 102, //
            255, 0, 1, 254,
        ];
        let t = parse_idx_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.4, 1.0, 0.0, 1.0 / 255.0, 254.0 / 255.0]);
    }

    #[test]
    fn three_label_fixture() {
        let bytes = [0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x03, 7, 0, 9];
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![7, 0, 9]);
        assert_eq!(parse_idx_labels(&label_file(&[7, 0, 9])).unwrap(), vec![7, 0, 9]);
    }

    #[test]
    fn multi_byte_counts_are_big_endian() {
        let labels: Vec<u8> = (0..300).map(|i| (i % 10) as u8).collect();
        let bytes = label_file(&labels);
        assert_eq!(&bytes[4..8], &[0x00, 0x00, 0x01, 0x2c]);
        let parsed = parse_idx_labels(&bytes).unwrap();
        assert_eq!(parsed.len(), 300);
        assert_eq!(parsed[299], 9);

        let pixels: Vec<u8> = (0..300).map(|i| (i % 256) as u8).collect();
        let t = parse_idx_images(&image_file(300, 1, 1, &pixels)).unwrap();
        assert_eq!(t.shape(), &[300, 1, 1]);
        assert_eq!(t.data()[256], 0.0);
        assert_eq!(t.data()[255], 1.0);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let good = image_file(2, 2, 2, &[0; 8]);
        assert!(matches!(parse_idx_images(&good[..good.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&good[..10]), Err(Error::Format(_))));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(parse_idx_images(&long), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&image_file(1, 0, 2, &[])), Err(Error::Dimension(_))));

        let err = parse_idx_labels(&good).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("image file"), "{err}");
        assert!(parse_idx_images(&label_file(&[1])).is_err());
        assert!(matches!(parse_idx_labels(&label_file(&[1, 2])[..9]), Err(Error::Format(_))));
    }

    #[test]
    fn files_pair_up() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train-images-idx3-ubyte"), image_file(2, 1, 2, &[0, 1, 2, 3])).unwrap();
        fs::write(dir.path().join("train-labels.idx1-ubyte"), label_file(&[3, 4])).unwrap();
        let data = load_mnist(dir.path(), Split::Train).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.labels(), &[3, 4]);
        assert!(load_mnist(dir.path(), Split::Test).is_err());

        fs::write(dir.path().join("train-labels.idx1-ubyte"), label_file(&[3, 4, 5])).unwrap();
        assert!(matches!(load_mnist(dir.path(), Split::Train), Err(Error::Pairing(_))));
    }
}
