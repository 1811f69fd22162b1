//! Model file format.
//!
//! ```text
//! offset  size  content
//! 0       4     magic b"CUPM"
//! 4       4     format version, u32 little-endian (currently 1)
//! 8       4     header length L, u32 little-endian
//! 12      L     UTF-8 JSON header
//! 12+L    ...   f32 little-endian blobs: for each parameterized layer in
//!               order, its weights (row-major) followed by its bias
//! ```
//!
//! The file must end exactly after the last blob.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Conv2d, Dense, Layer, Network};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"CUPM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerHeader {
    Dense {
        inputs: usize,
        filters: usize,
    },
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
    Softmax,
}

impl LayerHeader {
    fn describe(layer: &Layer) -> Self {
        match layer {
            Layer::Dense(d) => LayerHeader::Dense {
                inputs: d.inputs(),
                filters: d.filters(),
            },
            Layer::Conv2d(c) => {
                let (kh, kw) = c.kernel();
                LayerHeader::Conv2d {
                    in_channels: c.in_channels(),
                    filters: c.filters(),
                    kernel_h: kh,
                    kernel_w: kw,
                    stride: c.stride,
                    padding: c.padding,
                }
            }
            Layer::Relu => LayerHeader::Relu,
            Layer::MaxPool2d { window, stride } => LayerHeader::Maxpool2d {
                window: *window,
                stride: *stride,
            },
            Layer::Flatten => LayerHeader::Flatten,
            Layer::Softmax => LayerHeader::Softmax,
        }
    }
}

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let header = Header {
        input_shape: net.input_shape.clone(),
        layers: net.layers.iter().map(LayerHeader::describe).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;

    let mut out = Vec::with_capacity(12 + json.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for layer in &net.layers {
        let (w, b) = match layer {
            Layer::Dense(d) => (&d.weights, &d.bias),
            Layer::Conv2d(c) => (&c.weights, &c.bias),
            _ => continue,
        };
        for v in w.data().iter().chain(b.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_to(net: &Network, mut writer: impl Write) -> Result<()> {
    writer.write_all(&to_bytes(net)?)?;
    Ok(())
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(net)?).map_err(|e| Error::io_at(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(|e| Error::io_at(path, e))?)
}

pub fn read_from(mut reader: impl Read) -> Result<Network> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        let raw = self.take(len.checked_mul(4).ok_or_else(|| Error::Format("blob too large".into()))?, "weights")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"CUPM\"")));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = cur.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len, "header")?)
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;

    let mut layers = Vec::with_capacity(header.layers.len());
    for entry in header.layers {
        let layer = match entry {
            LayerHeader::Dense { inputs, filters } => {
                let w = cur.tensor(vec![filters, inputs])?;
                let b = cur.tensor(vec![filters])?;
                Layer::Dense(Dense::new(w, b)?)
            }
            LayerHeader::Conv2d {
                in_channels,
                filters,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let w = cur.tensor(vec![in_channels, filters, kernel_h, kernel_w])?;
                let b = cur.tensor(vec![filters])?;
                Layer::Conv2d(Conv2d::new(w, b, stride, padding)?)
            }
            LayerHeader::Relu => Layer::Relu,
            LayerHeader::Maxpool2d { window, stride } => Layer::MaxPool2d { window, stride },
            LayerHeader::Flatten => Layer::Flatten,
            LayerHeader::Softmax => Layer::Softmax,
        };
        layers.push(layer);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last blob",
            bytes.len() - cur.pos
        )));
    }
    Network::new(header.input_shape, layers)
}
