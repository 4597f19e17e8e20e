//! IDX datasets (MNIST layout) with checksummed provenance.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
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

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub images_path: PathBuf,
    pub labels_path: PathBuf,
    pub images_sha256: String,
    pub labels_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One sample per row, values in `[0, 1]`.
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// `(height, width)` of each image.
    pub image_dims: (usize, usize),
    pub provenance: Option<Provenance>,
}

impl Dataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        image_dims: (usize, usize),
    ) -> Result<Self> {
        let ds = Self {
            inputs,
            labels,
            num_classes,
            split,
            image_dims,
            provenance: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.nrows() != self.labels.len() {
            return Err(Error::Validation(format!(
                "{} inputs but {} labels",
                self.inputs.nrows(),
                self.labels.len()
            )));
        }
        if let Some((i, &y)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &y)| y >= self.num_classes)
        {
            return Err(Error::Validation(format!(
                "label {y} of sample {i} is outside 0..{}",
                self.num_classes
            )));
        }
        if let Some(v) = self.inputs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("input value {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// The first `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_meta()
        }
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            inputs: Array2::zeros((0, 0)),
            labels: Vec::new(),
            num_classes: self.num_classes,
            split: self.split,
            image_dims: self.image_dims,
            provenance: self.provenance.clone(),
        }
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl Reader<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.source.to_string(),
            offset,
            msg: msg.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.err(self.pos, format!("truncated while reading {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn rest(&self, len: usize, what: &str) -> Result<&[u8]> {
        let avail = self.bytes.len() - self.pos;
        if avail < len {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated {what}: expected {len} bytes, found {avail}"),
            ));
        }
        Ok(&self.bytes[self.pos..self.pos + len])
    }
}

/// Parses an unsigned-byte 3-D IDX image file; pixels are scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], source: &str) -> Result<(Array2<f64>, (usize, usize))> {
    let mut r = Reader {
        bytes,
        pos: 0,
        source,
    };
    let magic = r.u32("magic")?;
    if magic != IMAGE_MAGIC {
        return Err(r.err(
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = r.u32("image count")? as usize;
    let h = r.u32("row count")? as usize;
    let w = r.u32("column count")? as usize;
    let d = h * w;
    let data = r.rest(n * d, "pixel data")?;
    let inputs = Array2::from_shape_fn((n, d), |(i, j)| f64::from(data[i * d + j]) / 255.0);
    Ok((inputs, (h, w)))
}

/// Parses an unsigned-byte 1-D IDX label file.
pub fn parse_idx_labels(bytes: &[u8], source: &str) -> Result<Vec<usize>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        source,
    };
    let magic = r.u32("magic")?;
    if magic != LABEL_MAGIC {
        return Err(r.err(
            0,
            format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let n = r.u32("label count")? as usize;
    Ok(r.rest(n, "label data")?
        .iter()
        .map(|&b| usize::from(b))
        .collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads `{train,t10k}-{images-idx3,labels-idx1}-ubyte` from `dir`.
pub fn load_idx(dir: &Path, split: Split, num_classes: usize) -> Result<Dataset> {
    let images_path = dir.join(format!("{}-images-idx3-ubyte", split.prefix()));
    let labels_path = dir.join(format!("{}-labels-idx1-ubyte", split.prefix()));
    let ib = read(&images_path)?;
    let lb = read(&labels_path)?;
    let (inputs, image_dims) = parse_idx_images(&ib, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&lb, &labels_path.display().to_string())?;
    let mut ds = Dataset::new(inputs, labels, num_classes, split, image_dims)?;
    ds.provenance = Some(Provenance {
        images_sha256: sha256_hex(&ib),
        labels_sha256: sha256_hex(&lb),
        images_path,
        labels_path,
    });
    Ok(ds)
}

/// Serializes images in the IDX layout (used for fixtures).
pub fn encode_idx_images(pixels: &[u8], n: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    for v in [LABEL_MAGIC, labels.len() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(labels);
    out
}
