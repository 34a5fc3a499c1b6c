//! MNIST IDX ingestion, the 0–4 vs 5–9 binary task, and synthetic separable sets.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gating::GlobalContext;
use crate::linalg;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

/// One decoded IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxData {
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::MalformedIdx(format!("header ends at byte {}", bytes.len())))
}

/// Decodes an uncompressed IDX byte stream (magic 2051 for images, 2049 for labels).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_u32(bytes, 0)?;
    let ndims = match magic {
        IMAGE_MAGIC => 3,
        LABEL_MAGIC => 1,
        other => return Err(Error::MalformedIdx(format!("unknown magic number {other}"))),
    };
    let mut dims = Vec::with_capacity(ndims);
    for k in 0..ndims {
        dims.push(read_u32(bytes, 4 + 4 * k)? as usize);
    }
    let header = 4 + 4 * ndims;
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::DimensionOverflow)?;
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::MalformedIdx(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    Ok(if magic == IMAGE_MAGIC {
        IdxData::Images {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: payload.to_vec(),
        }
    } else {
        IdxData::Labels(payload.to_vec())
    })
}

/// Encodes back to the IDX container; inverse of [`parse_idx`].
pub fn write_idx(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::new();
    match data {
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => {
            out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
            for d in [count, rows, cols] {
                out.extend_from_slice(&(*d as u32).to_be_bytes());
            }
            out.extend_from_slice(pixels);
        }
        IdxData::Labels(labels) => {
            out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
        }
    }
    out
}

/// Reads an IDX file, transparently inflating gzip.
pub fn read_idx_file(path: &Path) -> Result<IdxData> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut inflated = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut inflated)?;
        parse_idx(&inflated)
    } else {
        parse_idx(&raw)
    }
}

/// Images and digit labels from a pair of IDX files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMnist {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawMnist {
    pub fn from_idx(images: IdxData, labels: IdxData) -> Result<Self> {
        let (count, rows, cols, pixels) = match images {
            IdxData::Images {
                count,
                rows,
                cols,
                pixels,
            } => (count, rows, cols, pixels),
            IdxData::Labels(_) => return Err(Error::MalformedIdx("expected an image file".into())),
        };
        let labels = match labels {
            IdxData::Labels(l) => l,
            IdxData::Images { .. } => {
                return Err(Error::MalformedIdx("expected a label file".into()))
            }
        };
        if labels.len() != count {
            return Err(Error::MalformedIdx(format!(
                "{count} images but {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::MalformedIdx(format!("label {bad} outside 0..9")));
        }
        Ok(Self {
            rows,
            cols,
            images: pixels,
            labels,
        })
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        Self::from_idx(read_idx_file(images)?, read_idx_file(labels)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn to_idx(&self) -> (IdxData, IdxData) {
        (
            IdxData::Images {
                count: self.len(),
                rows: self.rows,
                cols: self.cols,
                pixels: self.images.clone(),
            },
            IdxData::Labels(self.labels.clone()),
        )
    }
}

/// Labelled inputs, row-major `n × d`, with optional per-sample global contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    inputs: Vec<f64>,
    labels: Vec<f64>,
    contexts: Option<Vec<GlobalContext>>,
}

impl Dataset {
    pub fn new(d: usize, inputs: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if d == 0 || inputs.len() != labels.len() * d {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * d,
                got: inputs.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidShape(format!("label {bad} is not ±1")));
        }
        Ok(Self {
            d,
            inputs,
            labels,
            contexts: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn x(&self, n: usize) -> &[f64] {
        &self.inputs[n * self.d..(n + 1) * self.d]
    }

    pub fn y(&self, n: usize) -> f64 {
        self.labels[n]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn contexts(&self) -> Option<&[GlobalContext]> {
        self.contexts.as_deref()
    }

    pub fn context(&self, n: usize) -> Option<&GlobalContext> {
        self.contexts.as_ref().map(|c| &c[n])
    }

    pub fn with_contexts(mut self, contexts: Vec<GlobalContext>) -> Result<Self> {
        if contexts.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: contexts.len(),
            });
        }
        self.contexts = Some(contexts);
        Ok(self)
    }

    pub fn without_contexts(mut self) -> Self {
        self.contexts = None;
        self
    }

    /// Subset of rows in the given order, carrying contexts along.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            inputs.extend_from_slice(self.x(r));
        }
        Self {
            d: self.d,
            inputs,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            contexts: self
                .contexts
                .as_ref()
                .map(|c| rows.iter().map(|&r| c[r].clone()).collect()),
        }
    }

    /// CSV with header `row,label,feat_0..feat_{D-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "row,label")?;
        for j in 0..self.d {
            write!(w, ",feat_{j}")?;
        }
        writeln!(w)?;
        for n in 0..self.len() {
            write!(w, "{},{}", n, self.labels[n])?;
            for v in self.x(n) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Digits 0–4 are the positive class.
pub fn binary_label(digit: u8) -> f64 {
    if digit <= 4 {
        1.0
    } else {
        -1.0
    }
}

fn mnist_rows(raw: &RawMnist, idx: &[usize]) -> Dataset {
    let p = raw.pixels_per_image();
    let d = p + 1;
    let mut inputs = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        inputs.extend(raw.image(i).iter().map(|&b| b as f64 / 255.0));
        inputs.push(1.0);
    }
    let labels = idx.iter().map(|&i| binary_label(raw.labels[i])).collect();
    Dataset::new(d, inputs, labels).expect("consistent by construction")
}

/// Seeded train/validation split of the binary task. Inputs are scaled to
/// [0,1] with a constant 1 appended as the last feature.
pub fn make_binary_task(
    raw: &RawMnist,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let requested = n_train + n_val;
    if requested > raw.len() {
        return Err(Error::InsufficientSamples {
            requested,
            available: raw.len(),
        });
    }
    let mut perm: Vec<usize> = (0..raw.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        mnist_rows(raw, &perm[..n_train]),
        mnist_rows(raw, &perm[n_train..requested]),
    ))
}

/// A linearly separable set together with the unit direction that separates it.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub witness: Vec<f64>,
}

/// Gaussian points pushed off a random hyperplane through the origin so that
/// every point has geometric margin at least `margin` w.r.t. the witness.
/// Labels alternate, so classes are balanced up to one.
pub fn gen_synthetic(n: usize, d: usize, margin: f64, seed: u64) -> Synthetic {
    assert!(n >= 1 && d >= 1 && margin > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut witness: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let wn = linalg::norm2(&witness);
    if wn == 0.0 {
        witness[0] = 1.0;
    } else {
        linalg::scale(1.0 / wn, &mut witness);
    }
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = if i % 2 == 0 { 1.0 } else { -1.0 };
        let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let along = linalg::dot(&x, &witness);
        let extra: f64 = rng.sample::<f64, _>(StandardNormal).abs();
        // replace the witness component with y·(margin + |e|)
        linalg::axpy(y * (margin + extra) - along, &witness, &mut x);
        inputs.extend_from_slice(&x);
        labels.push(y);
    }
    Synthetic {
        dataset: Dataset::new(d, inputs, labels).expect("consistent by construction"),
        witness,
    }
}
