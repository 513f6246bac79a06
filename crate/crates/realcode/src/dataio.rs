//! Dataset ingestion, checkpoint persistence, and experiment-result output.
//!
//! Three file formats live here.
//!
//! **IDX** (read and write): the big-endian container MNIST ships in. Images
//! are `u32` magic `0x00000803`, `u32` count, `u32` rows, `u32` cols, then
//! `count*rows*cols` unsigned bytes; labels are magic `0x00000801`, `u32`
//! count, then `count` bytes. Pixels load as `byte / 255.0`, so a loaded
//! dataset re-serializes to the exact original bytes.
//!
//! **RNEC checkpoints** (version 1): a binary model snapshot that stores
//! constraint *specs*, never constraint matrices — the constraints
//! regenerate from their seed on load, so an encoded checkpoint is only a
//! few bytes larger than a plain one. Layout, integers little-endian,
//! floats as raw IEEE-754 bits:
//!
//! ```text
//! "RNEC"  version:u32  layer_count:u32
//! per layer:
//!   rows:u32  cols:u32  weights:f64[rows*cols] (row-major)
//!   bias_len:u32  bias:f64[bias_len]
//!   has_spec:u8
//!   spec (if flagged): seed:u64  num_general:u32  group_size:u32 (0 = one
//!     group)  shape_rows:u32  shape_cols:u32  row_constraint_count:u32
//!     tags:u8[count]
//! trailer:
//!   prng_id_len:u32  prng_id:utf8  activation_tag:u8  leaky_slope:f64
//! ```
//!
//! The trailer's PRNG identifier guards regeneration: a checkpoint written
//! under a different generator cannot silently rebuild different
//! constraints. Round trips are bit-exact on every float and every spec
//! field.
//!
//! **Results CSV**: header plus rows, UTF-8, LF line endings, `.` decimal
//! separator — the stable interface plotting scripts consume.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::codec::{CodecError, ConstraintSpec, RowConstraintKind};
use crate::network::{Activation, MLPModel};
use crate::numkernel::{Matrix, Vector};
use crate::rng::ALGORITHM_ID;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CHECKPOINT_MAGIC: &[u8; 4] = b"RNEC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated — expected {expected} payload bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// An in-memory labeled dataset: one feature vector and one class label per
/// example.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Vec<Vector>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<Vector>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if features.len() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature vectors but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset { features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Load an MNIST-style IDX image/label pair. Pixels are scaled to `[0,1]`
/// by `255.0`; the label file's class set is the standard ten digits.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset, DataError> {
    let (pixels, _, dim) = read_idx_images(images_path.as_ref())?;
    let labels = read_idx_labels(labels_path.as_ref())?;
    let count = pixels.len() / dim;
    if count != labels.len() {
        return Err(DataError::CountMismatch { images: count, labels: labels.len() });
    }
    let features = pixels
        .chunks_exact(dim)
        .map(|img| Vector::from_fn(dim, |i| img[i] as f64 / 255.0))
        .collect();
    Dataset::new(features, labels, 10)
}

/// Raw image payload plus (rows, cols).
fn read_idx_images(path: &Path) -> Result<(Vec<u8>, (usize, usize), usize), DataError> {
    let bytes = fs::read(path)?;
    let mut r = &bytes[..];
    if bytes.len() < 16 {
        return Err(DataError::Truncated {
            path: path_str(path),
            expected: 16,
            found: bytes.len(),
        });
    }
    let magic = r.read_u32::<BigEndian>()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: path_str(path),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = r.read_u32::<BigEndian>()? as usize;
    let rows = r.read_u32::<BigEndian>()? as usize;
    let cols = r.read_u32::<BigEndian>()? as usize;
    let expected = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(DataError::Truncated {
            path: path_str(path),
            expected,
            found: payload.len(),
        });
    }
    if rows * cols == 0 {
        return Err(DataError::Format(format!(
            "{}: zero-sized images ({rows}x{cols})",
            path_str(path)
        )));
    }
    Ok((payload.to_vec(), (rows, cols), rows * cols))
}

fn read_idx_labels(path: &Path) -> Result<Vec<usize>, DataError> {
    let bytes = fs::read(path)?;
    let mut r = &bytes[..];
    if bytes.len() < 8 {
        return Err(DataError::Truncated {
            path: path_str(path),
            expected: 8,
            found: bytes.len(),
        });
    }
    let magic = r.read_u32::<BigEndian>()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: path_str(path),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let count = r.read_u32::<BigEndian>()? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(DataError::Truncated {
            path: path_str(path),
            expected: count,
            found: payload.len(),
        });
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Serialize a dataset back into an IDX image/label pair. Features must
/// have length `rows * cols`; values are quantized to bytes by
/// `round(v * 255)`, the exact inverse of [`load_mnist_idx`]'s scaling.
pub fn write_mnist_idx(
    data: &Dataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let dim = rows * cols;
    let mut images = Vec::with_capacity(16 + data.len() * dim);
    images.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    images.write_u32::<BigEndian>(data.len() as u32)?;
    images.write_u32::<BigEndian>(rows as u32)?;
    images.write_u32::<BigEndian>(cols as u32)?;
    for (n, x) in data.features.iter().enumerate() {
        if x.len() != dim {
            return Err(DataError::Invalid(format!(
                "feature {n} has length {}, expected {rows}x{cols}={dim}",
                x.len()
            )));
        }
        for i in 0..dim {
            let v = x.at(i);
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::Invalid(format!(
                    "feature {n} entry {i} is {v}, outside [0,1]"
                )));
            }
            images.push((v * 255.0).round() as u8);
        }
    }
    fs::write(images_path, images)?;

    let mut labels = Vec::with_capacity(8 + data.len());
    labels.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    labels.write_u32::<BigEndian>(data.len() as u32)?;
    for (n, &l) in data.labels.iter().enumerate() {
        if l > u8::MAX as usize {
            return Err(DataError::Invalid(format!("label {n} is {l}, too large for IDX")));
        }
        labels.push(l as u8);
    }
    fs::write(labels_path, labels)?;
    Ok(())
}

fn activation_tag(a: Activation) -> (u8, f64) {
    match a {
        Activation::ReLU => (0, 0.0),
        Activation::LeakyReLU(s) => (1, s),
    }
}

fn activation_from_tag(tag: u8, slope: f64) -> Result<Activation, DataError> {
    match tag {
        0 => Ok(Activation::ReLU),
        1 => Ok(Activation::LeakyReLU(slope)),
        t => Err(DataError::Format(format!("unknown activation tag {t}"))),
    }
}

/// Write a model snapshot (see the module docs for the exact layout).
pub fn save_checkpoint(m: &MLPModel, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    out.write_u32::<LittleEndian>(m.num_layers() as u32)?;
    for i in 0..m.num_layers() {
        let w = &m.weights[i];
        out.write_u32::<LittleEndian>(w.rows() as u32)?;
        out.write_u32::<LittleEndian>(w.cols() as u32)?;
        for &v in w.as_slice() {
            out.write_u64::<LittleEndian>(v.to_bits())?;
        }
        let b = &m.biases[i];
        out.write_u32::<LittleEndian>(b.len() as u32)?;
        for &v in b.as_slice() {
            out.write_u64::<LittleEndian>(v.to_bits())?;
        }
        match &m.specs[i] {
            None => out.push(0),
            Some(spec) => {
                out.push(1);
                out.write_u64::<LittleEndian>(spec.seed)?;
                out.write_u32::<LittleEndian>(spec.num_general as u32)?;
                out.write_u32::<LittleEndian>(spec.group_size.unwrap_or(0) as u32)?;
                out.write_u32::<LittleEndian>(spec.shape.0 as u32)?;
                out.write_u32::<LittleEndian>(spec.shape.1 as u32)?;
                out.write_u32::<LittleEndian>(spec.row_constraints.len() as u32)?;
                for kind in &spec.row_constraints {
                    out.push(kind.tag());
                }
            }
        }
    }
    out.write_u32::<LittleEndian>(ALGORITHM_ID.len() as u32)?;
    out.extend_from_slice(ALGORITHM_ID.as_bytes());
    let (tag, slope) = activation_tag(m.activation);
    out.push(tag);
    out.write_u64::<LittleEndian>(slope.to_bits())?;
    fs::write(path, out)?;
    Ok(())
}

fn eof(path: &Path) -> DataError {
    DataError::Format(format!("{}: unexpected end of file", path_str(path)))
}

/// Load a model snapshot written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MLPModel, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut r = &bytes[..];
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| eof(path))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic {
            path: path_str(path),
            found: u32::from_be_bytes(magic),
            expected: u32::from_be_bytes(*CHECKPOINT_MAGIC),
        });
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| eof(path))?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let layers = r.read_u32::<LittleEndian>().map_err(|_| eof(path))? as usize;
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    let mut specs = Vec::with_capacity(layers);
    for i in 0..layers {
        let rows = r.read_u32::<LittleEndian>().map_err(|_| eof(path))? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(|_| eof(path))? as usize;
        let mut w = Matrix::zeros(rows, cols);
        for v in w.as_mut_slice() {
            *v = f64::from_bits(r.read_u64::<LittleEndian>().map_err(|_| eof(path))?);
        }
        let blen = r.read_u32::<LittleEndian>().map_err(|_| eof(path))? as usize;
        if blen != rows {
            return Err(DataError::Format(format!(
                "{}: layer {i} has {blen} bias entries for {rows} rows",
                path_str(path)
            )));
        }
        let mut b = Vector::zeros(blen);
        for v in b.as_mut_slice() {
            *v = f64::from_bits(r.read_u64::<LittleEndian>().map_err(|_| eof(path))?);
        }
        let has_spec = r.read_u8().map_err(|_| eof(path))?;
        let spec = match has_spec {
            0 => None,
            1 => {
                let seed = r.read_u64::<LittleEndian>().map_err(|_| eof(path))?;
                let num_general = r.read_u32::<LittleEndian>().map_err(|_| eof(path))? as usize;
                let gs = r.read_u32::<LittleEndian>().map_err(|_| eof(path))? as usize;
                let sr = r.read_u32::<LittleEndian>().map_err(|_| eof(path))? as usize;
                let sc = r.read_u32::<LittleEndian>().map_err(|_| eof(path))? as usize;
                let nrc = r.read_u32::<LittleEndian>().map_err(|_| eof(path))? as usize;
                let mut row_constraints = Vec::with_capacity(nrc);
                for _ in 0..nrc {
                    let tag = r.read_u8().map_err(|_| eof(path))?;
                    row_constraints.push(RowConstraintKind::from_tag(tag).ok_or_else(|| {
                        DataError::Format(format!(
                            "{}: unknown row-constraint tag {tag}",
                            path_str(path)
                        ))
                    })?);
                }
                Some(ConstraintSpec {
                    seed,
                    num_general,
                    row_constraints,
                    group_size: if gs == 0 { None } else { Some(gs) },
                    shape: (sr, sc),
                })
            }
            f => {
                return Err(DataError::Format(format!(
                    "{}: layer {i} has invalid constraint flag {f}",
                    path_str(path)
                )))
            }
        };
        weights.push(w);
        biases.push(b);
        specs.push(spec);
    }
    let id_len = r.read_u32::<LittleEndian>().map_err(|_| eof(path))? as usize;
    if r.len() < id_len {
        return Err(eof(path));
    }
    let (id_bytes, rest) = r.split_at(id_len);
    r = rest;
    let id = std::str::from_utf8(id_bytes)
        .map_err(|_| DataError::Format(format!("{}: PRNG id is not UTF-8", path_str(path))))?;
    if id != ALGORITHM_ID {
        return Err(DataError::Format(format!(
            "{}: checkpoint uses PRNG '{id}' but this build regenerates constraints \
             with '{ALGORITHM_ID}'; refusing to rebuild mismatched constraints",
            path_str(path)
        )));
    }
    let act_tag = r.read_u8().map_err(|_| eof(path))?;
    let slope = f64::from_bits(r.read_u64::<LittleEndian>().map_err(|_| eof(path))?);
    let activation = activation_from_tag(act_tag, slope)?;
    if !r.is_empty() {
        return Err(DataError::Format(format!(
            "{}: {} trailing bytes after the checkpoint",
            path_str(path),
            r.len()
        )));
    }
    if layers == 0 {
        return Err(DataError::Format(format!("{}: checkpoint has no layers", path_str(path))));
    }
    Ok(MLPModel { weights, biases, specs, activation })
}

/// Write a results table: `header`, then one line per row, UTF-8 with LF
/// endings. Every row must have exactly as many fields as the header.
pub fn write_results_csv(
    path: impl AsRef<Path>,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), DataError> {
    for (n, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(DataError::Invalid(format!(
                "row {n} has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).map_err(csv_io)?;
    for row in rows {
        w.write_record(row).map_err(csv_io)?;
    }
    let bytes = w.into_inner().map_err(|e| DataError::Format(e.to_string()))?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn csv_io(e: csv::Error) -> DataError {
    DataError::Format(e.to_string())
}
