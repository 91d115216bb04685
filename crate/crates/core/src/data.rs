//! Dataset ingestion and view construction: MNIST IDX parsing, the
//! flipped/halves paired-view builders, generic feature tables, centering
//! and seeded minibatching.
//!
//! Training code only ever receives the two independently shuffled views;
//! ground-truth alignment lives in [`PairedEval`] and is consumed by
//! evaluation and the supervised baselines alone.

use crate::error::{Result, UcaError};
use crate::matrix::Matrix;
use crate::rng::RngStream;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

/// One domain's feature matrix, one sample per column.
#[derive(Debug, Clone)]
pub struct ViewDataset {
    pub features: Matrix,
    pub sample_ids: Vec<usize>,
    /// Per-feature training mean, present once the view has been centered.
    pub mean: Option<Vec<f64>>,
}

impl ViewDataset {
    pub fn new(features: Matrix) -> Self {
        let n = features.cols();
        ViewDataset {
            features,
            sample_ids: (0..n).collect(),
            mean: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn len(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Columns reordered/subset by position.
    pub fn select(&self, idx: &[usize]) -> ViewDataset {
        ViewDataset {
            features: self.features.select_cols(idx),
            sample_ids: idx.iter().map(|&i| self.sample_ids[i]).collect(),
            mean: self.mean.clone(),
        }
    }
}

/// Ground-truth aligned pairs: column i of both views is the same object.
/// Used for evaluation and supervised baselines only, never for training.
#[derive(Debug, Clone)]
pub struct PairedEval {
    pub x_view: ViewDataset,
    pub y_view: ViewDataset,
    pub alignment: Vec<(usize, usize)>,
}

impl PairedEval {
    pub fn new(x_view: ViewDataset, y_view: ViewDataset) -> Result<Self> {
        if x_view.len() != y_view.len() {
            return Err(UcaError::dim(
                "PairedEval",
                format!("{} pairs", x_view.len()),
                format!("{}", y_view.len()),
            ));
        }
        let alignment = (0..x_view.len()).map(|i| (i, i)).collect();
        Ok(PairedEval {
            x_view,
            y_view,
            alignment,
        })
    }

    pub fn len(&self) -> usize {
        self.alignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alignment.is_empty()
    }
}

// ---------------------------------------------------------------------------
// MNIST IDX
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| UcaError::io(path.display().to_string(), e))?;
    let buf = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(flate2::bufread::GzDecoder::new(buf)))
    } else {
        Ok(Box::new(buf))
    }
}

fn read_u32_be(r: &mut dyn Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| UcaError::Data(format!("{}: truncated header: {e}", path.display())))?;
    Ok(u32::from_be_bytes(b))
}

/// Load an MNIST image/label file pair into a 784 x n view with pixels
/// scaled to [0, 1]. Labels are only read to cross-check the sample count;
/// the method is unsupervised and never sees them again.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<ViewDataset> {
    let mut r = open_maybe_gz(images_path)?;
    let magic = read_u32_be(&mut r, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(UcaError::Data(format!(
            "{}: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let n = read_u32_be(&mut r, images_path)? as usize;
    let rows = read_u32_be(&mut r, images_path)? as usize;
    let cols = read_u32_be(&mut r, images_path)? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    r.read_exact(&mut pixels).map_err(|e| {
        UcaError::Data(format!(
            "{}: truncated image data: {e}",
            images_path.display()
        ))
    })?;

    let mut lr = open_maybe_gz(labels_path)?;
    let lmagic = read_u32_be(&mut lr, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(UcaError::Data(format!(
            "{}: bad magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let ln = read_u32_be(&mut lr, labels_path)? as usize;
    if ln != n {
        return Err(UcaError::Data(format!(
            "image/label count mismatch: {n} images vs {ln} labels"
        )));
    }
    let mut labels = vec![0u8; ln];
    lr.read_exact(&mut labels).map_err(|e| {
        UcaError::Data(format!(
            "{}: truncated label data: {e}",
            labels_path.display()
        ))
    })?;

    let d = rows * cols;
    // transpose to one sample per column
    let mut features = Matrix::zeros(d, n);
    for s in 0..n {
        for p in 0..d {
            features.set(p, s, pixels[s * d + p] as f64 / 255.0);
        }
    }
    Ok(ViewDataset::new(features))
}

// ---------------------------------------------------------------------------
// Paired-view builders
// ---------------------------------------------------------------------------

fn image_side(d: usize) -> Result<usize> {
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return Err(UcaError::Precondition(format!(
            "feature dimension {d} is not a square image"
        )));
    }
    Ok(side)
}

/// Horizontal mirror of every image (one flattened row-major image per column).
fn mirror_columns(features: &Matrix) -> Result<Matrix> {
    let d = features.rows();
    let side = image_side(d)?;
    let mut out = Matrix::zeros(d, features.cols());
    for s in 0..features.cols() {
        for r in 0..side {
            for c in 0..side {
                out.set(r * side + c, s, features.get(r * side + (side - 1 - c), s));
            }
        }
    }
    Ok(out)
}

/// First domain: the images; second domain: their horizontal mirrors.
/// Training views come back in independent shuffled orders so no alignment
/// is implied; `eval` keeps the ground-truth pairing.
pub fn make_flipped(
    views: &ViewDataset,
    rng: &mut RngStream,
) -> Result<(ViewDataset, ViewDataset, PairedEval)> {
    let mirrored = mirror_columns(&views.features)?;
    let n = views.len();
    let sx = rng.permutation(n);
    let sy = rng.permutation(n);
    let x = views.select(&sx);
    let y = ViewDataset {
        features: mirrored.select_cols(&sy),
        sample_ids: sy.iter().map(|&i| views.sample_ids[i]).collect(),
        mean: None,
    };
    let eval = PairedEval::new(
        views.clone(),
        ViewDataset {
            features: mirrored,
            sample_ids: views.sample_ids.clone(),
            mean: None,
        },
    )?;
    Ok((x, y, eval))
}

/// First domain: upper half of each image; second domain: lower half.
pub fn make_halves(
    views: &ViewDataset,
    rng: &mut RngStream,
) -> Result<(ViewDataset, ViewDataset, PairedEval)> {
    let d = views.dim();
    let side = image_side(d)?;
    let split = (side / 2) * side;
    let n = views.len();
    let mut upper = Matrix::zeros(split, n);
    let mut lower = Matrix::zeros(d - split, n);
    for s in 0..n {
        for p in 0..split {
            upper.set(p, s, views.features.get(p, s));
        }
        for p in split..d {
            lower.set(p - split, s, views.features.get(p, s));
        }
    }
    let sx = rng.permutation(n);
    let sy = rng.permutation(n);
    let x = ViewDataset {
        features: upper.select_cols(&sx),
        sample_ids: sx.iter().map(|&i| views.sample_ids[i]).collect(),
        mean: None,
    };
    let y = ViewDataset {
        features: lower.select_cols(&sy),
        sample_ids: sy.iter().map(|&i| views.sample_ids[i]).collect(),
        mean: None,
    };
    let eval = PairedEval::new(
        ViewDataset {
            features: upper,
            sample_ids: views.sample_ids.clone(),
            mean: None,
        },
        ViewDataset {
            features: lower,
            sample_ids: views.sample_ids.clone(),
            mean: None,
        },
    )?;
    Ok((x, y, eval))
}

// ---------------------------------------------------------------------------
// Generic feature tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    RawF64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RawSidecar {
    rows: usize,
    cols: usize,
}

/// Load a rectangular numeric table (one sample per row) and transpose it
/// into a column-per-sample view.
pub fn load_feature_table(path: &Path, format: TableFormat) -> Result<ViewDataset> {
    match format {
        TableFormat::Csv => load_csv(path),
        TableFormat::RawF64 => load_raw(path),
    }
}

fn load_csv(path: &Path) -> Result<ViewDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UcaError::io(path.display().to_string(), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(vals) => {
                if let Some(w) = width {
                    if vals.len() != w {
                        return Err(UcaError::Data(format!(
                            "{}: ragged row at line {}: {} cells, expected {w}",
                            path.display(),
                            lineno + 1,
                            vals.len()
                        )));
                    }
                } else {
                    width = Some(vals.len());
                }
                rows.push(vals);
            }
            Err(e) => {
                // a non-numeric first line is a header; anywhere else it's bad data
                if lineno == 0 && rows.is_empty() {
                    continue;
                }
                return Err(UcaError::Data(format!(
                    "{}: non-numeric cell at line {}: {e}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
    }
    if rows.is_empty() {
        return Err(UcaError::Data(format!("{}: empty table", path.display())));
    }
    let n = rows.len();
    let d = width.unwrap();
    let features = Matrix::from_fn(d, n, |p, s| rows[s][p]);
    Ok(ViewDataset::new(features))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

fn load_raw(path: &Path) -> Result<ViewDataset> {
    let side = sidecar_path(path);
    let meta: RawSidecar = serde_json::from_str(
        &std::fs::read_to_string(&side).map_err(|e| UcaError::io(side.display().to_string(), e))?,
    )
    .map_err(|e| UcaError::Data(format!("{}: bad sidecar: {e}", side.display())))?;
    let bytes = std::fs::read(path).map_err(|e| UcaError::io(path.display().to_string(), e))?;
    let expect = meta.rows * meta.cols * 8;
    if bytes.len() != expect {
        return Err(UcaError::Data(format!(
            "{}: {} bytes, sidecar {}x{} requires {expect}",
            path.display(),
            bytes.len(),
            meta.rows,
            meta.cols
        )));
    }
    if meta.rows == 0 || meta.cols == 0 {
        return Err(UcaError::Data(format!("{}: empty table", path.display())));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    // file is one sample per row; transpose into column-per-sample
    let features = Matrix::from_fn(meta.cols, meta.rows, |p, s| vals[s * meta.cols + p]);
    Ok(ViewDataset::new(features))
}

/// Write a view back out as a raw little-endian f64 table (one sample per
/// row) plus the {rows, cols} JSON sidecar.
pub fn save_raw_table(view: &ViewDataset, path: &Path) -> Result<()> {
    let (d, n) = view.features.shape();
    let mut out = Vec::with_capacity(n * d * 8);
    for s in 0..n {
        for p in 0..d {
            out.extend_from_slice(&view.features.get(p, s).to_le_bytes());
        }
    }
    let mut f =
        File::create(path).map_err(|e| UcaError::io(path.display().to_string(), e))?;
    f.write_all(&out)
        .map_err(|e| UcaError::io(path.display().to_string(), e))?;
    let side = sidecar_path(path);
    std::fs::write(
        &side,
        serde_json::to_string_pretty(&RawSidecar { rows: n, cols: d }).unwrap(),
    )
    .map_err(|e| UcaError::io(side.display().to_string(), e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Centering
// ---------------------------------------------------------------------------

/// Remove the per-feature mean, remembering it for later un-centering and
/// for centering held-out data with the training statistics.
pub fn center(view: &ViewDataset) -> ViewDataset {
    let (d, n) = view.features.shape();
    assert!(n >= 1, "center of empty view");
    let mut mean = vec![0.0; d];
    for p in 0..d {
        mean[p] = view.features.row(p).iter().sum::<f64>() / n as f64;
    }
    let features = Matrix::from_fn(d, n, |p, s| view.features.get(p, s) - mean[p]);
    ViewDataset {
        features,
        sample_ids: view.sample_ids.clone(),
        mean: Some(mean),
    }
}

/// Center with a given (training) mean; used for test splits.
pub fn center_with(view: &ViewDataset, mean: &[f64]) -> Result<ViewDataset> {
    let (d, n) = view.features.shape();
    if mean.len() != d {
        return Err(UcaError::dim(
            "center_with",
            format!("mean of length {d}"),
            format!("{}", mean.len()),
        ));
    }
    let features = Matrix::from_fn(d, n, |p, s| view.features.get(p, s) - mean[p]);
    Ok(ViewDataset {
        features,
        sample_ids: view.sample_ids.clone(),
        mean: Some(mean.to_vec()),
    })
}

// ---------------------------------------------------------------------------
// Minibatching
// ---------------------------------------------------------------------------

/// One epoch's deterministic batch schedule.
#[derive(Debug, Clone)]
pub struct MinibatchPlan {
    pub batch_size: usize,
    pub order: Vec<usize>,
}

impl MinibatchPlan {
    pub fn new(n: usize, batch_size: usize, epoch: usize, rng: &RngStream) -> Result<Self> {
        if batch_size < 2 {
            return Err(UcaError::Precondition(format!(
                "batch_size {batch_size} < 2: discriminator batch statistics need at least two samples"
            )));
        }
        let order = rng.derive(epoch as u64).permutation(n);
        Ok(MinibatchPlan { batch_size, order })
    }

    /// Batches in order; a trailing batch smaller than 2 is dropped.
    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.order
            .chunks(self.batch_size)
            .filter(|c| c.len() >= 2)
    }
}

/// Index slices covering one epoch, reshuffled deterministically per epoch.
pub fn minibatches(
    n: usize,
    batch_size: usize,
    epoch: usize,
    rng: &RngStream,
) -> Result<Vec<Vec<usize>>> {
    let plan = MinibatchPlan::new(n, batch_size, epoch, rng)?;
    Ok(plan.batches().map(|b| b.to_vec()).collect())
}
