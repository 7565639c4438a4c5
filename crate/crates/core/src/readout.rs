//! Linear readout trained by minimum-norm least squares (`W = S^+ L`).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of output classes.
pub const N_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum ReadoutError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("class index {0} is out of range")]
    InvalidClass(usize),
    #[error("singular value decomposition did not converge")]
    Decomposition,
    #[error("weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One-hot `n x 3` label matrix; `classes[i]` is the 0-based class of row `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    classes: Vec<usize>,
}

impl LabelMatrix {
    pub fn from_classes(classes: &[usize]) -> Result<Self, ReadoutError> {
        if let Some(&c) = classes.iter().find(|&&c| c >= N_CLASSES) {
            return Err(ReadoutError::InvalidClass(c));
        }
        Ok(Self {
            classes: classes.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        if self.classes[row] == col {
            1.0
        } else {
            0.0
        }
    }

    /// Classes that never occur in the labels.
    pub fn missing_classes(&self) -> Vec<usize> {
        (0..N_CLASSES).filter(|c| !self.classes.contains(c)).collect()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.classes.len(), N_CLASSES, |i, j| self.get(i, j))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: Option<u64>,
    pub training_indices: Vec<usize>,
    pub rank: usize,
    pub residual: f64,
    pub intercept: bool,
}

/// `N_v x 3` output weights (plus one trailing bias row when trained with
/// an intercept).
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutWeights {
    pub weights: DMatrix<f64>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub scores: [f64; N_CLASSES],
    /// 0-based predicted class.
    pub class_index: usize,
}

/// Warnings raised during training that do not prevent a solution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainingWarning {
    DegenerateLabels { missing: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Append a constant-1 column to `S` (off by default).
    pub intercept: bool,
}

/// Relative singular-value cutoff factor; the absolute cutoff is
/// `RCOND * max(rows, cols) * sigma_max`.
pub const RCOND: f64 = 1e-10;

/// Converts a binary raster (rows of 0/1) into a dense matrix.
pub fn design_matrix<R: AsRef<[u8]>>(rows: &[R], intercept: bool) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.as_ref().len()) + usize::from(intercept);
    DMatrix::from_fn(n, m, |i, j| {
        let r = rows[i].as_ref();
        if j < r.len() {
            r[j] as f64
        } else {
            1.0
        }
    })
}

/// Minimum-norm least-squares solution of `A X = B` via the SVD.
///
/// Returns the solution and the numerical rank of `A`.
pub fn min_norm_lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize), ReadoutError> {
    let (n, m) = a.shape();
    if n == 0 || m == 0 {
        return Ok((DMatrix::zeros(m, b.ncols()), 0));
    }
    let fa = faer::Mat::<f64>::from_fn(n, m, |i, j| a[(i, j)]);
    let svd = fa.thin_svd().map_err(|_| ReadoutError::Decomposition)?;
    let (u, sv, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let k = sv.nrows();
    let sigma_max = (0..k).map(|i| sv[i]).fold(0.0, f64::max);
    let cutoff = RCOND * n.max(m) as f64 * sigma_max;
    let rank = (0..k).filter(|&i| sv[i] > cutoff).count();
    // X = V diag(1/s) U^T B over the retained singular triplets.
    let kept: Vec<usize> = (0..k).filter(|&i| sv[i] > cutoff).collect();
    let coef = DMatrix::from_fn(kept.len(), b.ncols(), |p, col| {
        let i = kept[p];
        (0..n).map(|r| u[(r, i)] * b[(r, col)]).sum::<f64>() / sv[i]
    });
    let x = DMatrix::from_fn(m, b.ncols(), |row, col| {
        kept.iter()
            .enumerate()
            .map(|(p, &i)| v[(row, i)] * coef[(p, col)])
            .sum()
    });
    Ok((x, rank))
}

/// Trains the readout. Returns the weights and any non-fatal warnings.
pub fn train<R: AsRef<[u8]>>(
    s: &[R],
    labels: &LabelMatrix,
    options: TrainOptions,
) -> Result<(ReadoutWeights, Vec<TrainingWarning>), ReadoutError> {
    if s.is_empty() {
        return Err(ReadoutError::EmptyTrainingSet);
    }
    if s.len() != labels.len() {
        return Err(ReadoutError::DimensionMismatch {
            expected: s.len(),
            got: labels.len(),
        });
    }
    let width = s[0].as_ref().len();
    if let Some(r) = s.iter().find(|r| r.as_ref().len() != width) {
        return Err(ReadoutError::DimensionMismatch {
            expected: width,
            got: r.as_ref().len(),
        });
    }
    let a = design_matrix(s, options.intercept);
    let l = labels.to_matrix();
    let (w, rank) = min_norm_lstsq(&a, &l)?;
    let residual = (&a * &w - &l).norm();

    let mut warnings = Vec::new();
    let missing = labels.missing_classes();
    if !missing.is_empty() {
        warnings.push(TrainingWarning::DegenerateLabels { missing });
    }
    Ok((
        ReadoutWeights {
            weights: w,
            meta: TrainingMeta {
                rank,
                residual,
                intercept: options.intercept,
                ..TrainingMeta::default()
            },
        },
        warnings,
    ))
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64; N_CLASSES]) -> usize {
    let mut best = 0;
    for (k, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = k;
        }
    }
    best
}

impl ReadoutWeights {
    /// Number of node inputs expected by [`predict`](Self::predict).
    pub fn n_inputs(&self) -> usize {
        self.weights.nrows() - usize::from(self.meta.intercept)
    }

    pub fn predict(&self, s: &[u8]) -> Result<Prediction, ReadoutError> {
        if s.len() != self.n_inputs() {
            return Err(ReadoutError::DimensionMismatch {
                expected: self.n_inputs(),
                got: s.len(),
            });
        }
        let mut scores = [0.0; N_CLASSES];
        for (c, score) in scores.iter_mut().enumerate() {
            let col = self.weights.column(c);
            *score = s
                .iter()
                .zip(col.iter())
                .filter(|(&b, _)| b != 0)
                .map(|(_, &w)| w)
                .sum::<f64>();
            if self.meta.intercept {
                *score += col[self.n_inputs()];
            }
        }
        Ok(Prediction {
            scores,
            class_index: argmax(&scores),
        })
    }

    /// CSV with a `#`-prefixed metadata header followed by one row per node.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let m = &self.meta;
        let _ = writeln!(out, "# rank={}", m.rank);
        let _ = writeln!(out, "# residual={:e}", m.residual);
        let _ = writeln!(out, "# intercept={}", m.intercept);
        if let Some(seed) = m.seed {
            let _ = writeln!(out, "# seed={seed}");
        }
        let idx: Vec<String> = m.training_indices.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "# training_indices={}", idx.join(" "));
        out.push_str("class_0,class_1,class_2\n");
        for row in self.weights.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ReadoutError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self, ReadoutError> {
        let mut meta = TrainingMeta::default();
        let mut values = Vec::new();
        let mut header_seen = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(kv) = line.strip_prefix('#') {
                let (k, v) = kv
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| ReadoutError::Format(format!("bad header line `{line}`")))?;
                let bad = |_| ReadoutError::Format(format!("bad value in `{line}`"));
                match k {
                    "rank" => meta.rank = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                    "residual" => {
                        meta.residual = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
                    }
                    "intercept" => {
                        meta.intercept = v.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?
                    }
                    "seed" => meta.seed = Some(v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?),
                    "training_indices" => {
                        meta.training_indices = v
                            .split_whitespace()
                            .map(str::parse)
                            .collect::<Result<_, _>>()
                            .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
                    }
                    _ => {}
                }
                continue;
            }
            if !header_seen {
                header_seen = true;
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| ReadoutError::Format(e.to_string()))?;
            if row.len() != N_CLASSES {
                return Err(ReadoutError::DimensionMismatch {
                    expected: N_CLASSES,
                    got: row.len(),
                });
            }
            values.extend(row);
        }
        let n = values.len() / N_CLASSES;
        Ok(Self {
            weights: DMatrix::from_row_slice(n, N_CLASSES, &values),
            meta,
        })
    }
}
