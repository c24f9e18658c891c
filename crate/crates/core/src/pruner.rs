//! Per-layer one-shot pruning: metric, channel order, N:M mask, masked weight.
//!
//! Surviving weights are copied bit for bit; nothing is re-fitted.

use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{compute_metric, MetricKind, MetricMatrix, DEFAULT_ALPHA};
use crate::pattern::SparsityPattern;
use crate::shuffle::{channel_shuffle, retained_objective, Permutation, ShuffleConfig};
use crate::stats::{compute_stats, DEFAULT_BINS};
use crate::store::{load_bundle, read_tensor, write_tensor, LayerBundle, Manifest};
use crate::tensor::{TensorData, TensorF};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    pub metric: MetricKind,
    pub alpha: f64,
    pub bins: usize,
    pub pattern: SparsityPattern,
    pub shuffle: ShuffleConfig,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            metric: MetricKind::ESparse,
            alpha: DEFAULT_ALPHA,
            bins: DEFAULT_BINS,
            pattern: SparsityPattern::TWO_FOUR,
            shuffle: ShuffleConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PruneResult {
    pub layer_id: String,
    pub metric: MetricKind,
    /// Kept positions in permuted column order; exactly `n_keep` per group.
    pub mask_permuted: Array2<bool>,
    /// The same mask mapped back to the original column order.
    pub mask: Array2<bool>,
    /// `W ⊙ mask` in original column order and the input's dtype.
    pub pruned_weight: TensorF,
    pub permutation: Permutation,
    pub pattern: SparsityPattern,
    pub recon_error: f64,
    pub retained_metric_fraction: f64,
}

impl PruneResult {
    pub fn swaps_applied(&self) -> usize {
        self.permutation.swaps.len()
    }
}

/// Keeps the `n_keep` largest scores of every row in every group of
/// `m_group` consecutive columns; ties keep the lower column.
pub fn nm_mask(scores: ArrayView2<'_, f64>, pat: SparsityPattern) -> Result<Array2<bool>> {
    let groups = pat.check_channels(scores.ncols())?;
    let m = pat.m_group();
    let mut mask = Array2::from_elem(scores.raw_dim(), false);
    let mut idx: Vec<usize> = Vec::with_capacity(m);
    for (row, mut mrow) in scores.rows().into_iter().zip(mask.rows_mut()) {
        for g in 0..groups {
            idx.clear();
            idx.extend(g * m..(g + 1) * m);
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &j in &idx[..pat.n_keep()] {
                mrow[j] = true;
            }
        }
    }
    Ok(mask)
}

/// `‖X·Wᵀ − X·W_prunedᵀ‖_F` for token-major activations `X: [T, C]`.
pub fn reconstruction_error(
    w: ArrayView2<'_, f32>,
    w_pruned: ArrayView2<'_, f32>,
    x: ArrayView2<'_, f32>,
) -> Result<f64> {
    if w.shape() != w_pruned.shape() || x.ncols() != w.ncols() {
        return Err(Error::Shape(format!(
            "weight {:?}, pruned {:?}, activations {:?}",
            w.shape(),
            w_pruned.shape(),
            x.shape()
        )));
    }
    let dense = x.dot(&w.t());
    let sparse = x.dot(&w_pruned.t());
    let sq: f64 = dense
        .iter()
        .zip(sparse.iter())
        .map(|(a, b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

/// Zeros every weight whose mask entry is false, keeping the storage dtype.
pub fn apply_mask(weight: &TensorF, mask: &Array2<bool>) -> Result<TensorF> {
    if weight.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "weight {:?} vs mask {:?}",
            weight.shape(),
            mask.shape()
        )));
    }
    let keep = mask.iter();
    let data = match weight.data() {
        TensorData::F32(v) => TensorData::F32(
            v.iter()
                .zip(keep)
                .map(|(&x, &k)| if k { x } else { 0.0 })
                .collect(),
        ),
        TensorData::F16(v) => TensorData::F16(
            v.iter()
                .zip(keep)
                .map(|(&x, &k)| if k { x } else { f16::ZERO })
                .collect(),
        ),
    };
    TensorF::new(weight.shape().to_vec(), data)
}

/// Importance scores for a bundle under `cfg`. Statistics are skipped for magnitude.
pub fn layer_metric(bundle: &LayerBundle, cfg: &PruneConfig) -> Result<MetricMatrix> {
    let w = bundle.weight.to_matrix()?;
    let stats = if cfg.metric.needs_stats() {
        let x = bundle.calib_activations.to_matrix()?;
        Some(compute_stats(x.view(), cfg.bins)?)
    } else {
        None
    };
    compute_metric(cfg.metric, w.view(), stats.as_ref(), cfg.alpha)
}

pub fn prune_layer(bundle: &LayerBundle, cfg: &PruneConfig) -> Result<PruneResult> {
    prune_layer_inner(bundle, cfg).map_err(|e| e.in_layer(&bundle.layer_id))
}

fn prune_layer_inner(bundle: &LayerBundle, cfg: &PruneConfig) -> Result<PruneResult> {
    cfg.pattern.check_channels(bundle.in_channels())?;
    let xi = layer_metric(bundle, cfg)?;
    let permutation = channel_shuffle(&xi, cfg.pattern, &cfg.shuffle)?;

    let mask_permuted = nm_mask(xi.permuted(&permutation.order).view(), cfg.pattern)?;
    let mask = mask_permuted.select(Axis(1), &permutation.inverse());
    let pruned_weight = apply_mask(&bundle.weight, &mask)?;

    let w = bundle.weight.to_matrix()?;
    let wp = pruned_weight.to_matrix()?;
    let x = bundle.calib_activations.to_matrix()?;
    let recon_error = reconstruction_error(w.view(), wp.view(), x.view())?;

    let total = xi.total();
    let retained = retained_objective(&xi, &permutation.order, cfg.pattern)?;
    let retained_metric_fraction = if total > 0.0 { retained / total } else { 1.0 };

    Ok(PruneResult {
        layer_id: bundle.layer_id.clone(),
        metric: cfg.metric,
        mask_permuted,
        mask,
        pruned_weight,
        permutation,
        pattern: cfg.pattern,
        recon_error,
        retained_metric_fraction,
    })
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub layer_id: String,
    pub metric: String,
    pub pattern: String,
    pub recon_error: f64,
    pub retained_fraction: f64,
    pub swaps_applied: usize,
}

impl From<&PruneResult> for SummaryRow {
    fn from(r: &PruneResult) -> Self {
        SummaryRow {
            layer_id: r.layer_id.clone(),
            metric: r.metric.to_string(),
            pattern: r.pattern.to_string(),
            recon_error: r.recon_error,
            retained_fraction: r.retained_metric_fraction,
            swaps_applied: r.swaps_applied(),
        }
    }
}

pub const SUMMARY_FILE: &str = "summary.csv";

pub fn weight_file(layer_id: &str) -> String {
    format!("{layer_id}.weight.espt")
}

pub fn mask_file(layer_id: &str) -> String {
    format!("{layer_id}.mask.espt")
}

pub fn perm_file(layer_id: &str) -> String {
    format!("{layer_id}.perm.json")
}

pub fn mask_to_tensor(mask: &Array2<bool>) -> Result<TensorF> {
    TensorF::from_f32(
        mask.shape().to_vec(),
        mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
    )
}

/// Writes a layer's pruned weight, mask and permutation into `dir`.
pub fn write_layer_outputs(result: &PruneResult, dir: &Path) -> Result<()> {
    write_tensor(
        &result.pruned_weight,
        dir.join(weight_file(&result.layer_id)),
    )?;
    write_tensor(
        &mask_to_tensor(&result.mask)?,
        dir.join(mask_file(&result.layer_id)),
    )?;
    let perm_path = dir.join(perm_file(&result.layer_id));
    let json = serde_json::to_string(&result.permutation.order)?;
    fs::write(&perm_path, json).map_err(|e| Error::io(&perm_path, e))
}

pub fn write_summary<W: std::io::Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "layer_id",
            "metric",
            "pattern",
            "recon_error",
            "retained_fraction",
            "swaps_applied",
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_summary(dir: &Path) -> Result<Vec<SummaryRow>> {
    let path = dir.join(SUMMARY_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<Vec<SummaryRow>, _>>()
        .map_err(Error::from)
}

/// A pruned layer read back from an output directory.
#[derive(Debug, Clone)]
pub struct PrunedLayer {
    pub layer_id: String,
    pub pattern: SparsityPattern,
    pub weight: TensorF,
    pub mask: Array2<bool>,
    pub permutation: Permutation,
}

impl PrunedLayer {
    pub fn mask_permuted(&self) -> Array2<bool> {
        self.permutation.permute_columns(self.mask.view())
    }
}

pub fn read_pruned_layer(dir: &Path, row: &SummaryRow) -> Result<PrunedLayer> {
    let pattern = row.pattern.parse()?;
    let weight = read_tensor(dir.join(weight_file(&row.layer_id)))?;
    let mask_t = read_tensor(dir.join(mask_file(&row.layer_id)))?;
    if mask_t.shape() != weight.shape() {
        return Err(Error::Shape(format!(
            "mask {:?} does not match weight {:?}",
            mask_t.shape(),
            weight.shape()
        )));
    }
    let mask = mask_t.to_matrix()?.mapv(|v| v != 0.0);
    let perm_path = dir.join(perm_file(&row.layer_id));
    let text = fs::read_to_string(&perm_path).map_err(|e| Error::io(&perm_path, e))?;
    let permutation = Permutation::from_order(serde_json::from_str(&text)?)?;
    if permutation.len() != weight.shape()[1] {
        return Err(Error::Shape(format!(
            "permutation length {} vs {} channels",
            permutation.len(),
            weight.shape()[1]
        )));
    }
    Ok(PrunedLayer {
        layer_id: row.layer_id.clone(),
        pattern,
        weight,
        mask,
        permutation,
    })
}

#[derive(Debug)]
pub struct ModelReport {
    pub results: Vec<PruneResult>,
    pub summary: Vec<SummaryRow>,
}

impl ModelReport {
    pub fn mean_recon_error(&self) -> f64 {
        mean(self.summary.iter().map(|r| r.recon_error))
    }

    pub fn mean_retained_fraction(&self) -> f64 {
        mean(self.summary.iter().map(|r| r.retained_fraction))
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        0.0
    } else {
        it.sum::<f64>() / n as f64
    }
}

/// Error of [`prune_model`]: the first failing layer plus those that finished.
#[derive(Debug, thiserror::Error)]
#[error("pruning aborted ({} layers completed: {completed:?}): {source}", completed.len())]
pub struct PruneModelError {
    pub completed: Vec<String>,
    #[source]
    pub source: Error,
}

/// Prunes every manifest layer independently and writes the outputs to `out_dir`.
pub fn prune_model(
    manifest: &Manifest,
    cfg: &PruneConfig,
    out_dir: impl Into<PathBuf>,
) -> std::result::Result<ModelReport, PruneModelError> {
    let out_dir = out_dir.into();
    let abort = |completed: Vec<String>, source: Error| PruneModelError { completed, source };
    fs::create_dir_all(&out_dir).map_err(|e| abort(vec![], Error::io(&out_dir, e)))?;

    let outcomes: Vec<Result<PruneResult>> = manifest
        .layers
        .par_iter()
        .map(|layer| {
            let bundle = load_bundle(manifest, &layer.layer_id)?;
            let result = prune_layer(&bundle, cfg)?;
            write_layer_outputs(&result, &out_dir).map_err(|e| e.in_layer(&layer.layer_id))?;
            Ok(result)
        })
        .collect();

    let mut results = Vec::with_capacity(outcomes.len());
    let mut first_error = None;
    for outcome in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_error {
        return Err(abort(
            results.iter().map(|r| r.layer_id.clone()).collect(),
            e,
        ));
    }

    let summary: Vec<SummaryRow> = results.iter().map(SummaryRow::from).collect();
    let path = out_dir.join(SUMMARY_FILE);
    let written = fs::File::create(&path)
        .map_err(|e| Error::io(&path, e))
        .and_then(|f| write_summary(&summary, f));
    if let Err(e) = written {
        return Err(abort(
            results.iter().map(|r| r.layer_id.clone()).collect(),
            e,
        ));
    }
    Ok(ModelReport { results, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shuffle::ShuffleMode;
    use ndarray::array;

    #[test]
    fn mask_keeps_top_two() {
        let m = nm_mask(
            array![[4.0, 1.0, 3.0, 2.0]].view(),
            SparsityPattern::TWO_FOUR,
        )
        .unwrap();
        assert_eq!(m, array![[true, false, true, false]]);
    }

    #[test]
    fn mask_ties_keep_lowest_index() {
        let m = nm_mask(
            array![[5.0, 5.0, 5.0, 5.0]].view(),
            SparsityPattern::TWO_FOUR,
        )
        .unwrap();
        assert_eq!(m, array![[true, true, false, false]]);
    }

    #[test]
    fn mask_rejects_indivisible_columns() {
        assert!(nm_mask(Array2::zeros((1, 6)).view(), SparsityPattern::TWO_FOUR).is_err());
    }

    #[test]
    fn recon_error_zero_cases() {
        let w = array![[1.0f32, 2.0], [3.0, 4.0]];
        let x = array![[1.0f32, -1.0], [0.5, 2.0]];
        assert_eq!(
            reconstruction_error(w.view(), w.view(), x.view()).unwrap(),
            0.0
        );
        let z = Array2::<f32>::zeros((3, 2));
        let wp = Array2::<f32>::zeros((2, 2));
        assert_eq!(
            reconstruction_error(w.view(), wp.view(), z.view()).unwrap(),
            0.0
        );
        assert!(
            reconstruction_error(w.view(), wp.view(), Array2::<f32>::zeros((3, 3)).view()).is_err()
        );
    }

    #[test]
    fn identity_like_magnitude_example() {
        // 4x4 with a dominant diagonal and a descending off-diagonal ramp
        let w = array![
            [9.0f32, 3.0, 2.0, 1.0],
            [3.0, 9.0, 2.0, 1.0],
            [3.0, 2.0, 9.0, 1.0],
            [3.0, 2.0, 1.0, 9.0]
        ];
        let x = Array2::<f32>::eye(4);
        let bundle = LayerBundle::new(
            "l0",
            TensorF::from_matrix(&w).unwrap(),
            TensorF::from_matrix(&x).unwrap(),
        )
        .unwrap();
        let cfg = PruneConfig {
            metric: MetricKind::Magnitude,
            shuffle: ShuffleConfig::with_mode(ShuffleMode::None),
            ..PruneConfig::default()
        };
        let r = prune_layer(&bundle, &cfg).unwrap();
        assert_eq!(
            r.mask,
            array![
                [true, true, false, false],
                [true, true, false, false],
                [true, false, true, false],
                [true, false, false, true]
            ]
        );
        // X = I so the output error is the norm of the pruned weights
        let expected =
            (2f64 * 2.0 + 1.0 + 2.0 * 2.0 + 1.0 + 2.0 * 2.0 + 1.0 + 2.0 * 2.0 + 1.0).sqrt();
        assert!((r.recon_error - expected).abs() < 1e-6);
    }

    #[test]
    fn f16_weights_survive_bit_exact() {
        let vals: Vec<f16> = (0..16)
            .map(|i| f16::from_f32(i as f32 * 0.37 - 2.0))
            .collect();
        let w = TensorF::from_f16(vec![2, 8], vals.clone()).unwrap();
        let x = TensorF::from_f32(vec![4, 8], (0..32).map(|i| (i % 5) as f32).collect()).unwrap();
        let bundle = LayerBundle::new("h", w, x).unwrap();
        let r = prune_layer(&bundle, &PruneConfig::default()).unwrap();
        let TensorData::F16(out) = r.pruned_weight.data() else {
            panic!("dtype changed");
        };
        for ((o, v), k) in out.iter().zip(&vals).zip(r.mask.iter()) {
            if *k {
                assert_eq!(o.to_bits(), v.to_bits());
            } else {
                assert_eq!(o.to_bits(), 0);
            }
        }
    }

    #[test]
    fn indivisible_layer_names_layer() {
        let w = TensorF::from_f32(vec![1, 6], vec![1.0; 6]).unwrap();
        let x = TensorF::from_f32(vec![2, 6], vec![1.0; 12]).unwrap();
        let bundle = LayerBundle::new("odd", w, x).unwrap();
        let err = prune_layer(&bundle, &PruneConfig::default()).unwrap_err();
        assert!(err.to_string().contains("odd"));
    }

    #[test]
    fn keep_all_pattern_has_zero_error() {
        let w =
            TensorF::from_f32(vec![2, 4], vec![1.0, -2.0, 3.0, 0.5, 2.0, 1.0, -1.0, 4.0]).unwrap();
        let x = TensorF::from_f32(vec![3, 4], (0..12).map(|i| i as f32 - 4.0).collect()).unwrap();
        let bundle = LayerBundle::new("d", w, x).unwrap();
        let cfg = PruneConfig {
            pattern: SparsityPattern::keep_all(4).unwrap(),
            ..PruneConfig::default()
        };
        let r = prune_layer(&bundle, &cfg).unwrap();
        assert_eq!(r.recon_error, 0.0);
        assert!(r.mask.iter().all(|&k| k));
    }
}
