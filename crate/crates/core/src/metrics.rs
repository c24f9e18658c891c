//! Per-weight importance scores.
//!
//! Channels are the input dimension (columns) of a `[C_out, C_in]` weight,
//! matching the channel axis of the `[T, C_in]` activations.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::stats::ChannelStats;

pub const DEFAULT_ALPHA: f64 = 70.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricKind {
    /// `|w| * (entropy + alpha * amplitude)`
    ESparse,
    /// `|w| * amplitude`
    Wanda,
    /// `|w|`
    Magnitude,
}

impl MetricKind {
    pub fn needs_stats(self) -> bool {
        !matches!(self, MetricKind::Magnitude)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::ESparse => "esparse",
            MetricKind::Wanda => "wanda",
            MetricKind::Magnitude => "magnitude",
        })
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "esparse" => Ok(MetricKind::ESparse),
            "wanda" => Ok(MetricKind::Wanda),
            "magnitude" => Ok(MetricKind::Magnitude),
            other => Err(Error::InvalidArgument(format!(
                "unknown metric {other:?} (expected esparse, wanda or magnitude)"
            ))),
        }
    }
}

/// Non-negative importance scores with the same shape as the weight.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    pub scores: Array2<f64>,
    pub kind: MetricKind,
    /// Set only for [`MetricKind::ESparse`].
    pub alpha: Option<f64>,
}

impl MetricMatrix {
    /// Wraps raw scores, e.g. for search experiments that have no weight.
    pub fn from_scores(scores: Array2<f64>, kind: MetricKind) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "metric scores must be finite and non-negative, found {bad}"
            )));
        }
        Ok(MetricMatrix {
            scores,
            kind,
            alpha: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.scores.nrows()
    }

    pub fn channels(&self) -> usize {
        self.scores.ncols()
    }

    pub fn total(&self) -> f64 {
        self.scores.sum()
    }

    /// Scores with columns reordered so that column `j` is channel `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Array2<f64> {
        self.scores.select(Axis(1), order)
    }
}

fn scaled_by_channel(w: ArrayView2<'_, f32>, channel_weight: &[f64]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(w.raw_dim());
    for (mut o, wr) in out.rows_mut().into_iter().zip(w.rows()) {
        for ((o, &wv), &s) in o.iter_mut().zip(wr.iter()).zip(channel_weight) {
            *o = (wv as f64).abs() * s;
        }
    }
    out
}

fn check_channels(w: &ArrayView2<'_, f32>, stats: &ChannelStats) -> Result<()> {
    if w.ncols() != stats.channels() {
        return Err(Error::Shape(format!(
            "weight has {} input channels, stats cover {}",
            w.ncols(),
            stats.channels()
        )));
    }
    Ok(())
}

pub fn esparse_metric(
    w: ArrayView2<'_, f32>,
    stats: &ChannelStats,
    alpha: f64,
) -> Result<MetricMatrix> {
    check_channels(&w, stats)?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    let channel: Vec<f64> = stats
        .entropy
        .iter()
        .zip(&stats.amplitude)
        .map(|(ir, am)| ir + alpha * am)
        .collect();
    Ok(MetricMatrix {
        scores: scaled_by_channel(w, &channel),
        kind: MetricKind::ESparse,
        alpha: Some(alpha),
    })
}

pub fn wanda_metric(w: ArrayView2<'_, f32>, stats: &ChannelStats) -> Result<MetricMatrix> {
    check_channels(&w, stats)?;
    Ok(MetricMatrix {
        scores: scaled_by_channel(w, &stats.amplitude),
        kind: MetricKind::Wanda,
        alpha: None,
    })
}

pub fn magnitude_metric(w: ArrayView2<'_, f32>) -> MetricMatrix {
    MetricMatrix {
        scores: w.mapv(|v| (v as f64).abs()),
        kind: MetricKind::Magnitude,
        alpha: None,
    }
}

/// Dispatches on `kind`; `stats` may be `None` only for magnitude.
pub fn compute_metric(
    kind: MetricKind,
    w: ArrayView2<'_, f32>,
    stats: Option<&ChannelStats>,
    alpha: f64,
) -> Result<MetricMatrix> {
    let need = || {
        stats.ok_or_else(|| {
            Error::InvalidArgument(format!("metric {kind} needs channel statistics"))
        })
    };
    match kind {
        MetricKind::ESparse => esparse_metric(w, need()?, alpha),
        MetricKind::Wanda => wanda_metric(w, need()?),
        MetricKind::Magnitude => Ok(magnitude_metric(w)),
    }
}
