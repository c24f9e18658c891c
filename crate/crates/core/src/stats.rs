//! Per-channel information entropy and amplitude of calibration activations.
//!
//! Each channel is binned into `K` equal-width bins spanning its own
//! `[min, max]`, so entropy does not depend on the channel's scale. Entropy
//! is in nats. A constant channel puts all mass in bin 0 and has entropy 0.

use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 100;

/// Bin index of `x` in `K` equal-width bins over `[min, max]`.
/// The maximum lands in the last bin.
#[inline]
fn bin_of(x: f64, min: f64, max: f64, bins: usize) -> usize {
    if max <= min {
        return 0;
    }
    let t = (x - min) / (max - min);
    ((t * bins as f64) as usize).min(bins - 1)
}

fn check_bins(bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "bin count must be >= 2, got {bins}"
        )));
    }
    Ok(())
}

fn finite_range(values: impl Iterator<Item = f32>) -> Result<(f32, f32)> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    let mut n = 0usize;
    for (i, v) in values.enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        lo = lo.min(v);
        hi = hi.max(v);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("channel has no samples".into()));
    }
    Ok((lo, hi))
}

fn histogram_counts<I>(values: I, lo: f32, hi: f32, bins: usize) -> Vec<u64>
where
    I: Iterator<Item = f32>,
{
    let mut counts = vec![0u64; bins];
    for v in values {
        counts[bin_of(v as f64, lo as f64, hi as f64, bins)] += 1;
    }
    counts
}

fn normalize(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Probability of each of `bins` equal-width bins over the channel's range.
pub fn channel_histogram(values: &[f32], bins: usize) -> Result<Vec<f64>> {
    check_bins(bins)?;
    let (lo, hi) = finite_range(values.iter().copied())?;
    Ok(normalize(&histogram_counts(
        values.iter().copied(),
        lo,
        hi,
        bins,
    )))
}

/// Shannon entropy in nats; zero-probability bins contribute nothing.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(k) = p.iter().position(|&v| v.is_nan() || v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "probability {k} is negative ({})",
            p[k]
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    Ok(h.max(0.0))
}

/// L2 norm over all tokens, accumulated in f64.
pub fn amplitude(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| {
            let v = v as f64;
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Entropy, amplitude and range of every channel of a `[T, C]` activation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub bins: usize,
    pub entropy: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.entropy.len()
    }

    /// Writes `channel,entropy,amplitude,min,max` rows.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["channel", "entropy", "amplitude", "min", "max"])?;
        for c in 0..self.channels() {
            w.write_record([
                c.to_string(),
                self.entropy[c].to_string(),
                self.amplitude[c].to_string(),
                self.min[c].to_string(),
                self.max[c].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

struct ChannelSummary {
    entropy: f64,
    amplitude: f64,
    min: f32,
    max: f32,
}

fn summarize_channel(x: &ArrayView2<'_, f32>, c: usize, bins: usize) -> Result<ChannelSummary> {
    let col = x.column(c);
    // pass 1: range; pass 2: histogram and sum of squares
    let (min, max) = finite_range(col.iter().copied()).map_err(|e| match e {
        Error::NonFinite { index } => Error::NonFinite {
            index: index * x.ncols() + c,
        },
        e => e,
    })?;
    let counts = histogram_counts(col.iter().copied(), min, max, bins);
    let sumsq: f64 = col.iter().map(|&v| (v as f64) * (v as f64)).sum();
    Ok(ChannelSummary {
        entropy: entropy(&normalize(&counts))?,
        amplitude: sumsq.sqrt(),
        min,
        max,
    })
}

/// Computes [`ChannelStats`] for activations laid out `[T, C]`.
pub fn compute_stats(x: ArrayView2<'_, f32>, bins: usize) -> Result<ChannelStats> {
    check_bins(bins)?;
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("activations have no tokens".into()));
    }
    let per_channel = (0..x.ncols())
        .into_par_iter()
        .map(|c| summarize_channel(&x, c, bins))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = ChannelStats {
        bins,
        entropy: Vec::with_capacity(per_channel.len()),
        amplitude: Vec::with_capacity(per_channel.len()),
        min: Vec::with_capacity(per_channel.len()),
        max: Vec::with_capacity(per_channel.len()),
    };
    for s in per_channel {
        stats.entropy.push(s.entropy);
        stats.amplitude.push(s.amplitude);
        stats.min.push(s.min);
        stats.max.push(s.max);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn constant_channel_all_mass_in_first_bin() {
        assert_eq!(
            channel_histogram(&[0.0; 4], 4).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn two_values_split_evenly() {
        assert_eq!(channel_histogram(&[0.0, 1.0], 2).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn max_falls_in_last_bin() {
        let p = channel_histogram(&[0.0, 0.5, 1.0], 10).unwrap();
        assert_eq!(p[9], 1.0 / 3.0);
        assert_eq!(p[5], 1.0 / 3.0);
    }

    #[test]
    fn histogram_rejects_bad_input() {
        assert!(channel_histogram(&[1.0, f32::NAN], 4).is_err());
        assert!(channel_histogram(&[1.0], 1).is_err());
        assert!(channel_histogram(&[], 4).is_err());
    }

    #[test]
    fn entropy_anchors() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(entropy(&[1.5, -0.5]).is_err());
        assert!(entropy(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn amplitude_anchors() {
        assert_eq!(amplitude(&[3.0, 4.0]), 5.0);
        assert_eq!(amplitude(&[0.0; 3]), 0.0);
    }

    #[test]
    fn zero_activations_have_zero_stats() {
        let x = Array2::<f32>::zeros((8, 4));
        let s = compute_stats(x.view(), 100).unwrap();
        assert_eq!(s.entropy, vec![0.0; 4]);
        assert_eq!(s.amplitude, vec![0.0; 4]);
    }

    #[test]
    fn constant_and_binary_channels() {
        let x = array![[3.0f32, -1.0], [3.0, 1.0], [3.0, -1.0], [3.0, 1.0]];
        let s = compute_stats(x.view(), 100).unwrap();
        assert_eq!(s.entropy[0], 0.0);
        assert_eq!(s.entropy[1], std::f64::consts::LN_2);
        assert_eq!(s.amplitude[1], 2.0);
        assert_eq!((s.min[1], s.max[1]), (-1.0, 1.0));
    }

    #[test]
    fn non_finite_activation_reports_flat_index() {
        let mut x = Array2::<f32>::zeros((3, 4));
        x[[2, 1]] = f32::INFINITY;
        assert!(matches!(
            compute_stats(x.view(), 10),
            Err(Error::NonFinite { index: 9 })
        ));
    }

    #[test]
    fn csv_header_and_rows() {
        let x = array![[0.0f32, 1.0], [1.0, 1.0]];
        let s = compute_stats(x.view(), 4).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("channel,entropy,amplitude,min,max"));
        assert_eq!(lines.count(), 2);
    }
}
