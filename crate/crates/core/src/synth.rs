//! Seeded synthetic layers with outlier channels and uneven channel scales,
//! plus the metric/shuffle ablation run over them.
//!
//! Activations are Gaussian per channel with a channel-specific standard
//! deviation. Under [`StdProfile::SmoothAdjacent`] the log-std varies slowly
//! along the channel axis, so neighbouring channels have similar scale and
//! strong channels cluster; under [`StdProfile::Iid`] each channel's scale is
//! drawn independently. A fraction of channels is then scaled up into
//! outliers whose amplitude is at least `outlier_scale` times the median
//! channel amplitude.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::pattern::SparsityPattern;
use crate::pruner::{prune_layer, PruneConfig};
use crate::shuffle::{ShuffleConfig, ShuffleMode};
use crate::stats::amplitude;
use crate::store::LayerBundle;
use crate::tensor::{DType, TensorF};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StdProfile {
    Iid,
    #[default]
    SmoothAdjacent,
}

impl fmt::Display for StdProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StdProfile::Iid => "iid",
            StdProfile::SmoothAdjacent => "smooth_adjacent",
        })
    }
}

impl FromStr for StdProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(StdProfile::Iid),
            "smooth_adjacent" => Ok(StdProfile::SmoothAdjacent),
            other => Err(Error::InvalidArgument(format!(
                "unknown std profile {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub tokens: usize,
    pub channels: usize,
    pub out_features: usize,
    /// In `[0, 0.1]`.
    pub outlier_fraction: f64,
    /// At least 1.
    pub outlier_scale: f64,
    pub std_profile: StdProfile,
    /// Channel log-std lies in `[-log_std_spread, log_std_spread]` around `base_std`.
    pub base_std: f64,
    pub log_std_spread: f64,
    pub weight_std: f64,
    pub weight_dtype: DType,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            tokens: 2048,
            channels: 256,
            out_features: 128,
            outlier_fraction: 0.05,
            outlier_scale: 10.0,
            std_profile: StdProfile::SmoothAdjacent,
            base_std: 1.0,
            log_std_spread: 1.5,
            weight_std: 0.02,
            weight_dtype: DType::F32,
        }
    }
}

/// Smallest group size any supported pattern uses.
const MIN_GROUP: usize = 4;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(0.0..=0.1).contains(&self.outlier_fraction) {
            return bad(format!(
                "outlier_fraction {} outside [0, 0.1]",
                self.outlier_fraction
            ));
        }
        if !(self.outlier_scale >= 1.0 && self.outlier_scale.is_finite()) {
            return bad(format!("outlier_scale {} must be >= 1", self.outlier_scale));
        }
        if self.tokens < MIN_GROUP || self.channels < MIN_GROUP {
            return bad(format!(
                "tokens ({}) and channels ({}) must be >= {MIN_GROUP}",
                self.tokens, self.channels
            ));
        }
        if self.out_features == 0 {
            return bad("out_features must be >= 1".into());
        }
        for (name, v) in [("base_std", self.base_std), ("weight_std", self.weight_std)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.log_std_spread >= 0.0 && self.log_std_spread.is_finite()) {
            return bad(format!(
                "log_std_spread must be >= 0, got {}",
                self.log_std_spread
            ));
        }
        Ok(())
    }

    pub fn outlier_count(&self) -> usize {
        (self.outlier_fraction * self.channels as f64).round() as usize
    }
}

/// A generated layer together with the channels that were made outliers.
#[derive(Debug, Clone)]
pub struct SynthLayer {
    pub bundle: LayerBundle,
    pub outlier_channels: Vec<usize>,
    pub channel_std: Vec<f64>,
}

fn log_std_profile(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c = spec.channels;
    let spread = spec.log_std_spread;
    match spec.std_profile {
        StdProfile::Iid => (0..c)
            .map(|_| rng.random_range(-1.0..=1.0) * spread)
            .collect(),
        StdProfile::SmoothAdjacent => {
            // a few low-frequency waves, normalized into [-1, 1]
            let waves: Vec<(f64, f64, f64)> = (1..=3)
                .map(|k| {
                    let amp = rng.random_range(0.5..1.0) / k as f64;
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    (amp, k as f64, phase)
                })
                .collect();
            let norm: f64 = waves.iter().map(|w| w.0).sum();
            (0..c)
                .map(|i| {
                    let t = i as f64 / c as f64 * std::f64::consts::TAU;
                    let s: f64 = waves.iter().map(|&(a, f, p)| a * (f * t + p).sin()).sum();
                    spread * s / norm
                })
                .collect()
        }
    }
}

/// Builds a layer from `spec`; a pure function of the spec.
pub fn generate(spec: &SynthSpec) -> Result<SynthLayer> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (t, c) = (spec.tokens, spec.channels);

    let channel_std: Vec<f64> = log_std_profile(spec, &mut rng)
        .into_iter()
        .map(|ls| spec.base_std * ls.exp())
        .collect();

    let mut x = Array2::<f32>::zeros((t, c));
    for mut row in x.rows_mut() {
        for (v, s) in row.iter_mut().zip(&channel_std) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (z * s) as f32;
        }
    }

    let k = spec.outlier_count();
    let mut outlier_channels = sample(&mut rng, c, k).into_vec();
    outlier_channels.sort_unstable();
    if k > 0 {
        let amps: Vec<f64> = x
            .columns()
            .into_iter()
            .map(|col| amplitude(col.as_slice().unwrap_or(&col.to_vec())))
            .collect();
        let mut sorted = amps.clone();
        sorted.sort_by(f64::total_cmp);
        // raising k channels moves the median up by at most k ranks
        let bound = sorted[(c / 2 + k).min(c - 1)];
        for &ch in &outlier_channels {
            let factor = spec.outlier_scale * (bound / amps[ch]).max(1.0);
            x.column_mut(ch)
                .mapv_inplace(|v| (v as f64 * factor) as f32);
        }
    }

    let mut w = Array2::<f32>::zeros((spec.out_features, c));
    for v in w.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = (z * spec.weight_std) as f32;
    }

    let bundle = LayerBundle::new(
        format!("synth_{}", spec.seed),
        TensorF::from_matrix_as(&w, spec.weight_dtype)?,
        TensorF::from_matrix(&x)?,
    )?;
    Ok(SynthLayer {
        bundle,
        outlier_channels,
        channel_std,
    })
}

/// One configuration of the ablation, each adding a technique to the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationConfig {
    NormOnly,
    PlusEntropy,
    PlusGlobalShuffle,
    PlusLocalShuffle,
}

impl AblationConfig {
    pub const ALL: [AblationConfig; 4] = [
        AblationConfig::NormOnly,
        AblationConfig::PlusEntropy,
        AblationConfig::PlusGlobalShuffle,
        AblationConfig::PlusLocalShuffle,
    ];

    pub fn metric(self) -> MetricKind {
        match self {
            AblationConfig::NormOnly => MetricKind::Wanda,
            _ => MetricKind::ESparse,
        }
    }

    pub fn shuffle(self) -> ShuffleMode {
        match self {
            AblationConfig::NormOnly | AblationConfig::PlusEntropy => ShuffleMode::None,
            AblationConfig::PlusGlobalShuffle => ShuffleMode::Global,
            AblationConfig::PlusLocalShuffle => ShuffleMode::Full,
        }
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationConfig::NormOnly => "norm",
            AblationConfig::PlusEntropy => "norm+entropy",
            AblationConfig::PlusGlobalShuffle => "norm+entropy+gns",
            AblationConfig::PlusLocalShuffle => "norm+entropy+gns+lbs",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config: AblationConfig,
    pub recon_error: f64,
    pub retained_fraction: f64,
    pub swaps_applied: usize,
}

/// Settings shared by every ablation configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationOptions {
    pub alpha: f64,
    pub bins: usize,
    pub block_size: usize,
    pub max_iters: Option<usize>,
}

impl Default for AblationOptions {
    fn default() -> Self {
        let d = PruneConfig::default();
        AblationOptions {
            alpha: d.alpha,
            bins: d.bins,
            block_size: d.shuffle.block_size,
            max_iters: d.shuffle.max_iters,
        }
    }
}

impl AblationOptions {
    pub fn prune_config(&self, config: AblationConfig, pattern: SparsityPattern) -> PruneConfig {
        PruneConfig {
            metric: config.metric(),
            alpha: self.alpha,
            bins: self.bins,
            pattern,
            shuffle: ShuffleConfig {
                mode: config.shuffle(),
                block_size: self.block_size,
                max_iters: self.max_iters,
            },
        }
    }
}

/// Prunes `bundle` under each of the four ablation configurations.
pub fn ablation_run(
    bundle: &LayerBundle,
    pattern: SparsityPattern,
    opts: &AblationOptions,
) -> Result<Vec<AblationRow>> {
    AblationConfig::ALL
        .iter()
        .map(|&config| {
            let r = prune_layer(bundle, &opts.prune_config(config, pattern))?;
            Ok(AblationRow {
                config,
                recon_error: r.recon_error,
                retained_fraction: r.retained_metric_fraction,
                swaps_applied: r.swaps_applied(),
            })
        })
        .collect()
}

pub const ABLATION_HEADER: [&str; 7] = [
    "seed",
    "config",
    "metric",
    "shuffle",
    "recon_error",
    "retained_fraction",
    "swaps_applied",
];

/// Appends one seed's rows to a CSV writer whose header is [`ABLATION_HEADER`].
pub fn write_ablation_rows<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    seed: u64,
    rows: &[AblationRow],
) -> Result<()> {
    for r in rows {
        w.write_record([
            seed.to_string(),
            r.config.to_string(),
            r.config.metric().to_string(),
            r.config.shuffle().to_string(),
            r.recon_error.to_string(),
            r.retained_fraction.to_string(),
            r.swaps_applied.to_string(),
        ])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            tokens: 256,
            channels: 64,
            out_features: 16,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        for spec in [
            SynthSpec {
                outlier_fraction: 0.2,
                ..small(0)
            },
            SynthSpec {
                outlier_scale: 0.5,
                ..small(0)
            },
            SynthSpec {
                channels: 2,
                ..small(0)
            },
            SynthSpec {
                weight_std: 0.0,
                ..small(0)
            },
        ] {
            assert!(generate(&spec).is_err());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(7)).unwrap();
        let b = generate(&small(7)).unwrap();
        assert!(a.bundle.weight.bit_eq(&b.bundle.weight));
        assert!(a
            .bundle
            .calib_activations
            .bit_eq(&b.bundle.calib_activations));
        assert_eq!(a.outlier_channels, b.outlier_channels);
        let c = generate(&small(8)).unwrap();
        assert!(!a.bundle.weight.bit_eq(&c.bundle.weight));
    }

    #[test]
    fn ablation_has_four_rows_in_order() {
        let layer = generate(&small(1)).unwrap();
        let rows = ablation_run(
            &layer.bundle,
            SparsityPattern::TWO_FOUR,
            &AblationOptions::default(),
        )
        .unwrap();
        let configs: Vec<_> = rows.iter().map(|r| r.config).collect();
        assert_eq!(configs, AblationConfig::ALL);
        assert!(rows[2].retained_fraction >= rows[1].retained_fraction);
        assert!(rows[3].retained_fraction >= rows[2].retained_fraction);
    }

    #[test]
    fn f16_weights_generate() {
        let spec = SynthSpec {
            weight_dtype: DType::F16,
            ..small(3)
        };
        let layer = generate(&spec).unwrap();
        assert_eq!(layer.bundle.weight.dtype(), DType::F16);
    }
}
