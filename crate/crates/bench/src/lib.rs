//! Seeded inputs for the kernel benchmarks.

use ndarray::Array2;
use nmprune::metrics::MetricMatrix;
use nmprune::pruner::{layer_metric, prune_layer};
use nmprune::shuffle::{ShuffleConfig, ShuffleMode};
use nmprune::synth::{generate, SynthSpec};
use nmprune::{DType, LayerBundle, MetricKind, PackedSparseWeight, PruneConfig};

/// A synthetic layer with f16 weights `[rows, cols]` and `tokens` activations.
pub fn layer(rows: usize, cols: usize, tokens: usize, seed: u64) -> LayerBundle {
    generate(&SynthSpec {
        seed,
        tokens,
        channels: cols,
        out_features: rows,
        weight_dtype: DType::F16,
        ..SynthSpec::default()
    })
    .expect("valid synthetic spec")
    .bundle
}

pub fn metric(bundle: &LayerBundle, cfg: &PruneConfig) -> MetricMatrix {
    layer_metric(bundle, cfg).expect("metric of a valid layer")
}

/// A magnitude-pruned 2:4 layer: packed weight, dense masked weight and activations.
pub fn packed(
    rows: usize,
    cols: usize,
    tokens: usize,
    seed: u64,
) -> (PackedSparseWeight, Array2<f32>, Array2<f32>) {
    let b = layer(rows, cols, tokens, seed);
    let cfg = PruneConfig {
        metric: MetricKind::Magnitude,
        shuffle: ShuffleConfig::with_mode(ShuffleMode::None),
        ..PruneConfig::default()
    };
    let r = prune_layer(&b, &cfg).expect("prune of a valid layer");
    let p = PackedSparseWeight::pack(&r).expect("2:4 result packs");
    let w = r.pruned_weight.to_matrix().expect("rank 2");
    let x = b.calib_activations.to_matrix().expect("rank 2");
    (p, w, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_fixture_agrees_with_dense() {
        let (p, w, x) = packed(8, 32, 16, 3);
        assert_eq!(p.to_dense(), w);
        let y = p.sparse_gemm(x.view()).unwrap();
        let d = nmprune::packed::dense_gemm(w.view(), x.view()).unwrap();
        let err: f32 = y
            .iter()
            .zip(&d)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(err < 1e-4);
    }
}
