use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use nmprune::metrics::DEFAULT_ALPHA;
use nmprune::packed::{dense_gemm, read_packed, write_packed, PACK_MAGIC};
use nmprune::pruner::{prune_layer, prune_model, read_pruned_layer, read_summary};
use nmprune::shuffle::{ShuffleConfig, ShuffleMode, DEFAULT_BLOCK_SIZE};
use nmprune::stats::compute_stats;
use nmprune::stats::DEFAULT_BINS;
use nmprune::store::{
    decode_header, decode_tensor, load_bundle, load_manifest, write_model, TENSOR_MAGIC,
};
use nmprune::synth::{
    ablation_run, generate, write_ablation_rows, AblationConfig, AblationOptions, StdProfile,
    SynthSpec, ABLATION_HEADER,
};
use nmprune::{DType, MetricKind, PackedSparseWeight, PruneConfig, SparsityPattern, TensorF};

use crate::{check_bins, check_block_size, CliError, Config, StatsArgs, GEMM_TOLERANCE};

type CmdResult = Result<(), CliError>;

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::from(nmprune::Error::io(dir, e)).context("creating output directory")
    })
}

fn stats_file(layer_id: &str) -> String {
    format!("{layer_id}.stats.csv")
}

pub fn packed_file(layer_id: &str) -> String {
    format!("{layer_id}.espk")
}

pub fn cmd_stats(args: &StatsArgs, out: &mut impl Write) -> CmdResult {
    check_bins(args.bins)?;
    let manifest = load_manifest(&args.manifest)?;
    create_dir(&args.out)?;
    for id in manifest.layer_ids() {
        let bundle = load_bundle(&manifest, id)?;
        let x = bundle.calib_activations.to_matrix()?;
        let stats = compute_stats(x.view(), args.bins).map_err(|e| e.in_layer(id))?;
        let path = args.out.join(stats_file(id));
        let file = fs::File::create(&path).map_err(|e| nmprune::Error::io(&path, e))?;
        stats.write_csv(file)?;
        let max_ir = stats.entropy.iter().copied().fold(0.0, f64::max);
        writeln!(
            out,
            "{id}: {} channels, max entropy {max_ir:.4}",
            stats.channels()
        )?;
    }
    Ok(())
}

pub fn cmd_prune(config: &Config, out: &mut impl Write) -> CmdResult {
    let cfg = config.prune_config()?;
    let manifest = load_manifest(&config.manifest)?;
    let report = prune_model(&manifest, &cfg, &config.out)?;
    for row in &report.summary {
        writeln!(
            out,
            "{}: recon_error {:.6} retained {:.6} swaps {}",
            row.layer_id, row.recon_error, row.retained_fraction, row.swaps_applied
        )?;
    }
    writeln!(
        out,
        "{} layers, mean recon_error {:.6}, mean retained {:.6}",
        report.summary.len(),
        report.mean_recon_error(),
        report.mean_retained_fraction()
    )?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct PackArgs {
    /// Directory written by `prune`.
    #[arg(long)]
    pub pruned: PathBuf,
    /// Where to write `.espk` files; defaults to the pruned directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_pack(args: &PackArgs, out: &mut impl Write) -> CmdResult {
    let rows = read_summary(&args.pruned)?;
    let dir = args.out.clone().unwrap_or_else(|| args.pruned.clone());
    create_dir(&dir)?;
    for row in &rows {
        let layer = read_pruned_layer(&args.pruned, row).map_err(|e| e.in_layer(&row.layer_id))?;
        let packed =
            PackedSparseWeight::pack_layer(&layer).map_err(|e| e.in_layer(&row.layer_id))?;
        write_packed(&packed, dir.join(packed_file(&row.layer_id)))?;
        let acc = packed.account(1);
        writeln!(
            out,
            "{}: {} -> {} bytes (ratio {:.4}, header {} bytes)",
            row.layer_id,
            acc.bytes_dense,
            acc.bytes_sparse,
            acc.memory_ratio(),
            acc.header_bytes
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Manifest supplying the calibration activations.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory written by `prune`.
    #[arg(long)]
    pub pruned: PathBuf,
    /// Directory holding the `.espk` files; defaults to the pruned directory.
    #[arg(long)]
    pub packed: Option<PathBuf>,
}

/// `‖a − b‖_F / ‖b‖_F` in f64; the plain norm of `a` when `b` is zero.
pub fn relative_error(a: &ndarray::Array2<f32>, b: &ndarray::Array2<f32>) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        num += (x as f64 - y as f64).powi(2);
        den += (y as f64).powi(2);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

pub fn cmd_eval(args: &EvalArgs, out: &mut impl Write) -> CmdResult {
    let manifest = load_manifest(&args.manifest)?;
    let rows = read_summary(&args.pruned)?;
    let packed_dir = args.packed.clone().unwrap_or_else(|| args.pruned.clone());
    let mut worst = 0.0f64;
    for row in &rows {
        let id = row.layer_id.as_str();
        let packed = read_packed(packed_dir.join(packed_file(id))).map_err(|e| e.in_layer(id))?;
        let layer = read_pruned_layer(&args.pruned, row).map_err(|e| e.in_layer(id))?;
        let w = layer.weight.to_matrix()?;
        // packed values are f16, so the dense reference is the pruned weight at that precision
        let w16 = TensorF::from_matrix_as(&w, DType::F16)?.to_matrix()?;
        if packed.to_dense() != w16 {
            return Err(CliError::failure(format!(
                "{id}: packed weight does not reproduce the pruned dense weight"
            )));
        }
        let x = load_bundle(&manifest, id)?.calib_activations.to_matrix()?;
        let sparse = packed.sparse_gemm(x.view()).map_err(|e| e.in_layer(id))?;
        let dense = dense_gemm(w16.view(), x.view()).map_err(|e| e.in_layer(id))?;
        let err = relative_error(&sparse, &dense);
        worst = worst.max(err);
        let exact = dense_gemm(w.view(), x.view()).map_err(|e| e.in_layer(id))?;
        let rounding = relative_error(&dense, &exact);
        let acc = packed.account(x.nrows());
        writeln!(
            out,
            "{id}: rel_error {err:.3e} f16_rounding {rounding:.3e} flop_ratio {:.4} memory_ratio {:.4}",
            acc.flop_ratio,
            acc.memory_ratio()
        )?;
    }
    writeln!(
        out,
        "max rel_error {worst:.3e} (tolerance {GEMM_TOLERANCE:e})"
    )?;
    if worst >= GEMM_TOLERANCE {
        return Err(CliError::failure(format!(
            "sparse and dense products differ by {worst:.3e}"
        )));
    }
    Ok(())
}

pub fn cmd_inspect(path: &Path, out: &mut impl Write) -> CmdResult {
    let bytes = fs::read(path).map_err(|e| nmprune::Error::io(path, e))?;
    let magic = bytes.get(..4).unwrap_or(&[]);
    if magic == TENSOR_MAGIC {
        inspect_tensor(&bytes, out)
    } else if magic == PACK_MAGIC {
        inspect_packed(&bytes, out)
    } else {
        Err(CliError::usage(format!(
            "{}: not an ESPT or ESPK file",
            path.display()
        )))
    }
}

fn violation(out: &mut impl Write, what: impl std::fmt::Display) -> CmdResult {
    writeln!(out, "invariants: VIOLATED: {what}")?;
    Err(CliError::failure(format!("invariant violated: {what}")))
}

fn inspect_tensor(bytes: &[u8], out: &mut impl Write) -> CmdResult {
    let header = match decode_header(bytes) {
        Ok(h) => h,
        Err(e) => return violation(out, e),
    };
    writeln!(out, "format: ESPT")?;
    writeln!(out, "version: {}", header.version)?;
    writeln!(out, "dtype: {}", header.dtype)?;
    writeln!(out, "shape: {:?}", header.shape)?;
    writeln!(out, "bytes: {}", bytes.len())?;
    match decode_tensor(bytes) {
        Ok(_) => {
            writeln!(out, "invariants: OK")?;
            Ok(())
        }
        Err(e) => violation(out, e),
    }
}

fn inspect_packed(bytes: &[u8], out: &mut impl Write) -> CmdResult {
    let w = match PackedSparseWeight::decode_unchecked(bytes) {
        Ok(w) => w,
        Err(e) => return violation(out, e),
    };
    let acc = w.account(1);
    writeln!(out, "format: ESPK")?;
    writeln!(out, "version: {}", nmprune::packed::PACK_VERSION)?;
    writeln!(out, "shape: [{}, {}]", w.rows(), w.cols())?;
    writeln!(out, "pattern: {}", w.pattern())?;
    writeln!(out, "permutation: {} entries", w.permutation().len())?;
    writeln!(out, "values: {}", w.values().len())?;
    writeln!(out, "index bytes: {}", w.indices().len())?;
    writeln!(out, "memory ratio: {}", acc.memory_ratio())?;
    let violations = w.validate();
    if violations.is_empty() {
        writeln!(out, "invariants: OK")?;
        return Ok(());
    }
    for v in &violations {
        writeln!(out, "violation: {v}")?;
    }
    violation(out, &violations[0])
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// CSV output; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 256)]
    pub channels: usize,
    #[arg(long, default_value_t = 2048)]
    pub tokens: usize,
    #[arg(long, default_value_t = 128)]
    pub out_features: usize,
    #[arg(long, default_value_t = StdProfile::SmoothAdjacent)]
    pub profile: StdProfile,
    #[arg(long, default_value_t = SparsityPattern::TWO_FOUR)]
    pub pattern: SparsityPattern,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn cmd_bench(args: &BenchArgs, out: &mut impl Write) -> CmdResult {
    check_bins(args.bins)?;
    check_block_size(args.block_size, args.pattern)?;
    let opts = AblationOptions {
        alpha: args.alpha,
        bins: args.bins,
        block_size: args.block_size,
        max_iters: args.max_iters,
    };
    let mut csv_out = Vec::new();
    let mut per_config: Vec<Vec<f64>> = vec![Vec::new(); AblationConfig::ALL.len()];
    {
        let mut w = csv::Writer::from_writer(&mut csv_out);
        w.write_record(ABLATION_HEADER)
            .map_err(nmprune::Error::from)?;
        for seed in args.seed..args.seed + args.seeds {
            let spec = SynthSpec {
                seed,
                tokens: args.tokens,
                channels: args.channels,
                out_features: args.out_features,
                std_profile: args.profile,
                ..SynthSpec::default()
            };
            let layer = generate(&spec)?;
            let rows = ablation_run(&layer.bundle, args.pattern, &opts)?;
            for (i, r) in rows.iter().enumerate() {
                per_config[i].push(r.recon_error);
            }
            write_ablation_rows(&mut w, seed, &rows)?;
        }
        w.flush()?;
    }
    match &args.out {
        Some(path) => {
            fs::write(path, &csv_out).map_err(|e| nmprune::Error::io(path, e))?;
            for (config, errs) in AblationConfig::ALL.iter().zip(per_config) {
                writeln!(out, "{config}: median recon_error {:.6}", median(errs))?;
            }
        }
        None => out.write_all(&csv_out)?,
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct GemmBenchArgs {
    #[arg(long, default_value_t = 1024)]
    pub rows: usize,
    #[arg(long, default_value_t = 1024)]
    pub cols: usize,
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Relative timing of the reference kernels; not a latency claim.
pub fn cmd_gemm_bench(args: &GemmBenchArgs, out: &mut impl Write) -> CmdResult {
    if args.reps == 0 {
        return Err(CliError::usage("reps must be at least 1"));
    }
    let spec = SynthSpec {
        seed: args.seed,
        tokens: args.tokens.max(4),
        channels: args.cols,
        out_features: args.rows,
        weight_dtype: DType::F16,
        ..SynthSpec::default()
    };
    let bundle = generate(&spec)?.bundle;
    let cfg = PruneConfig {
        metric: MetricKind::Magnitude,
        shuffle: ShuffleConfig::with_mode(ShuffleMode::None),
        ..PruneConfig::default()
    };
    let result = prune_layer(&bundle, &cfg)?;
    let packed = PackedSparseWeight::pack(&result)?;
    let w = result.pruned_weight.to_matrix()?;
    let x = bundle.calib_activations.to_matrix()?;

    let time = |f: &dyn Fn() -> nmprune::Result<ndarray::Array2<f32>>| -> Result<f64, CliError> {
        let start = Instant::now();
        for _ in 0..args.reps {
            std::hint::black_box(f()?);
        }
        Ok(start.elapsed().as_secs_f64() / args.reps as f64)
    };
    let dense = time(&|| dense_gemm(w.view(), x.view()))?;
    let sparse = time(&|| packed.sparse_gemm(x.view()))?;
    let err = relative_error(
        &packed.sparse_gemm(x.view())?,
        &dense_gemm(w.view(), x.view())?,
    );
    let acc = packed.account(x.nrows());
    writeln!(
        out,
        "shape: [{}, {}] x {} tokens, {} reps",
        args.rows,
        args.cols,
        x.nrows(),
        args.reps
    )?;
    writeln!(out, "dense: {:.3} ms", dense * 1e3)?;
    writeln!(out, "sparse: {:.3} ms", sparse * 1e3)?;
    writeln!(out, "sparse/dense time: {:.3}", sparse / dense)?;
    writeln!(out, "flop ratio: {}", acc.flop_ratio)?;
    writeln!(out, "rel_error: {err:.3e}")?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub channels: usize,
    #[arg(long, default_value_t = 512)]
    pub tokens: usize,
    #[arg(long, default_value_t = 128)]
    pub out_features: usize,
    #[arg(long, default_value_t = StdProfile::SmoothAdjacent)]
    pub profile: StdProfile,
    /// Weight storage type: f32 or f16.
    #[arg(long, default_value = "f32")]
    pub dtype: String,
}

pub fn cmd_synth(args: &SynthArgs, out: &mut impl Write) -> CmdResult {
    let dtype = match args.dtype.as_str() {
        "f32" => DType::F32,
        "f16" => DType::F16,
        other => {
            return Err(CliError::usage(format!(
                "unknown dtype {other:?}, expected f32 or f16"
            )))
        }
    };
    let bundles = (0..args.layers)
        .map(|i| {
            let spec = SynthSpec {
                seed: args.seed + i as u64,
                tokens: args.tokens,
                channels: args.channels,
                out_features: args.out_features,
                std_profile: args.profile,
                weight_dtype: dtype,
                ..SynthSpec::default()
            };
            let mut b = generate(&spec)?.bundle;
            b.layer_id = format!("layer{i}");
            Ok(b)
        })
        .collect::<nmprune::Result<Vec<_>>>()?;
    let path = write_model("synthetic", &bundles, &args.out)?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}
