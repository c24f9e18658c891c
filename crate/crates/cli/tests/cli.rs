use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::{Array2, Axis};
use nmprune::store::{load_bundle, load_manifest, read_tensor};

fn nmprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmprune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nmprune(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two synthetic layers, 64 channels, 256 tokens.
fn toy(dir: &Path) -> PathBuf {
    let model = dir.join("model");
    ok(&[
        "synth",
        "--out",
        p(&model),
        "--layers",
        "2",
        "--seed",
        "5",
        "--channels",
        "64",
        "--tokens",
        "256",
        "--out-features",
        "32",
    ]);
    model.join("manifest.json")
}

#[test]
fn stats_writes_one_csv_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy(dir.path());
    let out = dir.path().join("stats");
    ok(&["stats", "--manifest", p(&manifest), "--out", p(&out)]);
    for id in ["layer0", "layer1"] {
        let mut rdr = csv::Reader::from_path(out.join(format!("{id}.stats.csv"))).unwrap();
        assert_eq!(
            rdr.headers().unwrap(),
            vec!["channel", "entropy", "amplitude", "min", "max"]
        );
        let mut n = 0;
        for rec in rdr.records() {
            let ir: f64 = rec.unwrap()[1].parse().unwrap();
            assert!((0.0..=100f64.ln() + 1e-12).contains(&ir));
            n += 1;
        }
        assert_eq!(n, 64);
    }
}

#[test]
fn missing_manifest_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    for cmd in ["stats", "prune"] {
        let out = nmprune(&[cmd, "--manifest", p(&missing), "--out", p(dir.path())]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
    }
}

#[test]
fn invalid_pattern_and_block_size_are_usage_errors() {
    let out = nmprune(&[
        "prune",
        "--manifest",
        "m.json",
        "--out",
        "o",
        "--pattern",
        "4:3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = nmprune(&[
        "prune",
        "--manifest",
        "m.json",
        "--out",
        "o",
        "--pattern",
        "4:8",
        "--block-size",
        "12",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn prune_writes_full_output_tree() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy(dir.path());
    let out = dir.path().join("pruned");
    ok(&["prune", "--manifest", p(&manifest), "--out", p(&out)]);
    for id in ["layer0", "layer1"] {
        for suffix in ["weight.espt", "mask.espt", "perm.json"] {
            assert!(
                out.join(format!("{id}.{suffix}")).is_file(),
                "{id}.{suffix}"
            );
        }
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

/// Keep the two largest `|W| * ‖X_c‖` in every group of four, lower column on ties.
fn wanda_reference(w: &Array2<f32>, x: &Array2<f32>) -> Array2<f32> {
    let norms: Vec<f64> = x
        .axis_iter(Axis(1))
        .map(|c| c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut mask = Array2::zeros(w.dim());
    for r in 0..w.nrows() {
        for g in 0..w.ncols() / 4 {
            let mut cols: Vec<usize> = (g * 4..g * 4 + 4).collect();
            let s = |c: usize| (w[[r, c]] as f64).abs() * norms[c];
            cols.sort_by(|&a, &b| s(b).partial_cmp(&s(a)).unwrap().then(a.cmp(&b)));
            for &c in &cols[..2] {
                mask[[r, c]] = 1.0;
            }
        }
    }
    mask
}

#[test]
fn unshuffled_wanda_matches_reference_rule() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = toy(dir.path());
    let out = dir.path().join("pruned");
    ok(&[
        "prune",
        "--manifest",
        p(&manifest_path),
        "--out",
        p(&out),
        "--metric",
        "wanda",
        "--shuffle",
        "none",
    ]);
    let manifest = load_manifest(&manifest_path).unwrap();
    for id in ["layer0", "layer1"] {
        let b = load_bundle(&manifest, id).unwrap();
        let w = b.weight.to_matrix().unwrap();
        let x = b.calib_activations.to_matrix().unwrap();
        let mask = read_tensor(out.join(format!("{id}.mask.espt")))
            .unwrap()
            .to_matrix()
            .unwrap();
        assert_eq!(mask, wanda_reference(&w, &x), "{id}");
        let perm: Vec<usize> = serde_json_order(&out.join(format!("{id}.perm.json")));
        assert_eq!(perm, (0..64).collect::<Vec<_>>());
    }
}

fn serde_json_order(path: &Path) -> Vec<usize> {
    let text = fs::read_to_string(path).unwrap();
    text.trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|s| s.trim().parse().unwrap())
        .collect()
}

#[test]
fn pack_eval_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy(dir.path());
    let out = dir.path().join("pruned");
    ok(&[
        "prune",
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
        "--block-size",
        "32",
    ]);
    let packed = dir.path().join("packed");
    let text = ok(&["pack", "--pruned", p(&out), "--out", p(&packed)]);
    assert!(text.contains("ratio 0.5625"), "{text}");

    let text = ok(&[
        "eval",
        "--manifest",
        p(&manifest),
        "--pruned",
        p(&out),
        "--packed",
        p(&packed),
    ]);
    let worst: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("max rel_error "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(worst < 1e-5, "{text}");
    assert!(text.contains("flop_ratio 0.5000"));

    let espk = packed.join("layer0.espk");
    let text = ok(&["inspect", p(&espk)]);
    assert!(text.contains("format: ESPK"));
    assert!(text.contains("shape: [32, 64]"));
    assert!(text.contains("invariants: OK"));

    let text = ok(&["inspect", p(&out.join("layer0.weight.espt"))]);
    assert!(text.contains("format: ESPT"));
    assert!(text.contains("shape: [32, 64]"));
    assert!(text.contains("invariants: OK"));

    // make the first group's nibble claim positions (1, 1)
    let mut bytes = fs::read(&espk).unwrap();
    let index_start = bytes.len() - 32 * 16 / 2;
    bytes[index_start] = (bytes[index_start] & 0xf0) | 0b0101;
    let bad = dir.path().join("bad.espk");
    fs::write(&bad, &bytes).unwrap();
    let out_bad = nmprune(&["inspect", p(&bad)]);
    assert_eq!(out_bad.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out_bad.stdout);
    assert!(
        text.contains("row 0 group 0 has positions (1, 1)"),
        "{text}"
    );
}

#[test]
fn inspect_rejects_unknown_and_truncated_files() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"XXXXabcdef").unwrap();
    assert_eq!(nmprune(&["inspect", p(&junk)]).status.code(), Some(2));

    let manifest = toy(dir.path());
    let espt = manifest.parent().unwrap().join("layer0.weight.espt");
    let bytes = fs::read(&espt).unwrap();
    let cut = dir.path().join("cut.espt");
    fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    let out = nmprune(&["inspect", p(&cut)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("expected"));
}

#[test]
fn four_eight_layers_refuse_to_pack() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy(dir.path());
    let out = dir.path().join("pruned");
    ok(&[
        "prune",
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
        "--pattern",
        "4:8",
        "--block-size",
        "64",
    ]);
    let res = nmprune(&["pack", "--pruned", p(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("2:4"));
}

#[test]
fn prune_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["prune", "--manifest", p(&manifest), "--out", p(&a)]);
    ok(&["prune", "--manifest", p(&manifest), "--out", p(&b)]);
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(
            fs::read(a.join(&n)).unwrap(),
            fs::read(b.join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn bench_emits_four_rows_per_seed() {
    let text = ok(&[
        "bench",
        "--seeds",
        "2",
        "--channels",
        "32",
        "--tokens",
        "64",
        "--out-features",
        "8",
        "--block-size",
        "32",
    ]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "seed,config,metric,shuffle,recon_error,retained_fraction,swaps_applied"
    );
    assert_eq!(lines.len(), 1 + 2 * 4);
    assert!(lines[1].starts_with("0,norm,wanda,none,"));
    assert!(lines[8].starts_with("1,norm+entropy+gns+lbs,esparse,full,"));
}

#[test]
fn gemm_bench_reports_relative_timing() {
    let text = ok(&[
        "gemm-bench",
        "--rows",
        "64",
        "--cols",
        "128",
        "--tokens",
        "16",
        "--reps",
        "2",
    ]);
    assert!(text.contains("sparse/dense time:"));
    assert!(text.contains("flop ratio: 0.5"));
}
