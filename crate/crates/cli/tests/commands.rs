use std::path::Path;
use std::process::{Command, Output};

use levit_cli::read_grid;
use levit_core::fusion::{self, parity, WeightArchive};
use levit_core::model::{tiny, toy, Model};
use levit_core::profile::{random_tensor, read_records, COMPONENTS};
use levit_core::trainer::read_curve;
use levit_core::CostReport;

fn levit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_levit")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> (String, String) {
    let out = levit(args);
    let (stdout, stderr) = (String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap());
    assert!(out.status.success(), "{args:?} failed:\n{stderr}");
    (stdout, stderr)
}

fn fails(args: &[&str]) -> String {
    let out = levit(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn summary_reports_the_patch_embedding_of_levit_256() {
    let (csv, _) = ok(&["summary", "--model", "LeViT-256"]);
    let report = CostReport::read_csv("LeViT-256", csv.as_bytes()).unwrap();
    let embed = report.block("patch_embed").unwrap().macs as f64;
    assert!((embed / 184e6 - 1.0).abs() < 0.01, "{embed}");
}

#[test]
fn summary_total_of_levit_128s_and_both_conventions() {
    let (csv, _) = ok(&["summary", "--model", "levit-128s"]);
    let total = csv.lines().find(|l| l.starts_with(",total,")).unwrap();
    let macs: f64 = total.split(',').nth(2).unwrap().parse().unwrap();
    assert!((macs / 305e6 - 1.0).abs() < 0.01, "{macs}");
    assert!(csv.lines().any(|l| l.starts_with(",total_single_head,")));
    let (table, _) = ok(&["summary", "--model", "LeViT-128S", "--pretty"]);
    assert!(table.contains("both heads") && table.contains("classification head only"));
}

#[test]
fn summary_of_a_single_stage_spec_has_two_rows_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny(4);
    spec.stages[0].depth = 3;
    let file = dir.path().join("one.cfg");
    spec.save(&file).unwrap();
    let (csv, _) = ok(&["summary", "--spec", path(&file)]);
    let report = CostReport::read_csv("one", csv.as_bytes()).unwrap();
    assert_eq!(report.blocks.len(), 3 * 2 + 2);
    assert_eq!(report.blocks.first().unwrap().name, "patch_embed");
    assert_eq!(report.blocks.last().unwrap().name, "head");
}

#[test]
fn summary_layers_view_lists_primitive_layers() {
    let (csv, _) = ok(&["summary", "--model", "A1-straight", "--layers"]);
    assert!(csv.starts_with("layer,name,macs,params,out_shape\n"));
    assert!(csv.lines().count() > 24 + 1);
}

#[test]
fn unknown_models_and_bad_specs_exit_nonzero_with_a_message() {
    let err = fails(&["summary", "--model", "LeViT-999"]);
    assert!(err.contains("LeViT-999") && err.contains("LeViT-128S"), "{err}");
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.cfg");
    std::fs::write(&file, "name = 3\n").unwrap();
    assert!(fails(&["summary", "--spec", path(&file)]).contains("bad.cfg"));
}

#[test]
fn bench_rejects_too_few_repetitions() {
    let err = fails(&["bench", "--model", "LeViT-128S", "--reps", "1"]);
    assert!(err.contains("reps"), "{err}");
}

#[test]
fn bench_decomposition_lists_the_seven_components() {
    let (csv, _) = ok(&["bench", "--model", "LeViT-256", "--decompose", "--reps", "3", "--warmup", "1"]);
    let rows = read_records(csv.as_bytes()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.component.as_str()).collect();
    assert_eq!(&names[..7], COMPONENTS);
    assert_eq!(names[7], "block");
    assert!(rows.iter().all(|r| r.reps == 3 && r.median_us > 0.0));
}

#[test]
fn train_writes_a_parseable_curve_and_prints_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("toy.cfg");
    std::fs::write(&config, "[train]\nsteps = 25\nbatch_size = 16\nseed = 2\n\n[data]\nsamples = 64\n").unwrap();
    let (csv, stderr) = ok(&["train", "--config", path(&config)]);
    let curve = read_curve(csv.as_bytes()).unwrap();
    assert_eq!(curve.len(), 25);
    assert!(stderr.contains("final accuracy"), "{stderr}");
    let (again, _) = ok(&["train", "--config", path(&config)]);
    assert_eq!(csv, again, "same seed, same curve");
}

#[test]
fn fuse_keeps_forward_parity() {
    let dir = tempfile::tempdir().unwrap();
    let (w, wf) = (dir.path().join("w.bin"), dir.path().join("wf.bin"));
    ok(&["init", "--model", "LeViT-128S", "--resolution", "64", "--randomize", "--seed", "4", "--out", path(&w)]);
    let (_, stderr) = ok(&["fuse", "--weights", path(&w), "--out", path(&wf)]);
    assert!(stderr.contains("max abs logit difference"), "{stderr}");
    let (a, b): (Model<f32>, Model<f32>) = (fusion::load(&w).unwrap(), fusion::load(&wf).unwrap());
    assert!(!a.is_fused() && b.is_fused());
    let x = random_tensor(&[3, 3, 64, 64], 9);
    assert!(parity(&a, &b, &x).unwrap() < 1e-4);
    // fusing again is a no-op
    let wff = dir.path().join("wff.bin");
    let (_, stderr) = ok(&["fuse", "--weights", path(&wf), "--out", path(&wff)]);
    assert!(stderr.contains("already fused"), "{stderr}");
    assert_eq!(std::fs::read(&wf).unwrap(), std::fs::read(&wff).unwrap());
}

#[test]
fn fuse_handles_double_precision_archives() {
    let dir = tempfile::tempdir().unwrap();
    let (w, wf) = (dir.path().join("w.bin"), dir.path().join("wf.bin"));
    ok(&["init", "--model", "A4", "--resolution", "64", "--randomize", "--dtype", "f64", "--out", path(&w)]);
    ok(&["fuse", "--weights", path(&w), "--out", path(&wf)]);
    let (a, b): (Model<f64>, Model<f64>) = (fusion::load(&w).unwrap(), fusion::load(&wf).unwrap());
    assert!(parity(&a, &b, &random_tensor(&[2, 3, 64, 64], 1)).unwrap() < 1e-10);
}

#[test]
fn verify_passes_on_levit_128s() {
    let (csv, _) = ok(&["verify", "--model", "LeViT-128S"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("check,passed,detail"));
    let checks: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    for name in ["fusion equivalence", "bias symmetry", "softmax rows", "stage shapes"] {
        assert!(checks.contains(&name), "{checks:?}");
    }
}

#[test]
fn export_of_a_fresh_model_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.bin");
    ok(&["init", "--model", "LeViT-128S", "--out", path(&w)]);
    let out = dir.path().join("bias");
    ok(&["export-bias", "--weights", path(&w), "--out", path(&out)]);
    // depths 2/3/4 with 4/6/8 heads, plus shrink blocks with C/D = 8 and 16 heads
    let files: Vec<_> = std::fs::read_dir(&out).unwrap().collect();
    assert_eq!(files.len(), 2 * (2 * 4 + 3 * 6 + 4 * 8 + 8 + 16));
    for f in files {
        let grid = read_grid(&f.unwrap().path()).unwrap();
        assert!(grid.iter().flatten().all(|&v| v == 0.0));
    }
    let g = read_grid(&out.join("stage0.0.attn.head3.offsets.csv")).unwrap();
    assert_eq!((g.len(), g[0].len()), (14, 14));
    let g = read_grid(&out.join("subsample1.attn.head15.row0.csv")).unwrap();
    assert_eq!((g.len(), g[0].len()), (7, 7));
}

#[test]
fn export_of_a_single_zero_offset_value() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.bin");
    ok(&["init", "--spec", &save_toy(dir.path()), "--out", path(&w)]);
    let mut archive = fusion::load_archive(&w).unwrap();
    let entry = archive.entries.iter_mut().find(|e| e.name == "stage0.0.attn.bias_table").unwrap();
    entry.data[..4].copy_from_slice(&5f32.to_le_bytes());
    std::fs::write(&w, archive.to_bytes()).unwrap();
    let out = dir.path().join("bias");
    ok(&["export-bias", "--weights", path(&w), "--out", path(&out)]);
    let row = read_grid(&out.join("stage0.0.attn.head0.row0.csv")).unwrap();
    let flat: Vec<f64> = row.into_iter().flatten().collect();
    assert_eq!(flat[0], 5.0);
    assert!(flat[1..].iter().all(|&v| v == 0.0), "{flat:?}");
    let other = read_grid(&out.join("stage0.0.attn.head1.row0.csv")).unwrap();
    assert!(other.iter().flatten().all(|&v| v == 0.0));
}

fn save_toy(dir: &Path) -> String {
    let file = dir.join("toy.cfg");
    toy(4).save(&file).unwrap();
    file.to_str().unwrap().to_owned()
}

#[test]
fn exported_rows_of_a_trained_model_are_flip_symmetric() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("toy.cfg");
    std::fs::write(&config, "[train]\nsteps = 30\nbatch_size = 16\n\n[data]\nsamples = 64\n").unwrap();
    let w = dir.path().join("trained.bin");
    let curve = dir.path().join("curve.csv");
    ok(&["train", "--config", path(&config), "--out", path(&curve), "--save", path(&w)]);
    let trained: Model<f32> = fusion::load(&w).unwrap();
    let table = trained.named_tensors().into_iter().find(|(n, _, _)| n == "stage0.0.attn.bias_table").unwrap().1;
    assert!(table.data().iter().any(|&v| v != 0.0), "bias table should have moved");

    let out = dir.path().join("bias");
    ok(&["export-bias", "--weights", path(&w), "--out", path(&out)]);
    // the toy's first stage runs on a 2x2 grid; the upper-left query sees the
    // other corners at offsets (0,1), (1,0), (1,1)
    for head in 0..2 {
        let offsets = read_grid(&out.join(format!("stage0.0.attn.head{head}.offsets.csv"))).unwrap();
        let row = read_grid(&out.join(format!("stage0.0.attn.head{head}.row0.csv"))).unwrap();
        assert_eq!(row, offsets, "from the corner, the expanded row is the offset table itself");
        // flipping the key grid about either axis and reading from the opposite corner gives the same grid
        let flipped_rows: Vec<Vec<f64>> = row.iter().rev().cloned().collect();
        let flipped_cols: Vec<Vec<f64>> = row.iter().map(|r| r.iter().rev().cloned().collect()).collect();
        let tensor = trained.named_tensors().into_iter().find(|(n, _, _)| n == "stage0.0.attn.bias_table").unwrap().1;
        let table = levit_core::blocks::AttentionBiasTable::from_values("t", tensor, 1).unwrap();
        let e = table.expanded();
        let at = |q: usize, k: usize| e.data()[(head * 4 + q) * 4 + k] as f64;
        // query (1,0) is the vertical mirror of (0,0); query (0,1) the horizontal one
        let from_bottom_left: Vec<Vec<f64>> = (0..2).map(|i| (0..2).map(|j| at(2, i * 2 + j)).collect()).collect();
        let from_top_right: Vec<Vec<f64>> = (0..2).map(|i| (0..2).map(|j| at(1, i * 2 + j)).collect()).collect();
        assert_eq!(from_bottom_left, flipped_rows);
        assert_eq!(from_top_right, flipped_cols);
    }
}

#[test]
fn missing_bias_entries_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.bin");
    ok(&["init", "--spec", &save_toy(dir.path()), "--out", path(&w)]);
    let mut archive: WeightArchive = fusion::load_archive(&w).unwrap();
    archive.entries.retain(|e| e.name != "stage1.0.attn.bias_table");
    std::fs::write(&w, archive.to_bytes()).unwrap();
    let err = fails(&["export-bias", "--weights", path(&w), "--out", path(&dir.path().join("b"))]);
    assert!(err.contains("stage1.0.attn.bias_table"), "{err}");
}

#[test]
fn export_without_bias_tables_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.bin");
    ok(&["init", "--model", "A5", "--resolution", "64", "--out", path(&w)]);
    let err = fails(&["export-bias", "--weights", path(&w), "--out", path(&dir.path().join("b"))]);
    assert!(err.contains("no attention bias tables"), "{err}");
}
