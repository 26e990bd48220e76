use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::CommandFactory;
use nabla_cli::Cli;
use nabla_core::{
    block_sparse_attention, join_masks, load_mask, load_tensor, nabla_mask, save_mask, save_tensor, sta_mask,
    AttentionInputs, BlockMask, NablaParams, StaWindow, Tensor, TokenGrid,
};
use serde_json::Value;

fn nabla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nabla"))
        .args(args)
        .output()
        .unwrap()
}

fn ok_lines(args: &[&str]) -> Vec<Value> {
    let out = nabla(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn ok_one(args: &[&str]) -> Value {
    let mut lines = ok_lines(args);
    assert_eq!(lines.len(), 1);
    lines.pop().unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

/// Deterministic pseudo-random tensor without pulling in an RNG crate.
fn tensor(shape: &[usize], salt: u32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| {
        let x = (i as u32)
            .wrapping_mul(2654435761)
            .wrapping_add(salt.wrapping_mul(40503))
            >> 8;
        (x % 2000) as f32 / 500.0 - 2.0
    })
    .unwrap()
}

const SUBCOMMANDS: [&str; 9] = [
    "reorder",
    "mask-nabla",
    "mask-sta",
    "mask-join",
    "mask-stats",
    "mask-export-pgm",
    "attn",
    "train-toy",
    "distill-toy",
];

fn help_transcript() -> String {
    let mut text = String::new();
    for args in std::iter::once(vec!["--help"]).chain(SUBCOMMANDS.iter().map(|s| vec![*s, "--help"])) {
        let out = nabla(&args);
        assert!(out.status.success());
        text.push_str(&format!("$ nabla {}\n", args.join(" ")));
        text.push_str(&String::from_utf8(out.stdout).unwrap());
        text.push('\n');
    }
    text
}

#[test]
fn help_matches_golden() {
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt");
    let got = help_transcript();
    if std::env::var_os("NABLA_UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &got).unwrap();
    }
    assert_eq!(got, std::fs::read_to_string(golden).unwrap());
}

#[test]
fn help_lists_every_flag() {
    let cli = Cli::command();
    for sub in cli.get_subcommands() {
        let out = nabla(&[sub.get_name(), "--help"]);
        let help = String::from_utf8(out.stdout).unwrap();
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(
                    help.contains(&format!("--{long}")),
                    "{} help misses --{long}",
                    sub.get_name()
                );
            }
        }
    }
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        vec!["frobnicate"],
        vec!["mask-stats"],
        vec![
            "mask-sta", "--window", "1,1", "--grid", "4,8,8,2", "--output", "x",
        ],
        vec!["mask-stats", "m.nmsk", "--unknown"],
        vec![
            "attn", "--mode", "fancy", "--q", "a", "--k", "b", "--v", "c", "--output", "o",
        ],
    ] {
        let out = nabla(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(out.stdout.is_empty());
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_nabla"))
        .args(["mask-stats", "x.nmsk"])
        .env("NABLA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validation_and_format_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Even window.
    let out = nabla(&[
        "mask-sta",
        "--window",
        "2,1,1",
        "--grid",
        "4,8,8,2",
        "--output",
        &path(d, "m.nmsk"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    // Missing file.
    assert_eq!(
        nabla(&["mask-stats", &path(d, "absent.nmsk")]).status.code(),
        Some(1)
    );
    // Not a mask.
    std::fs::write(d.join("junk.nmsk"), b"NMSKjunk").unwrap();
    assert_eq!(
        nabla(&["mask-stats", &path(d, "junk.nmsk")]).status.code(),
        Some(1)
    );
    // Non-finite tensor element.
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"NTSR");
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&[1, 1, 0, 0]);
    bytes.extend_from_slice(&1u64.to_le_bytes());
    bytes.extend_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(d.join("nan.ntsr"), bytes).unwrap();
    let out = nabla(&[
        "reorder",
        "--input",
        &path(d, "nan.ntsr"),
        "--output",
        &path(d, "o.ntsr"),
        "--grid",
        "1,1,1,1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation"));
}

#[test]
fn stats_on_a_full_mask_report_zero_sparsity() {
    let dir = tempfile::tempdir().unwrap();
    let m = path(dir.path(), "full.nmsk");
    save_mask(&BlockMask::full(2, 5).unwrap(), &m).unwrap();
    let v = ok_one(&["mask-stats", &m]);
    assert_eq!(v["sparsity"], Value::from(0.0));
    assert_eq!(v["popcount"], Value::from(50));
}

#[test]
fn sliding_tile_count_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let m = path(dir.path(), "sta.nmsk");
    ok_one(&[
        "mask-sta", "--window", "1,1,1", "--grid", "4,8,8,2", "--output", &m,
    ]);
    let v = ok_one(&["mask-stats", &m, "--window", "1,1,1", "--grid", "4,8,8,2"]);
    assert_eq!(v["popcount"], Value::from(64));
    assert_eq!(v["dense_blocks_closed_form"], Value::from(64));
    // 4 frames x (8/2) x (8/2) blocks, one each.
    assert_eq!(v["rows"], Value::from(4 * 4 * 4));
}

#[test]
fn sparse_attention_with_full_mask_matches_dense() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (name, salt) in [("q", 1), ("k", 2), ("v", 3)] {
        save_tensor(&tensor(&[2, 32, 4], salt), d.join(format!("{name}.ntsr"))).unwrap();
    }
    save_mask(&BlockMask::full(1, 4).unwrap(), d.join("full.nmsk")).unwrap();
    let v = ok_one(&[
        "attn",
        "--mode",
        "sparse",
        "--q",
        &path(d, "q.ntsr"),
        "--k",
        &path(d, "k.ntsr"),
        "--v",
        &path(d, "v.ntsr"),
        "--mask",
        &path(d, "full.nmsk"),
        "--output",
        &path(d, "o.ntsr"),
        "--compare-dense",
    ]);
    assert!(v["max_abs_diff"].as_f64().unwrap() <= 1e-6);
    assert_eq!(v["block_n"], Value::from(8));
    assert_eq!(v["total_macs"], v["dense_macs"]);
}

#[test]
fn masked_mode_requires_a_mask() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["q", "k", "v"] {
        save_tensor(&tensor(&[1, 8, 2], 7), d.join(format!("{name}.ntsr"))).unwrap();
    }
    let out = nabla(&[
        "attn",
        "--mode",
        "masked",
        "--q",
        &path(d, "q.ntsr"),
        "--k",
        &path(d, "k.ntsr"),
        "--v",
        &path(d, "v.ntsr"),
        "--output",
        &path(d, "o.ntsr"),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_reproduces_in_process_result() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let grid = TokenGrid::new(2, 8, 8, 2).unwrap();
    let (h, s, dim) = (2, grid.seq_len(), 4);
    let (q, k, v) = (
        tensor(&[h, s, dim], 11),
        tensor(&[h, s, dim], 12),
        tensor(&[h, s, dim], 13),
    );
    for (name, t) in [("q", &q), ("k", &k), ("v", &v)] {
        save_tensor(t, d.join(format!("{name}.ntsr"))).unwrap();
    }
    ok_one(&[
        "mask-nabla",
        "--q",
        &path(d, "q.ntsr"),
        "--k",
        &path(d, "k.ntsr"),
        "--thr",
        "0.5",
        "--block-n",
        "4",
        "--output",
        &path(d, "nabla.nmsk"),
    ]);
    ok_one(&[
        "mask-sta",
        "--window",
        "1,3,1",
        "--grid",
        "2,8,8,2",
        "--output",
        &path(d, "sta.nmsk"),
    ]);
    ok_one(&[
        "mask-join",
        &path(d, "nabla.nmsk"),
        &path(d, "sta.nmsk"),
        "--output",
        &path(d, "joint.nmsk"),
    ]);
    let stats = ok_one(&[
        "attn",
        "--mode",
        "sparse",
        "--q",
        &path(d, "q.ntsr"),
        "--k",
        &path(d, "k.ntsr"),
        "--v",
        &path(d, "v.ntsr"),
        "--mask",
        &path(d, "joint.nmsk"),
        "--block-n",
        "4",
        "--output",
        &path(d, "out.ntsr"),
    ]);

    let mn = nabla_mask(&q, &k, &NablaParams::new(0.5, 4, dim).unwrap()).unwrap();
    let ms = sta_mask(&StaWindow::new(1, 3, 1, grid).unwrap()).unwrap();
    let joint = join_masks(&mn, &ms).unwrap();
    let expect = block_sparse_attention(&AttentionInputs::new(q, k, v).unwrap(), &joint, 4).unwrap();

    assert_eq!(load_mask(d.join("joint.nmsk")).unwrap(), joint);
    let got = load_tensor(d.join("out.ntsr")).unwrap();
    assert!(got
        .data()
        .iter()
        .zip(expect.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(stats["sparsity"].as_f64().unwrap() > 0.0);
}

#[test]
fn reorder_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let x = tensor(&[16], 5);
    save_tensor(&x, d.join("x.ntsr")).unwrap();
    ok_one(&[
        "reorder",
        "--input",
        &path(d, "x.ntsr"),
        "--output",
        &path(d, "y.ntsr"),
        "--grid",
        "1,4,4,2",
    ]);
    let y = load_tensor(d.join("y.ntsr")).unwrap();
    let order = [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15];
    assert!(order
        .iter()
        .enumerate()
        .all(|(i, &src)| y.data()[i] == x.data()[src]));
    ok_one(&[
        "reorder",
        "--input",
        &path(d, "y.ntsr"),
        "--output",
        &path(d, "z.ntsr"),
        "--grid",
        "1,4,4,2",
        "--inverse",
    ]);
    assert_eq!(load_tensor(d.join("z.ntsr")).unwrap(), x);
}

#[test]
fn pgm_export_draws_the_mask() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    save_mask(&BlockMask::identity(1, 4).unwrap(), d.join("id.nmsk")).unwrap();
    ok_one(&[
        "mask-export-pgm",
        &path(d, "id.nmsk"),
        "--output",
        &path(d, "id.pgm"),
    ]);
    let bytes = std::fs::read(d.join("id.pgm")).unwrap();
    let mut want = b"P5\n4 4\n255\n".to_vec();
    want.extend((0..16).map(|i| if i % 5 == 0 { 255 } else { 0 }));
    assert_eq!(bytes, want);
    assert_eq!(
        nabla(&[
            "mask-export-pgm",
            &path(d, "id.nmsk"),
            "--head",
            "3",
            "--output",
            &path(d, "x.pgm")
        ])
        .status
        .code(),
        Some(1)
    );
}

fn write_config(d: &Path) -> String {
    let cfg = path(d, "toy.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\ngrid = 2,4,4,2\ndepth = 1\nheads = 1\ndim = 4\ntrain_steps = 5\nbatch = 2\n\
         train_samples = 4\nval_samples = 2\nval_every = 2\n",
    )
    .unwrap();
    cfg
}

fn strip_timing(lines: &[Value]) -> Vec<Value> {
    lines
        .iter()
        .map(|v| {
            let mut v = v.clone();
            let obj = v.as_object_mut().unwrap();
            obj.remove("step_seconds");
            obj.remove("mean_step_seconds");
            v
        })
        .collect()
}

#[test]
fn train_toy_respects_precedence_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let csv = path(d, "curve.csv");
    let args = [
        "train-toy",
        "--config",
        &cfg,
        "--steps",
        "3",
        "--mode",
        "nabla(0.5)",
        "--csv",
        &csv,
    ];
    let first = ok_lines(&args);
    assert_eq!(first.len(), 4);
    assert_eq!(first[3]["event"], Value::from("summary"));
    assert_eq!(first[3]["mode"], Value::from("nabla(0.5)"));
    assert_eq!(strip_timing(&first), strip_timing(&ok_lines(&args)));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("step,train_loss,val_loss,step_seconds,sparsity\n"));
    assert_eq!(text.lines().count(), 4);

    // --set sits between the file and dedicated flags.
    let lines = ok_lines(&["train-toy", "--config", &cfg, "--set", "train_steps=2"]);
    assert_eq!(lines.len(), 3);
    let lines = ok_lines(&[
        "train-toy",
        "--config",
        &cfg,
        "--set",
        "train_steps=2",
        "--steps",
        "1",
    ]);
    assert_eq!(lines.len(), 2);

    let out = nabla(&["train-toy", "--config", &cfg, "--set", "colour=blue"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn distill_toy_starts_from_the_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let ckpt = path(d, "teacher");
    ok_lines(&["train-toy", "--config", &cfg, "--checkpoint", &ckpt]);
    let lines = ok_lines(&[
        "distill-toy",
        "--teacher",
        &ckpt,
        "--student-mode",
        "full",
        "--config",
        &cfg,
        "--steps",
        "2",
    ]);
    assert_eq!(lines[0]["train_loss"], Value::from(0.0));
    let lines = ok_lines(&[
        "distill-toy",
        "--teacher",
        &ckpt,
        "--student-mode",
        "nabla(0.3)",
        "--config",
        &cfg,
        "--steps",
        "2",
    ]);
    assert!(lines[0]["train_loss"].as_f64().unwrap() > 0.0);

    let out = nabla(&[
        "distill-toy",
        "--teacher",
        &path(d, "missing"),
        "--student-mode",
        "full",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("i/o error"));
}
