//! End-to-end runs of the compiled binary, including exit-code discipline
//! and byte-stable golden outputs.
//!
//! Golden files come from `spci heatmap --input checkerboard --out <dir>`
//! with the default config. When forward semantics change on purpose,
//! rerun that command and copy p3.spct, p5.spct, summary.txt, p3.w_s.pgm,
//! and p3.w_p.pgm into tests/golden.

use spci::{init_spci, save_spci, write_spct, Shape, Tensor};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spci"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code (killed by signal?)")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

#[test]
fn golden_checkerboard_heatmap_run() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "heatmap",
        "--input",
        "checkerboard",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["p3.spct", "p5.spct", "summary.txt", "p3.w_s.pgm", "p3.w_p.pgm"] {
        assert_eq!(
            read(&out_dir.join(name)),
            read(&golden(name)),
            "{name} drifted from tests/golden/{name}"
        );
    }
}

#[test]
fn same_seed_reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out_dir, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let out = run(&[
            "forward",
            "--input",
            "noise",
            "--seed",
            seed,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for name in ["p3.spct", "p5.spct", "summary.txt"] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name}");
    }
    assert_ne!(read(&a.join("p3.spct")), read(&c.join("p3.spct")));
}

#[test]
fn zero_input_yields_zero_taps_and_flat_maps() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "heatmap",
        "--input",
        "zeros",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = String::from_utf8(read(&out_dir.join("summary.txt"))).unwrap();
    assert!(summary.contains("p3 1x32x8x8 min 0.000000e0 max 0.000000e0 mean 0.000000e0"));
    assert!(summary.contains("p5 1x128x2x2 min 0.000000e0 max 0.000000e0 mean 0.000000e0"));

    // Biases start at zero, so every gate sees zero pre-activations and
    // sigmoid pins all maps at 0.5, which rasterizes to byte 128.
    let pgm = read(&out_dir.join("p3.w_s.pgm"));
    let header = b"P5\n32 1\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert!(pgm[header.len()..].iter().all(|&b| b == 128));
    assert_eq!(pgm.len(), header.len() + 32);
}

#[test]
fn spci_at_none_skips_attention_outputs() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "forward",
        "--spci-at",
        "none",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = stdout(&out);
    assert!(summary.contains("\np3 1x32x8x8 "));
    assert!(!summary.contains("w_s"));
    assert!(out_dir.join("p5.spct").exists());
    assert!(!out_dir.join("p3.w_s.spct").exists());
}

#[test]
fn disable_flags_change_the_taps() {
    let dir = TempDir::new().unwrap();
    let plain = dir.path().join("plain");
    let ablated = dir.path().join("ablated");
    let out = run(&["forward", "--out", plain.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let out = run(&[
        "forward",
        "--disable-cdm",
        "--out",
        ablated.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert_ne!(read(&plain.join("p3.spct")), read(&ablated.join("p3.spct")));
    let summary = String::from_utf8(read(&ablated.join("summary.txt"))).unwrap();
    assert!(summary.contains("p3.w_s"));
    assert!(!summary.contains("p3.w_c"), "disabled gate still reported");
}

#[test]
fn config_problems_exit_2() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "not_a_key 12\n").unwrap();
    let out = run(&[
        "forward",
        "--backbone-config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("not_a_key"));

    let out = run(&["forward", "--spci-at", "p7", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    let out = run(&["forward", "--bn-mode", "sometimes", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    // Input files carry their own extents.
    let input = dir.path().join("x.spct");
    write_spct(&input, &Tensor::<f32>::zeros(Shape::new(1, 3, 64, 64))).unwrap();
    let out = run(&[
        "forward",
        "--input",
        input.to_str().unwrap(),
        "--size",
        "64x64",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn unreadable_or_corrupt_files_exit_3() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "forward",
        "--weights",
        dir.path().join("missing.manifest").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("missing.manifest"));

    let input = dir.path().join("short.spct");
    write_spct(&input, &Tensor::<f32>::zeros(Shape::new(1, 3, 64, 64))).unwrap();
    let bytes = read(&input);
    std::fs::write(&input, &bytes[..bytes.len() - 9]).unwrap();
    let out = run(&[
        "forward",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("truncated"));
}

#[test]
fn shape_and_precision_problems_exit_4() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");

    // f64 payload where the pipeline wants f32.
    let input = dir.path().join("wide.spct");
    write_spct(&input, &Tensor::<f64>::zeros(Shape::new(1, 3, 64, 64))).unwrap();
    let out = run(&[
        "forward",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    // A 16-wide manifest cannot land in the 32-wide P3 site.
    let narrow = dir.path().join("narrow.manifest");
    save_spci(&init_spci::<f32>(16, 16, 16, 0.1, 3).unwrap(), &narrow).unwrap();
    let out = run(&[
        "forward",
        "--spci-at",
        "p3",
        "--weights",
        narrow.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    // One manifest feeds every inserted site, so P3-sized weights cannot
    // serve a config that also inserts at P5.
    let p3_sized = dir.path().join("p3_sized.manifest");
    save_spci(&init_spci::<f32>(32, 32, 16, 0.1, 3).unwrap(), &p3_sized).unwrap();
    let out = run(&[
        "forward",
        "--weights",
        p3_sized.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    // Same manifest is accepted once the insertion matches its width.
    let out = run(&[
        "forward",
        "--spci-at",
        "p3",
        "--weights",
        p3_sized.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    // Header width that disagrees with the wiring rule.
    let text = std::fs::read_to_string(&p3_sized).unwrap();
    let edited = text.replace("c_mid_cdm 16", "c_mid_cdm 17");
    assert_ne!(text, edited);
    std::fs::write(&p3_sized, edited).unwrap();
    let out = run(&[
        "forward",
        "--spci-at",
        "p3",
        "--weights",
        p3_sized.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn weights_without_insertion_exit_2() {
    let dir = TempDir::new().unwrap();
    let manifest = dir.path().join("w.manifest");
    save_spci(&init_spci::<f32>(32, 32, 16, 0.1, 3).unwrap(), &manifest).unwrap();
    let out = run(&[
        "forward",
        "--spci-at",
        "none",
        "--weights",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "gradcheck",
        "--channels",
        "8",
        "--seed",
        "5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = String::from_utf8(read(&dir.path().join("gradcheck.txt"))).unwrap();
    assert!(report.contains("pass 1"));
    assert!(report.contains("input.max_rel_err"));
    assert_eq!(report, stdout(&out));
}

#[test]
fn train_toy_with_zero_lr_is_flat() {
    let out = run(&["train-toy", "--steps", "5", "--lr", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let losses: Vec<&str> = text
        .lines()
        .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit()))
        .map(|l| l.split_whitespace().nth(1).unwrap())
        .collect();
    assert_eq!(losses.len(), 6);
    assert!(losses.iter().all(|&l| l == losses[0]), "{text}");
    assert!(text.contains("reduction 0.0000"));
}

#[test]
fn cost_report_shrinks_without_attention() {
    fn total_params(text: &str) -> u64 {
        text.lines()
            .find_map(|l| l.strip_prefix("total.params "))
            .expect("total.params line")
            .parse()
            .unwrap()
    }
    let both = run(&["cost"]);
    assert_eq!(code(&both), 0);
    let none = run(&["cost", "--spci-at", "none"]);
    assert_eq!(code(&none), 0);
    let both_text = stdout(&both);
    assert!(both_text.contains("total.flops"));
    assert!(both_text.contains("P5.spci.cdm.conv2.macs"));
    assert!(total_params(&both_text) > total_params(&stdout(&none)));
}
