use std::path::Path;
use std::process::{Command, Output};

fn bpp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpp"))
        .args(args)
        .env("BPP_THREADS", "1")
        .output()
        .expect("spawn bpp")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"{"train": {"bpp": {"levels": 2, "depth": 2, "channels": [6, 4]},
  "steps": 4, "batch": 2, "patch": 16, "val_every": 2, "lr0": 0.001}}"#;

#[test]
fn exit_codes() {
    assert_eq!(bpp(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bpp(&["metrics", "--a", "x.ppm"]).status.code(), Some(1));
    assert_eq!(
        bpp(&["metrics", "--a", "x", "--b", "y", "--mode", "hsv"]).status.code(),
        Some(1)
    );
    assert_eq!(bpp(&["--help"]).status.code(), Some(0));
    let o = bpp(&["metrics", "--a", "/nonexistent/a.ppm", "--b", "/nonexistent/b.ppm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/a.ppm"));
    let o = Command::new(env!("CARGO_BIN_EXE_bpp"))
        .args(["params", "--config", "x.json"])
        .env("BPP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_documents_every_flag() {
    let cases: &[(&str, &[&str])] = &[
        ("make-dataset", &["--out", "--count", "--size", "--factors", "--seed"]),
        ("train", &["--config", "--data", "--out", "--log"]),
        ("infer", &["--ckpt", "--in", "--out", "--factor", "--patch", "--stride"]),
        ("ibp", &["--in", "--factor", "--iters", "--out", "--log"]),
        ("probe", &["--ckpt", "--data", "--out", "--pgm"]),
        ("linscope", &["--ckpt", "--in", "--out-fx", "--out-r"]),
        ("metrics", &["--a", "--b", "--mode"]),
        ("params", &["--ckpt", "--config"]),
    ];
    for (cmd, flags) in cases {
        let o = bpp(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd}");
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}:\n{text}");
        }
        assert!(
            text.matches("default").count() >= 1 || *cmd == "train" || *cmd == "linscope",
            "{cmd}"
        );
    }
}

#[test]
fn metrics_of_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert!(bpp(&["make-dataset", "--out", p(&d), "--count", "2", "--size", "16"])
        .status
        .success());
    let img = d.join("img_0000.ppm");
    let o = bpp(&["metrics", "--a", p(&img), "--b", p(&img), "--mode", "rgb"]);
    assert_eq!(stdout(&o).trim(), "psnr=inf ssim=1.000000");
}

#[test]
fn dataset_train_infer_probe_linscope() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    let o = bpp(&[
        "make-dataset",
        "--out",
        p(&d),
        "--count",
        "4",
        "--size",
        "24",
        "--factors",
        "2",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&d).unwrap().count(), 5);
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, TINY).unwrap();
    let ck = dir.path().join("net.bppc");
    let log = dir.path().join("log.csv");
    let o = bpp(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&d),
        "--out",
        p(&ck),
        "--log",
        p(&log),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&log).unwrap();
    assert!(csv.starts_with("step,mse,psnr\n"));
    assert_eq!(csv.lines().count(), 1 + 3);

    let o = bpp(&["params", "--ckpt", p(&ck)]);
    let o2 = bpp(&["params", "--config", p(&cfg)]);
    assert!(stdout(&o).starts_with("params="));
    assert_eq!(stdout(&o), stdout(&o2));

    let heat = dir.path().join("heat.csv");
    let pgm = dir.path().join("heat.pgm");
    assert!(bpp(&[
        "probe",
        "--ckpt",
        p(&ck),
        "--data",
        p(&d),
        "--out",
        p(&heat),
        "--pgm",
        p(&pgm)
    ])
    .status
    .success());
    let rows: Vec<Vec<f64>> = std::fs::read_to_string(&heat)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.len() == 2));
    assert!(rows[0].iter().all(|&v| v == 0.0));
    assert_eq!(rows.iter().flatten().cloned().fold(0.0, f64::max), 100.0);
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5\n32 32\n255\n"));

    let img = d.join("img_0001.ppm");
    let out = dir.path().join("out.ppm");
    assert!(bpp(&[
        "infer",
        "--ckpt",
        p(&ck),
        "--in",
        p(&img),
        "--out",
        p(&out),
        "--patch",
        "16",
        "--stride",
        "8"
    ])
    .status
    .success());
    assert!(bpp(&[
        "infer",
        "--ckpt",
        p(&ck),
        "--in",
        p(&img),
        "--out",
        p(&out),
        "--factor",
        "2"
    ])
    .status
    .success());
    assert!(std::fs::read(&out).unwrap().starts_with(b"P6\n48 48\n255\n"));
    assert_eq!(
        bpp(&[
            "infer",
            "--ckpt",
            p(&ck),
            "--in",
            p(&img),
            "--out",
            p(&out),
            "--patch",
            "15"
        ])
        .status
        .code(),
        Some(1)
    );

    let (fx, r) = (dir.path().join("fx.ppm"), dir.path().join("r.ppm"));
    assert!(bpp(&[
        "linscope",
        "--ckpt",
        p(&ck),
        "--in",
        p(&img),
        "--out-fx",
        p(&fx),
        "--out-r",
        p(&r)
    ])
    .status
    .success());
    let note = std::fs::read_to_string(dir.path().join("r.ppm.txt")).unwrap();
    assert!(note.contains("min=") && note.contains("max="));
}

#[test]
fn identity_checkpoint_reproduces_input() {
    use bpp_core::bpp::BppConfig;
    use bpp_core::train::Checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    assert!(bpp(&["make-dataset", "--out", p(&d), "--count", "2", "--size", "20"])
        .status
        .success());
    let mut net = bpp_core::Bpp32::new(BppConfig::new(1, &[4, 4]), 0).unwrap();
    net.zero_synthesis();
    let ck = dir.path().join("id.bppc");
    Checkpoint::new(&net, 0, 0, None).save(&ck).unwrap();
    let img = d.join("img_0000.ppm");
    let out = dir.path().join("o.ppm");
    for extra in [&[][..], &["--patch", "16", "--stride", "4"][..]] {
        let mut args = vec!["infer", "--ckpt", p(&ck), "--in", p(&img), "--out", p(&out)];
        args.extend_from_slice(extra);
        assert!(bpp(&args).status.success());
        assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&img).unwrap());
    }
}

#[test]
fn ibp_writes_image_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    assert!(bpp(&["make-dataset", "--out", p(&d), "--count", "2", "--size", "16"])
        .status
        .success());
    let (out, log) = (dir.path().join("up.ppm"), dir.path().join("ibp.csv"));
    let o = bpp(&[
        "ibp",
        "--in",
        p(&d.join("img_0000.ppm")),
        "--factor",
        "2",
        "--iters",
        "4",
        "--out",
        p(&out),
        "--log",
        p(&log),
    ]);
    assert!(o.status.success());
    assert!(std::fs::read(&out).unwrap().starts_with(b"P6\n32 32\n255\n"));
    let csv = std::fs::read_to_string(&log).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
}

#[test]
fn config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"stpes": 3}}"#).unwrap();
    let o = bpp(&["params", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stpes"));
}
