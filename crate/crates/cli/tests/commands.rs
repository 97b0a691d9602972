use std::path::Path;
use std::process::{Command, Output};

use fla::io::{read_matrix, write_matrix};
use fla_core::Matrix;

fn fla(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fla"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn pgm_dims(path: &Path) -> (usize, usize, usize) {
    let bytes = std::fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..16]).to_string();
    let mut parts = text.split_whitespace();
    assert_eq!(parts.next(), Some("P5"));
    let w = parts.next().unwrap().parse().unwrap();
    let h = parts.next().unwrap().parse().unwrap();
    (w, h, bytes.len())
}

#[test]
fn verify_default_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = fla(&["verify"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("verify.csv"));
    assert!(rows.len() > 30);
    assert!(rows.iter().all(|r| r[2] == "true"));
    let modules: std::collections::BTreeSet<_> = rows.iter().map(|r| r[0].clone()).collect();
    assert_eq!(modules.len(), 5);
}

#[test]
fn verify_literal_mode_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = fla(&["verify", "--literal-eq12", "--serial"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn invalid_configs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    for (args, needle) in [
        (&["verify", "--eps", "0"][..], "eps"),
        (&["verify", "--p", "0.5"][..], "p must be"),
        (&["verify", "--n", "196", "--grid", "10x10"][..], "grid"),
        (&["bench", "--n-grid", "13"][..], "13"),
    ] {
        let o = fla(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(needle), "{args:?}: {err}");
    }
    let o = fla(&["verify", "--no-such-flag"], dir.path());
    assert!(!o.status.success());
    let o = fla(&["verify", "--normalized", "--literal-eq12"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn export_attn_writes_five_maps() {
    let dir = tempfile::tempdir().unwrap();
    let o = fla(&["export-attn"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in [
        "softmax",
        "linear_relu",
        "linear_focused_p1",
        "linear_focused_p3",
        "focused_dwc",
    ] {
        let (w, h, len) = pgm_dims(&dir.path().join(format!("{name}.pgm")));
        assert_eq!((w, h), (196, 196));
        assert_eq!(len, "P5\n196 196\n255\n".len() + 196 * 196);
    }
    let rows = csv_rows(&dir.path().join("entropy.csv"));
    let entropy = |name: &str| -> f64 { rows.iter().find(|r| r[0] == name).unwrap()[6].parse().unwrap() };
    assert!(entropy("linear_focused_p3") < entropy("linear_focused_p1"));
    assert_eq!(read_matrix(&dir.path().join("q.csv")).unwrap().shape(), (196, 64));
}

#[test]
fn zero_queries_give_uniform_softmax() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("zero_q.csv");
    write_matrix(&q, &Matrix::zeros(196, 64)).unwrap();
    let out = dir.path().join("out");
    let o = fla(&["export-attn", "--q", q.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = std::fs::read(out.join("softmax.pgm")).unwrap();
    let pixels = &bytes["P5\n196 196\n255\n".len()..];
    assert!(pixels.iter().all(|&g| g == 128));
    let rows = csv_rows(&out.join("entropy.csv"));
    let softmax: f64 = rows[0][6].parse().unwrap();
    assert!((softmax - 196f64.ln()).abs() < 1e-12);
}

#[test]
fn rank_scan_reads_exported_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let export = dir.path().join("export");
    assert!(fla(&["export-attn", "--n", "64", "--d", "8"], &export).status.success());
    let scan = dir.path().join("scan");
    let q = export.join("q.csv");
    let k = export.join("k.csv");
    let kernel = export.join("kernel.csv");
    let o = fla(
        &[
            "rank-scan",
            "--n",
            "64",
            "--d",
            "8",
            "--q",
            q.to_str().unwrap(),
            "--k",
            k.to_str().unwrap(),
            "--kernel",
            kernel.to_str().unwrap(),
        ],
        &scan,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&scan.join("rank_scan.csv"));
    let linear: Vec<_> = rows.iter().filter(|r| r[0].starts_with("linear")).collect();
    assert!(!linear.is_empty());
    assert!(linear
        .iter()
        .all(|r| r[4].parse::<usize>().unwrap() <= 8 && r[5] == "8"));
    assert!(rows.iter().any(|r| r[3] == "raw"));
    assert_eq!(rows.iter().filter(|r| r[0] == "focused_plus_dwc").count(), 8);
}

#[test]
fn small_subcommands_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = fla(&["prop1", "--pairs", "20"], dir.path());
    assert!(o.status.success());
    assert_eq!(csv_rows(&dir.path().join("prop1.csv")).len(), 40 * 11);

    let o = fla(&["gradcheck", "--op", "dwc", "--instances", "3"], dir.path());
    assert!(o.status.success());
    let rows = csv_rows(&dir.path().join("gradcheck.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[0] == "dwc" && r[4] == "true"));

    let o = fla(&["entropy", "--n", "16", "--d", "4"], dir.path());
    assert!(o.status.success());
    assert_eq!(csv_rows(&dir.path().join("entropy.csv")).len(), 5);
}

#[test]
fn bench_writes_csv_dat_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let o = fla(
        &[
            "bench",
            "--variant",
            "linear,focused",
            "--n-grid",
            "16,64,144",
            "--d-grid",
            "8",
            "--precision",
            "f64,f32",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&dir.path().join("bench.csv")).len(), 2 * 3 * 2);
    assert_eq!(csv_rows(&dir.path().join("fit.csv")).len(), 4);
    assert!(std::fs::read_to_string(dir.path().join("bench.dat"))
        .unwrap()
        .starts_with('#'));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        assert!(fla(&["export-attn", "--n", "36", "--d", "8"], &out).status.success());
        assert!(fla(&["rank-scan", "--n", "36", "--d", "8", "--instances", "2"], &out)
            .status
            .success());
        assert!(fla(&["prop1", "--pairs", "5"], &out).status.success());
    }
    for f in [
        "softmax.pgm",
        "focused_dwc.pgm",
        "entropy.csv",
        "rank_scan.csv",
        "prop1.csv",
        "q.csv",
    ] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn help_lists_defaults() {
    let o = Command::new(env!("CARGO_BIN_EXE_fla"))
        .args(["verify", "--help"])
        .output()
        .unwrap();
    let help = String::from_utf8_lossy(&o.stdout);
    for needle in [
        "--seed",
        "[default: 42]",
        "--eps",
        "[default: 0.000001]",
        "--literal-eq12",
        "--serial",
    ] {
        assert!(help.contains(needle), "{needle} missing from\n{help}");
    }
}
