use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use biphoton::pipeline::{read_fit, read_histogram, read_reconstruction, PipelineConfig};
use biphoton::timetag::{decode_records, HEADER_LEN, RECORD_LEN};

fn biphoton(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biphoton"))
        .args(args)
        .output()
        .expect("spawn biphoton")
}

fn ok(args: &[&str]) -> Output {
    let out = biphoton(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

const SMALL: &str = "seed = 5\n[simulation]\nduration = 2.0\n";

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn simulate_writes_six_files_and_manifest_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let r1 = tmp.path().join("r1");
    let r2 = tmp.path().join("r2");
    ok(&["simulate", "--config", &cfg, "--out", r1.to_str().unwrap()]);
    ok(&["simulate", "--config", &cfg, "--out", r2.to_str().unwrap()]);
    let (f1, f2) = (files(&r1), files(&r2));
    let names: Vec<_> = f1.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(
        names,
        [
            "manifest.json",
            "phi0_A.bttg",
            "phi0_B.bttg",
            "phi1_A.bttg",
            "phi1_B.bttg",
            "phi2_A.bttg",
            "phi2_B.bttg"
        ]
    );
    for ((n1, b1), (_, b2)) in f1.iter().zip(&f2) {
        if n1 == "manifest.json" {
            // only the output path differs
            let strip = |b: &[u8]| String::from_utf8_lossy(b).replace("/r1", "").replace("/r2", "");
            assert_eq!(strip(b1), strip(b2));
        } else {
            assert_eq!(b1, b2, "{n1} differs between runs");
        }
    }

    let r3 = tmp.path().join("r3");
    ok(&["simulate", "--config", &cfg, "--seed", "6", "--out", r3.to_str().unwrap()]);
    assert_ne!(fs::read(r1.join("phi0_A.bttg")).unwrap(), fs::read(r3.join("phi0_A.bttg")).unwrap());
}

#[test]
fn zero_rates_give_empty_valid_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[simulation]\npair_rate = 0.0\nsingles_rate_a = 0.0\nsingles_rate_b = 0.0\nduration = 1.0\n",
    );
    let out = tmp.path().join("run");
    ok(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    for k in 0..3 {
        for ch in ["A", "B"] {
            let bytes = fs::read(out.join(format!("phi{k}_{ch}.bttg"))).unwrap();
            assert_eq!(bytes.len(), HEADER_LEN);
            assert_eq!(&bytes[..4], b"BTTG");
            assert!(decode_records(&bytes).unwrap().is_empty());
        }
    }
    ok(&["correlate", "--run-dir", out.to_str().unwrap()]);
    assert_eq!(read_histogram(&out.join("hist_phi0.json")).unwrap().total(), 0);
}

#[test]
fn tag_files_hold_sorted_single_channel_records() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("run");
    ok(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let bytes = fs::read(out.join("phi1_B.bttg")).unwrap();
    assert_eq!((bytes.len() - HEADER_LEN) % RECORD_LEN, 0);
    let recs = decode_records(&bytes).unwrap();
    assert!(!recs.is_empty());
    assert!(recs.iter().all(|r| r.channel == biphoton::timetag::Channel::B));
    assert!(recs.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
}

#[test]
fn staged_run_equals_single_shot_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let whole = tmp.path().join("whole");
    let staged = tmp.path().join("staged");
    let (w, s) = (whole.to_str().unwrap(), staged.to_str().unwrap());
    ok(&["pipeline", "--config", &cfg, "--out", w]);
    ok(&["simulate", "--config", &cfg, "--out", s]);
    ok(&["correlate", "--config", &cfg, "--run-dir", s]);
    ok(&["reconstruct", "--config", &cfg, "--run-dir", s]);
    ok(&["fit", "--config", &cfg, "--run-dir", s]);
    for name in ["hist_phi0.json", "hist_phi1.json", "hist_phi2.json", "reconstruction.json", "fit.json"] {
        assert_eq!(
            fs::read(whole.join(name)).unwrap(),
            fs::read(staged.join(name)).unwrap(),
            "{name} differs"
        );
    }
    let fit = read_fit(&whole.join("fit.json")).unwrap();
    assert!(fit.double_exponential.converged);
}

#[test]
fn default_pipeline_recovers_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&["pipeline", "--out", out.to_str().unwrap()]);
    let truth = PipelineConfig::default();
    let fit = read_fit(&out.join("fit.json")).unwrap();
    let de = &fit.double_exponential;
    for (name, want) in [("corr_time", truth.model.corr_time), ("tau_offset", truth.model.tau_offset)] {
        let (v, s) = (de.value(name).unwrap(), de.sigma(name).unwrap());
        assert!((v - want).abs() < 2.0 * s, "{name}: {v} ± {s}, truth {want}");
    }
    let ph = &fit.constant_phase;
    let (v, s) = (ph.value("phase").unwrap(), ph.sigma("phase").unwrap());
    assert!((v - truth.model.phase).abs() < 2.0 * s, "phase {v} ± {s}");
}

#[test]
fn zero_pair_rate_reconstructs_zero_wave_function() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[simulation]\npair_rate = 0.0\nduration = 5.0\n[analysis]\nbackground_mode = \"none\"\ngamma_mode = \"per_bin\"\n",
    );
    let out = tmp.path().join("run");
    let s = out.to_str().unwrap();
    ok(&["simulate", "--config", &cfg, "--out", s]);
    ok(&["correlate", "--config", &cfg, "--run-dir", s]);
    ok(&["reconstruct", "--config", &cfg, "--run-dir", s]);
    let recon = read_reconstruction(&out.join("reconstruction.json")).unwrap();
    let bins: Vec<_> = recon.valid_bins().collect();
    assert!(bins.len() > 90);
    // |ψ|/σ is Rayleigh distributed when ψ = 0
    let mut pulls: Vec<f64> = bins
        .iter()
        .map(|b| (b.re_psi / b.sigma_re).hypot(b.im_psi / b.sigma_im))
        .collect();
    pulls.sort_by(f64::total_cmp);
    let median = pulls[pulls.len() / 2];
    assert!((median - 1.177).abs() < 0.3, "median pull {median}");
    assert!(pulls.last().unwrap() < &5.0);
    let parts: [(Vec<f64>, Vec<f64>); 2] = [
        (bins.iter().map(|b| b.re_psi).collect(), bins.iter().map(|b| b.sigma_re).collect()),
        (bins.iter().map(|b| b.im_psi).collect(), bins.iter().map(|b| b.sigma_im).collect()),
    ];
    for (x, s) in &parts {
        let sw: f64 = s.iter().map(|s| 1.0 / (s * s)).sum();
        let swx: f64 = x.iter().zip(s).map(|(x, s)| x / (s * s)).sum();
        let (mean, sigma) = (swx / sw, 1.0 / sw.sqrt());
        assert!(mean.abs() < 3.0 * sigma, "weighted mean {mean} ± {sigma}");
    }
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 5\n[simulation]\nduration = 1.0\n[analysis]\nbin_width = 2e-9\n");
    let out = tmp.path().join("run");
    let s = out.to_str().unwrap();
    ok(&["simulate", "--config", &cfg, "--out", s, "--seed", "11", "--duration-s", "0.5"]);
    let manifest = biphoton::pipeline::read_manifest(&out).unwrap();
    assert_eq!(manifest.config.seed, 11);
    assert_eq!(manifest.config.simulation.duration, 0.5);

    ok(&["correlate", "--config", &cfg, "--run-dir", s]);
    assert_eq!(read_histogram(&out.join("hist_phi0.json")).unwrap().bin_width, 2e-9);
    ok(&["correlate", "--config", &cfg, "--run-dir", s, "--bin-width-ns", "8", "--tau-max-ns", "96"]);
    let h = read_histogram(&out.join("hist_phi0.json")).unwrap();
    assert_eq!((h.bin_width, h.tau_max, h.len()), (8e-9, 96e-9, 24));
}

#[test]
fn malformed_tag_file_reports_byte_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("run");
    ok(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let a = out.join("phi0_A.bttg");
    let mut bytes = fs::read(&a).unwrap();
    let bad = HEADER_LEN + 3 * RECORD_LEN;
    bytes[bad] = 7;
    let broken = tmp.path().join("broken.bttg");
    fs::write(&broken, &bytes).unwrap();
    let res = biphoton(&[
        "correlate",
        "--input-a",
        broken.to_str().unwrap(),
        "--input-b",
        out.join("phi0_B.bttg").to_str().unwrap(),
        "--duration-s",
        "2",
        "--out",
        tmp.path().join("h.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2);
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains(&format!("offset {bad}")), "{err}");

    fs::write(&broken, &bytes[..HEADER_LEN + 5]).unwrap();
    let res = biphoton(&[
        "correlate",
        "--input-a",
        broken.to_str().unwrap(),
        "--input-b",
        broken.to_str().unwrap(),
        "--duration-s",
        "2",
        "--out",
        tmp.path().join("h.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains(&format!("offset {HEADER_LEN}")));
}

#[test]
fn standalone_correlate_matches_run_dir_correlate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("run");
    let s = out.to_str().unwrap();
    ok(&["simulate", "--config", &cfg, "--out", s]);
    ok(&["correlate", "--run-dir", s]);
    let single = tmp.path().join("h1.json");
    ok(&[
        "correlate",
        "--input-a",
        out.join("phi1_A.bttg").to_str().unwrap(),
        "--input-b",
        out.join("phi1_B.bttg").to_str().unwrap(),
        "--duration-s",
        "2",
        "--phi-setting",
        &(std::f64::consts::PI / 3.0).to_string(),
        "--out",
        single.to_str().unwrap(),
    ]);
    assert_eq!(read_histogram(&single).unwrap(), read_histogram(&out.join("hist_phi1.json")).unwrap());
}

#[test]
fn mismatched_binning_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("run");
    let s = out.to_str().unwrap();
    ok(&["simulate", "--config", &cfg, "--out", s]);
    ok(&["correlate", "--run-dir", s]);
    let coarse = tmp.path().join("coarse");
    fs::create_dir(&coarse).unwrap();
    for f in ["manifest.json", "phi2_A.bttg", "phi2_B.bttg", "phi0_A.bttg", "phi0_B.bttg", "phi1_A.bttg", "phi1_B.bttg"] {
        fs::copy(out.join(f), coarse.join(f)).unwrap();
    }
    ok(&["correlate", "--run-dir", coarse.to_str().unwrap(), "--bin-width-ns", "8"]);
    let res = biphoton(&[
        "reconstruct",
        out.join("hist_phi0.json").to_str().unwrap(),
        out.join("hist_phi1.json").to_str().unwrap(),
        coarse.join("hist_phi2.json").to_str().unwrap(),
        "--out",
        tmp.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("binning"));

    // settings out of order
    let res = biphoton(&[
        "reconstruct",
        out.join("hist_phi1.json").to_str().unwrap(),
        out.join("hist_phi0.json").to_str().unwrap(),
        out.join("hist_phi2.json").to_str().unwrap(),
        "--out",
        tmp.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 2);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&biphoton(&["simulate", "--bogus"])), 1);
    assert_eq!(code(&biphoton(&["frobnicate"])), 1);
    assert_eq!(code(&biphoton(&["correlate"])), 1);
    assert_eq!(code(&biphoton(&["--help"])), 0);

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 1\nunknown_key = 2\n");
    let res = biphoton(&["simulate", "--config", &cfg, "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("unknown_key"));

    let res = biphoton(&["simulate", "--out", tmp.path().join("x").to_str().unwrap(), "--duration-s", "-1"]);
    assert_eq!(code(&res), 1);

    let cfg = write_config(tmp.path(), "[simulation]\nmax_tags = 10\n");
    let res = biphoton(&["simulate", "--config", &cfg, "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&res), 1);
}

#[test]
fn missing_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let res = biphoton(&["fit", "--run-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&res), 2);
}

#[test]
fn scan_settings_write_histograms_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("scan");
    ok(&[
        "pipeline",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--phi-setting",
        "0",
        "--phi-setting",
        "0.7853981633974483",
    ]);
    assert!(out.join("hist_phi1.json").exists());
    assert!(!out.join("hist_phi2.json").exists());
    assert!(!out.join("reconstruction.json").exists());
    let h = read_histogram(&out.join("hist_phi1.json")).unwrap();
    assert!((h.setting.unwrap().phi - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
}
