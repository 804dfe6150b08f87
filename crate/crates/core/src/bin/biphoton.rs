use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use biphoton::model::AnalyzerSetting;
use biphoton::pipeline::{
    self, cmd_correlate, cmd_pipeline, cmd_simulate, correlate_files, fit_reconstruction, histogram_document,
    histogram_file_name, read_reconstruction, reconstruct_files, write_fit, write_reconstruction, PipelineConfig,
    FIT_FILE, RECONSTRUCTION_FILE,
};
use biphoton::reconstruct::{BackgroundMode, GammaMode};
use biphoton::{Error, Result};

const NS_PER_S: f64 = 1e9;

#[derive(Parser)]
#[command(name = "biphoton", version, about = "Simulate, correlate, reconstruct and fit biphoton wave functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate time-tag files for each analyzer setting plus a manifest.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimFlags,
    },
    /// Build coincidence histograms from time-tag files.
    Correlate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        analysis: AnalysisFlags,
        /// Run directory written by `simulate`.
        #[arg(long, conflicts_with_all = ["input_a", "input_b"])]
        run_dir: Option<PathBuf>,
        /// Channel A time-tag file.
        #[arg(long, requires = "input_b")]
        input_a: Option<PathBuf>,
        /// Channel B time-tag file.
        #[arg(long, requires = "input_a")]
        input_b: Option<PathBuf>,
        /// Acquisition time of the input files, seconds.
        #[arg(long)]
        duration_s: Option<f64>,
        /// Analyzer azimuth of the input files, radians.
        #[arg(long)]
        phi_setting: Option<f64>,
    },
    /// Reconstruct ψ(τ) from three histograms at φ = 0, π/3, 2π/3.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        analysis: AnalysisFlags,
        #[arg(long, conflicts_with = "inputs")]
        run_dir: Option<PathBuf>,
        /// Histogram files in φ order.
        #[arg(num_args = 3)]
        inputs: Vec<PathBuf>,
    },
    /// Fit the envelope and phase of a reconstruction.
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        analysis: AnalysisFlags,
        #[arg(long, conflicts_with = "input")]
        run_dir: Option<PathBuf>,
        input: Option<PathBuf>,
    },
    /// Run every stage into one directory.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimFlags,
        #[command(flatten)]
        analysis: AnalysisFlags,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory or file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// Acquisition time per setting, seconds.
    #[arg(long = "duration-s")]
    duration_s: Option<f64>,
    /// Analyzer azimuth in radians; repeat for a scan.
    #[arg(long = "phi-setting")]
    phi_setting: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackgroundArg {
    None,
    WingSubtract,
}

#[derive(Clone, Copy, ValueEnum)]
enum GammaArg {
    PerBin,
    Pooled,
}

#[derive(Args)]
struct AnalysisFlags {
    #[arg(long)]
    bin_width_ns: Option<f64>,
    #[arg(long)]
    tau_max_ns: Option<f64>,
    #[arg(long, value_enum)]
    background_mode: Option<BackgroundArg>,
    #[arg(long, value_enum)]
    gamma_mode: Option<GammaArg>,
    /// Hold the correlation time fixed in the envelope fit, nanoseconds.
    #[arg(long)]
    fix_corr_time_ns: Option<f64>,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    match &common.config {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

impl SimFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = self.duration_s {
            cfg.simulation.duration = d;
        }
        if !self.phi_setting.is_empty() {
            cfg.simulation.phi_settings = Some(self.phi_setting.clone());
        }
    }
}

impl AnalysisFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let a = &mut cfg.analysis;
        if let Some(v) = self.bin_width_ns {
            a.bin_width = v / NS_PER_S;
        }
        if let Some(v) = self.tau_max_ns {
            a.tau_max = v / NS_PER_S;
        }
        if let Some(m) = self.background_mode {
            a.background_mode = match m {
                BackgroundArg::None => BackgroundMode::None,
                BackgroundArg::WingSubtract => BackgroundMode::WingSubtract,
            };
        }
        if let Some(m) = self.gamma_mode {
            a.gamma_mode = match m {
                GammaArg::PerBin => GammaMode::PerBin,
                GammaArg::Pooled => GammaMode::Pooled,
            };
        }
        if let Some(v) = self.fix_corr_time_ns {
            a.fix_corr_time = Some(v / NS_PER_S);
        }
    }
}

fn output_dir(common: &Common, cfg: &PipelineConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output.clone())
}

fn usage(msg: &str) -> Error {
    Error::InvalidParameter(msg.to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, sim } => {
            let mut cfg = load_config(&common)?;
            sim.apply(&mut cfg);
            cfg.output = output_dir(&common, &cfg);
            cfg.validate()?;
            let m = cmd_simulate(&cfg, &cfg.output)?;
            for r in &m.settings {
                println!("phi={:.6} A={} B={}", r.setting.phi, r.tags_a, r.tags_b);
            }
        }
        Command::Correlate {
            common,
            analysis,
            run_dir,
            input_a,
            input_b,
            duration_s,
            phi_setting,
        } => {
            let mut cfg = load_config(&common)?;
            analysis.apply(&mut cfg);
            cfg.analysis.validate()?;
            let (bw, tm) = (cfg.analysis.bin_width, cfg.analysis.tau_max);
            match (run_dir, input_a, input_b) {
                (Some(dir), _, _) => {
                    let hists = cmd_correlate(&dir, bw, tm)?;
                    for (k, h) in hists.iter().enumerate() {
                        println!("{} total={}", histogram_file_name(k), h.total());
                    }
                }
                (None, Some(a), Some(b)) => {
                    let t = duration_s.ok_or_else(|| usage("--duration-s is required with --input-a/--input-b"))?;
                    let setting = phi_setting.map(AnalyzerSetting::balanced);
                    let hist = correlate_files(&a, &b, t, setting, bw, tm)?;
                    let out = common.out.ok_or_else(|| usage("--out is required with --input-a/--input-b"))?;
                    let prov = serde_json::json!({
                        "inputs": [a.display().to_string(), b.display().to_string()],
                        "bin_width": bw,
                        "tau_max": tm,
                    });
                    biphoton::io::write_json(&out, &histogram_document(&hist, prov))?;
                    println!("{} total={}", out.display(), hist.total());
                }
                _ => return Err(usage("give --run-dir or both --input-a and --input-b")),
            }
        }
        Command::Reconstruct {
            common,
            analysis,
            run_dir,
            inputs,
        } => {
            let mut cfg = load_config(&common)?;
            analysis.apply(&mut cfg);
            cfg.analysis.validate()?;
            let (paths, out): (Vec<PathBuf>, PathBuf) = match run_dir {
                Some(dir) => (
                    (0..3).map(|k| dir.join(histogram_file_name(k))).collect(),
                    common.out.unwrap_or_else(|| dir.join(RECONSTRUCTION_FILE)),
                ),
                None if inputs.len() == 3 => (
                    inputs,
                    common.out.ok_or_else(|| usage("--out is required without --run-dir"))?,
                ),
                None => return Err(usage("give --run-dir or three histogram files")),
            };
            let recon = reconstruct_files(
                [paths[0].as_path(), paths[1].as_path(), paths[2].as_path()],
                &cfg.analysis.reconstruct_options(),
            )?;
            let names: Vec<String> = paths.iter().map(|p| file_label(p)).collect();
            write_reconstruction(&out, &recon, &names)?;
            println!(
                "{} bins, {} invalid",
                recon.bins.len(),
                recon.bins.iter().filter(|b| !b.valid).count()
            );
        }
        Command::Fit {
            common,
            analysis,
            run_dir,
            input,
        } => {
            let mut cfg = load_config(&common)?;
            analysis.apply(&mut cfg);
            cfg.analysis.validate()?;
            let (input, out) = match (run_dir, input) {
                (Some(dir), _) => (
                    dir.join(RECONSTRUCTION_FILE),
                    common.out.unwrap_or_else(|| dir.join(FIT_FILE)),
                ),
                (None, Some(p)) => (p, common.out.ok_or_else(|| usage("--out is required without --run-dir"))?),
                (None, None) => return Err(usage("give --run-dir or a reconstruction file")),
            };
            let recon = read_reconstruction(&input)?;
            let report = fit_reconstruction(&recon, cfg.analysis.fix_corr_time, cfg.analysis.phase_threshold)?;
            write_fit(&out, &report, &file_label(&input))?;
            print_fit(&report);
        }
        Command::Pipeline { common, sim, analysis } => {
            let mut cfg = load_config(&common)?;
            sim.apply(&mut cfg);
            analysis.apply(&mut cfg);
            cfg.output = output_dir(&common, &cfg);
            cfg.validate()?;
            let out = cmd_pipeline(&cfg)?;
            match &out.fit {
                Some(report) => print_fit(report),
                None => println!("{} histograms written", out.histograms.len()),
            }
        }
    }
    Ok(())
}

fn file_label(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn print_fit(report: &pipeline::FitReport) {
    for p in report.double_exponential.params.iter().chain(&report.double_exponential.derived) {
        println!("{} = {:e} ± {:e}", p.name, p.value, p.sigma);
    }
    let ph = &report.constant_phase;
    println!(
        "phase = {} ± {}",
        ph.value("phase").unwrap_or(f64::NAN),
        ph.sigma("phase").unwrap_or(f64::NAN)
    );
    println!(
        "chi2/ndof = {} / {}",
        report.double_exponential.chi2, report.double_exponential.ndof
    );
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
