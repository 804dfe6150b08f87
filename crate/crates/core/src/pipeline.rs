//! Run configuration and the file-level stages: simulate, correlate, reconstruct, fit.
//!
//! A run directory holds `phi{k}_A.bttg`/`phi{k}_B.bttg` per analyzer setting, a
//! `manifest.json` with the resolved configuration, `hist_phi{k}.json`,
//! `reconstruction.json` and `fit.json`. All files are written atomically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::correlate::{cross_correlate, CoincidenceHistogram, Gate, DEFAULT_BIN_WIDTH, DEFAULT_TAU_MAX};
use crate::error::{ensure_param, Error, Result};
use crate::fit::{fit_constant_phase, fit_double_exponential, FitResult};
use crate::io::{
    read_document, write_atomic, write_json, Document, FIT_FORMAT, FIT_UNITS, HISTOGRAM_FORMAT, HISTOGRAM_UNITS,
    MANIFEST_FORMAT, RECONSTRUCTION_FORMAT, RECONSTRUCTION_UNITS,
};
use crate::model::{corr_time_from_bandwidth, AnalyzerSetting, ReferenceAmplitude, TpwfModel};
use crate::reconstruct::{
    reconstruct_curve_with, BackgroundMode, GammaMode, Normalization, PhaseTriple, ReconstructOptions,
    ReconstructedTpwf, RootChoice,
};
use crate::simulate::{generate_settings, SimConfig, WINDOW_CORR_TIMES};
use crate::timetag::{encode_stream, read_stream_file, Channel, TimeTagStream};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECONSTRUCTION_FILE: &str = "reconstruction.json";
pub const FIT_FILE: &str = "fit.json";

const TOOL: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// 8.1 MHz Lorentzian linewidth.
const DEFAULT_BANDWIDTH_HZ: f64 = 8.1e6;

pub fn tag_file_name(k: usize, channel: Channel) -> String {
    format!("phi{k}_{channel}.bttg")
}

pub fn histogram_file_name(k: usize) -> String {
    format!("hist_phi{k}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub amplitude: f64,
    /// Seconds.
    pub corr_time: f64,
    /// Seconds.
    pub tau_offset: f64,
    /// Radians.
    pub phase: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            corr_time: corr_time_from_bandwidth(DEFAULT_BANDWIDTH_HZ).expect("positive bandwidth"),
            tau_offset: 0.0,
            phase: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub pair_rate: f64,
    pub singles_rate_a: f64,
    pub singles_rate_b: f64,
    pub duration: f64,
    pub jitter_sigma: f64,
    pub dead_time: f64,
    /// Half-width of the pair-delay window; ten correlation times when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_window: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate: Option<Gate>,
    pub max_tags: u64,
    /// Analyzer azimuths in radians; the three reconstruction settings when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_settings: Option<Vec<f64>>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let base = SimConfig::new(1000.0, 38_000.0, 38_000.0, 10.0, 1.0, 0);
        Self {
            pair_rate: base.pair_rate,
            singles_rate_a: base.singles_rate_a,
            singles_rate_b: base.singles_rate_b,
            duration: base.duration,
            jitter_sigma: 0.0,
            dead_time: 0.0,
            tau_window: None,
            gate: None,
            max_tags: base.max_tags,
            phi_settings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Seconds.
    pub bin_width: f64,
    /// Seconds.
    pub tau_max: f64,
    pub background_mode: BackgroundMode,
    pub gamma_mode: GammaMode,
    pub normalization: Normalization,
    pub root_choice: RootChoice,
    pub wing_fraction: f64,
    /// Holds the correlation time fixed in the envelope fit, seconds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fix_corr_time: Option<f64>,
    /// Bins below this fraction of the peak `|ψ|²` are left out of the phase fit.
    pub phase_threshold: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let r = ReconstructOptions::default();
        Self {
            bin_width: DEFAULT_BIN_WIDTH,
            tau_max: DEFAULT_TAU_MAX,
            background_mode: BackgroundMode::WingSubtract,
            gamma_mode: GammaMode::Pooled,
            normalization: r.normalization,
            root_choice: r.root_choice,
            wing_fraction: r.wing_fraction,
            fix_corr_time: None,
            phase_threshold: 0.1,
        }
    }
}

impl AnalysisSection {
    pub fn reconstruct_options(&self) -> ReconstructOptions {
        ReconstructOptions {
            background_mode: self.background_mode,
            gamma_mode: self.gamma_mode,
            root_choice: self.root_choice,
            normalization: self.normalization,
            wing_fraction: self.wing_fraction,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_param!(self.bin_width > 0.0, "bin_width must be positive");
        ensure_param!(self.tau_max > 0.0, "tau_max must be positive");
        ensure_param!(
            self.phase_threshold >= 0.0 && self.phase_threshold < 1.0,
            "phase_threshold must lie in [0, 1)"
        );
        if let Some(tc) = self.fix_corr_time {
            ensure_param!(tc > 0.0 && tc.is_finite(), "fix_corr_time must be positive");
        }
        Ok(())
    }
}

/// Full description of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Reference amplitude γ in units of the biphoton amplitude.
    pub gamma: f64,
    /// Run directory.
    pub output: PathBuf,
    pub model: ModelSection,
    pub simulation: SimulationSection,
    pub analysis: AnalysisSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            gamma: 1.0,
            output: PathBuf::from("run"),
            model: ModelSection::default(),
            simulation: SimulationSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model(&self) -> Result<TpwfModel<f64>> {
        let m = &self.model;
        TpwfModel::new(m.amplitude, m.corr_time, m.tau_offset, m.phase)
    }

    pub fn gamma(&self) -> Result<ReferenceAmplitude<f64>> {
        ReferenceAmplitude::new(self.gamma)
    }

    pub fn settings(&self) -> Result<Vec<AnalyzerSetting<f64>>> {
        match &self.simulation.phi_settings {
            None => Ok((0..3).map(AnalyzerSetting::reconstruction).collect()),
            Some(phis) => {
                ensure_param!(!phis.is_empty(), "phi_settings is empty");
                phis.iter()
                    .map(|&phi| {
                        ensure_param!(phi.is_finite(), "phi setting must be finite");
                        Ok(AnalyzerSetting::balanced(phi))
                    })
                    .collect()
            }
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            pair_rate: s.pair_rate,
            singles_rate_a: s.singles_rate_a,
            singles_rate_b: s.singles_rate_b,
            duration: s.duration,
            jitter_sigma: s.jitter_sigma,
            dead_time: s.dead_time,
            tau_window: s
                .tau_window
                .unwrap_or(WINDOW_CORR_TIMES * self.model.corr_time),
            seed: self.seed,
            stream: 0,
            gate: s.gate,
            max_tags: s.max_tags,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model()?;
        self.gamma()?;
        self.sim_config().validate_for(&model)?;
        self.settings()?;
        self.analysis.validate()
    }
}

/// One simulated analyzer setting in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingRecord {
    pub index: usize,
    pub setting: AnalyzerSetting<f64>,
    pub rng_stream: u64,
    pub file_a: String,
    pub file_b: String,
    /// Effective acquisition time after gating, seconds.
    pub acquisition_time: f64,
    pub tags_a: u64,
    pub tags_b: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub config: PipelineConfig,
    pub settings: Vec<SettingRecord>,
}

/// Whether the settings of a manifest are the three reconstruction settings in order.
fn is_reconstruction_set(settings: &[AnalyzerSetting<f64>]) -> bool {
    settings.len() == 3
        && settings.iter().enumerate().all(|(k, s)| {
            let want = AnalyzerSetting::<f64>::reconstruction(k);
            (s.phi - want.phi).abs() < 1e-12 && (s.theta - want.theta).abs() < 1e-12
        })
}

/// Simulates every configured setting concurrently into `dir` and writes the manifest.
pub fn cmd_simulate(cfg: &PipelineConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let settings = cfg.settings()?;
    let sim = cfg.sim_config();
    let streams = generate_settings(&sim, &settings, &cfg.model()?, cfg.gamma()?)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(settings.len());
    for (k, ((a, b), setting)) in streams.iter().zip(&settings).enumerate() {
        let file_a = tag_file_name(k, Channel::A);
        let file_b = tag_file_name(k, Channel::B);
        write_atomic(dir.join(&file_a), &encode_stream(a))?;
        write_atomic(dir.join(&file_b), &encode_stream(b))?;
        records.push(SettingRecord {
            index: k,
            setting: *setting,
            rng_stream: k as u64,
            file_a,
            file_b,
            acquisition_time: a.acquisition_time,
            tags_a: a.len() as u64,
            tags_b: b.len() as u64,
        });
    }
    let manifest = Manifest {
        generator: TOOL.to_string(),
        config: cfg.clone(),
        settings: records,
    };
    let doc = Document::new(MANIFEST_FORMAT, &[("duration", "s"), ("rates", "1/s"), ("angles", "rad")], &manifest);
    write_json(dir.join(MANIFEST_FILE), &doc)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(read_document::<Manifest>(dir.join(MANIFEST_FILE), MANIFEST_FORMAT)?.data)
}

/// Correlates one pair of time-tag files.
pub fn correlate_files(
    file_a: &Path,
    file_b: &Path,
    acquisition_time: f64,
    setting: Option<AnalyzerSetting<f64>>,
    bin_width: f64,
    tau_max: f64,
) -> Result<CoincidenceHistogram> {
    ensure_param!(
        acquisition_time > 0.0 && acquisition_time.is_finite(),
        "acquisition time must be positive"
    );
    let a = read_stream_file(file_a, Channel::A, acquisition_time)?;
    let b = read_stream_file(file_b, Channel::B, acquisition_time)?;
    let mut hist = cross_correlate(&a, &b, bin_width, tau_max)?;
    hist.setting = setting;
    Ok(hist)
}

pub fn histogram_document(hist: &CoincidenceHistogram, provenance: serde_json::Value) -> Document<&CoincidenceHistogram> {
    Document::new(HISTOGRAM_FORMAT, HISTOGRAM_UNITS, hist).with_provenance(provenance)
}

fn histogram_provenance(record: &SettingRecord, cfg: &PipelineConfig, bin_width: f64, tau_max: f64) -> serde_json::Value {
    json!({
        "generator": TOOL,
        "inputs": [record.file_a, record.file_b],
        "setting_index": record.index,
        "seed": cfg.seed,
        "rng_stream": record.rng_stream,
        "bin_width": bin_width,
        "tau_max": tau_max,
    })
}

/// Correlates every setting listed in a run directory's manifest and writes `hist_phi{k}.json`.
pub fn cmd_correlate(dir: &Path, bin_width: f64, tau_max: f64) -> Result<Vec<CoincidenceHistogram>> {
    let manifest = read_manifest(dir)?;
    let hists: Vec<CoincidenceHistogram> = manifest
        .settings
        .iter()
        .map(|r| {
            correlate_files(
                &dir.join(&r.file_a),
                &dir.join(&r.file_b),
                r.acquisition_time,
                Some(r.setting),
                bin_width,
                tau_max,
            )
        })
        .collect::<Result<_>>()?;
    for (r, h) in manifest.settings.iter().zip(&hists) {
        let prov = histogram_provenance(r, &manifest.config, bin_width, tau_max);
        write_json(dir.join(histogram_file_name(r.index)), &histogram_document(h, prov))?;
    }
    Ok(hists)
}

pub fn read_histogram(path: &Path) -> Result<CoincidenceHistogram> {
    let hist = read_document::<CoincidenceHistogram>(path, HISTOGRAM_FORMAT)?.data;
    hist.validate()?;
    Ok(hist)
}

/// Reconstructs from three histogram files at `φ = 0, π/3, 2π/3`.
pub fn reconstruct_files(paths: [&Path; 3], opts: &ReconstructOptions) -> Result<ReconstructedTpwf> {
    let [h0, h1, h2] = paths.map(read_histogram);
    let triple = PhaseTriple::new(h0?, h1?, h2?)?;
    reconstruct_curve_with(&triple, opts)
}

pub fn write_reconstruction(path: &Path, recon: &ReconstructedTpwf, inputs: &[String]) -> Result<()> {
    let doc = Document::new(RECONSTRUCTION_FORMAT, RECONSTRUCTION_UNITS, recon)
        .with_provenance(json!({ "generator": TOOL, "inputs": inputs }));
    write_json(path, &doc)
}

pub fn read_reconstruction(path: &Path) -> Result<ReconstructedTpwf> {
    Ok(read_document::<ReconstructedTpwf>(path, RECONSTRUCTION_FORMAT)?.data)
}

/// Envelope and phase fits of one reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub double_exponential: FitResult,
    pub constant_phase: FitResult,
}

pub fn fit_reconstruction(recon: &ReconstructedTpwf, fix_corr_time: Option<f64>, phase_threshold: f64) -> Result<FitReport> {
    Ok(FitReport {
        double_exponential: fit_double_exponential(recon, fix_corr_time)?,
        constant_phase: fit_constant_phase(recon, phase_threshold)?,
    })
}

pub fn write_fit(path: &Path, report: &FitReport, input: &str) -> Result<()> {
    let doc = Document::new(FIT_FORMAT, FIT_UNITS, report).with_provenance(json!({ "generator": TOOL, "inputs": [input] }));
    write_json(path, &doc)
}

pub fn read_fit(path: &Path) -> Result<FitReport> {
    Ok(read_document::<FitReport>(path, FIT_FORMAT)?.data)
}

/// Everything produced by a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub manifest: Manifest,
    pub histograms: Vec<CoincidenceHistogram>,
    pub reconstruction: Option<ReconstructedTpwf>,
    pub fit: Option<FitReport>,
}

/// Simulate, correlate, reconstruct and fit into `cfg.output`.
///
/// Reconstruction and fitting run only when the settings are the three
/// reconstruction settings.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let dir = cfg.output.as_path();
    let manifest = cmd_simulate(cfg, dir)?;
    let a = &cfg.analysis;
    let histograms = cmd_correlate(dir, a.bin_width, a.tau_max)?;
    let settings: Vec<_> = manifest.settings.iter().map(|r| r.setting).collect();
    if !is_reconstruction_set(&settings) {
        return Ok(PipelineOutput {
            manifest,
            histograms,
            reconstruction: None,
            fit: None,
        });
    }
    let names: Vec<String> = (0..3).map(histogram_file_name).collect();
    let triple = PhaseTriple::new(histograms[0].clone(), histograms[1].clone(), histograms[2].clone())?;
    let recon = reconstruct_curve_with(&triple, &a.reconstruct_options())?;
    write_reconstruction(&dir.join(RECONSTRUCTION_FILE), &recon, &names)?;
    let fit = fit_reconstruction(&recon, a.fix_corr_time, a.phase_threshold)?;
    write_fit(&dir.join(FIT_FILE), &fit, RECONSTRUCTION_FILE)?;
    Ok(PipelineOutput {
        manifest,
        histograms,
        reconstruction: Some(recon),
        fit: Some(fit),
    })
}

/// Streams of one setting read back from a run directory.
pub fn read_setting_streams(dir: &Path, record: &SettingRecord) -> Result<(TimeTagStream, TimeTagStream)> {
    Ok((
        read_stream_file(dir.join(&record.file_a), Channel::A, record.acquisition_time)?,
        read_stream_file(dir.join(&record.file_b), Channel::B, record.acquisition_time)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
        assert!((cfg.model.corr_time - 39.298e-9).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml_str("seed = 3\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = PipelineConfig::from_toml_str("[model]\nampl = 1.0\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg = PipelineConfig::from_toml_str(
            "seed = 9\n[simulation]\nduration = 2.0\n[analysis]\nbackground_mode = \"none\"\ngamma_mode = \"per_bin\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.simulation.duration, 2.0);
        assert_eq!(cfg.analysis.background_mode, BackgroundMode::None);
        assert_eq!(cfg.analysis.gamma_mode, GammaMode::PerBin);
        assert_eq!(cfg.model, ModelSection::default());
    }

    #[test]
    fn invariants_checked_on_load() {
        assert!(PipelineConfig::from_toml_str("gamma = -1.0\n").is_err());
        assert!(PipelineConfig::from_toml_str("[model]\ncorr_time = 0.0\n").is_err());
        assert!(PipelineConfig::from_toml_str("[simulation]\ntau_window = 1e-9\n").is_err());
        assert!(PipelineConfig::from_toml_str("[analysis]\nbin_width = -4e-9\n").is_err());
    }

    #[test]
    fn default_settings_are_reconstruction_set() {
        let cfg = PipelineConfig::default();
        assert!(is_reconstruction_set(&cfg.settings().unwrap()));
        let mut scan = cfg.clone();
        scan.simulation.phi_settings = Some(vec![0.0, 1.0]);
        assert!(!is_reconstruction_set(&scan.settings().unwrap()));
    }
}
