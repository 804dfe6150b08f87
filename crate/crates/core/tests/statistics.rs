use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;

use biphoton::correlate::{cross_correlate, normalize_g2, CoincidenceHistogram};
use biphoton::fit::{fit_constant_phase, fit_double_exponential};
use biphoton::model::{corr_time_from_bandwidth, interference_g2, AnalyzerSetting, ReferenceAmplitude, TpwfModel};
use biphoton::reconstruct::{
    background_estimate, propagate_errors, reconstruct_curve_with, BackgroundMode, GammaMode, Normalization,
    PhaseTriple, ReconstructOptions,
};
use biphoton::simulate::{expected_histogram, generate_stream, rate_level_histogram, SimConfig, WINDOW_CORR_TIMES};
use biphoton::stats::{chi2_sf, ks_standard_normal, pearson_chi2};
use biphoton::timetag::TimeTagStream;

const BIN: f64 = 4e-9;
const TAU_MAX: f64 = 200e-9;

fn model(phase: f64) -> TpwfModel<f64> {
    TpwfModel::new(1.0, corr_time_from_bandwidth(8.1e6).unwrap(), 0.0, phase).unwrap()
}

fn g(x: f64) -> ReferenceAmplitude<f64> {
    ReferenceAmplitude::new(x).unwrap()
}

fn config(pair_rate: f64, singles: f64, duration: f64, seed: u64) -> SimConfig {
    SimConfig::new(pair_rate, singles, singles, duration, WINDOW_CORR_TIMES * model(0.0).corr_time, seed)
}

#[test]
fn event_histograms_follow_analytic_means() {
    let m = model(0.9);
    let mut p_values = Vec::new();
    for (k, seed) in [(0usize, 1u64), (1, 2), (2, 3), (0, 4)] {
        let cfg = config(5000.0, 30_000.0, 10.0, seed);
        let s = AnalyzerSetting::reconstruction(k);
        let (a, b) = generate_stream(&cfg, &s, &m, g(1.0)).unwrap();
        let h = cross_correlate(&a, &b, BIN, TAU_MAX).unwrap();
        let e = expected_histogram(&cfg, &s, &m, g(1.0), BIN, TAU_MAX).unwrap();
        let (chi2, dof) = pearson_chi2(&h.counts, e.expected.as_ref().unwrap(), 5.0);
        p_values.push(chi2_sf(chi2, dof));
    }
    assert!(p_values.iter().all(|&p| p > 1e-3), "{p_values:?}");
}

#[test]
fn rate_level_matches_event_level_per_bin() {
    // z-scores of event-level counts against the rate-level mean, pooled over runs
    let m = model(0.4);
    let s = AnalyzerSetting::reconstruction(1);
    let mut z = Vec::new();
    for seed in 0..20 {
        let cfg = config(3000.0, 20_000.0, 5.0, 100 + seed);
        let (a, b) = generate_stream(&cfg, &s, &m, g(1.2)).unwrap();
        let h = cross_correlate(&a, &b, BIN, TAU_MAX).unwrap();
        let mean = expected_histogram(&cfg, &s, &m, g(1.2), BIN, TAU_MAX).unwrap().expected.unwrap();
        let rate = rate_level_histogram(&cfg, &s, &m, g(1.2), BIN, TAU_MAX).unwrap();
        for ((&c, &r), &mu) in h.counts.iter().zip(&rate.counts).zip(&mean) {
            // difference of two independent Poisson draws with a common mean
            z.push((c as f64 - r as f64) / (2.0 * mu).sqrt());
        }
    }
    let (d, p) = ks_standard_normal(&z);
    assert!(p > 0.01, "KS D = {d}, p = {p}");
}

fn split_halves(stream: &TimeTagStream, cut: u64) -> (TimeTagStream, TimeTagStream) {
    let ts = stream.timestamps();
    let k = ts.partition_point(|&t| t < cut);
    let half = stream.acquisition_time / 2.0;
    (
        TimeTagStream::new(stream.channel, ts[..k].to_vec(), half).unwrap(),
        TimeTagStream::new(stream.channel, ts[k..].iter().map(|t| t - cut).collect(), half).unwrap(),
    )
}

#[test]
fn first_and_second_halves_agree() {
    let cfg = config(4000.0, 25_000.0, 20.0, 77);
    let s = AnalyzerSetting::reconstruction(0);
    let (a, b) = generate_stream(&cfg, &s, &model(0.9), g(1.0)).unwrap();
    let cut = 10_000_000_000_000u64;
    let (a1, a2) = split_halves(&a, cut);
    let (b1, b2) = split_halves(&b, cut);
    let h1 = cross_correlate(&a1, &b1, BIN, TAU_MAX).unwrap();
    let h2 = cross_correlate(&a2, &b2, BIN, TAU_MAX).unwrap();
    // two-sample chi-square for equal exposures
    let mut chi2 = 0.0;
    let mut dof = 0;
    for (&x, &y) in h1.counts.iter().zip(&h2.counts) {
        if x + y > 0 {
            chi2 += (x as f64 - y as f64).powi(2) / (x + y) as f64;
            dof += 1;
        }
    }
    assert!(chi2_sf(chi2, dof) > 1e-3, "chi2 {chi2} on {dof}");
}

#[test]
fn independent_streams_normalize_to_one() {
    let cfg = config(0.0, 50_000.0, 20.0, 5);
    let (a, b) = generate_stream(&cfg, &AnalyzerSetting::reconstruction(0), &model(0.0), g(1.0)).unwrap();
    let h = cross_correlate(&a, &b, BIN, TAU_MAX).unwrap();
    let g2 = normalize_g2(&h).unwrap();
    let mean = g2.iter().map(|v| v.0).sum::<f64>() / g2.len() as f64;
    let se = (g2.iter().map(|v| v.1 * v.1).sum::<f64>()).sqrt() / g2.len() as f64;
    assert!((mean - 1.0).abs() < 4.0 * se, "mean g2 {mean} ± {se}");
    let (wing, wing_se) = background_estimate(&h, 0.2).unwrap();
    assert!((wing - 1.0).abs() < 4.0 * wing_se);
}

#[test]
fn wing_level_is_reference_plus_accidentals() {
    // far from the biphoton the normalized level holds γ² and the accidentals together
    let m = model(0.0);
    let cfg = config(2000.0, 20_000.0, 50.0, 9);
    let s = AnalyzerSetting::reconstruction(0);
    let h = rate_level_histogram(&cfg, &s, &m, g(1.0), BIN, TAU_MAX).unwrap();
    let e = expected_histogram(&cfg, &s, &m, g(1.0), BIN, TAU_MAX).unwrap();
    let (wing, se) = background_estimate(&h, 0.2).unwrap();
    let t = e.acquisition_time;
    let flat = e.expected.as_ref().unwrap()[0] * t / (e.singles_a as f64 * e.singles_b as f64 * BIN);
    assert!((wing - flat).abs() < 4.0 * se, "{wing} ± {se} vs {flat}");
    assert!(wing > 1.0);
}

#[test]
fn balanced_point_has_equal_component_errors() {
    let (sr, si, _) = propagate_errors([1.0, 1.0, 1.0], [10_000; 3]);
    assert!((sr / si - 1.0).abs() < 1e-6, "{sr} vs {si}");
}

/// Histograms with Poisson counts around `signal·|γe^{−2iφ_k} − ψ(τ)|² + background`,
/// or the rounded means when `rng` is `None`.
fn model_triple(m: &TpwfModel<f64>, gamma: f64, signal: f64, background: f64, rng: Option<&mut ChaCha8Rng>) -> PhaseTriple {
    let n = (2.0 * TAU_MAX / BIN).round() as usize;
    let mut rng = rng;
    let hists: Vec<CoincidenceHistogram> = (0..3)
        .map(|k| {
            let s = AnalyzerSetting::reconstruction(k);
            let expected: Vec<f64> = (0..n)
                .map(|i| {
                    let tau = -TAU_MAX + (i as f64 + 0.5) * BIN;
                    signal * interference_g2(gamma, m.eval(tau), s.phi) + background
                })
                .collect();
            let counts = expected
                .iter()
                .map(|&mu| match rng.as_deref_mut() {
                    Some(r) => r.sample(Poisson::new(mu).unwrap()) as u64,
                    None => mu.round() as u64,
                })
                .collect();
            CoincidenceHistogram {
                bin_width: BIN,
                tau_min: -TAU_MAX,
                tau_max: TAU_MAX,
                counts,
                acquisition_time: 1.0,
                singles_a: 1,
                singles_b: 1,
                setting: Some(s),
                expected: Some(expected),
            }
        })
        .collect();
    PhaseTriple::new(hists[0].clone(), hists[1].clone(), hists[2].clone()).unwrap()
}

#[test]
fn fit_parameter_pulls_are_standard_normal() {
    let m = model(0.9);
    let opts = ReconstructOptions {
        background_mode: BackgroundMode::None,
        gamma_mode: GammaMode::Pooled,
        normalization: Normalization::Counts,
        ..Default::default()
    };
    let (gamma, signal, background) = (1.5, 5e5, 0.0);
    let truth_recon = reconstruct_curve_with(&model_triple(&m, gamma, signal, background, None), &opts).unwrap();
    let truth = fit_double_exponential(&truth_recon, None).unwrap();
    let truth_phase = fit_constant_phase(&truth_recon, 0.1).unwrap().value("phase").unwrap();
    let names = ["amplitude", "tau_offset", "corr_time"];
    let mut pulls = vec![Vec::new(); names.len() + 1];
    let mut reduced = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..300 {
        let recon = reconstruct_curve_with(&model_triple(&m, gamma, signal, background, Some(&mut rng)), &opts).unwrap();
        let f = fit_double_exponential(&recon, None).unwrap();
        assert!(f.converged);
        for (i, n) in names.iter().enumerate() {
            pulls[i].push((f.value(n).unwrap() - truth.value(n).unwrap()) / f.sigma(n).unwrap());
        }
        let ph = fit_constant_phase(&recon, 0.1).unwrap();
        pulls[3].push((ph.value("phase").unwrap() - truth_phase) / ph.sigma("phase").unwrap());
        reduced.push(f.reduced_chi2());
    }
    for (i, p) in pulls.iter().enumerate() {
        let (d, pv) = ks_standard_normal(p);
        assert!(pv > 0.01, "pulls of parameter {i}: KS D = {d}, p = {pv}");
    }
    let mean_red = reduced.iter().sum::<f64>() / reduced.len() as f64;
    assert!((mean_red - 1.0).abs() < 0.05, "mean reduced chi2 {mean_red}");
}
