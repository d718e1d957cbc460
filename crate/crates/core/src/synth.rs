//! Deterministic synthetic SCADA series.
//!
//! Wind speed is a seasonal AR(1) process, power follows the power curve
//! with small multiplicative curtailment noise, ambient temperature is
//! seasonal plus diurnal with AR(1) weather noise. Transformer and nacelle
//! temperatures come from fixed controller functions of (P, TA) plus noise.
//! Anomaly episodes add a sustained transformer excess (and a fraction of it
//! to the nacelle). Labels are then assigned by a rule on the emitted
//! values, so relabeling a file with [`GroundTruth::relabel`] reproduces
//! them exactly.

use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{FeatureVector, PowerCurve};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub tt: f64,
    pub tn: f64,
    /// Stationary standard deviation of the ambient weather deviation.
    pub ta: f64,
    /// Stationary standard deviation of the wind deviation.
    pub ws: f64,
    /// Standard deviation of the relative curtailment `|N(0, s)|`.
    pub curtail: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { tt: 1.0, tn: 0.5, ta: 2.0, ws: 2.8, curtail: 0.03 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    #[serde(with = "crate::schema::timestamp_serde")]
    pub start: NaiveDateTime,
    pub years: f64,
    pub cadence_secs: i64,
    /// Target share of anomalous samples.
    pub anomaly_fraction: f64,
    /// Mean episode length in samples.
    pub episode_mean_len: f64,
    /// Mean transformer excess during an episode, degC.
    pub excess: f64,
    /// Share of the excess that reaches the nacelle.
    pub nacelle_share: f64,
    /// Probability that a slot is missing from the output.
    pub missing_fraction: f64,
    pub noise: NoiseSpec,
    pub power_curve: PowerCurve,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            start: crate::schema::parse_timestamp("2021-01-01T00:00:00").expect("valid literal"),
            years: 4.0,
            cadence_secs: crate::schema::CADENCE_SECS,
            anomaly_fraction: 1759.0 / (47883.0 + 1759.0),
            episode_mean_len: 36.0,
            excess: 14.0,
            nacelle_share: 0.3,
            missing_fraction: 0.0,
            noise: NoiseSpec::default(),
            power_curve: PowerCurve::default(),
            seed: 1,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.cadence_secs <= 0 {
            return bad("cadence must be positive");
        }
        if !(self.years > 0.0) {
            return bad("duration must be positive");
        }
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction < 0.5) {
            return bad("anomaly fraction must lie in (0, 0.5)");
        }
        if !(self.episode_mean_len >= 2.0 * MIN_RUN as f64) {
            return bad("mean episode length too short for the labeling rule");
        }
        if !(self.excess > LABEL_THRESHOLD) {
            return bad("episode excess must exceed the labeling threshold");
        }
        if !(0.0..1.0).contains(&self.missing_fraction) || !(0.0..=1.0).contains(&self.nacelle_share) {
            return bad("missing fraction and nacelle share must lie in [0, 1)");
        }
        let n = &self.noise;
        if [n.tt, n.tn, n.ta, n.ws, n.curtail].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("noise levels must be finite and non-negative");
        }
        self.power_curve.validate()
    }

    pub fn slots(&self) -> usize {
        (self.years * 365.25 * 86400.0 / self.cadence_secs as f64).floor() as usize
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Residual above which a transformer reading counts as excess, degC.
pub const LABEL_THRESHOLD: f64 = 6.0;
/// Shortest run of consecutive excess readings that is labeled.
pub const MIN_RUN: usize = 3;

/// Controller functions behind the temperatures and the labeling rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `TT = c0 + c_ta * TA + c_load * (P / rated)^2`.
    pub tt: [f64; 3],
    /// `TN = c0 + c_ta * TA + c_load * P / rated`.
    pub tn: [f64; 3],
    pub rated_power: f64,
    /// Noise added before rounding to whole degrees.
    pub tt_noise: f64,
    pub tn_noise: f64,
    pub threshold: f64,
    pub min_run: usize,
    pub cadence_secs: i64,
}

impl GroundTruth {
    pub fn for_spec(spec: &GeneratorSpec) -> Self {
        Self {
            tt: [22.0, 0.7, 40.0],
            tn: [8.0, 0.8, 12.0],
            rated_power: spec.power_curve.rated_power(),
            tt_noise: spec.noise.tt,
            tn_noise: spec.noise.tn,
            threshold: LABEL_THRESHOLD,
            min_run: MIN_RUN,
            cadence_secs: spec.cadence_secs,
        }
    }

    pub fn tt(&self, p: f64, ta: f64) -> f64 {
        let load = p / self.rated_power;
        self.tt[0] + self.tt[1] * ta + self.tt[2] * load * load
    }

    pub fn tn(&self, p: f64, ta: f64) -> f64 {
        self.tn[0] + self.tn[1] * ta + self.tn[2] * p / self.rated_power
    }

    pub fn residual(&self, x: &FeatureVector) -> f64 {
        x.tt - self.tt(x.p, x.ta)
    }

    /// Label 1 for every sample inside a run of at least `min_run`
    /// consecutive-slot samples whose residual exceeds the threshold.
    pub fn relabel(&self, data: &[FeatureVector]) -> Vec<u8> {
        let mut labels = vec![0u8; data.len()];
        let mut i = 0;
        while i < data.len() {
            if self.residual(&data[i]) <= self.threshold {
                i += 1;
                continue;
            }
            let mut j = i + 1;
            while j < data.len()
                && (data[j].timestamp - data[j - 1].timestamp).num_seconds() == self.cadence_secs
                && self.residual(&data[j]) > self.threshold
            {
                j += 1;
            }
            if j - i >= self.min_run {
                labels[i..j].iter_mut().for_each(|l| *l = 1);
            }
            i = j;
        }
        labels
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Path of the ground-truth sidecar written next to a series file.
pub fn truth_path(data_path: &Path) -> std::path::PathBuf {
    let mut s = data_path.as_os_str().to_owned();
    s.push(".truth.json");
    s.into()
}

fn day_of_year(ts: &NaiveDateTime) -> f64 {
    ts.ordinal0() as f64 + (ts.hour() as f64 * 60.0 + ts.minute() as f64) / 1440.0
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

/// Non-overlapping episodes `(start, len)` covering about the target share.
fn place_episodes(spec: &GeneratorSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mean = spec.episode_mean_len;
    let target = (spec.anomaly_fraction * n as f64).round() as usize;
    let lo = (mean / 2.0).round().max(MIN_RUN as f64) as usize;
    let hi = (1.5 * mean).round() as usize;
    let mut taken = vec![false; n];
    let mut episodes = Vec::new();
    let mut covered = 0;
    let mut attempts = 0;
    while covered < target && attempts < 100_000 {
        attempts += 1;
        let len = rng.random_range(lo..=hi).min(target - covered).max(MIN_RUN);
        if len + 2 > n {
            break;
        }
        let start = rng.random_range(1..n - len - 1);
        // One clear slot on each side keeps runs apart.
        if taken[start - 1..start + len + 1].iter().any(|&t| t) {
            continue;
        }
        taken[start..start + len].iter_mut().for_each(|t| *t = true);
        episodes.push((start, len));
        covered += len;
    }
    episodes.sort_unstable();
    episodes
}

/// Generates the series and its ground truth.
pub fn generate(spec: &GeneratorSpec) -> Result<(Vec<FeatureVector>, GroundTruth)> {
    spec.validate()?;
    let truth = GroundTruth::for_spec(spec);
    let n = spec.slots();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let episodes = place_episodes(spec, n, &mut rng);
    let mut excess = vec![0.0; n];
    for &(start, len) in &episodes {
        let amp = spec.excess * rng.random_range(0.8..1.2);
        for e in &mut excess[start..start + len] {
            *e = amp;
        }
    }

    let dt = spec.cadence_secs as f64;
    // AR(1) coefficients for hour-scale weather and multi-hour wind.
    let phi_ta = (-dt / (6.0 * 3600.0)).exp();
    let phi_ws = (-dt / (12.0 * 3600.0)).exp();
    let mut dev_ta = 0.0;
    let mut dev_ws = 0.0;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let curve = &spec.power_curve;
    let mut out = Vec::with_capacity(n);
    for (i, &exc) in excess.iter().enumerate() {
        let timestamp = spec.start + chrono::Duration::seconds(spec.cadence_secs * i as i64);
        let doy = day_of_year(&timestamp);
        let season = (2.0 * std::f64::consts::PI * (doy - 15.0) / 365.25).cos();
        let hour = timestamp.hour() as f64 + timestamp.minute() as f64 / 60.0;
        let diurnal = (2.0 * std::f64::consts::PI * (hour - 15.0) / 24.0).cos();

        dev_ws = phi_ws * dev_ws + spec.noise.ws * (1.0 - phi_ws * phi_ws).sqrt() * normal(&mut rng);
        dev_ta = phi_ta * dev_ta + spec.noise.ta * (1.0 - phi_ta * phi_ta).sqrt() * normal(&mut rng);
        let ws = round_to((7.5 + 1.5 * season + dev_ws).max(0.0), 2);
        let ta = round_to(11.0 - 9.0 * season + 4.0 * diurnal + dev_ta, 1);
        let curtail = (spec.noise.curtail * normal(&mut rng)).abs().min(1.0);
        let p = (curve.p_max(ws)? * (1.0 - curtail)).floor().max(0.0);
        let tt = (truth.tt(p, ta) + spec.noise.tt * normal(&mut rng) + exc).round();
        let tn = (truth.tn(p, ta) + spec.noise.tn * normal(&mut rng) + spec.nacelle_share * exc).round();
        let missing = spec.missing_fraction > 0.0 && rng.random_bool(spec.missing_fraction);
        if !missing {
            out.push(FeatureVector { timestamp, p, tn, tt, ta, ws, label: None });
        }
    }
    let labels = truth.relabel(&out);
    for (x, l) in out.iter_mut().zip(labels) {
        x.label = Some(l);
    }
    Ok((out, truth))
}
