//! Feature space of one transformer: which channels exist, which of them a
//! controller may change, their admissible ranges, normalization means and
//! the turbine power curve.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling cadence of the SCADA stream, in seconds.
pub const CADENCE_SECS: i64 = 600;

/// Timestamp text format used in CSV and JSON files.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// One named input channel. `PMax` is derived from `WS` through the power
/// curve and never stored in the data files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureId {
    P,
    TN,
    TT,
    TA,
    WS,
    #[serde(rename = "year")]
    Year,
    #[serde(rename = "month")]
    Month,
    #[serde(rename = "day")]
    Day,
    #[serde(rename = "hour")]
    Hour,
    #[serde(rename = "minute")]
    Minute,
    #[serde(rename = "p_max")]
    PMax,
}

impl FeatureId {
    pub const CALENDAR: [FeatureId; 5] =
        [FeatureId::Year, FeatureId::Month, FeatureId::Day, FeatureId::Hour, FeatureId::Minute];

    pub fn name(self) -> &'static str {
        match self {
            FeatureId::P => "P",
            FeatureId::TN => "TN",
            FeatureId::TT => "TT",
            FeatureId::TA => "TA",
            FeatureId::WS => "WS",
            FeatureId::Year => "year",
            FeatureId::Month => "month",
            FeatureId::Day => "day",
            FeatureId::Hour => "hour",
            FeatureId::Minute => "minute",
            FeatureId::PMax => "p_max",
        }
    }

    /// Whether the channel only takes integer values in the data files.
    pub fn is_integral(self) -> bool {
        !matches!(self, FeatureId::TA | FeatureId::WS | FeatureId::PMax)
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered feature list with its controllable / fixed partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureId>,
    pub controllable: Vec<FeatureId>,
    pub fixed: Vec<FeatureId>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        let controllable = vec![FeatureId::P, FeatureId::TN, FeatureId::TT];
        let mut fixed = vec![FeatureId::TA, FeatureId::WS];
        fixed.extend(FeatureId::CALENDAR);
        let features = controllable.iter().chain(fixed.iter()).copied().collect();
        Self { features, controllable, fixed }
    }
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for f in &self.features {
            if *f == FeatureId::PMax {
                return Err(Error::InvalidConfig("p_max is derived and cannot be a stored feature".into()));
            }
            if seen.insert(*f, ()).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate feature {f}")));
            }
        }
        for f in self.controllable.iter().chain(&self.fixed) {
            if !seen.contains_key(f) {
                return Err(Error::InvalidConfig(format!("{f} is not a listed feature")));
            }
        }
        if let Some(f) = self.controllable.iter().find(|f| self.fixed.contains(f)) {
            return Err(Error::InvalidConfig(format!("{f} is both controllable and fixed")));
        }
        if self.controllable.len() + self.fixed.len() != self.features.len() {
            return Err(Error::InvalidConfig("controllable and fixed sets must cover every feature".into()));
        }
        let mut c = self.controllable.clone();
        c.sort();
        if c != [FeatureId::P, FeatureId::TN, FeatureId::TT] {
            return Err(Error::InvalidConfig("controllable set must be exactly {P, TN, TT}".into()));
        }
        Ok(())
    }

    pub fn is_controllable(&self, f: FeatureId) -> bool {
        self.controllable.contains(&f)
    }
}

/// One 10-minute SCADA sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    #[serde(with = "timestamp_serde")]
    pub timestamp: NaiveDateTime,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "TN")]
    pub tn: f64,
    #[serde(rename = "TT")]
    pub tt: f64,
    #[serde(rename = "TA")]
    pub ta: f64,
    #[serde(rename = "WS")]
    pub ws: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl FeatureVector {
    /// Value of a stored feature; `None` for the derived `p_max`.
    pub fn get(&self, id: FeatureId) -> Option<f64> {
        let ts = &self.timestamp;
        Some(match id {
            FeatureId::P => self.p,
            FeatureId::TN => self.tn,
            FeatureId::TT => self.tt,
            FeatureId::TA => self.ta,
            FeatureId::WS => self.ws,
            FeatureId::Year => ts.year() as f64,
            FeatureId::Month => ts.month() as f64,
            FeatureId::Day => ts.day() as f64,
            FeatureId::Hour => ts.hour() as f64,
            FeatureId::Minute => ts.minute() as f64,
            FeatureId::PMax => return None,
        })
    }

    pub fn set(&mut self, id: FeatureId, value: f64) -> Result<()> {
        match id {
            FeatureId::P => self.p = value,
            FeatureId::TN => self.tn = value,
            FeatureId::TT => self.tt = value,
            FeatureId::TA => self.ta = value,
            FeatureId::WS => self.ws = value,
            _ => {
                return Err(Error::Domain(format!("{id} cannot be assigned directly")));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, id: FeatureId, curve: &PowerCurve) -> Result<f64> {
        match self.get(id) {
            Some(v) => Ok(v),
            None => curve.p_max(self.ws),
        }
    }

    /// Model input row in the given feature order.
    pub fn inputs(&self, order: &[FeatureId], curve: &PowerCurve) -> Result<Vec<f64>> {
        order.iter().map(|&f| self.resolve(f, curve)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.p, self.tn, self.tt, self.ta, self.ws];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite value at {}", self.timestamp.format(TIMESTAMP_FORMAT))));
        }
        if let Some(l) = self.label {
            if l > 1 {
                return Err(Error::InvalidData(format!("label {l} is not 0/1")));
            }
        }
        Ok(())
    }

    pub fn is_anomalous(&self) -> bool {
        self.label == Some(1)
    }
}

/// Serde adapter for timestamps in `TIMESTAMP_FORMAT`.
pub mod timestamp_serde {
    use chrono::NaiveDateTime;
    use serde::{Deserialize, Deserializer, Serializer};

    use super::TIMESTAMP_FORMAT;

    pub fn serialize<S: Serializer>(ts: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&ts.format(TIMESTAMP_FORMAT).to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_timestamp(&s).map_err(serde::de::Error::custom)
    }
}

/// Accepts `YYYY-MM-DDTHH:MM:SS`, with a space separator, or a bare date.
pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| {
            chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").map(|d| d.and_hms_opt(0, 0, 0).expect("midnight is valid"))
        })
        .map_err(|e| Error::InvalidData(format!("bad timestamp {s:?}: {e}")))
}

/// Closed interval `[lo, hi]` per controllable feature.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureBounds(pub BTreeMap<FeatureId, [f64; 2]>);

impl FeatureBounds {
    pub fn get(&self, f: FeatureId) -> Option<(f64, f64)> {
        self.0.get(&f).map(|b| (b[0], b[1]))
    }

    pub fn set(&mut self, f: FeatureId, lo: f64, hi: f64) {
        self.0.insert(f, [lo, hi]);
    }

    pub fn validate(&self) -> Result<()> {
        for (f, [lo, hi]) in &self.0 {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidConfig(format!("bad bounds for {f}: [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Mean value per controllable feature, used to rescale the distance objective.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizationScales(pub BTreeMap<FeatureId, f64>);

impl NormalizationScales {
    pub fn get(&self, f: FeatureId) -> Option<f64> {
        self.0.get(&f).copied()
    }

    pub fn validate(&self) -> Result<()> {
        for (f, m) in &self.0 {
            if !(m.is_finite() && *m > 0.0) {
                return Err(Error::NonPositiveMean { feature: f.to_string(), mean: *m });
            }
        }
        Ok(())
    }
}

/// Monotone piecewise-linear wind speed (m/s) to maximum power (kW) map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCurve {
    pub knots: Vec<[f64; 2]>,
}

impl Default for PowerCurve {
    /// Synthetic S-shaped curve of a 5 MW turbine: cut-in at 3 m/s, rated
    /// power from 14 m/s.
    fn default() -> Self {
        Self {
            knots: vec![
                [0.0, 0.0],
                [3.0, 0.0],
                [4.0, 90.0],
                [5.0, 250.0],
                [6.0, 500.0],
                [7.0, 850.0],
                [8.0, 1320.0],
                [9.0, 1920.0],
                [10.0, 2640.0],
                [11.0, 3450.0],
                [12.0, 4250.0],
                [13.0, 4800.0],
                [14.0, 5000.0],
            ],
        }
    }
}

impl PowerCurve {
    pub fn new(knots: Vec<[f64; 2]>) -> Result<Self> {
        let c = Self { knots };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.len() < 2 {
            return Err(Error::InvalidConfig("power curve needs at least two knots".into()));
        }
        if self.knots.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("power curve knots must be finite".into()));
        }
        if self.knots[0][1] != 0.0 || self.knots[0][0] < 0.0 {
            return Err(Error::InvalidConfig(
                "power curve must start at zero power and non-negative wind speed".into(),
            ));
        }
        for w in self.knots.windows(2) {
            if w[1][0] <= w[0][0] {
                return Err(Error::InvalidConfig("power curve wind speeds must be strictly increasing".into()));
            }
            if w[1][1] < w[0][1] {
                return Err(Error::InvalidConfig("power curve must be non-decreasing".into()));
            }
        }
        Ok(())
    }

    /// Highest power reached, held beyond the last knot.
    pub fn rated_power(&self) -> f64 {
        self.knots.last().map(|k| k[1]).unwrap_or(0.0)
    }

    /// Wind speed of the first knot at rated power.
    pub fn rated_speed(&self) -> f64 {
        let rated = self.rated_power();
        self.knots.iter().find(|k| k[1] >= rated).map(|k| k[0]).unwrap_or(0.0)
    }

    /// Largest wind speed with zero production.
    pub fn cut_in(&self) -> f64 {
        self.knots.iter().take_while(|k| k[1] == 0.0).last().map(|k| k[0]).unwrap_or(0.0)
    }

    pub fn p_max(&self, ws: f64) -> Result<f64> {
        if ws.is_nan() || ws < 0.0 {
            return Err(Error::Domain(format!("wind speed must be >= 0, got {ws}")));
        }
        let k = &self.knots;
        if ws <= k[0][0] {
            return Ok(k[0][1]);
        }
        // first knot strictly above ws
        let idx = k.partition_point(|kn| kn[0] <= ws);
        if idx >= k.len() {
            return Ok(self.rated_power());
        }
        let [x0, y0] = k[idx - 1];
        let [x1, y1] = k[idx];
        Ok(y0 + (y1 - y0) * (ws - x0) / (x1 - x0))
    }
}

/// Everything the counterfactual builder needs besides the models, stored
/// as one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetConfig {
    pub features: Vec<FeatureId>,
    pub controllable: Vec<FeatureId>,
    pub fixed: Vec<FeatureId>,
    pub bounds: FeatureBounds,
    pub scales: NormalizationScales,
    pub power_curve: PowerCurve,
}

impl AssetConfig {
    pub fn new(
        schema: FeatureSchema,
        bounds: FeatureBounds,
        scales: NormalizationScales,
        power_curve: PowerCurve,
    ) -> Result<Self> {
        let cfg = Self {
            features: schema.features,
            controllable: schema.controllable,
            fixed: schema.fixed,
            bounds,
            scales,
            power_curve,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Derives bounds and scales from a dataset with the default schema.
    pub fn from_dataset(data: &[FeatureVector], curve: PowerCurve) -> Result<Self> {
        let schema = FeatureSchema::default();
        let bounds = compute_bounds(data)?;
        let scales = compute_scales(data)?;
        Self::new(schema, bounds, scales, curve)
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            features: self.features.clone(),
            controllable: self.controllable.clone(),
            fixed: self.fixed.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema().validate()?;
        self.bounds.validate()?;
        self.scales.validate()?;
        self.power_curve.validate()?;
        for f in &self.controllable {
            if self.bounds.get(*f).is_none() {
                return Err(Error::InvalidConfig(format!("missing bounds for {f}")));
            }
            if self.scales.get(*f).is_none() {
                return Err(Error::InvalidConfig(format!("missing scale for {f}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

const CONTROLLABLE: [FeatureId; 3] = [FeatureId::P, FeatureId::TN, FeatureId::TT];

/// Per-feature min/max over the dataset for every controllable feature.
pub fn compute_bounds(data: &[FeatureVector]) -> Result<FeatureBounds> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut bounds = FeatureBounds::default();
    for f in CONTROLLABLE {
        let (lo, hi) = data
            .iter()
            .filter_map(|x| x.get(f))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        bounds.set(f, lo, hi);
    }
    Ok(bounds)
}

/// Arithmetic mean of every controllable feature.
pub fn compute_scales(data: &[FeatureVector]) -> Result<NormalizationScales> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut scales = NormalizationScales::default();
    for f in CONTROLLABLE {
        let sum: f64 = data.iter().filter_map(|x| x.get(f)).sum();
        let mean = sum / data.len() as f64;
        if !(mean > 0.0) {
            return Err(Error::NonPositiveMean { feature: f.to_string(), mean });
        }
        scales.0.insert(f, mean);
    }
    Ok(scales)
}
