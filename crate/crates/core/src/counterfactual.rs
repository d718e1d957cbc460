//! Counterfactual problems for a flagged sample `x*`.
//!
//! The operator problem finds the closest controllable state (P, TN, TT)
//! under the normalized squared distance such that the classifier score is
//! at least `epsilon` below its threshold, the temperatures agree with the
//! controller surrogates, power stays under the power curve at the current
//! wind speed, and the transformer temperature moves by at most `m_dt`.
//! The manufacturer problem widens the surrogate agreement to a
//! multiplicative band; the revenue-driven problem maximizes power within
//! a budget around the operator solution.
//!
//! Controllable features are integral, as in the SCADA data, while the
//! surrogates predict real values. Agreement is therefore enforced up to
//! the rounding half-width `tau_eq`: `|x_TN - n(x)| <= tau_eq`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encode::{encode_mlp, encode_tree_ensemble, MlpEncoding, TreeEncoding};
use crate::error::{Error, Result};
use crate::predictors::{MlpClassifier, TreeEnsembleRegressor};
use crate::problem::{LinExpr, MiqpProblem, Sense, VarType};
use crate::schema::{AssetConfig, FeatureId, FeatureVector};
use crate::solver::{solve_with_start, SolveConfig, SolveStatus};

/// Half-width of the surrogate agreement band for integral temperatures.
pub const DEFAULT_TAU_EQ: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Operator,
    Manufacturer,
    Revenue,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "operator" => Ok(Mode::Operator),
            "manufacturer" => Ok(Mode::Manufacturer),
            "revenue" => Ok(Mode::Revenue),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Operator => "operator",
            Mode::Manufacturer => "manufacturer",
            Mode::Revenue => "revenue",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlLimits {
    /// Largest transformer temperature change in one step, degC.
    pub m_dt: f64,
    /// Manufacturer-mode band around the surrogate predictions.
    pub beta: f64,
}

impl Default for ControlLimits {
    fn default() -> Self {
        Self { m_dt: 30.0, beta: 0.10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevenueConfig {
    /// Energy price, EUR/MWh.
    pub price: f64,
    /// Allowed power increase over the operator solution, as a fraction.
    pub pi: f64,
}

impl Default for RevenueConfig {
    fn default() -> Self {
        Self { price: 100.0, pi: 0.10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CounterfactualConfig {
    /// Overrides the classifier's stored margin.
    pub epsilon: Option<f64>,
    pub limits: ControlLimits,
    pub revenue: RevenueConfig,
    pub tau_eq: f64,
    pub solver: SolveConfig,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            limits: ControlLimits::default(),
            revenue: RevenueConfig::default(),
            tau_eq: DEFAULT_TAU_EQ,
            solver: SolveConfig::default(),
        }
    }
}

impl CounterfactualConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.limits;
        if !(l.m_dt > 0.0) || !(0.0..1.0).contains(&l.beta) {
            return Err(Error::InvalidConfig("need m_dt > 0 and 0 <= beta < 1".into()));
        }
        if !(self.revenue.pi >= 0.0) || !self.revenue.price.is_finite() {
            return Err(Error::InvalidConfig("need pi >= 0 and a finite price".into()));
        }
        if !(self.tau_eq >= 0.0) || self.epsilon.is_some_and(|e| !(e >= 0.0)) {
            return Err(Error::InvalidConfig("need tau_eq >= 0 and epsilon >= 0".into()));
        }
        self.solver.validate()
    }

    pub fn epsilon(&self, clf: &MlpClassifier) -> f64 {
        self.epsilon.unwrap_or(clf.epsilon)
    }
}

/// Classifier plus the two controller surrogates: `n` predicts TN, `t`
/// predicts TT.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub classifier: MlpClassifier,
    pub n: TreeEnsembleRegressor,
    pub t: TreeEnsembleRegressor,
}

impl Models {
    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.n.validate()?;
        self.t.validate()?;
        if !self.classifier.inputs.contains(&FeatureId::PMax) {
            return Err(Error::InvalidModel("classifier inputs must include p_max".into()));
        }
        Ok(())
    }
}

/// An encoded problem and the variable of every feature.
#[derive(Debug, Clone)]
pub struct BuiltProblem {
    pub problem: MiqpProblem,
    pub vars: BTreeMap<FeatureId, usize>,
    pub p_max: f64,
    pub mlp: MlpEncoding,
    pub n: TreeEncoding,
    pub t: TreeEncoding,
}

impl BuiltProblem {
    /// Counterfactual sample from a solver point.
    pub fn sample(&self, x_star: &FeatureVector, x: &[f64]) -> FeatureVector {
        let mut out = x_star.clone();
        for f in [FeatureId::P, FeatureId::TN, FeatureId::TT] {
            // Adding zero turns a rounded -0.0 into 0.0.
            out.set(f, x[self.vars[&f]].round() + 0.0).expect("controllable features are assignable");
        }
        out.label = None;
        out
    }
}

const CONTROLLABLE: [FeatureId; 3] = [FeatureId::P, FeatureId::TN, FeatureId::TT];

fn band_rows(p: &mut MiqpProblem, x: usize, out: usize, beta: f64, tau: f64, tag: &str) -> Result<()> {
    let (lo, hi) = (p.vars[out].lb, p.vars[out].ub);
    // Band [(1-beta) o, (1+beta) o] for o >= 0, mirrored for o <= 0.
    let (up, down) = if lo >= 0.0 {
        (1.0 + beta, 1.0 - beta)
    } else if hi <= 0.0 {
        (1.0 - beta, 1.0 + beta)
    } else if beta == 0.0 {
        (1.0, 1.0)
    } else {
        return Err(Error::InvalidProblem(format!(
            "{tag}: surrogate range [{lo}, {hi}] changes sign; multiplicative band undefined"
        )));
    };
    let mut e = LinExpr::var(x);
    e.add_term(out, -up);
    p.add_constraint(format!("{tag}_band_hi"), e, Sense::Le, tau);
    let mut e = LinExpr::var(x);
    e.add_term(out, -down);
    p.add_constraint(format!("{tag}_band_lo"), e, Sense::Ge, -tau);
    Ok(())
}

fn build(
    x_star: &FeatureVector,
    models: &Models,
    assets: &AssetConfig,
    cfg: &CounterfactualConfig,
    beta: f64,
) -> Result<BuiltProblem> {
    models.validate()?;
    assets.validate()?;
    cfg.validate()?;
    x_star.validate()?;
    let curve = &assets.power_curve;
    let p_max = curve.p_max(x_star.ws)?;
    let mut p = MiqpProblem::new();
    let mut vars = BTreeMap::new();

    let mut features: Vec<FeatureId> = CONTROLLABLE.to_vec();
    for f in models.classifier.inputs.iter().chain(&models.n.inputs).chain(&models.t.inputs) {
        if !features.contains(f) {
            features.push(*f);
        }
    }
    for &f in &features {
        let v = match f {
            FeatureId::P => p.add_var("P", 0.0, (p_max + 1e-9).floor(), VarType::Integer),
            FeatureId::TN | FeatureId::TT => {
                let (lo, hi) =
                    assets.bounds.get(f).ok_or_else(|| Error::InvalidConfig(format!("missing bounds for {f}")))?;
                let (mut lo, mut hi) = ((lo - 1e-9).ceil(), (hi + 1e-9).floor());
                if lo > hi {
                    return Err(Error::InvalidConfig(format!("bounds for {f} contain no integer")));
                }
                if f == FeatureId::TT {
                    // The step limit also tightens the box, which prunes
                    // tree leaves and big-M constants; the rows below stay.
                    let near_lo = (x_star.tt - cfg.limits.m_dt - 1e-9).ceil();
                    let near_hi = (x_star.tt + cfg.limits.m_dt + 1e-9).floor();
                    if near_lo.max(lo) <= near_hi.min(hi) {
                        lo = lo.max(near_lo);
                        hi = hi.min(near_hi);
                    }
                }
                p.add_var(f.name(), lo, hi, VarType::Integer)
            }
            _ => {
                let value = x_star.resolve(f, curve)?;
                p.add_continuous(f.name(), value, value)
            }
        };
        vars.insert(f, v);
    }
    for f in CONTROLLABLE {
        let scale = assets.scales.get(f).ok_or_else(|| Error::InvalidConfig(format!("missing scale for {f}")))?;
        let center = x_star.get(f).expect("controllable features are stored");
        p.add_square_distance(vars[&f], 1.0 / (scale * scale), center);
    }

    let input_vars = |order: &[FeatureId]| order.iter().map(|f| vars[f]).collect::<Vec<_>>();
    let mlp = encode_mlp(&models.classifier, &input_vars(&models.classifier.inputs), &mut p, "f")?;
    let eps = cfg.epsilon(&models.classifier);
    p.add_constraint("margin", LinExpr::var(mlp.score), Sense::Le, models.classifier.threshold - eps);

    let n = encode_tree_ensemble(&models.n, &input_vars(&models.n.inputs), &mut p, "n")?;
    let t = encode_tree_ensemble(&models.t, &input_vars(&models.t.inputs), &mut p, "t")?;
    band_rows(&mut p, vars[&FeatureId::TN], n.output, beta, cfg.tau_eq, "tn")?;
    band_rows(&mut p, vars[&FeatureId::TT], t.output, beta, cfg.tau_eq, "tt")?;

    let tt = vars[&FeatureId::TT];
    p.add_constraint("dtt_up", LinExpr::var(tt), Sense::Le, x_star.tt + cfg.limits.m_dt);
    p.add_constraint("dtt_down", LinExpr::var(tt), Sense::Ge, x_star.tt - cfg.limits.m_dt);

    Ok(BuiltProblem { problem: p, vars, p_max, mlp, n, t })
}

/// Operator problem: surrogate agreement within `tau_eq`.
pub fn build_operator_problem(
    x_star: &FeatureVector,
    models: &Models,
    assets: &AssetConfig,
    cfg: &CounterfactualConfig,
) -> Result<BuiltProblem> {
    build(x_star, models, assets, cfg, 0.0)
}

/// Manufacturer problem: temperatures may deviate from the surrogate
/// predictions by the multiplicative band `beta` (plus `tau_eq`).
pub fn build_manufacturer_problem(
    x_star: &FeatureVector,
    models: &Models,
    assets: &AssetConfig,
    cfg: &CounterfactualConfig,
) -> Result<BuiltProblem> {
    build(x_star, models, assets, cfg, cfg.limits.beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub mode: Mode,
    pub status: SolveStatus,
    pub counterfactual: Option<FeatureVector>,
    /// Solver objective: normalized distance, or `-price * P` for the
    /// revenue-driven stage.
    pub objective: Option<f64>,
    pub deltas: BTreeMap<FeatureId, f64>,
    /// Classifier score of the counterfactual, evaluated directly.
    pub score: Option<f64>,
    pub gap: f64,
    pub nodes: u64,
    pub solve_time: f64,
    pub numerical_issues: bool,
    /// Operator solution a manufacturer or revenue-driven result started from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1: Option<Box<CounterfactualResult>>,
}

impl CounterfactualResult {
    pub fn power(&self) -> Option<f64> {
        self.counterfactual.as_ref().map(|x| x.p)
    }
}

fn finish(
    mode: Mode,
    built: &BuiltProblem,
    x_star: &FeatureVector,
    models: &Models,
    assets: &AssetConfig,
    r: crate::solver::SolveResult,
) -> Result<CounterfactualResult> {
    let (counterfactual, score, deltas) = match &r.x {
        Some(x) if r.status.has_solution() => {
            let cf = built.sample(x_star, x);
            let score = models.classifier.score_sample(&cf, &assets.power_curve)?;
            let deltas =
                CONTROLLABLE.iter().map(|&f| (f, cf.get(f).unwrap_or(0.0) - x_star.get(f).unwrap_or(0.0))).collect();
            (Some(cf), Some(score), deltas)
        }
        _ => (None, None, BTreeMap::new()),
    };
    Ok(CounterfactualResult {
        mode,
        status: r.status,
        counterfactual,
        objective: r.status.has_solution().then_some(r.objective),
        deltas,
        score,
        gap: r.gap,
        nodes: r.nodes,
        solve_time: r.wall_time,
        numerical_issues: r.numerical_issues,
        stage1: None,
    })
}

pub fn solve_operator(
    x_star: &FeatureVector,
    models: &Models,
    assets: &AssetConfig,
    cfg: &CounterfactualConfig,
) -> Result<CounterfactualResult> {
    let built = build_operator_problem(x_star, models, assets, cfg)?;
    let r = solve_with_start(&built.problem, &cfg.solver, None)?;
    finish(Mode::Operator, &built, x_star, models, assets, r)
}

/// Manufacturer mode. An operator solution, when given, seeds the search;
/// it is feasible here because the band contains the operator set.
pub fn solve_manufacturer(
    x_star: &FeatureVector,
    models: &Models,
    assets: &AssetConfig,
    cfg: &CounterfactualConfig,
    operator: Option<&CounterfactualResult>,
) -> Result<CounterfactualResult> {
    let built = build_manufacturer_problem(x_star, models, assets, cfg)?;
    let start = operator.and_then(|o| o.counterfactual.as_ref()).map(|cf| start_point(&built, cf, models, assets));
    let r = solve_with_start(&built.problem, &cfg.solver, start.as_deref())?;
    finish(Mode::Manufacturer, &built, x_star, models, assets, r)
}

/// Solver point for a known counterfactual: feature values, the leaf
/// each tree routes it to, and the ReLU phases of a forward pass. The
/// remaining continuous variables are recomputed by the solver.
fn start_point(built: &BuiltProblem, cf: &FeatureVector, models: &Models, assets: &AssetConfig) -> Vec<f64> {
    let p = &built.problem;
    let mut x: Vec<f64> = p.vars.iter().map(|v| v.lb).collect();
    for (&f, &v) in &built.vars {
        x[v] = cf.resolve(f, &assets.power_curve).unwrap_or(p.vars[v].lb);
    }
    for (enc, model) in [(&built.n, &models.n), (&built.t, &models.t)] {
        let input: Vec<f64> = model.inputs.iter().map(|f| x[built.vars[f]]).collect();
        for (leaves, tree) in enc.trees.iter().zip(&model.trees) {
            let hit = tree.leaf_node(&input);
            for leaf in leaves {
                if let Some(v) = leaf.var {
                    x[v] = if leaf.node == hit { 1.0 } else { 0.0 };
                }
            }
        }
    }
    let clf = &models.classifier;
    let mut a: Vec<f64> = clf.inputs.iter().map(|f| x[built.vars[f]]).collect();
    let mut zi = built.mlp.binaries.iter();
    let last = clf.layers.len() - 1;
    for (l, layer) in clf.layers[..last].iter().enumerate() {
        let pre: Vec<f64> =
            layer.w.iter().zip(&layer.b).map(|(r, b)| b + r.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>()).collect();
        for (k, &v) in pre.iter().enumerate() {
            let (lo, hi) = built.mlp.bounds.layers[l][k];
            if lo < 0.0 && hi > 0.0 {
                if let Some(&z) = zi.next() {
                    x[z] = if v > 0.0 { 1.0 } else { 0.0 };
                }
            }
        }
        a = pre.iter().map(|v| v.max(0.0)).collect();
    }
    x
}

/// Two-stage revenue-driven counterfactual: the operator problem first,
/// then maximum power within `(1 + pi)` of the operator power under the
/// same constraints.
pub fn solve_revenue_driven(
    x_star: &FeatureVector,
    models: &Models,
    assets: &AssetConfig,
    cfg: &CounterfactualConfig,
    stage1: Option<CounterfactualResult>,
) -> Result<CounterfactualResult> {
    let stage1 = match stage1 {
        Some(s) => s,
        None => solve_operator(x_star, models, assets, cfg)?,
    };
    let Some(tilde) = stage1.counterfactual.clone() else {
        let mut r = stage1.clone();
        r.mode = Mode::Revenue;
        r.stage1 = Some(Box::new(stage1));
        return Ok(r);
    };
    let mut built = build_operator_problem(x_star, models, assets, cfg)?;
    let p = &mut built.problem;
    p.quad.iter_mut().for_each(|q| *q = 0.0);
    p.linear.iter_mut().for_each(|g| *g = 0.0);
    p.constant = 0.0;
    let pv = built.vars[&FeatureId::P];
    p.linear[pv] = -cfg.revenue.price;
    let cap = ((1.0 + cfg.revenue.pi) * tilde.p + 1e-9).floor();
    p.add_constraint("budget", LinExpr::var(pv), Sense::Le, cap);
    let start = start_point(&built, &tilde, models, assets);
    let r = solve_with_start(&built.problem, &cfg.solver, Some(&start))?;
    let mut out = finish(Mode::Revenue, &built, x_star, models, assets, r)?;
    out.stage1 = Some(Box::new(stage1));
    Ok(out)
}

pub fn solve_mode(
    mode: Mode,
    x_star: &FeatureVector,
    models: &Models,
    assets: &AssetConfig,
    cfg: &CounterfactualConfig,
) -> Result<CounterfactualResult> {
    match mode {
        Mode::Operator => solve_operator(x_star, models, assets, cfg),
        Mode::Manufacturer => {
            let op = solve_operator(x_star, models, assets, cfg)?;
            let mut r = solve_manufacturer(x_star, models, assets, cfg, Some(&op))?;
            r.stage1 = Some(Box::new(op));
            Ok(r)
        }
        Mode::Revenue => solve_revenue_driven(x_star, models, assets, cfg, None),
    }
}

/// Re-checks a counterfactual by evaluating the models directly. Returns
/// one message per violated condition.
pub fn verify(
    mode: Mode,
    x_star: &FeatureVector,
    x: &FeatureVector,
    models: &Models,
    assets: &AssetConfig,
    cfg: &CounterfactualConfig,
    tol: f64,
) -> Result<Vec<String>> {
    let curve = &assets.power_curve;
    let mut bad = Vec::new();
    let score = models.classifier.score_sample(x, curve)?;
    let eps = cfg.epsilon(&models.classifier);
    if score > models.classifier.threshold - eps + tol {
        bad.push(format!("score {score} above threshold minus margin"));
    }
    let p_max = curve.p_max(x_star.ws)?;
    if x.p < -tol || x.p > p_max + tol {
        bad.push(format!("P {} outside [0, {p_max}]", x.p));
    }
    for f in [FeatureId::P, FeatureId::TN, FeatureId::TT] {
        let v = x.get(f).unwrap_or(f64::NAN);
        if (v - v.round()).abs() > tol {
            bad.push(format!("{f} = {v} is not integral"));
        }
    }
    for f in [FeatureId::TN, FeatureId::TT] {
        if let Some((lo, hi)) = assets.bounds.get(f) {
            let v = x.get(f).unwrap_or(f64::NAN);
            if v < lo - tol || v > hi + tol {
                bad.push(format!("{f} = {v} outside [{lo}, {hi}]"));
            }
        }
    }
    if x.ta != x_star.ta || x.ws != x_star.ws || x.timestamp != x_star.timestamp {
        bad.push("fixed features changed".into());
    }
    if (x.tt - x_star.tt).abs() > cfg.limits.m_dt + tol {
        bad.push(format!("TT moved by {} > {}", (x.tt - x_star.tt).abs(), cfg.limits.m_dt));
    }
    let beta = if mode == Mode::Manufacturer { cfg.limits.beta } else { 0.0 };
    for (f, model) in [(FeatureId::TN, &models.n), (FeatureId::TT, &models.t)] {
        let o = model.predict_sample(x, curve)?;
        let v = x.get(f).unwrap_or(f64::NAN);
        let (a, b) = ((1.0 - beta) * o, (1.0 + beta) * o);
        let (lo, hi) = (a.min(b) - cfg.tau_eq, a.max(b) + cfg.tau_eq);
        if v < lo - tol || v > hi + tol {
            bad.push(format!("{f} = {v} outside surrogate band [{lo}, {hi}]"));
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictors::{Activation, DenseLayer, RegressionTree, TreeNode};
    use crate::schema::{FeatureBounds, FeatureSchema, NormalizationScales, PowerCurve};

    pub(crate) fn toy_assets() -> AssetConfig {
        let mut b = FeatureBounds::default();
        b.set(FeatureId::P, 0.0, 5000.0);
        b.set(FeatureId::TN, 10.0, 50.0);
        b.set(FeatureId::TT, 20.0, 100.0);
        let mut s = NormalizationScales::default();
        s.0.insert(FeatureId::P, 2000.0);
        s.0.insert(FeatureId::TN, 30.0);
        s.0.insert(FeatureId::TT, 50.0);
        AssetConfig::new(FeatureSchema::default(), b, s, PowerCurve::default()).unwrap()
    }

    /// Score = relu(TT / 10 - 7) - 1/2: flagged above 75 degC, and with the
    /// margin good up to 74 degC. TT follows P in three steps (55, 70, 85),
    /// TN follows TT in two (30, 40).
    pub(crate) fn toy_models() -> Models {
        let classifier = MlpClassifier {
            inputs: vec![FeatureId::P, FeatureId::TN, FeatureId::TT, FeatureId::TA, FeatureId::WS, FeatureId::PMax],
            layers: vec![
                DenseLayer { w: vec![vec![0.0, 0.0, 0.1, 0.0, 0.0, 0.0]], b: vec![-7.0], act: Activation::Relu },
                DenseLayer { w: vec![vec![1.0]], b: vec![-0.5], act: Activation::Identity },
            ],
            threshold: 0.0,
            epsilon: 0.05,
        };
        // TN follows TT coarsely; TT follows P.
        let n = TreeEnsembleRegressor {
            inputs: vec![FeatureId::TA, FeatureId::P, FeatureId::TT, FeatureId::WS],
            base: 0.0,
            trees: vec![RegressionTree {
                nodes: vec![
                    TreeNode::Split { feature: 2, threshold: 60.5, left: 1, right: 2 },
                    TreeNode::Leaf { value: 30.0 },
                    TreeNode::Leaf { value: 40.0 },
                ],
            }],
        };
        let t = TreeEnsembleRegressor {
            inputs: vec![FeatureId::TA, FeatureId::P, FeatureId::TN, FeatureId::WS],
            base: 40.0,
            trees: vec![RegressionTree {
                nodes: vec![
                    TreeNode::Split { feature: 1, threshold: 2000.5, left: 1, right: 3 },
                    TreeNode::Leaf { value: 15.0 },
                    TreeNode::Leaf { value: 45.0 },
                    TreeNode::Split { feature: 1, threshold: 4000.5, left: 4, right: 2 },
                    TreeNode::Leaf { value: 30.0 },
                ],
            }],
        };
        Models { classifier, n, t }
    }

    fn sample(p: f64, tn: f64, tt: f64, ws: f64) -> FeatureVector {
        FeatureVector {
            timestamp: crate::schema::parse_timestamp("2024-05-01T12:00:00").unwrap(),
            p,
            tn,
            tt,
            ta: 15.0,
            ws,
            label: None,
        }
    }

    fn exact() -> CounterfactualConfig {
        CounterfactualConfig { solver: SolveConfig { gap: 1e-9, ..SolveConfig::default() }, ..Default::default() }
    }

    #[test]
    fn good_consistent_instance_is_its_own_counterfactual() {
        let (m, a) = (toy_models(), toy_assets());
        // P = 1200 -> t = 55, TT = 55 -> n = 30, score -1/2.
        let x = sample(1200.0, 30.0, 55.0, 8.0);
        let r = solve_operator(&x, &m, &a, &exact()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!(r.objective.unwrap().abs() < 1e-12, "{r:?}");
        assert_eq!(r.counterfactual.unwrap(), FeatureVector { label: None, ..x });
    }

    #[test]
    fn calm_wind_forces_shutdown() {
        let (m, a) = (toy_models(), toy_assets());
        let x = sample(0.0, 30.0, 55.0, 1.0);
        let built = build_operator_problem(&x, &m, &a, &exact()).unwrap();
        let pv = built.vars[&FeatureId::P];
        assert_eq!(built.problem.vars[pv].ub, 0.0);
        let r = solve_operator(&x, &m, &a, &exact()).unwrap();
        assert_eq!(r.counterfactual.unwrap().p, 0.0);
    }

    #[test]
    fn flagged_hot_instance_curtails_power() {
        let (m, a) = (toy_models(), toy_assets());
        // P = 4800 at 14 m/s -> t = 85 (hot), flagged.
        let x = sample(4800.0, 40.0, 85.0, 14.0);
        assert_eq!(m.classifier.classify_sample(&x, &a.power_curve).unwrap(), 1);
        let cfg = exact();
        let r = solve_operator(&x, &m, &a, &cfg).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        let cf = r.counterfactual.clone().unwrap();
        assert!(verify(Mode::Operator, &x, &cf, &m, &a, &cfg, 1e-6).unwrap().is_empty());
        // Cheapest fix: the 70 degC step at its top power.
        assert_eq!((cf.p, cf.tt, cf.tn), (4000.0, 70.0, 40.0));
        assert!((r.objective.unwrap() - (0.16 + 0.09)).abs() < 1e-9);

        let man = solve_manufacturer(&x, &m, &a, &cfg, Some(&r)).unwrap();
        assert!(man.objective.unwrap() <= r.objective.unwrap() + 1e-12);
        let mcf = man.counterfactual.unwrap();
        assert!(verify(Mode::Manufacturer, &x, &mcf, &m, &a, &cfg, 1e-6).unwrap().is_empty());
        // The band lets TT sit at 74 with the 70 degC step.
        assert_eq!((mcf.p, mcf.tt), (4000.0, 74.0));

        let rev = solve_revenue_driven(&x, &m, &a, &cfg, Some(r.clone())).unwrap();
        let rp = rev.counterfactual.unwrap().p;
        assert!(rp >= cf.p && rp <= (1.1 * cf.p).floor());
    }

    #[test]
    fn zero_beta_matches_operator() {
        let (m, a) = (toy_models(), toy_assets());
        let mut cfg = exact();
        cfg.limits.beta = 0.0;
        for (p, tt) in [(4800.0, 85.0), (3000.0, 70.0), (2500.0, 72.0)] {
            let x = sample(p, 40.0, tt, 14.0);
            let op = solve_operator(&x, &m, &a, &cfg).unwrap();
            let man = solve_manufacturer(&x, &m, &a, &cfg, None).unwrap();
            assert_eq!(op.status, man.status);
            if let (Some(o), Some(mm)) = (op.objective, man.objective) {
                assert!((o - mm).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn small_temperature_step_makes_it_infeasible() {
        let (m, a) = (toy_models(), toy_assets());
        let mut cfg = exact();
        cfg.limits.m_dt = 5.0;
        let x = sample(4800.0, 40.0, 85.0, 14.0);
        let r = solve_operator(&x, &m, &a, &cfg).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
        assert!(r.counterfactual.is_none());
    }

    #[test]
    fn classifier_without_p_max_is_rejected() {
        let (mut m, a) = (toy_models(), toy_assets());
        m.classifier.inputs.pop();
        for l in &mut m.classifier.layers[..1] {
            l.w[0].pop();
        }
        let x = sample(4800.0, 40.0, 85.0, 14.0);
        assert!(build_operator_problem(&x, &m, &a, &exact()).is_err());
    }
}
