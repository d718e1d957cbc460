//! Brute-force verifiers for the test suites.
//!
//! These trade speed for simplicity: exhaustive enumeration of integer
//! assignments for small MIQPs, and exhaustive grid search for counterfactual
//! instances evaluated directly through the models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::counterfactual::{CounterfactualConfig, Mode, Models};
use crate::error::{Error, Result};
use crate::problem::{LinExpr, MiqpProblem, Sense, VarType};
use crate::schema::{AssetConfig, FeatureId, FeatureVector};
use crate::solver::{solve_relaxation, RelaxStatus};

/// Largest number of binaries `enumerate_miqp` accepts.
pub const MAX_ENUM_BINARIES: usize = 20;

/// Largest grid `brute_force_counterfactual` accepts.
pub const MAX_GRID_POINTS: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub status: OracleStatus,
    pub x: Option<Vec<f64>>,
    pub objective: f64,
}

/// Global optimum by enumerating every integer assignment. Each partial
/// assignment solves the continuous relaxation of the rest; a branch is
/// skipped only when that relaxation is infeasible or cannot beat the best
/// complete assignment found so far.
pub fn enumerate_miqp(p: &MiqpProblem) -> Result<OracleResult> {
    p.validate()?;
    let binaries = p.count(VarType::Binary);
    if binaries > MAX_ENUM_BINARIES {
        return Err(Error::TooLarge { points: 1u128 << binaries.min(127), limit: 1u128 << MAX_ENUM_BINARIES });
    }
    let mut order: Vec<usize> = (0..p.num_vars()).filter(|&j| p.vars[j].vtype == VarType::Binary).collect();
    order.extend((0..p.num_vars()).filter(|&j| p.vars[j].vtype == VarType::Integer));

    let root = solve_relaxation(p)?;
    match root.status {
        RelaxStatus::Infeasible => return Ok(infeasible()),
        RelaxStatus::Unbounded => {
            return Ok(OracleResult { status: OracleStatus::Unbounded, x: None, objective: f64::NEG_INFINITY })
        }
        RelaxStatus::Failed => return Err(Error::InvalidProblem("relaxation failed".into())),
        RelaxStatus::Optimal => {}
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut work = p.clone();
    descend(&mut work, &order, 0, root.x.as_deref().unwrap_or(&[]), &mut best)?;
    Ok(match best {
        Some((objective, x)) => OracleResult { status: OracleStatus::Optimal, x: Some(x), objective },
        None => infeasible(),
    })
}

fn infeasible() -> OracleResult {
    OracleResult { status: OracleStatus::Infeasible, x: None, objective: f64::INFINITY }
}

fn descend(
    p: &mut MiqpProblem,
    order: &[usize],
    depth: usize,
    hint: &[f64],
    best: &mut Option<(f64, Vec<f64>)>,
) -> Result<()> {
    let Some(&j) = order.get(depth) else {
        // Every integer fixed: the relaxation is the exact subproblem.
        let r = solve_relaxation(p)?;
        if r.status == RelaxStatus::Optimal {
            let mut x = r.x.expect("optimal relaxation has a point");
            for &k in order {
                x[k] = x[k].round();
            }
            if p.max_violation(&x) <= 1e-6 {
                let obj = p.objective(&x);
                if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                    *best = Some((obj, x));
                }
            }
        }
        return Ok(());
    };
    let (lo, hi) = (p.vars[j].lb.ceil() as i64, p.vars[j].ub.floor() as i64);
    let mut values: Vec<i64> = (lo..=hi).collect();
    // Nearest to the relaxed value first so good points come early.
    let target = hint.get(j).copied().unwrap_or(0.0);
    values.sort_by(|a, b| (*a as f64 - target).abs().total_cmp(&(*b as f64 - target).abs()).then(a.cmp(b)));
    let (saved_lb, saved_ub) = (p.vars[j].lb, p.vars[j].ub);
    for v in values {
        p.vars[j].lb = v as f64;
        p.vars[j].ub = v as f64;
        let r = solve_relaxation(p)?;
        let prune = match r.status {
            RelaxStatus::Optimal => match best {
                Some((b, _)) => r.objective > *b + 1e-9 * b.abs().max(1.0),
                None => false,
            },
            RelaxStatus::Infeasible => true,
            RelaxStatus::Unbounded | RelaxStatus::Failed => {
                p.vars[j].lb = saved_lb;
                p.vars[j].ub = saved_ub;
                return Err(Error::InvalidProblem("relaxation failed during enumeration".into()));
            }
        };
        if !prune {
            let hint = r.x.unwrap_or_default();
            descend(p, order, depth + 1, &hint, best)?;
        }
    }
    p.vars[j].lb = saved_lb;
    p.vars[j].ub = saved_ub;
    Ok(())
}

/// Seeded random convex MIQP: up to `max_binaries` binaries, up to two
/// integers with range at most 50, one to four continuous variables, a mix
/// of quadratic and linear costs, indicator-style link rows and random rows
/// built around a random point. About one in ten instances is made
/// integer-infeasible by a parity row.
pub fn random_miqp(seed: u64, max_binaries: usize) -> MiqpProblem {
    random_miqp_sized(seed, max_binaries, 6)
}

/// As [`random_miqp`] with up to `max_rows` random rows.
pub fn random_miqp_sized(seed: u64, max_binaries: usize, max_rows: usize) -> MiqpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MiqpProblem::new();
    let nb = rng.random_range(0..=max_binaries);
    let ni = rng.random_range(0..=2usize);
    let nc = rng.random_range(1..=4usize);
    let mut point = Vec::new();
    for i in 0..nb {
        p.add_binary(format!("b{i}"));
        point.push(rng.random_range(0..=1) as f64);
    }
    for i in 0..ni {
        let lo = rng.random_range(-10..=10) as f64;
        let range = rng.random_range(1..=50) as f64;
        p.add_var(format!("k{i}"), lo, lo + range, VarType::Integer);
        point.push((lo + rng.random_range(0.0..=range)).round());
    }
    for i in 0..nc {
        p.add_continuous(format!("c{i}"), -10.0, 10.0);
        point.push(rng.random_range(-10.0..10.0));
    }
    let n = p.num_vars();
    let linear_only = rng.random_bool(0.2);
    for j in 0..n {
        if !linear_only && rng.random_bool(0.6) {
            let center = rng.random_range(-12.0..12.0);
            p.add_square_distance(j, rng.random_range(0.1..2.0), center);
        } else {
            p.add_objective_term(j, rng.random_range(-3.0..3.0));
        }
    }
    // Indicator links: continuous value only nonzero when the binary is on.
    for b in 0..nb.min(nc) {
        if rng.random_bool(0.5) {
            let c = nb + ni + b;
            let mut e = LinExpr::var(c);
            e.add_term(b, -10.0);
            p.add_constraint(format!("link{b}"), e, Sense::Le, 0.0);
            point[c] = point[c].min(10.0 * point[b]);
        }
    }
    let rows = rng.random_range(1..=max_rows.max(1));
    for r in 0..rows {
        let mut e = LinExpr::default();
        for j in 0..n {
            if rng.random_bool(0.5) {
                e.add_term(j, (rng.random_range(-10..=10) as f64) * 0.5);
            }
        }
        if e.terms.is_empty() {
            e.add_term(rng.random_range(0..n), 1.0);
        }
        let act = e.eval(&point);
        let slack = rng.random_range(0.0..3.0);
        let has_continuous = e.terms.iter().any(|&(j, _)| j >= nb + ni);
        match rng.random_range(0..5) {
            0 if has_continuous => p.add_constraint(format!("r{r}"), e, Sense::Eq, act),
            0..=2 => p.add_constraint(format!("r{r}"), e, Sense::Le, act + slack),
            _ => p.add_constraint(format!("r{r}"), e, Sense::Ge, act - slack),
        }
    }
    if nb >= 2 && rng.random_bool(0.1) {
        let mut e = LinExpr::default();
        e.add_term(0, 2.0).add_term(1, 2.0);
        p.add_constraint("parity", e, Sense::Eq, 1.0);
    }
    p
}

/// Inclusive integer ranges searched by [`brute_force_counterfactual`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBox {
    pub p: (i64, i64),
    pub tn: (i64, i64),
    pub tt: (i64, i64),
    pub step: i64,
}

impl GridBox {
    /// Box of half-width `radius` around `x` with unit step.
    pub fn around(x: &FeatureVector, radius: i64) -> Self {
        let c = |v: f64| (v.round() as i64 - radius, v.round() as i64 + radius);
        Self { p: c(x.p), tn: c(x.tn), tt: c(x.tt), step: 1 }
    }

    pub fn contains(&self, x: &FeatureVector) -> bool {
        let inside = |v: f64, (lo, hi): (i64, i64)| v >= lo as f64 && v <= hi as f64;
        inside(x.p, self.p) && inside(x.tn, self.tn) && inside(x.tt, self.tt)
    }

    fn points(&self) -> u128 {
        let n = |(lo, hi): (i64, i64)| if hi < lo { 0 } else { ((hi - lo) / self.step + 1) as u128 };
        n(self.p) * n(self.tn) * n(self.tt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOptimum {
    pub objective: f64,
    pub x: FeatureVector,
}

/// Best counterfactual on an integer grid, checking every condition by
/// evaluating the models directly. Operator and manufacturer modes only.
pub fn brute_force_counterfactual(
    mode: Mode,
    x_star: &FeatureVector,
    models: &Models,
    assets: &AssetConfig,
    cfg: &CounterfactualConfig,
    grid: &GridBox,
) -> Result<Option<GridOptimum>> {
    if mode == Mode::Revenue {
        return Err(Error::InvalidConfig("grid search covers operator and manufacturer modes".into()));
    }
    if grid.step < 1 {
        return Err(Error::InvalidConfig("grid step must be positive".into()));
    }
    let points = grid.points();
    if points > MAX_GRID_POINTS {
        return Err(Error::TooLarge { points, limit: MAX_GRID_POINTS });
    }
    let curve = &assets.power_curve;
    let p_max = curve.p_max(x_star.ws)?;
    let beta = if mode == Mode::Manufacturer { cfg.limits.beta } else { 0.0 };
    let tau = cfg.tau_eq;
    let margin = models.classifier.threshold - cfg.epsilon(&models.classifier);
    let bound = |f: FeatureId| assets.bounds.get(f).unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let ((tn_lo, tn_hi), (tt_lo, tt_hi)) = (bound(FeatureId::TN), bound(FeatureId::TT));
    let scale = |f: FeatureId| assets.scales.get(f).unwrap_or(1.0);
    let (sp, sn, st) = (scale(FeatureId::P), scale(FeatureId::TN), scale(FeatureId::TT));
    let in_band = |v: f64, o: f64| {
        let (a, b) = ((1.0 - beta) * o, (1.0 + beta) * o);
        v >= a.min(b) - tau - 1e-9 && v <= a.max(b) + tau + 1e-9
    };

    let mut best: Option<GridOptimum> = None;
    let mut x = x_star.clone();
    x.label = None;
    let range = |(lo, hi): (i64, i64)| (lo..=hi).step_by(grid.step as usize);
    for p in range(grid.p) {
        let p = p as f64;
        if p < 0.0 || p > p_max {
            continue;
        }
        let dp = ((p - x_star.p) / sp).powi(2);
        for tt in range(grid.tt) {
            let tt = tt as f64;
            if tt < tt_lo || tt > tt_hi || (tt - x_star.tt).abs() > cfg.limits.m_dt {
                continue;
            }
            let partial = dp + ((tt - x_star.tt) / st).powi(2);
            if best.as_ref().is_some_and(|b| partial > b.objective) {
                continue;
            }
            for tn in range(grid.tn) {
                let tn = tn as f64;
                if tn < tn_lo || tn > tn_hi {
                    continue;
                }
                let obj = partial + ((tn - x_star.tn) / sn).powi(2);
                if best.as_ref().is_some_and(|b| obj >= b.objective) {
                    continue;
                }
                x.p = p;
                x.tn = tn;
                x.tt = tt;
                if !in_band(tn, models.n.predict_sample(&x, curve)?)
                    || !in_band(tt, models.t.predict_sample(&x, curve)?)
                {
                    continue;
                }
                if models.classifier.score_sample(&x, curve)? > margin {
                    continue;
                }
                best = Some(GridOptimum { objective: obj, x: x.clone() });
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_binaries_equals_relaxation() {
        let mut p = MiqpProblem::new();
        let x = p.add_continuous("x", -4.0, 4.0);
        let y = p.add_continuous("y", -4.0, 4.0);
        p.add_square_distance(x, 1.0, 3.0);
        p.add_square_distance(y, 2.0, -1.0);
        let mut e = LinExpr::var(x);
        e.add_term(y, 1.0);
        p.add_constraint("s", e, Sense::Le, 1.0);
        let o = enumerate_miqp(&p).unwrap();
        let r = solve_relaxation(&p).unwrap();
        assert_eq!(o.status, OracleStatus::Optimal);
        assert!((o.objective - r.objective).abs() < 1e-9);
    }

    #[test]
    fn toggled_constraint_takes_the_better_branch() {
        // x >= 5 only when b = 0; b costs 3. min (x-6)^2 + 3b over x in [0, 10]
        // with x <= 2 + 10 (1 - b)... b = 0: x <= 12 -> x = 6, cost 0.
        let mut p = MiqpProblem::new();
        let x = p.add_continuous("x", 0.0, 10.0);
        let b = p.add_binary("b");
        p.add_square_distance(x, 1.0, 6.0);
        p.add_objective_term(b, 3.0);
        let mut e = LinExpr::var(x);
        e.add_term(b, 8.0);
        p.add_constraint("cap", e, Sense::Le, 10.0);
        let o = enumerate_miqp(&p).unwrap();
        // b = 0: x <= 10, x = 6, cost 0; b = 1: x <= 2, cost 16 + 3
        assert!((o.objective - 0.0).abs() < 1e-9);
        assert_eq!(o.x.unwrap()[b], 0.0);
    }

    #[test]
    fn too_many_binaries_is_an_error() {
        let mut p = MiqpProblem::new();
        for i in 0..21 {
            p.add_binary(format!("b{i}"));
        }
        assert!(matches!(enumerate_miqp(&p), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn random_instances_are_valid() {
        for seed in 0..50 {
            let p = random_miqp(seed, 12);
            p.validate().unwrap();
            assert!(p.count(VarType::Binary) <= 12 && p.count(VarType::Integer) <= 2);
        }
    }

    #[test]
    fn grid_search_finds_the_hand_computed_optimum() {
        use crate::predictors::{Activation, DenseLayer, MlpClassifier, RegressionTree, TreeEnsembleRegressor};
        use crate::schema::{FeatureBounds, FeatureSchema, NormalizationScales, PowerCurve};
        // Flagged when TT > 60; TT follows P: 50 below 100, 70 above.
        // TN is constant 20.
        let classifier = MlpClassifier {
            inputs: vec![FeatureId::TT, FeatureId::PMax],
            layers: vec![
                DenseLayer { w: vec![vec![1.0, 0.0]], b: vec![-60.0], act: Activation::Relu },
                DenseLayer { w: vec![vec![1.0]], b: vec![-0.5], act: Activation::Identity },
            ],
            threshold: 0.0,
            epsilon: 0.0,
        };
        let n = TreeEnsembleRegressor { inputs: vec![FeatureId::P], base: 20.0, trees: vec![] };
        let t = TreeEnsembleRegressor {
            inputs: vec![FeatureId::P],
            base: 0.0,
            trees: vec![RegressionTree {
                nodes: vec![
                    crate::predictors::TreeNode::Split { feature: 0, threshold: 100.5, left: 1, right: 2 },
                    crate::predictors::TreeNode::Leaf { value: 50.0 },
                    crate::predictors::TreeNode::Leaf { value: 70.0 },
                ],
            }],
        };
        let models = Models { classifier, n, t };
        let mut b = FeatureBounds::default();
        b.set(FeatureId::P, 0.0, 5000.0);
        b.set(FeatureId::TN, 0.0, 100.0);
        b.set(FeatureId::TT, 0.0, 100.0);
        let mut sc = NormalizationScales::default();
        for f in [FeatureId::P, FeatureId::TN, FeatureId::TT] {
            sc.0.insert(f, 10.0);
        }
        let assets = AssetConfig::new(FeatureSchema::default(), b, sc, PowerCurve::default()).unwrap();
        let x_star = FeatureVector {
            timestamp: crate::schema::parse_timestamp("2024-01-01T00:00:00").unwrap(),
            p: 110.0,
            tn: 20.0,
            tt: 70.0,
            ta: 5.0,
            ws: 12.0,
            label: None,
        };
        let cfg = CounterfactualConfig::default();
        let grid = GridBox::around(&x_star, 25);
        let best = brute_force_counterfactual(Mode::Operator, &x_star, &models, &assets, &cfg, &grid).unwrap().unwrap();
        // P drops to 100 (TT 50 within 0.5); TT must then be 50.
        assert_eq!((best.x.p, best.x.tn, best.x.tt), (100.0, 20.0, 50.0));
        assert!((best.objective - (1.0 + 4.0)).abs() < 1e-12);
        // TT cannot reach 50 from 70 on this grid when the step is capped.
        let mut tight = cfg.clone();
        tight.limits.m_dt = 10.0;
        assert!(brute_force_counterfactual(Mode::Operator, &x_star, &models, &assets, &tight, &grid)
            .unwrap()
            .is_none());
        let huge = GridBox { p: (0, 1000), tn: (0, 1000), tt: (0, 1000), step: 1 };
        assert!(matches!(
            brute_force_counterfactual(Mode::Operator, &x_star, &models, &assets, &cfg, &huge),
            Err(Error::TooLarge { .. })
        ));
    }
}
