//! Branch-and-bound for convex MIQP/MILP.
//!
//! Root presolve rounds integer bounds, propagates row intervals and drops
//! fixed variables and redundant rows. Every node tightens its box by the
//! same propagation, solves the continuous relaxation warm-started from its
//! parent's basis and branches on the most fractional binary, then on the
//! integer with the largest fractional part. Nodes are taken best-bound
//! first, with depth-first plunging below the current node.

mod presolve;
mod relax;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use relax::RelaxStatus;
use relax::{Basis, Engine};

use crate::error::Result;
use crate::problem::{MiqpProblem, Sense, VarType};

/// Default time limit in seconds.
pub const DEFAULT_TIME_LIMIT: f64 = 900.0;
/// Default relative gap target.
pub const DEFAULT_GAP: f64 = 1e-4;

/// Memory for tableaus kept with open nodes; beyond it nodes refactor.
const TABLEAU_BUDGET: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeSelection {
    /// Best bound first, diving into a child of the node just solved.
    BestBoundPlunge,
    BestBound,
    DepthFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branching {
    /// Most fractional binary, then the integer with the largest
    /// fractional part; ties go to the lowest index.
    MostFractional,
    /// First fractional variable by index.
    FirstFractional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub time_limit: f64,
    pub gap: f64,
    pub int_tol: f64,
    pub feas_tol: f64,
    pub node_limit: Option<u64>,
    pub node_selection: NodeSelection,
    pub branching: Branching,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            time_limit: DEFAULT_TIME_LIMIT,
            gap: DEFAULT_GAP,
            int_tol: 1e-6,
            feas_tol: 1e-6,
            node_limit: None,
            node_selection: NodeSelection::BestBoundPlunge,
            branching: Branching::MostFractional,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.time_limit > 0.0 && self.gap > 0.0 && self.int_tol > 0.0 && self.feas_tol > 0.0;
        if ok && self.int_tol < 0.5 {
            Ok(())
        } else {
            Err(crate::Error::InvalidConfig("time limit and tolerances must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    FeasibleAtLimit,
    Infeasible,
    Unbounded,
    /// Time or node limit reached before any feasible point was found.
    LimitNoIncumbent,
}

impl SolveStatus {
    pub fn has_solution(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::FeasibleAtLimit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub x: Option<Vec<f64>>,
    pub objective: f64,
    pub bound: f64,
    pub gap: f64,
    pub nodes: u64,
    pub wall_time: f64,
    /// Set when some node relaxation failed numerically and was pruned.
    pub numerical_issues: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxResult {
    pub status: RelaxStatus,
    pub x: Option<Vec<f64>>,
    pub objective: f64,
}

/// Continuous relaxation of `p` with integrality dropped.
pub fn solve_relaxation(p: &MiqpProblem) -> Result<RelaxResult> {
    p.validate()?;
    let n = p.num_vars();
    let rows: Vec<Vec<(usize, f64)>> = p.constraints.iter().map(|c| c.terms.clone()).collect();
    let (lo, hi): (Vec<f64>, Vec<f64>) = p
        .constraints
        .iter()
        .map(|c| match c.sense {
            Sense::Le => (f64::NEG_INFINITY, c.rhs),
            Sense::Ge => (c.rhs, f64::INFINITY),
            Sense::Eq => (c.rhs, c.rhs),
        })
        .unzip();
    let lb: Vec<f64> = p.vars.iter().map(|v| v.lb).collect();
    let ub: Vec<f64> = p.vars.iter().map(|v| v.ub).collect();
    let mut e = Engine::new(n, &rows, &lo, &hi, &lb, &ub, &p.quad, &p.linear);
    let status = e.solve();
    let x = (status == RelaxStatus::Optimal).then(|| e.values().to_vec());
    let objective = match &x {
        Some(x) => p.objective(x),
        None if status == RelaxStatus::Unbounded => f64::NEG_INFINITY,
        None => f64::INFINITY,
    };
    Ok(RelaxResult { status, x, objective })
}

pub fn solve(p: &MiqpProblem, cfg: &SolveConfig) -> Result<SolveResult> {
    solve_with_start(p, cfg, None)
}

struct OpenNode {
    /// Heap priority, smallest first.
    key: f64,
    bound: f64,
    seq: u64,
    depth: u32,
    lb: Vec<f64>,
    ub: Vec<f64>,
    basis: Basis,
}

impl PartialEq for OpenNode {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for OpenNode {}
impl PartialOrd for OpenNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OpenNode {
    /// Max-heap order: smallest bound first, then oldest.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key.total_cmp(&self.key).then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Search<'a> {
    p: &'a MiqpProblem,
    r: presolve::Reduced,
    cfg: &'a SolveConfig,
    engine: Engine,
    /// Internal objective = scale * (reduced objective without constant).
    scale: f64,
    incumbent: Option<(f64, Vec<f64>)>,
    numerical: bool,
}

impl Search<'_> {
    fn to_user(&self, internal: f64) -> f64 {
        internal / self.scale + self.r.constant
    }

    fn cutoff(&self) -> f64 {
        match &self.incumbent {
            Some((obj, _)) => obj - self.cfg.gap * obj.abs().max(1.0),
            None => f64::INFINITY,
        }
    }

    fn load_bounds(&mut self, lb: &[f64], ub: &[f64]) {
        for j in 0..lb.len() {
            self.engine.set_bounds(j, lb[j], ub[j]);
        }
    }

    /// Solves the relaxation under the given box; returns the user-scale
    /// objective when optimal.
    fn relax(&mut self, lb: &[f64], ub: &[f64]) -> Option<f64> {
        self.load_bounds(lb, ub);
        let mut status = self.engine.solve();
        // A bounded box cannot have an unbounded relaxation; like a failure,
        // that is round-off and a cold start usually clears it.
        let bounded = lb.iter().chain(ub).all(|v| v.is_finite());
        if status == RelaxStatus::Failed || (status == RelaxStatus::Unbounded && bounded) {
            self.engine.reset();
            self.load_bounds(lb, ub);
            status = self.engine.solve();
        }
        match status {
            RelaxStatus::Optimal => Some(self.to_user(self.engine.objective())),
            RelaxStatus::Infeasible => None,
            RelaxStatus::Unbounded if !bounded => Some(f64::NEG_INFINITY),
            RelaxStatus::Unbounded | RelaxStatus::Failed => {
                log::warn!("node relaxation failed numerically; pruning node");
                self.numerical = true;
                None
            }
        }
    }

    /// Fixes every integer at the rounded value of `core` and optimizes the
    /// continuous rest; accepts the result if it improves the incumbent.
    fn polish(&mut self, core: &[f64], lb: &[f64], ub: &[f64]) -> bool {
        let mut plb = lb.to_vec();
        let mut pub_ = ub.to_vec();
        for j in 0..core.len() {
            if self.r.integral[j] {
                let v = core[j].round().clamp(lb[j], ub[j]);
                plb[j] = v;
                pub_[j] = v;
            }
        }
        if !presolve::propagate(&self.r.rows, &mut plb, &mut pub_, &self.r.integral, 5) {
            return false;
        }
        let Some(obj) = self.relax(&plb, &pub_) else {
            return false;
        };
        if !obj.is_finite() {
            return false;
        }
        let mut x_core = self.engine.values().to_vec();
        for j in 0..x_core.len() {
            if self.r.integral[j] {
                x_core[j] = plb[j];
            }
        }
        let x = self.r.expand(&x_core);
        let viol = self.p.max_violation(&x);
        if viol > self.cfg.feas_tol * 10.0 {
            log::warn!("rejecting candidate with violation {viol:e}");
            self.numerical = true;
            return false;
        }
        let obj = self.p.objective(&x);
        let better = self.incumbent.as_ref().is_none_or(|(best, _)| obj < *best - 1e-12 * best.abs().max(1.0));
        if better {
            log::debug!("new incumbent {obj:.9}");
            self.incumbent = Some((obj, x));
        }
        better
    }

    fn branch_var(&self, x: &[f64]) -> Option<usize> {
        let tol = self.cfg.int_tol;
        let frac = |j: usize| x[j] - x[j].floor();
        let fractional = |j: usize| self.r.integral[j] && (x[j] - x[j].round()).abs() > tol;
        let is_bin = |j: usize| {
            let orig = self.r.keep[j];
            self.p.vars[orig].vtype == VarType::Binary
        };
        if self.cfg.branching == Branching::FirstFractional {
            return (0..x.len()).find(|&j| fractional(j));
        }
        let mut best: Option<(usize, f64)> = None;
        for j in (0..x.len()).filter(|&j| fractional(j) && is_bin(j)) {
            let score = 0.5 - (frac(j) - 0.5).abs();
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        if best.is_none() {
            for j in (0..x.len()).filter(|&j| fractional(j) && !is_bin(j)) {
                let score = frac(j);
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((j, score));
                }
            }
        }
        best.map(|b| b.0)
    }
}

/// Branch-and-bound with an optional starting point; a start that is
/// feasible after rounding its integers becomes the first incumbent.
pub fn solve_with_start(p: &MiqpProblem, cfg: &SolveConfig, start: Option<&[f64]>) -> Result<SolveResult> {
    p.validate()?;
    cfg.validate()?;
    let t0 = Instant::now();
    let finish = |status, x: Option<Vec<f64>>, objective: f64, bound: f64, nodes, numerical| {
        let gap = if objective.is_finite() && bound.is_finite() {
            ((objective - bound) / objective.abs().max(1.0)).max(0.0)
        } else if status == SolveStatus::Infeasible {
            0.0
        } else {
            f64::INFINITY
        };
        SolveResult {
            status,
            x,
            objective,
            bound,
            gap,
            nodes,
            wall_time: t0.elapsed().as_secs_f64(),
            numerical_issues: numerical,
        }
    };

    let Some(r) = presolve::presolve(p, cfg.int_tol) else {
        return Ok(finish(SolveStatus::Infeasible, None, f64::INFINITY, f64::INFINITY, 0, false));
    };
    if r.keep.is_empty() {
        let x = r.expand(&[]);
        if p.max_violation(&x) <= cfg.feas_tol {
            let obj = p.objective(&x);
            return Ok(finish(SolveStatus::Optimal, Some(x), obj, obj, 1, false));
        }
        return Ok(finish(SolveStatus::Infeasible, None, f64::INFINITY, f64::INFINITY, 1, false));
    }

    let coef_max = r.quad.iter().chain(&r.lin).fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = if coef_max > 0.0 { 1.0 / coef_max } else { 1.0 };
    let rows: Vec<Vec<(usize, f64)>> = r.rows.iter().map(|row| row.terms.clone()).collect();
    let lo: Vec<f64> = r.rows.iter().map(|row| row.lo).collect();
    let hi: Vec<f64> = r.rows.iter().map(|row| row.hi).collect();
    let quad: Vec<f64> = r.quad.iter().map(|q| q * scale).collect();
    let lin: Vec<f64> = r.lin.iter().map(|g| g * scale).collect();
    let engine = Engine::new(r.keep.len(), &rows, &lo, &hi, &r.lb, &r.ub, &quad, &lin);
    let mut s = Search { p, r, cfg, engine, scale, incumbent: None, numerical: false };

    let root_lb = s.r.lb.clone();
    let root_ub = s.r.ub.clone();

    if let Some(x0) = start {
        if x0.len() == p.num_vars() {
            let core: Vec<f64> = s.r.keep.iter().map(|&j| x0[j]).collect();
            let inside = (0..core.len())
                .all(|j| !s.r.integral[j] || (core[j].round() >= root_lb[j] && core[j].round() <= root_ub[j]));
            if inside && s.polish(&core, &root_lb, &root_ub) {
                log::debug!("start point accepted");
            }
        }
    }

    let mut heap: BinaryHeap<OpenNode> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut nodes = 0u64;
    let mut limit_hit = false;
    // Current node: (bound, depth, lb, ub); `None` means pop from the heap.
    let mut current: Option<(f64, u32, Vec<f64>, Vec<f64>)> = Some((f64::NEG_INFINITY, 0, root_lb, root_ub));
    let mut root_unbounded = false;

    loop {
        let (parent_bound, depth, mut lb, mut ub) = match current.take() {
            Some(c) => c,
            None => {
                let Some(node) = heap.pop() else { break };
                if node.bound >= s.cutoff() {
                    if cfg.node_selection == NodeSelection::DepthFirst {
                        continue;
                    }
                    // Heap is ordered by bound: everything left is dominated.
                    heap.clear();
                    break;
                }
                s.engine.restore(&node.basis);
                (node.bound, node.depth, node.lb, node.ub)
            }
        };
        if t0.elapsed().as_secs_f64() > cfg.time_limit || cfg.node_limit.is_some_and(|l| nodes >= l) {
            // Put the node back so its bound counts.
            heap.push(OpenNode {
                key: parent_bound,
                bound: parent_bound,
                seq,
                depth,
                lb,
                ub,
                basis: s.engine.snapshot(),
            });
            limit_hit = true;
            break;
        }
        nodes += 1;
        if parent_bound >= s.cutoff() {
            continue;
        }
        if !presolve::propagate(&s.r.rows, &mut lb, &mut ub, &s.r.integral, 5) {
            continue;
        }
        let Some(bound) = s.relax(&lb, &ub) else { continue };
        if bound == f64::NEG_INFINITY {
            if nodes == 1 {
                root_unbounded = true;
                break;
            }
            continue;
        }
        if nodes.is_multiple_of(200) {
            log::debug!(
                "nodes {nodes} open {} depth {depth} bound {bound:.6} incumbent {:?}",
                heap.len(),
                s.incumbent.as_ref().map(|i| i.0)
            );
        }
        if bound >= s.cutoff() {
            continue;
        }
        let x = s.engine.values().to_vec();
        let Some(j) = s.branch_var(&x) else {
            s.polish(&x, &lb, &ub);
            continue;
        };
        let v = x[j];
        let mut down_ub = ub.clone();
        down_ub[j] = v.floor();
        let mut up_lb = lb.clone();
        up_lb[j] = v.ceil();
        let down = (lb.clone(), down_ub);
        let up = (up_lb, ub);
        let up_first = v - v.floor() > 0.5;
        let (first, second) = if up_first { (up, down) } else { (down, up) };
        let basis = if (heap.len() + 1) * s.engine.tableau_bytes() <= TABLEAU_BUDGET {
            s.engine.snapshot_with_tableau()
        } else {
            s.engine.snapshot()
        };
        match cfg.node_selection {
            NodeSelection::BestBound => {
                for child in [first, second] {
                    seq += 1;
                    heap.push(OpenNode {
                        key: bound,
                        bound,
                        seq,
                        depth: depth + 1,
                        lb: child.0,
                        ub: child.1,
                        basis: basis.clone(),
                    });
                }
            }
            NodeSelection::BestBoundPlunge | NodeSelection::DepthFirst => {
                seq += 1;
                let key = if cfg.node_selection == NodeSelection::DepthFirst { -(seq as f64) } else { bound };
                heap.push(OpenNode { key, bound, seq, depth: depth + 1, lb: second.0, ub: second.1, basis });
                current = Some((bound, depth + 1, first.0, first.1));
            }
        }
    }

    if root_unbounded {
        return Ok(finish(SolveStatus::Unbounded, None, f64::NEG_INFINITY, f64::NEG_INFINITY, nodes, s.numerical));
    }
    let open_bound = heap.iter().map(|n| n.bound).fold(f64::INFINITY, f64::min);
    let numerical = s.numerical;
    match s.incumbent {
        Some((obj, x)) => {
            let bound = open_bound.min(obj);
            let gap = ((obj - bound) / obj.abs().max(1.0)).max(0.0);
            let status = if limit_hit && gap > cfg.gap { SolveStatus::FeasibleAtLimit } else { SolveStatus::Optimal };
            Ok(finish(status, Some(x), obj, bound, nodes, numerical))
        }
        None if limit_hit => {
            Ok(finish(SolveStatus::LimitNoIncumbent, None, f64::INFINITY, open_bound, nodes, numerical))
        }
        None => Ok(finish(SolveStatus::Infeasible, None, f64::INFINITY, f64::INFINITY, nodes, numerical)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::LinExpr;

    fn exact() -> SolveConfig {
        SolveConfig { gap: 1e-9, ..SolveConfig::default() }
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = SolveConfig::default();
        assert_eq!(c.time_limit, 900.0);
        assert_eq!(c.gap, 1e-4);
    }

    #[test]
    fn pure_lp_lower_bound() {
        let mut p = MiqpProblem::new();
        let x = p.add_continuous("x", f64::NEG_INFINITY, f64::INFINITY);
        p.add_objective_term(x, 1.0);
        p.add_constraint("c", LinExpr::var(x), Sense::Ge, 3.0);
        let r = solve(&p, &exact()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.x.unwrap()[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn integer_rounding_of_separable_square() {
        let mut p = MiqpProblem::new();
        let x = p.add_var("x", 0.0, 10.0, VarType::Integer);
        p.add_square_distance(x, 1.0, 2.4);
        let r = solve(&p, &exact()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_eq!(r.x.unwrap()[0], 2.0);
        assert!((r.objective - 0.16).abs() < 1e-12);
    }

    #[test]
    fn relaxation_examples() {
        let mut p = MiqpProblem::new();
        let x = p.add_continuous("x", -5.0, 5.0);
        p.add_square_distance(x, 1.0, 1.7);
        let r = solve_relaxation(&p).unwrap();
        assert_eq!(r.status, RelaxStatus::Optimal);
        assert!((r.x.unwrap()[0] - 1.7).abs() < 1e-9);

        let mut p = MiqpProblem::new();
        let x = p.add_continuous("x", f64::NEG_INFINITY, f64::INFINITY);
        p.add_constraint("a", LinExpr::var(x), Sense::Ge, 1.0);
        p.add_constraint("b", LinExpr::var(x), Sense::Le, 0.0);
        assert_eq!(solve_relaxation(&p).unwrap().status, RelaxStatus::Infeasible);
        assert_eq!(solve(&p, &exact()).unwrap().status, SolveStatus::Infeasible);
    }

    #[test]
    fn knapsack_needs_branching() {
        // max 5a + 4b + 3c  s.t. 2a + 3b + c <= 5, 4a + b + 2c <= 11, 3a + 4b + 2c <= 8
        let mut p = MiqpProblem::new();
        let v: Vec<usize> = (0..3).map(|i| p.add_var(format!("x{i}"), 0.0, 3.0, VarType::Integer)).collect();
        for (j, c) in [5.0, 4.0, 3.0].into_iter().enumerate() {
            p.add_objective_term(v[j], -c);
        }
        for (coefs, rhs) in [([2.0, 3.0, 1.0], 5.0), ([4.0, 1.0, 2.0], 11.0), ([3.0, 4.0, 2.0], 8.0)] {
            let mut e = LinExpr::default();
            for j in 0..3 {
                e.add_term(v[j], coefs[j]);
            }
            p.add_constraint("r", e, Sense::Le, rhs);
        }
        let r = solve(&p, &exact()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        // Brute force over the 4^3 grid.
        let mut best = f64::INFINITY;
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    let x = [a as f64, b as f64, c as f64];
                    if p.max_violation(&x) == 0.0 {
                        best = best.min(p.objective(&x));
                    }
                }
            }
        }
        assert!((r.objective - best).abs() < 1e-9);
    }

    #[test]
    fn node_limit_reports_gap() {
        // Parity constraint forces a long search: sum of 2*b_i = 2k+1 infeasible,
        // so minimize distance instead.
        let mut p = MiqpProblem::new();
        let y = p.add_continuous("y", -100.0, 100.0);
        let mut e = LinExpr::var(y);
        for i in 0..30 {
            let b = p.add_binary(format!("b{i}"));
            e.add_term(b, -2.0 * (i as f64 + 1.0) * 1.37f64.floor());
        }
        p.add_constraint("def", e, Sense::Eq, -31.0);
        p.add_square_distance(y, 1.0, 0.0);
        let cfg = SolveConfig { node_limit: Some(5), ..exact() };
        let r = solve(&p, &cfg).unwrap();
        assert!(r.status.has_solution() || r.status == SolveStatus::LimitNoIncumbent);
        if r.status == SolveStatus::FeasibleAtLimit {
            assert!(r.gap > 0.0 && r.bound <= r.objective);
        }
    }
}
