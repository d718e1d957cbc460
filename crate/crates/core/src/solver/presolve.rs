//! Bound rounding, feasibility-based bound tightening, fixed-variable
//! removal and redundant-row elimination.

use crate::problem::{MiqpProblem, Sense};

#[derive(Debug, Clone)]
pub struct Row {
    pub terms: Vec<(usize, f64)>,
    pub lo: f64,
    pub hi: f64,
}

/// Reduced problem over the variables that remain free after presolve.
#[derive(Debug, Clone)]
pub struct Reduced {
    /// Original index of each kept variable.
    pub keep: Vec<usize>,
    /// Value of every original variable that was fixed.
    pub fixed: Vec<Option<f64>>,
    pub rows: Vec<Row>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub integral: Vec<bool>,
    pub quad: Vec<f64>,
    pub lin: Vec<f64>,
    pub constant: f64,
}

impl Reduced {
    pub fn expand(&self, core: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = self.fixed.iter().map(|v| v.unwrap_or(0.0)).collect();
        for (k, &j) in self.keep.iter().enumerate() {
            x[j] = core[k];
        }
        x
    }
}

fn row_bounds(sense: Sense, rhs: f64) -> (f64, f64) {
    match sense {
        Sense::Le => (f64::NEG_INFINITY, rhs),
        Sense::Ge => (rhs, f64::INFINITY),
        Sense::Eq => (rhs, rhs),
    }
}

pub fn round_integral(lb: &mut [f64], ub: &mut [f64], integral: &[bool], tol: f64) -> bool {
    for j in 0..lb.len() {
        if integral[j] {
            lb[j] = (lb[j] - tol).ceil();
            ub[j] = (ub[j] + tol).floor();
        }
        if lb[j] > ub[j] {
            return false;
        }
    }
    true
}

/// Interval propagation through the rows. Returns `false` when the box is
/// proven empty.
pub fn propagate(rows: &[Row], lb: &mut [f64], ub: &mut [f64], integral: &[bool], rounds: usize) -> bool {
    for _ in 0..rounds {
        let mut changed = false;
        for row in rows {
            // Activity range with the number of infinite contributions.
            let (mut min_act, mut max_act) = (0.0, 0.0);
            let (mut min_inf, mut max_inf) = (0usize, 0usize);
            for &(j, a) in &row.terms {
                let (lo_c, hi_c) = if a > 0.0 { (a * lb[j], a * ub[j]) } else { (a * ub[j], a * lb[j]) };
                if lo_c.is_finite() {
                    min_act += lo_c
                } else {
                    min_inf += 1
                }
                if hi_c.is_finite() {
                    max_act += hi_c
                } else {
                    max_inf += 1
                }
            }
            let scale = 1e-9 * (1.0 + row.lo.abs().min(row.hi.abs()).min(1e9));
            if min_inf == 0 && min_act > row.hi + scale.max(1e-7 * (1.0 + row.hi.abs())) {
                return false;
            }
            if max_inf == 0 && max_act < row.lo - scale.max(1e-7 * (1.0 + row.lo.abs())) {
                return false;
            }
            for &(j, a) in &row.terms {
                let (lo_c, hi_c) = if a > 0.0 { (a * lb[j], a * ub[j]) } else { (a * ub[j], a * lb[j]) };
                // Residual activity of the other terms.
                let rest_min = match (min_inf, lo_c.is_finite()) {
                    (0, _) => Some(min_act - lo_c),
                    (1, false) => Some(min_act),
                    _ => None,
                };
                let rest_max = match (max_inf, hi_c.is_finite()) {
                    (0, _) => Some(max_act - hi_c),
                    (1, false) => Some(max_act),
                    _ => None,
                };
                // a x_j <= hi - rest_min  and  a x_j >= lo - rest_max
                let upper_ax = rest_min.filter(|_| row.hi.is_finite()).map(|r| row.hi - r);
                let lower_ax = rest_max.filter(|_| row.lo.is_finite()).map(|r| row.lo - r);
                let (new_lo, new_hi) = if a > 0.0 {
                    (lower_ax.map(|v| v / a), upper_ax.map(|v| v / a))
                } else {
                    (upper_ax.map(|v| v / a), lower_ax.map(|v| v / a))
                };
                if let Some(mut v) = new_hi {
                    if integral[j] {
                        v = (v + 1e-6).floor();
                    }
                    if v < ub[j] - 1e-7 * (1.0 + v.abs()) {
                        ub[j] = v;
                        changed = true;
                    }
                }
                if let Some(mut v) = new_lo {
                    if integral[j] {
                        v = (v - 1e-6).ceil();
                    }
                    if v > lb[j] + 1e-7 * (1.0 + v.abs()) {
                        lb[j] = v;
                        changed = true;
                    }
                }
                if lb[j] > ub[j] {
                    if !integral[j] && lb[j] - ub[j] <= 1e-7 * (1.0 + ub[j].abs()) {
                        let mid = 0.5 * (lb[j] + ub[j]);
                        lb[j] = mid;
                        ub[j] = mid;
                    } else {
                        return false;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    true
}

/// Presolves the problem; `None` means infeasibility was proven.
pub fn presolve(p: &MiqpProblem, int_tol: f64) -> Option<Reduced> {
    let n = p.num_vars();
    let integral: Vec<bool> = p.vars.iter().map(|v| v.is_integral()).collect();
    let mut lb: Vec<f64> = p.vars.iter().map(|v| v.lb).collect();
    let mut ub: Vec<f64> = p.vars.iter().map(|v| v.ub).collect();
    if !round_integral(&mut lb, &mut ub, &integral, int_tol) {
        return None;
    }
    let rows: Vec<Row> = p
        .constraints
        .iter()
        .map(|c| {
            let (lo, hi) = row_bounds(c.sense, c.rhs);
            Row { terms: c.terms.clone(), lo, hi }
        })
        .collect();
    if !propagate(&rows, &mut lb, &mut ub, &integral, 50) {
        return None;
    }

    let fixed: Vec<Option<f64>> = (0..n).map(|j| (lb[j] == ub[j]).then_some(lb[j])).collect();
    let keep: Vec<usize> = (0..n).filter(|&j| fixed[j].is_none()).collect();
    let mut index = vec![usize::MAX; n];
    for (k, &j) in keep.iter().enumerate() {
        index[j] = k;
    }

    let mut reduced_rows = Vec::new();
    for row in &rows {
        let mut shift = 0.0;
        let mut terms = Vec::new();
        for &(j, a) in &row.terms {
            match fixed[j] {
                Some(v) => shift += a * v,
                None => terms.push((index[j], a)),
            }
        }
        let (lo, hi) = (row.lo - shift, row.hi - shift);
        let (mut amin, mut amax) = (0.0, 0.0);
        for &(k, a) in &terms {
            let j = keep[k];
            if a > 0.0 {
                amin += a * lb[j];
                amax += a * ub[j];
            } else {
                amin += a * ub[j];
                amax += a * lb[j];
            }
        }
        let tol = 1e-7 * (1.0 + lo.abs().min(hi.abs()).min(1e9));
        if amin > hi + tol || amax < lo - tol {
            return None;
        }
        // Redundant within the current box.
        if amin >= lo - 1e-12 && amax <= hi + 1e-12 {
            continue;
        }
        reduced_rows.push(Row { terms, lo, hi });
    }

    let mut constant = p.constant;
    for j in 0..n {
        if let Some(v) = fixed[j] {
            constant += p.quad[j] * v * v + p.linear[j] * v;
        }
    }
    Some(Reduced {
        lb: keep.iter().map(|&j| lb[j]).collect(),
        ub: keep.iter().map(|&j| ub[j]).collect(),
        integral: keep.iter().map(|&j| integral[j]).collect(),
        quad: keep.iter().map(|&j| p.quad[j]).collect(),
        lin: keep.iter().map(|&j| p.linear[j]).collect(),
        keep,
        fixed,
        rows: reduced_rows,
        constant,
    })
}
