//! Dense bounded-variable tableau engine for the continuous relaxation.
//!
//! Rows are written as `A x - s = 0` with one logical variable `s_i` per row
//! carrying the row bounds, so every constraint becomes a variable bound.
//! Phase 1 minimizes the sum of infeasibilities with a conservative ratio
//! test. Phase 2 is a reduced-gradient active-set method for a separable
//! convex quadratic objective: nonbasic variables sit at bounds, superbasic
//! ones move freely, and the step in the superbasic space is a Newton step
//! on the reduced Hessian or, when that is singular, a descent ray in its
//! null space. With a zero Hessian the method is primal simplex.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;
const OPT_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 64;
const DEGENERATE_BEFORE_BLAND: usize = 40;
/// Tableau entries below this are round-off and are dropped.
const DROP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelaxStatus {
    Optimal,
    Infeasible,
    Unbounded,
    /// Iteration cap or singular basis; the caller decides how to treat it.
    Failed,
}

/// Restartable basis: basic variable per row plus nonbasic values, and
/// optionally the tableau itself so restoring skips the factorization.
#[derive(Debug, Clone)]
pub struct Basis {
    head: Vec<usize>,
    values: Vec<f64>,
    superbasic: Vec<bool>,
    tableau: Option<Arc<(Vec<f64>, usize)>>,
}

#[derive(Debug, Clone)]
pub struct Engine {
    m: usize,
    n: usize,
    cols: usize,
    /// Structural coefficients, row-major `m x n`.
    a: Vec<f64>,
    /// `B^-1 [A | -I]`, row-major `m x (n + m)`.
    t: Vec<f64>,
    head: Vec<usize>,
    pos: Vec<Option<usize>>,
    superbasic: Vec<bool>,
    z: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    hess: Vec<f64>,
    cost: Vec<f64>,
    since_refactor: usize,
    pub iterations: usize,
}

enum Block {
    None,
    Own(f64),
    Basic { row: usize, value: f64 },
}

impl Engine {
    /// `rows[i]` lists `(column, coefficient)`; `row_lo..row_hi` bound the
    /// row activity. The objective is `sum quad_j x_j^2 + lin_j x_j`.
    pub fn new(
        n: usize,
        rows: &[Vec<(usize, f64)>],
        row_lo: &[f64],
        row_hi: &[f64],
        lb: &[f64],
        ub: &[f64],
        quad: &[f64],
        lin: &[f64],
    ) -> Self {
        let m = rows.len();
        let cols = n + m;
        let mut a = vec![0.0; m * n];
        for (i, r) in rows.iter().enumerate() {
            for &(j, c) in r {
                a[i * n + j] += c;
            }
        }
        let mut e = Engine {
            m,
            n,
            cols,
            a,
            t: Vec::new(),
            head: (n..cols).collect(),
            pos: vec![None; cols],
            superbasic: vec![false; cols],
            z: vec![0.0; cols],
            lb: lb.iter().chain(row_lo).copied().collect(),
            ub: ub.iter().chain(row_hi).copied().collect(),
            hess: quad.iter().map(|q| 2.0 * q).chain(std::iter::repeat_n(0.0, m)).collect(),
            cost: lin.iter().copied().chain(std::iter::repeat_n(0.0, m)).collect(),
            since_refactor: 0,
            iterations: 0,
        };
        e.slack_basis();
        for j in 0..n {
            e.place_nonbasic(j, 0.0);
        }
        e
    }

    pub fn values(&self) -> &[f64] {
        &self.z[..self.n]
    }

    /// Objective of the current point, without any constant term.
    pub fn objective(&self) -> f64 {
        (0..self.n).map(|j| 0.5 * self.hess[j] * self.z[j] * self.z[j] + self.cost[j] * self.z[j]).sum()
    }

    /// Changes the box of structural variable `j`, keeping the basis.
    pub fn set_bounds(&mut self, j: usize, lo: f64, hi: f64) {
        self.lb[j] = lo;
        self.ub[j] = hi;
        if self.pos[j].is_none() {
            let v = self.z[j];
            self.place_nonbasic(j, v);
        }
    }

    pub fn snapshot(&self) -> Basis {
        Basis { head: self.head.clone(), values: self.z.clone(), superbasic: self.superbasic.clone(), tableau: None }
    }

    pub fn snapshot_with_tableau(&self) -> Basis {
        Basis { tableau: Some(Arc::new((self.t.clone(), self.since_refactor))), ..self.snapshot() }
    }

    pub fn tableau_bytes(&self) -> usize {
        self.t.len() * std::mem::size_of::<f64>()
    }

    /// Restores a snapshot taken on an engine with the same rows. Bounds
    /// are not part of the snapshot and must be set before or after.
    pub fn restore(&mut self, b: &Basis) {
        self.head.clone_from(&b.head);
        self.superbasic.clone_from(&b.superbasic);
        self.z.clone_from(&b.values);
        self.pos = vec![None; self.cols];
        for (i, &h) in self.head.iter().enumerate() {
            self.pos[h] = Some(i);
        }
        match &b.tableau {
            Some(t) if t.0.len() == self.t.len() => {
                self.t.copy_from_slice(&t.0);
                self.since_refactor = t.1;
            }
            _ => {
                if !self.refactor() {
                    self.slack_basis();
                }
            }
        }
        for j in 0..self.cols {
            if self.pos[j].is_none() {
                let v = self.z[j];
                self.place_nonbasic(j, v);
            }
        }
    }

    /// Drops the current basis and starts over from the slack basis.
    pub fn reset(&mut self) {
        self.slack_basis();
        for j in 0..self.n {
            self.superbasic[j] = false;
            self.place_nonbasic(j, 0.0);
        }
    }

    fn slack_basis(&mut self) {
        let (m, n, cols) = (self.m, self.n, self.cols);
        self.t = vec![0.0; m * cols];
        for i in 0..m {
            for j in 0..n {
                self.t[i * cols + j] = -self.a[i * n + j];
            }
            self.t[i * cols + n + i] = 1.0;
        }
        self.head = (n..cols).collect();
        self.pos = vec![None; cols];
        for (i, &h) in self.head.iter().enumerate() {
            self.pos[h] = Some(i);
            self.superbasic[h] = false;
        }
        self.since_refactor = 0;
    }

    /// Recomputes the tableau from the current basic set. With `S` the
    /// basic structurals and `Q` the rows whose logical is nonbasic, only
    /// the square block `A_QS` needs a factorization; the rows of basic
    /// logicals follow as `A_RS Y_S - M_R`.
    fn refactor(&mut self) -> bool {
        let (m, n, cols) = (self.m, self.n, self.cols);
        if m == 0 {
            return true;
        }
        let structural: Vec<(usize, usize)> =
            self.head.iter().enumerate().filter(|(_, &h)| h < n).map(|(r, &h)| (r, h)).collect();
        let mut logical_basic = vec![false; m];
        for &h in &self.head {
            if h >= n {
                logical_basic[h - n] = true;
            }
        }
        let q_rows: Vec<usize> = (0..m).filter(|&i| !logical_basic[i]).collect();
        let k = structural.len();
        if q_rows.len() != k {
            return false;
        }
        // Y_S, row-major k x cols.
        let mut ys = vec![0.0; k * cols];
        if k > 0 {
            let aqs = DMatrix::from_fn(k, k, |a, b| self.a[q_rows[a] * n + structural[b].1]);
            let mq = DMatrix::from_fn(k, cols, |a, j| {
                let i = q_rows[a];
                if j < n {
                    self.a[i * n + j]
                } else if j - n == i {
                    -1.0
                } else {
                    0.0
                }
            });
            let Some(sol) = aqs.lu().solve(&mq) else {
                return false;
            };
            for b in 0..k {
                for j in 0..cols {
                    let v = sol[(b, j)];
                    if !v.is_finite() {
                        return false;
                    }
                    ys[b * cols + j] = v;
                }
            }
        }
        for (b, &(r, _)) in structural.iter().enumerate() {
            self.t[r * cols..(r + 1) * cols].copy_from_slice(&ys[b * cols..(b + 1) * cols]);
        }
        for r in 0..m {
            let h = self.head[r];
            if h < n {
                continue;
            }
            let i = h - n;
            let row = &mut self.t[r * cols..(r + 1) * cols];
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j < n { -self.a[i * n + j] } else { 0.0 };
            }
            row[n + i] = 1.0;
            for (b, &(_, sj)) in structural.iter().enumerate() {
                let a = self.a[i * n + sj];
                if a != 0.0 {
                    for (v, y) in row.iter_mut().zip(&ys[b * cols..(b + 1) * cols]) {
                        *v += a * y;
                    }
                }
            }
        }
        for i in 0..m {
            for v in &mut self.t[i * cols..(i + 1) * cols] {
                if v.abs() < DROP_TOL {
                    *v = 0.0;
                }
            }
            // Clean the identity block.
            for (k, &h) in self.head.iter().enumerate() {
                self.t[i * cols + h] = if k == i { 1.0 } else { 0.0 };
            }
        }
        self.since_refactor = 0;
        true
    }

    fn place_nonbasic(&mut self, j: usize, v: f64) {
        let (lo, hi) = (self.lb[j], self.ub[j]);
        let mut v = v.clamp(lo.min(hi), hi.max(lo));
        if !v.is_finite() {
            v = 0.0f64.clamp(lo, hi);
        }
        if !lo.is_finite() && !hi.is_finite() {
            self.superbasic[j] = true;
        } else if self.superbasic[j] && v > lo && v < hi {
            // stays in the interior
        } else {
            // Snap to the nearer finite bound.
            let to_lo = if lo.is_finite() { (v - lo).abs() } else { f64::INFINITY };
            let to_hi = if hi.is_finite() { (hi - v).abs() } else { f64::INFINITY };
            v = if to_lo <= to_hi { lo } else { hi };
            self.superbasic[j] = false;
        }
        self.z[j] = v;
    }

    #[inline]
    fn tij(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.cols + j]
    }

    fn compute_basics(&mut self) {
        let cols = self.cols;
        let nb: Vec<(usize, f64)> =
            (0..cols).filter(|&j| self.pos[j].is_none() && self.z[j] != 0.0).map(|j| (j, self.z[j])).collect();
        for i in 0..self.m {
            let row = &self.t[i * cols..(i + 1) * cols];
            let s: f64 = nb.iter().map(|&(j, v)| row[j] * v).sum();
            self.z[self.head[i]] = -s;
        }
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let cols = self.cols;
        let piv = self.t[r * cols + q];
        let inv = 1.0 / piv;
        for v in &mut self.t[r * cols..(r + 1) * cols] {
            *v *= inv;
        }
        let (before, rest) = self.t.split_at_mut(r * cols);
        let (prow, after) = rest.split_at_mut(cols);
        let nz: Vec<(usize, f64)> = prow.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect();
        let mut eliminate = |row: &mut [f64]| {
            let f = row[q];
            if f != 0.0 {
                for &(j, p) in &nz {
                    let x = &mut row[j];
                    *x -= f * p;
                    if x.abs() < DROP_TOL {
                        *x = 0.0;
                    }
                }
                row[q] = 0.0;
            }
        };
        before.chunks_mut(cols).for_each(&mut eliminate);
        after.chunks_mut(cols).for_each(&mut eliminate);
        let leaving = self.head[r];
        self.pos[leaving] = None;
        self.head[r] = q;
        self.pos[q] = Some(r);
        self.superbasic[q] = false;
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_EVERY && !self.refactor() {
            log::warn!("refactorization failed; continuing with updated tableau");
            self.since_refactor = 0;
        }
    }

    fn ftol(b: f64) -> f64 {
        FEAS_TOL * (1.0 + b.abs())
    }

    fn basic_infeasibility(&self, i: usize) -> f64 {
        let h = self.head[i];
        let v = self.z[h];
        if v < self.lb[h] - Self::ftol(self.lb[h]) {
            -1.0
        } else if v > self.ub[h] + Self::ftol(self.ub[h]) {
            1.0
        } else {
            0.0
        }
    }

    fn can_move(&self, j: usize, dir: f64) -> bool {
        if dir > 0.0 {
            self.z[j] < self.ub[j]
        } else {
            self.z[j] > self.lb[j]
        }
    }

    pub fn solve(&mut self) -> RelaxStatus {
        let max_iter = 50 * (self.m + self.cols) + 2000;
        for _attempt in 0..4 {
            match self.phase1(max_iter) {
                Some(true) => {}
                Some(false) => return RelaxStatus::Infeasible,
                None => return RelaxStatus::Failed,
            }
            match self.phase2(max_iter) {
                Some(status) => return status,
                // Lost feasibility through round-off; refactor and repair.
                None => {
                    log::warn!("phase 2 lost feasibility; repairing");
                    if !self.refactor() {
                        self.slack_basis();
                    }
                }
            }
        }
        RelaxStatus::Failed
    }

    /// Returns `Some(true)` once feasible, `Some(false)` if infeasible.
    fn phase1(&mut self, max_iter: usize) -> Option<bool> {
        let cols = self.cols;
        let mut degenerate = 0usize;
        let mut d = vec![0.0; cols];
        for _ in 0..max_iter {
            self.iterations += 1;
            self.compute_basics();
            let c: Vec<f64> = (0..self.m).map(|i| self.basic_infeasibility(i)).collect();
            if c.iter().all(|&v| v == 0.0) {
                return Some(true);
            }
            d.iter_mut().for_each(|v| *v = 0.0);
            for (i, &ci) in c.iter().enumerate() {
                if ci != 0.0 {
                    let row = &self.t[i * cols..(i + 1) * cols];
                    for (dj, &tij) in d.iter_mut().zip(row) {
                        *dj -= ci * tij;
                    }
                }
            }
            let bland = degenerate > DEGENERATE_BEFORE_BLAND;
            let Some((q, dir)) = self.choose_entering(&d, bland) else {
                return Some(false);
            };

            let mut theta = match dir > 0.0 {
                true => self.ub[q] - self.z[q],
                false => self.z[q] - self.lb[q],
            };
            let mut block = if theta.is_finite() {
                Block::Own(if dir > 0.0 { self.ub[q] } else { self.lb[q] })
            } else {
                Block::None
            };
            let mut best_piv = 0.0;
            for i in 0..self.m {
                let delta = -self.tij(i, q) * dir;
                if delta.abs() <= PIVOT_TOL {
                    continue;
                }
                let h = self.head[i];
                let v = self.z[h];
                let target = match (c[i] as i32, delta > 0.0) {
                    (0, true) => self.ub[h],
                    (0, false) => self.lb[h],
                    (-1, true) => self.lb[h],
                    (1, false) => self.ub[h],
                    _ => continue,
                };
                if !target.is_finite() {
                    continue;
                }
                let ratio = ((target - v) / delta).max(0.0);
                let better = ratio < theta - 1e-12
                    || (ratio <= theta + 1e-12
                        && match &block {
                            Block::Basic { row, .. } if bland => h < self.head[*row],
                            Block::Basic { .. } => delta.abs() > best_piv,
                            _ => true,
                        });
                if better {
                    theta = ratio;
                    best_piv = delta.abs();
                    block = Block::Basic { row: i, value: target };
                }
            }
            if !theta.is_finite() {
                log::warn!("phase 1 found an unbounded infeasibility direction");
                return None;
            }
            degenerate = if theta <= 1e-12 { degenerate + 1 } else { 0 };
            self.apply_step(q, dir * theta, block);
        }
        log::warn!("phase 1 iteration limit");
        None
    }

    fn apply_step(&mut self, q: usize, step: f64, block: Block) {
        match block {
            Block::None => self.z[q] += step,
            Block::Own(v) => {
                self.z[q] = v;
                self.superbasic[q] = false;
            }
            Block::Basic { row, value } => {
                self.z[q] += step;
                let leaving = self.head[row];
                self.pivot(row, q);
                self.z[leaving] = value;
                self.superbasic[leaving] = false;
            }
        }
    }

    fn choose_entering(&self, d: &[f64], bland: bool) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        let mut best_val = 0.0;
        for j in 0..self.cols {
            if self.pos[j].is_some() || self.lb[j] == self.ub[j] {
                continue;
            }
            let dj = d[j];
            let dir = if dj < -OPT_TOL {
                1.0
            } else if dj > OPT_TOL {
                -1.0
            } else {
                continue;
            };
            if !self.can_move(j, dir) {
                continue;
            }
            if bland {
                return Some((j, dir));
            }
            if dj.abs() > best_val {
                best_val = dj.abs();
                best = Some((j, dir));
            }
        }
        best
    }

    fn reduced_gradient(&self, d: &mut [f64]) {
        let cols = self.cols;
        for j in 0..cols {
            d[j] = self.hess[j] * self.z[j] + self.cost[j];
        }
        for i in 0..self.m {
            let h = self.head[i];
            let gb = self.hess[h] * self.z[h] + self.cost[h];
            if gb != 0.0 {
                let row = &self.t[i * cols..(i + 1) * cols];
                for (dj, &tij) in d.iter_mut().zip(row) {
                    *dj -= gb * tij;
                }
            }
        }
    }

    /// `None` means feasibility was lost and phase 1 must run again.
    fn phase2(&mut self, max_iter: usize) -> Option<RelaxStatus> {
        let cols = self.cols;
        let mut d = vec![0.0; cols];
        let mut degenerate = 0usize;
        for _ in 0..max_iter {
            self.iterations += 1;
            self.compute_basics();
            for i in 0..self.m {
                let h = self.head[i];
                let slack = 1e3 * Self::ftol(self.lb[h].abs().max(self.ub[h].abs()).min(1e12));
                if self.z[h] < self.lb[h] - slack || self.z[h] > self.ub[h] + slack {
                    return None;
                }
            }
            self.reduced_gradient(&mut d);

            let sup: Vec<usize> = (0..cols).filter(|&j| self.pos[j].is_none() && self.superbasic[j]).collect();
            let stationary = sup.iter().all(|&j| d[j].abs() <= OPT_TOL);
            let bland = degenerate > DEGENERATE_BEFORE_BLAND;
            let sup = if stationary {
                let mut masked = d.clone();
                for &j in &sup {
                    masked[j] = 0.0;
                }
                match self.choose_entering(&masked, bland) {
                    None => return Some(RelaxStatus::Optimal),
                    Some((q, _)) => {
                        self.superbasic[q] = true;
                        let mut s = sup;
                        s.push(q);
                        s
                    }
                }
            } else {
                sup
            };

            let (mut p, mut alpha_max) = self.direction(&sup, &d);
            // Unit max-norm keeps the pivot tolerance below meaningful.
            let norm = p.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            if norm > 0.0 {
                p.iter_mut().for_each(|v| *v /= norm);
                alpha_max *= norm;
            }
            // Basic rates of change.
            let delta: Vec<f64> =
                (0..self.m).map(|i| -sup.iter().zip(&p).map(|(&j, &pj)| self.tij(i, j) * pj).sum::<f64>()).collect();

            let mut alpha = alpha_max;
            let mut block_sup: Option<(usize, f64)> = None;
            let mut block_basic: Option<(usize, f64)> = None;
            for (k, &j) in sup.iter().enumerate() {
                let pj = p[k];
                if pj.abs() <= 1e-14 {
                    continue;
                }
                let target = if pj > 0.0 { self.ub[j] } else { self.lb[j] };
                if !target.is_finite() {
                    continue;
                }
                let ratio = ((target - self.z[j]) / pj).max(0.0);
                if ratio < alpha {
                    alpha = ratio;
                    block_sup = Some((j, target));
                }
            }
            let mut best_piv = 0.0;
            for i in 0..self.m {
                let di = delta[i];
                if di.abs() <= PIVOT_TOL {
                    continue;
                }
                let h = self.head[i];
                let target = if di > 0.0 { self.ub[h] } else { self.lb[h] };
                if !target.is_finite() {
                    continue;
                }
                let ratio = ((target - self.z[h]) / di).max(0.0);
                let better = ratio < alpha - 1e-14
                    || (ratio <= alpha + 1e-14
                        && block_basic.is_some()
                        && if bland { h < self.head[block_basic.unwrap().0] } else { di.abs() > best_piv });
                if better {
                    alpha = ratio;
                    best_piv = di.abs();
                    block_basic = Some((i, target));
                    block_sup = None;
                }
            }
            if !alpha.is_finite() {
                return Some(RelaxStatus::Unbounded);
            }
            degenerate = if alpha <= 1e-12 { degenerate + 1 } else { 0 };
            for (k, &j) in sup.iter().enumerate() {
                self.z[j] += alpha * p[k];
            }
            if let Some((row, value)) = block_basic {
                // Swap the blocking basic out for the best-conditioned superbasic.
                let (q, _) = sup.iter().map(|&j| (j, self.tij(row, j).abs())).fold((usize::MAX, 0.0), |acc, c| {
                    if c.1 > acc.1 {
                        c
                    } else {
                        acc
                    }
                });
                if q == usize::MAX || self.tij(row, q).abs() <= PIVOT_TOL {
                    log::warn!("no usable pivot for blocking basic variable");
                    return Some(RelaxStatus::Failed);
                }
                let leaving = self.head[row];
                self.pivot(row, q);
                self.z[leaving] = value;
                self.superbasic[leaving] = false;
            } else if let Some((j, value)) = block_sup {
                self.z[j] = value;
                self.superbasic[j] = false;
            }
        }
        log::warn!("phase 2 iteration limit");
        Some(RelaxStatus::Failed)
    }

    /// Search direction over the superbasic set and its maximal step.
    fn direction(&self, sup: &[usize], d: &[f64]) -> (Vec<f64>, f64) {
        let k = sup.len();
        let ds: Vec<f64> = sup.iter().map(|&j| d[j]).collect();
        let mut r = DMatrix::<f64>::zeros(k, k);
        for (a, &ja) in sup.iter().enumerate() {
            r[(a, a)] += self.hess[ja];
        }
        for i in 0..self.m {
            let hb = self.hess[self.head[i]];
            if hb == 0.0 {
                continue;
            }
            for (a, &ja) in sup.iter().enumerate() {
                let ta = self.tij(i, ja);
                if ta == 0.0 {
                    continue;
                }
                for (b, &jb) in sup.iter().enumerate() {
                    r[(a, b)] += hb * ta * self.tij(i, jb);
                }
            }
        }
        if k == 1 {
            let h = r[(0, 0)];
            let thr = 1e-11;
            return if h > thr { (vec![-ds[0] / h], 1.0) } else { (vec![-ds[0]], f64::INFINITY) };
        }
        let eig = SymmetricEigen::new(r);
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l));
        let thr = 1e-11 * lmax.max(1.0);
        let mut null = vec![0.0; k];
        let mut newton = vec![0.0; k];
        for (c, &lam) in eig.eigenvalues.iter().enumerate() {
            let v = eig.eigenvectors.column(c);
            let proj: f64 = (0..k).map(|a| v[a] * ds[a]).sum();
            for a in 0..k {
                if lam <= thr {
                    null[a] -= proj * v[a];
                } else {
                    newton[a] -= proj / lam * v[a];
                }
            }
        }
        let null_norm = null.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if null_norm > OPT_TOL {
            (null, f64::INFINITY)
        } else {
            (newton, 1.0)
        }
    }
}
