//! Mixed-integer problem with a separable convex quadratic objective
//! `sum q_j x_j^2 + sum g_j x_j + constant` and linear constraints.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarType {
    Continuous,
    Integer,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub lb: f64,
    pub ub: f64,
    pub vtype: VarType,
}

impl Variable {
    pub fn is_integral(&self) -> bool {
        self.vtype != VarType::Continuous
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

/// Affine expression `sum coef * x_var + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(v: usize) -> Self {
        Self { terms: vec![(v, 1.0)], constant: 0.0 }
    }

    pub fn add_term(&mut self, v: usize, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.terms.push((v, coef));
        }
        self
    }

    pub fn add_scaled(&mut self, other: &LinExpr, factor: f64) -> &mut Self {
        if factor != 0.0 {
            for &(v, c) in &other.terms {
                self.terms.push((v, c * factor));
            }
            self.constant += other.constant * factor;
        }
        self
    }

    /// Merges duplicate variables and drops zero coefficients, keeping
    /// variables in ascending order.
    pub fn normalized(mut self) -> Self {
        self.terms.sort_by_key(|t| t.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for (v, c) in self.terms {
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => out.push((v, c)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        self.terms = out;
        self
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.1 == 0.0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>()
    }

    /// Interval of the expression over the variable box.
    pub fn bounds(&self, lb: &[f64], ub: &[f64]) -> (f64, f64) {
        let (mut lo, mut hi) = (self.constant, self.constant);
        for &(v, c) in &self.terms {
            if c > 0.0 {
                lo += c * lb[v];
                hi += c * ub[v];
            } else {
                lo += c * ub[v];
                hi += c * lb[v];
            }
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub name: String,
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

impl Constraint {
    pub fn activity(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * x[v]).sum()
    }

    /// Amount by which `x` violates the row (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let a = self.activity(x);
        match self.sense {
            Sense::Le => (a - self.rhs).max(0.0),
            Sense::Ge => (self.rhs - a).max(0.0),
            Sense::Eq => (a - self.rhs).abs(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiqpProblem {
    pub vars: Vec<Variable>,
    pub constraints: Vec<Constraint>,
    /// Coefficient of `x_j^2`, one per variable; must be nonnegative.
    pub quad: Vec<f64>,
    pub linear: Vec<f64>,
    pub constant: f64,
}

impl MiqpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lb: f64, ub: f64, vtype: VarType) -> usize {
        let (lb, ub) = match vtype {
            VarType::Binary => (lb.max(0.0), ub.min(1.0)),
            _ => (lb, ub),
        };
        self.vars.push(Variable { name: name.into(), lb, ub, vtype });
        self.quad.push(0.0);
        self.linear.push(0.0);
        self.vars.len() - 1
    }

    pub fn add_continuous(&mut self, name: impl Into<String>, lb: f64, ub: f64) -> usize {
        self.add_var(name, lb, ub, VarType::Continuous)
    }

    pub fn add_binary(&mut self, name: impl Into<String>) -> usize {
        self.add_var(name, 0.0, 1.0, VarType::Binary)
    }

    /// Adds `expr (sense) rhs`; the expression constant moves to the right.
    pub fn add_constraint(&mut self, name: impl Into<String>, expr: LinExpr, sense: Sense, rhs: f64) {
        let expr = expr.normalized();
        self.constraints.push(Constraint { name: name.into(), terms: expr.terms, sense, rhs: rhs - expr.constant });
    }

    /// Adds `weight * (x_v - center)^2` to the objective.
    pub fn add_square_distance(&mut self, v: usize, weight: f64, center: f64) {
        self.quad[v] += weight;
        self.linear[v] -= 2.0 * weight * center;
        self.constant += weight * center * center;
    }

    pub fn add_objective_term(&mut self, v: usize, coef: f64) {
        self.linear[v] += coef;
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.constant
            + x.iter().zip(self.quad.iter().zip(&self.linear)).map(|(x, (q, g))| q * x * x + g * x).sum::<f64>()
    }

    pub fn count(&self, vtype: VarType) -> usize {
        self.vars.iter().filter(|v| v.vtype == vtype).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vars.len();
        if self.quad.len() != n || self.linear.len() != n {
            return Err(Error::InvalidProblem("objective length mismatch".into()));
        }
        for (j, v) in self.vars.iter().enumerate() {
            if v.lb.is_nan() || v.ub.is_nan() || v.lb > v.ub {
                return Err(Error::InvalidProblem(format!("variable {} has bounds [{}, {}]", v.name, v.lb, v.ub)));
            }
            if v.is_integral() && !(v.lb.is_finite() && v.ub.is_finite()) {
                return Err(Error::InvalidProblem(format!("integer variable {} needs finite bounds", v.name)));
            }
            if !(self.quad[j] >= 0.0) || !self.quad[j].is_finite() {
                return Err(Error::InvalidProblem(format!(
                    "objective is not convex in {} (coefficient {})",
                    v.name, self.quad[j]
                )));
            }
            if !self.linear[j].is_finite() {
                return Err(Error::InvalidProblem(format!("non-finite cost on {}", v.name)));
            }
        }
        for c in &self.constraints {
            if !c.rhs.is_finite() {
                return Err(Error::InvalidProblem(format!("row {} has rhs {}", c.name, c.rhs)));
            }
            for &(v, a) in &c.terms {
                if v >= n || !a.is_finite() {
                    return Err(Error::InvalidProblem(format!("row {} has a bad term", c.name)));
                }
            }
        }
        Ok(())
    }

    /// Largest bound or row violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let bounds = self.vars.iter().zip(x).map(|(v, &x)| (v.lb - x).max(x - v.ub).max(0.0));
        let rows = self.constraints.iter().map(|c| c.violation(x));
        bounds.chain(rows).fold(0.0, f64::max)
    }

    pub fn max_integrality_violation(&self, x: &[f64]) -> f64 {
        self.vars.iter().zip(x).filter(|(v, _)| v.is_integral()).map(|(_, x)| (x - x.round()).abs()).fold(0.0, f64::max)
    }

    pub fn is_feasible(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.vars.len() && self.max_violation(x) <= tol && self.max_integrality_violation(x) <= tol
    }

    /// CPLEX-style LP text, readable by most MIP solvers.
    pub fn to_lp_string(&self) -> String {
        let names: Vec<String> = self.vars.iter().enumerate().map(|(j, v)| lp_name(&v.name, j)).collect();
        let mut out = String::new();
        let _ = writeln!(out, "Minimize");
        let mut obj = String::from(" obj:");
        let mut any = false;
        for (j, &g) in self.linear.iter().enumerate() {
            if g != 0.0 {
                push_term(&mut obj, g, &names[j], !any);
                any = true;
            }
        }
        if self.quad.iter().any(|&q| q != 0.0) {
            obj.push_str(" + [");
            let mut first = true;
            for (j, &q) in self.quad.iter().enumerate() {
                if q != 0.0 {
                    push_term(&mut obj, 2.0 * q, &format!("{} ^ 2", names[j]), first);
                    first = false;
                }
            }
            obj.push_str(" ] / 2");
            any = true;
        }
        if self.constant != 0.0 || !any {
            let _ = write!(obj, " {} {}", if self.constant < 0.0 { "-" } else { "+" }, fmt_num(self.constant.abs()));
        }
        let _ = writeln!(out, "{obj}");
        let _ = writeln!(out, "Subject To");
        for (i, c) in self.constraints.iter().enumerate() {
            let mut row = format!(" {}:", lp_name(&c.name, i));
            if c.terms.is_empty() {
                // LP format needs at least one variable per row.
                row.push_str(" 0 ");
                row.push_str(names.first().map_or("x0", String::as_str));
            }
            for (k, &(v, a)) in c.terms.iter().enumerate() {
                push_term(&mut row, a, &names[v], k == 0);
            }
            let op = match c.sense {
                Sense::Le => "<=",
                Sense::Ge => ">=",
                Sense::Eq => "=",
            };
            let _ = writeln!(out, "{row} {op} {}", fmt_num(c.rhs));
        }
        let _ = writeln!(out, "Bounds");
        for (j, v) in self.vars.iter().enumerate() {
            let lb = if v.lb.is_finite() { fmt_num(v.lb) } else { "-inf".into() };
            let ub = if v.ub.is_finite() { fmt_num(v.ub) } else { "+inf".into() };
            let _ = writeln!(out, " {lb} <= {} <= {ub}", names[j]);
        }
        for (header, vt) in [("Generals", VarType::Integer), ("Binaries", VarType::Binary)] {
            let list: Vec<&str> =
                self.vars.iter().zip(&names).filter(|(v, _)| v.vtype == vt).map(|(_, n)| n.as_str()).collect();
            if !list.is_empty() {
                let _ = writeln!(out, "{header}");
                for chunk in list.chunks(8) {
                    let _ = writeln!(out, " {}", chunk.join(" "));
                }
            }
        }
        out.push_str("End\n");
        out
    }
}

fn lp_name(name: &str, idx: usize) -> String {
    let cleaned: String =
        name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '.' { c } else { '_' }).collect();
    match cleaned.chars().next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => cleaned,
        _ => format!("v{idx}_{cleaned}"),
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

fn push_term(buf: &mut String, coef: f64, name: &str, first: bool) {
    let sign = if coef < 0.0 { "-" } else { "+" };
    if first && coef >= 0.0 {
        let _ = write!(buf, " {} {name}", fmt_num(coef));
    } else {
        let _ = write!(buf, " {sign} {} {name}", fmt_num(coef.abs()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_distance_expands_correctly() {
        let mut p = MiqpProblem::new();
        let x = p.add_continuous("x", -10.0, 10.0);
        p.add_square_distance(x, 2.0, 1.5);
        for v in [-3.0, 0.0, 1.5, 7.25] {
            let want = 2.0 * (v - 1.5f64).powi(2);
            assert!((p.objective(&[v]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn expression_constant_moves_to_rhs() {
        let mut p = MiqpProblem::new();
        let x = p.add_continuous("x", 0.0, 10.0);
        let mut e = LinExpr::var(x);
        e.add_term(x, 1.0).constant = 4.0;
        p.add_constraint("c", e, Sense::Le, 10.0);
        let c = &p.constraints[0];
        assert_eq!(c.terms, vec![(x, 2.0)]);
        assert_eq!(c.rhs, 6.0);
        assert_eq!(c.violation(&[4.0]), 2.0);
    }

    #[test]
    fn expression_interval() {
        let mut e = LinExpr::constant(1.0);
        e.add_term(0, 2.0).add_term(1, -1.0);
        assert_eq!(e.bounds(&[-1.0, 0.0], &[3.0, 5.0]), (-6.0, 7.0));
    }

    #[test]
    fn validation_rejects_nonconvex_and_unbounded_integers() {
        let mut p = MiqpProblem::new();
        let x = p.add_continuous("x", 0.0, 1.0);
        p.quad[x] = -1.0;
        assert!(p.validate().is_err());

        let mut p = MiqpProblem::new();
        p.add_var("k", 0.0, f64::INFINITY, VarType::Integer);
        assert!(p.validate().is_err());
    }

    #[test]
    fn lp_dump_lists_sections() {
        let mut p = MiqpProblem::new();
        let x = p.add_var("x", 0.0, 10.0, VarType::Integer);
        let z = p.add_binary("z[0]");
        p.add_square_distance(x, 1.0, 2.4);
        let mut e = LinExpr::var(x);
        e.add_term(z, -10.0);
        p.add_constraint("link", e, Sense::Le, 0.0);
        let lp = p.to_lp_string();
        for s in ["Minimize", "Subject To", "Bounds", "Generals", "Binaries", "End", "z_0_", "link:", "^ 2"] {
            assert!(lp.contains(s), "missing {s} in\n{lp}");
        }
    }
}
