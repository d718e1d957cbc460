//! Exact mixed-integer encodings of the predictors.
//!
//! ReLU networks use the big-M formulation with per-neuron interval bounds;
//! neurons whose interval does not straddle zero are linear and get no
//! binary. Tree ensembles get one binary per reachable leaf and aggregated
//! big-M rows per live split.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::predictors::{Activation, MlpClassifier, TreeEnsembleRegressor, TreeNode};
use crate::problem::{LinExpr, MiqpProblem, Sense, VarType};

/// Offset below a continuous split threshold that still routes left.
pub const SPLIT_TOL: f64 = 1e-6;

/// Pre-activation interval of every neuron, layer by layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationBounds {
    pub layers: Vec<Vec<(f64, f64)>>,
}

impl ActivationBounds {
    pub fn unstable_count(&self, model: &MlpClassifier) -> usize {
        self.layers
            .iter()
            .zip(&model.layers)
            .filter(|(_, l)| l.act == Activation::Relu)
            .map(|(b, _)| b.iter().filter(|(lo, hi)| *lo < 0.0 && *hi > 0.0).count())
            .sum()
    }
}

/// Interval arithmetic through the network.
pub fn propagate_bounds(model: &MlpClassifier, input: &[(f64, f64)]) -> Result<ActivationBounds> {
    if input.len() != model.inputs.len() {
        return Err(Error::DimensionMismatch { expected: model.inputs.len(), got: input.len() });
    }
    if let Some(i) = input.iter().position(|(lo, hi)| !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::InvalidProblem(format!("input {} has an unbounded interval", model.inputs[i])));
    }
    let mut cur: Vec<(f64, f64)> = input.to_vec();
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let pre: Vec<(f64, f64)> = layer
            .w
            .iter()
            .zip(&layer.b)
            .map(|(row, &b)| {
                row.iter().zip(&cur).fold((b, b), |(lo, hi), (&w, &(a, c))| {
                    if w >= 0.0 {
                        (lo + w * a, hi + w * c)
                    } else {
                        (lo + w * c, hi + w * a)
                    }
                })
            })
            .collect();
        cur = match layer.act {
            Activation::Relu => pre.iter().map(|&(lo, hi)| (lo.max(0.0), hi.max(0.0))).collect(),
            Activation::Identity => pre.clone(),
        };
        layers.push(pre);
    }
    Ok(ActivationBounds { layers })
}

#[derive(Debug, Clone)]
pub struct MlpEncoding {
    /// Variable equal to the network score.
    pub score: usize,
    pub binaries: Vec<usize>,
    pub bounds: ActivationBounds,
}

fn var_bounds(p: &MiqpProblem, vars: &[usize]) -> Vec<(f64, f64)> {
    vars.iter().map(|&v| (p.vars[v].lb, p.vars[v].ub)).collect()
}

/// Adds the network as constraints over `inputs` (one variable per model
/// input, in model order) and returns the score variable.
pub fn encode_mlp(model: &MlpClassifier, inputs: &[usize], p: &mut MiqpProblem, tag: &str) -> Result<MlpEncoding> {
    model.validate()?;
    let bounds = propagate_bounds(model, &var_bounds(p, inputs))?;
    let last = model.layers.len() - 1;
    if let Some(i) = model.layers[..last].iter().position(|l| l.act != Activation::Relu) {
        return Err(Error::InvalidModel(format!("hidden layer {i} is not ReLU")));
    }
    let mut cur: Vec<LinExpr> = inputs.iter().map(|&v| LinExpr::var(v)).collect();
    let mut binaries = Vec::new();
    for (l, layer) in model.layers[..last].iter().enumerate() {
        let mut next = Vec::with_capacity(layer.outputs());
        for (k, (row, &b)) in layer.w.iter().zip(&layer.b).enumerate() {
            let mut pre = LinExpr::constant(b);
            for (&w, e) in row.iter().zip(&cur) {
                pre.add_scaled(e, w);
            }
            let pre = pre.normalized();
            let (lo, hi) = bounds.layers[l][k];
            if hi <= 0.0 {
                next.push(LinExpr::constant(0.0));
            } else if lo >= 0.0 {
                next.push(pre);
            } else {
                let h = p.add_continuous(format!("{tag}_h{l}_{k}"), 0.0, hi);
                let z = p.add_binary(format!("{tag}_z{l}_{k}"));
                binaries.push(z);
                // h >= pre
                let mut e = LinExpr::var(h);
                e.add_scaled(&pre, -1.0);
                p.add_constraint(format!("{tag}_ge_pre{l}_{k}"), e.clone(), Sense::Ge, 0.0);
                p.add_constraint(format!("{tag}_ge0_{l}_{k}"), LinExpr::var(h), Sense::Ge, 0.0);
                // h <= pre - lo (1 - z)
                e.add_term(z, -lo);
                p.add_constraint(format!("{tag}_le_pre{l}_{k}"), e, Sense::Le, -lo);
                // h <= hi z
                let mut e = LinExpr::var(h);
                e.add_term(z, -hi);
                p.add_constraint(format!("{tag}_le_on{l}_{k}"), e, Sense::Le, 0.0);
                next.push(LinExpr::var(h));
            }
        }
        cur = next;
    }
    let out = &model.layers[last];
    let mut score = LinExpr::constant(out.b[0]);
    for (&w, e) in out.w[0].iter().zip(&cur) {
        score.add_scaled(e, w);
    }
    let (lo, hi) = bounds.layers[last][0];
    let y = p.add_continuous(format!("{tag}_score"), lo, hi);
    let mut e = LinExpr::var(y);
    e.add_scaled(&score, -1.0);
    p.add_constraint(format!("{tag}_score_def"), e, Sense::Eq, 0.0);
    Ok(MlpEncoding { score: y, binaries, bounds })
}

/// One reachable leaf: its value and the binary selecting it (none when
/// the tree collapses to a single reachable leaf).
#[derive(Debug, Clone)]
pub struct EncodedLeaf {
    /// Index of the leaf node in its tree.
    pub node: usize,
    pub value: f64,
    pub var: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TreeEncoding {
    /// Variable equal to the ensemble prediction.
    pub output: usize,
    pub base: f64,
    pub trees: Vec<Vec<EncodedLeaf>>,
}

impl TreeEncoding {
    pub fn binaries(&self) -> usize {
        self.trees.iter().flatten().filter(|l| l.var.is_some()).count()
    }

    /// Prediction read off the selected leaves, summed in tree order the
    /// same way `TreeEnsembleRegressor::predict` does.
    pub fn decode(&self, x: &[f64]) -> f64 {
        self.base
            + self
                .trees
                .iter()
                .map(|leaves| leaves.iter().find(|l| l.var.is_none_or(|v| x[v] > 0.5)).map_or(f64::NAN, |l| l.value))
                .sum::<f64>()
    }
}

/// Largest value that routes left of `thr` and smallest that routes right.
fn split_limits(thr: f64, integral: bool) -> (f64, f64) {
    if integral {
        (thr.ceil() - 1.0, thr.ceil())
    } else {
        (thr - SPLIT_TOL, thr)
    }
}

struct LeafPath {
    node: usize,
    value: f64,
}

/// Adds the ensemble over `inputs` and returns its output variable.
pub fn encode_tree_ensemble(
    model: &TreeEnsembleRegressor,
    inputs: &[usize],
    p: &mut MiqpProblem,
    tag: &str,
) -> Result<TreeEncoding> {
    model.validate()?;
    if inputs.len() != model.inputs.len() {
        return Err(Error::DimensionMismatch { expected: model.inputs.len(), got: inputs.len() });
    }
    let boxes = var_bounds(p, inputs);
    let integral: Vec<bool> = inputs.iter().map(|&v| p.vars[v].vtype != VarType::Continuous).collect();
    let mut out_expr = LinExpr::constant(model.base);
    let (mut out_lo, mut out_hi) = (model.base, model.base);
    let mut trees = Vec::with_capacity(model.trees.len());

    for (t, tree) in model.trees.iter().enumerate() {
        // Reachable leaves and live splits (both children reachable).
        let mut leaves: Vec<LeafPath> = Vec::new();
        let mut live: Vec<(usize, usize, f64, Vec<usize>, Vec<usize>)> = Vec::new();
        let mut stack = vec![(0usize, boxes.clone())];
        // Leaf ids below each node, filled after traversal.
        let mut parent_splits: Vec<(usize, usize, f64, usize, usize)> = Vec::new();
        while let Some((i, bx)) = stack.pop() {
            match tree.nodes[i] {
                TreeNode::Leaf { value } => leaves.push(LeafPath { node: i, value }),
                TreeNode::Split { feature, threshold, left, right } => {
                    let (lo, hi) = bx[feature];
                    if !lo.is_finite() || !hi.is_finite() {
                        return Err(Error::InvalidProblem(format!(
                            "split on {} needs finite bounds",
                            model.inputs[feature]
                        )));
                    }
                    let (left_max, right_min) = split_limits(threshold, integral[feature]);
                    let go_left = lo <= left_max;
                    let go_right = hi >= right_min;
                    if go_left && go_right {
                        parent_splits.push((i, feature, threshold, left, right));
                    }
                    if go_right {
                        let mut b = bx.clone();
                        b[feature].0 = lo.max(right_min);
                        stack.push((right, b));
                    }
                    if go_left {
                        let mut b = bx;
                        b[feature].1 = hi.min(left_max);
                        stack.push((left, b));
                    }
                }
            }
        }
        if leaves.is_empty() {
            return Err(Error::InvalidProblem(format!("tree {t} has no reachable leaf")));
        }
        if leaves.len() == 1 {
            let (node, v) = (leaves[0].node, leaves[0].value);
            out_expr.constant += v;
            out_lo += v;
            out_hi += v;
            trees.push(vec![EncodedLeaf { node, value: v, var: None }]);
            continue;
        }
        let leaf_vars: Vec<usize> = leaves.iter().map(|l| p.add_binary(format!("{tag}_t{t}_leaf{}", l.node))).collect();
        let mut one = LinExpr::default();
        for &z in &leaf_vars {
            one.add_term(z, 1.0);
        }
        p.add_constraint(format!("{tag}_t{t}_one"), one, Sense::Eq, 1.0);
        for (l, &z) in leaves.iter().zip(&leaf_vars) {
            out_expr.add_term(z, l.value);
        }
        out_lo += leaves.iter().map(|l| l.value).fold(f64::INFINITY, f64::min);
        out_hi += leaves.iter().map(|l| l.value).fold(f64::NEG_INFINITY, f64::max);

        let leaf_index = |node: usize| leaves.iter().position(|l| l.node == node);
        for (i, feature, threshold, left, right) in parent_splits {
            let below = |root: usize| -> Vec<usize> {
                let mut out = Vec::new();
                let mut st = vec![root];
                while let Some(k) = st.pop() {
                    match tree.nodes[k] {
                        TreeNode::Leaf { .. } => {
                            if let Some(idx) = leaf_index(k) {
                                out.push(leaf_vars[idx]);
                            }
                        }
                        TreeNode::Split { left, right, .. } => {
                            st.push(left);
                            st.push(right);
                        }
                    }
                }
                out
            };
            live.push((i, feature, threshold, below(left), below(right)));
        }
        for (i, feature, threshold, lz, rz) in live {
            let x = inputs[feature];
            let (lo, hi) = boxes[feature];
            let (left_max, right_min) = split_limits(threshold, integral[feature]);
            // left leaf active  =>  x <= left_max
            let mut e = LinExpr::var(x);
            for &z in &lz {
                e.add_term(z, hi - left_max);
            }
            p.add_constraint(format!("{tag}_t{t}_n{i}_l"), e, Sense::Le, hi);
            // right leaf active  =>  x >= right_min
            let mut e = LinExpr::var(x);
            for &z in &rz {
                e.add_term(z, -(right_min - lo));
            }
            p.add_constraint(format!("{tag}_t{t}_n{i}_r"), e, Sense::Ge, lo);
        }
        trees.push(
            leaves
                .iter()
                .zip(&leaf_vars)
                .map(|(l, &z)| EncodedLeaf { node: l.node, value: l.value, var: Some(z) })
                .collect(),
        );
    }

    let o = p.add_continuous(format!("{tag}_out"), out_lo, out_hi);
    let mut e = LinExpr::var(o);
    e.add_scaled(&out_expr, -1.0);
    p.add_constraint(format!("{tag}_out_def"), e, Sense::Eq, 0.0);
    Ok(TreeEncoding { output: o, base: model.base, trees })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictors::fixtures::{test_ensemble, test_mlp};
    use crate::predictors::{DenseLayer, RegressionTree};
    use crate::schema::FeatureId;
    use crate::solver::{solve, SolveConfig, SolveStatus};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_unit(w: f64, b: f64) -> MlpClassifier {
        MlpClassifier {
            inputs: vec![FeatureId::P],
            layers: vec![
                DenseLayer { w: vec![vec![w]], b: vec![b], act: Activation::Relu },
                DenseLayer { w: vec![vec![1.0]], b: vec![0.0], act: Activation::Identity },
            ],
            threshold: 0.0,
            epsilon: 0.0,
        }
    }

    #[test]
    fn zero_weights_give_bias_intervals() {
        let mut m = test_mlp();
        for l in &mut m.layers {
            l.w.iter_mut().flatten().for_each(|w| *w = 0.0);
        }
        let b = propagate_bounds(&m, &[(-3.0, 4.0), (1.0, 2.0)]).unwrap();
        for (l, layer) in b.layers.iter().zip(&m.layers) {
            for (iv, &bias) in l.iter().zip(&layer.b) {
                assert_eq!(*iv, (bias, bias));
            }
        }
    }

    #[test]
    fn single_unit_interval() {
        let b = propagate_bounds(&single_unit(2.0, 0.0), &[(-1.0, 3.0)]).unwrap();
        assert_eq!(b.layers[0][0], (-2.0, 6.0));
    }

    #[test]
    fn unbounded_input_is_rejected() {
        assert!(propagate_bounds(&single_unit(1.0, 0.0), &[(0.0, f64::INFINITY)]).is_err());
    }

    #[test]
    fn dead_network_has_no_binaries() {
        let m = single_unit(1.0, -10.0);
        let mut p = MiqpProblem::new();
        let x = p.add_continuous("x", 0.0, 5.0);
        let enc = encode_mlp(&m, &[x], &mut p, "f").unwrap();
        assert!(enc.binaries.is_empty());
        assert_eq!(p.count(VarType::Binary), 0);
    }

    #[test]
    fn straddling_unit_arity() {
        let m = single_unit(1.0, -1.0);
        let mut p = MiqpProblem::new();
        let x = p.add_continuous("x", 0.0, 5.0);
        let rows_before = p.constraints.len();
        let enc = encode_mlp(&m, &[x], &mut p, "f").unwrap();
        assert_eq!(enc.binaries.len(), 1);
        // 4 neuron rows plus the score definition.
        assert_eq!(p.constraints.len() - rows_before, 5);
    }

    #[test]
    fn monte_carlo_soundness_of_intervals() {
        let m = test_mlp();
        let boxes = [(-4.0, 6.0), (-2.0, 3.0)];
        let b = propagate_bounds(&m, &boxes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100_000 {
            let mut a: Vec<f64> = boxes.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
            for (l, layer) in m.layers.iter().enumerate() {
                let pre: Vec<f64> = layer
                    .w
                    .iter()
                    .zip(&layer.b)
                    .map(|(r, b)| b + r.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>())
                    .collect();
                for (k, v) in pre.iter().enumerate() {
                    let (lo, hi) = b.layers[l][k];
                    assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
                }
                a = match layer.act {
                    Activation::Relu => pre.iter().map(|v| v.max(0.0)).collect(),
                    Activation::Identity => pre,
                };
            }
        }
    }

    fn pinned(values: &[f64], integral: &[bool]) -> (MiqpProblem, Vec<usize>) {
        let mut p = MiqpProblem::new();
        let vars = values
            .iter()
            .zip(integral)
            .enumerate()
            .map(|(i, (&v, &int))| {
                p.add_var(format!("x{i}"), v, v, if int { VarType::Integer } else { VarType::Continuous })
            })
            .collect();
        (p, vars)
    }

    fn exact() -> SolveConfig {
        SolveConfig { gap: 1e-9, ..SolveConfig::default() }
    }

    #[test]
    fn stump_routes_integer_input() {
        let e = TreeEnsembleRegressor {
            inputs: vec![FeatureId::P],
            base: 0.0,
            trees: vec![RegressionTree {
                nodes: vec![
                    TreeNode::Split { feature: 0, threshold: 100.0, left: 1, right: 2 },
                    TreeNode::Leaf { value: 10.0 },
                    TreeNode::Leaf { value: 20.0 },
                ],
            }],
        };
        // Pinned at 99: only the left leaf is reachable.
        let (mut p, vars) = pinned(&[99.0], &[true]);
        let enc = encode_tree_ensemble(&e, &vars, &mut p, "n").unwrap();
        assert_eq!(enc.binaries(), 0);
        let r = solve(&p, &exact()).unwrap();
        assert_eq!(r.x.as_ref().unwrap()[enc.output], 10.0);

        // Free in [0, 200]: pin the output to 10 and the solver must go left.
        let mut p = MiqpProblem::new();
        let x = p.add_var("P", 0.0, 200.0, VarType::Integer);
        let enc = encode_tree_ensemble(&e, &[x], &mut p, "n").unwrap();
        assert_eq!(enc.binaries(), 2);
        p.add_constraint("pin", LinExpr::var(enc.output), Sense::Eq, 10.0);
        p.add_objective_term(x, -1.0);
        let r = solve(&p, &exact()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_eq!(r.x.unwrap()[x], 99.0);
    }

    #[test]
    fn single_leaf_tree_is_constant() {
        let e = TreeEnsembleRegressor { inputs: vec![FeatureId::P], base: 2.0, trees: vec![RegressionTree::leaf(3.5)] };
        let mut p = MiqpProblem::new();
        let x = p.add_var("P", 0.0, 10.0, VarType::Integer);
        let enc = encode_tree_ensemble(&e, &[x], &mut p, "n").unwrap();
        assert_eq!(enc.binaries(), 0);
        assert_eq!(p.vars[enc.output].lb, 5.5);
        assert_eq!(p.vars[enc.output].ub, 5.5);
    }

    #[test]
    fn pinned_inputs_reproduce_forward_passes() {
        let m = test_mlp();
        let ens = test_ensemble(
            vec![FeatureId::P, FeatureId::TT, FeatureId::TA],
            &[(0.0, 5000.0), (20.0, 90.0), (-5.0, 25.0)],
            10,
            4,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let xm = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let (mut p, vars) = pinned(&xm, &[false, false]);
            let enc = encode_mlp(&m, &vars, &mut p, "f").unwrap();
            let r = solve(&p, &exact()).unwrap();
            let got = r.x.unwrap()[enc.score];
            assert!((got - m.score(&xm).unwrap()).abs() <= 1e-6);

            let xt =
                [rng.random_range(0..=5000) as f64, rng.random_range(20..=90) as f64, rng.random_range(-5.0..25.0)];
            let (mut p, vars) = pinned(&xt, &[true, true, false]);
            let enc = encode_tree_ensemble(&ens, &vars, &mut p, "t").unwrap();
            let r = solve(&p, &exact()).unwrap();
            assert_eq!(enc.decode(r.x.as_ref().unwrap()), ens.predict(&xt).unwrap());
        }
    }
}
