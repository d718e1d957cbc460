//! Forward evaluation of the anomaly classifier (ReLU MLP, pre-sigmoid score)
//! and of the tree-ensemble temperature surrogates.
//!
//! Both model kinds carry their input feature order so the encoder and the
//! replay loop can wire them to the right channels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{FeatureId, FeatureVector, PowerCurve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "id")]
    Identity,
}

/// Dense layer; `w` is stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    pub fn outputs(&self) -> usize {
        self.b.len()
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, &bias) in self.w.iter().zip(&self.b) {
            let z = bias + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
            out.push(match self.act {
                Activation::Relu => z.max(0.0),
                Activation::Identity => z,
            });
        }
    }
}

/// Feed-forward classifier. The last layer is a single identity unit whose
/// output is the score; a sample is anomalous iff `score > threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    pub inputs: Vec<FeatureId>,
    pub layers: Vec<DenseLayer>,
    /// Score at the probability threshold; 0 for tau = 0.5.
    pub threshold: f64,
    /// Margin required below the threshold for a counterfactual.
    pub epsilon: f64,
}

impl MlpClassifier {
    pub fn validate(&self) -> Result<()> {
        let last = self.layers.last().ok_or_else(|| Error::InvalidModel("mlp has no layers".into()))?;
        if last.act != Activation::Identity || last.outputs() != 1 {
            return Err(Error::InvalidModel("last layer must be a single identity unit".into()));
        }
        let mut width = self.inputs.len();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.w.len() != layer.b.len() || layer.b.is_empty() {
                return Err(Error::InvalidModel(format!("layer {i}: weight/bias shape")));
            }
            if layer.w.iter().any(|row| row.len() != width) {
                return Err(Error::InvalidModel(format!("layer {i}: expected {width} inputs per unit")));
            }
            if layer.w.iter().flatten().chain(&layer.b).any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("layer {i}: non-finite parameter")));
            }
            width = layer.outputs();
        }
        if !self.threshold.is_finite() || !(self.epsilon >= 0.0) {
            return Err(Error::InvalidModel("bad threshold or epsilon".into()));
        }
        Ok(())
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.inputs.len() {
            return Err(Error::DimensionMismatch { expected: self.inputs.len(), got: x.len() });
        }
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur[0])
    }

    /// 1 iff the score is strictly above the threshold.
    pub fn classify(&self, x: &[f64]) -> Result<u8> {
        Ok(u8::from(self.score(x)? > self.threshold))
    }

    pub fn score_sample(&self, x: &FeatureVector, curve: &PowerCurve) -> Result<f64> {
        self.score(&x.inputs(&self.inputs, curve)?)
    }

    pub fn classify_sample(&self, x: &FeatureVector, curve: &PowerCurve) -> Result<u8> {
        self.classify(&x.inputs(&self.inputs, curve)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        #[serde(rename = "leaf")]
        value: f64,
    },
}

/// Binary regression tree stored as a flat node list with the root at 0.
/// Routing: `x[feature] < threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn leaf(value: f64) -> Self {
        Self { nodes: vec![TreeNode::Leaf { value }] }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_node(x)] {
            TreeNode::Leaf { value } => value,
            TreeNode::Split { .. } => unreachable!("routing ends in a leaf"),
        }
    }

    /// Index of the leaf `x` routes to.
    pub fn leaf_node(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { .. } => return i,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x[feature] < threshold { left } else { right }
                }
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    fn validate(&self, n_inputs: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidModel("tree has no nodes".into()));
        }
        let mut seen = vec![false; self.nodes.len()];
        seen[0] = true;
        // (node, per-feature half-open interval [lo, hi))
        let mut stack = vec![(0usize, vec![(f64::NEG_INFINITY, f64::INFINITY); n_inputs])];
        while let Some((i, boxes)) = stack.pop() {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => {
                    if !value.is_finite() {
                        return Err(Error::InvalidModel("non-finite leaf value".into()));
                    }
                }
                &TreeNode::Split { feature, threshold, left, right } => {
                    if feature >= n_inputs || !threshold.is_finite() {
                        return Err(Error::InvalidModel(format!("node {i}: bad split")));
                    }
                    for child in [left, right] {
                        if child >= self.nodes.len() || seen[child] {
                            return Err(Error::InvalidModel(format!("node {i}: child {child} missing or shared")));
                        }
                        seen[child] = true;
                    }
                    let (lo, hi) = boxes[feature];
                    if !(lo < threshold && threshold < hi) {
                        return Err(Error::InvalidModel(format!(
                            "node {i}: split {threshold} outside inherited range [{lo}, {hi})"
                        )));
                    }
                    let mut lb = boxes.clone();
                    lb[feature].1 = threshold;
                    let mut rb = boxes;
                    rb[feature].0 = threshold;
                    stack.push((left, lb));
                    stack.push((right, rb));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidModel("tree has unreachable nodes".into()));
        }
        Ok(())
    }
}

/// Additive ensemble: `base + sum of tree outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsembleRegressor {
    pub inputs: Vec<FeatureId>,
    pub base: f64,
    pub trees: Vec<RegressionTree>,
}

impl TreeEnsembleRegressor {
    pub fn validate(&self) -> Result<()> {
        if !self.base.is_finite() {
            return Err(Error::InvalidModel("non-finite base score".into()));
        }
        for t in &self.trees {
            t.validate(self.inputs.len())?;
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.inputs.len() {
            return Err(Error::DimensionMismatch { expected: self.inputs.len(), got: x.len() });
        }
        Ok(self.base + self.trees.iter().map(|t| t.eval(x)).sum::<f64>())
    }

    pub fn predict_sample(&self, x: &FeatureVector, curve: &PowerCurve) -> Result<f64> {
        self.predict(&x.inputs(&self.inputs, curve)?)
    }

    pub fn leaf_count(&self) -> usize {
        self.trees.iter().map(RegressionTree::leaf_count).sum()
    }
}

/// On-disk model file, tagged by `"type"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ModelFile {
    #[serde(rename = "mlp")]
    Mlp(MlpClassifier),
    #[serde(rename = "tree_ensemble")]
    TreeEnsemble(TreeEnsembleRegressor),
}

impl ModelFile {
    pub fn from_json(s: &str) -> Result<Self> {
        let m: ModelFile = serde_json::from_str(s)?;
        match &m {
            ModelFile::Mlp(c) => c.validate()?,
            ModelFile::TreeEnsemble(r) => r.validate()?,
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<MlpClassifier> {
    match ModelFile::from_json(&std::fs::read_to_string(path)?)? {
        ModelFile::Mlp(m) => Ok(m),
        ModelFile::TreeEnsemble(_) => Err(Error::InvalidModel("expected an mlp model, found a tree ensemble".into())),
    }
}

pub fn load_regressor(path: impl AsRef<Path>) -> Result<TreeEnsembleRegressor> {
    match ModelFile::from_json(&std::fs::read_to_string(path)?)? {
        ModelFile::TreeEnsemble(m) => Ok(m),
        ModelFile::Mlp(_) => Err(Error::InvalidModel("expected a tree ensemble, found an mlp".into())),
    }
}

pub fn save_model(model: ModelFile, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model.to_json()? + "\n")?;
    Ok(())
}

/// Small fixed models used by tests, docs and the acceptance suite.
pub mod fixtures {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Two inputs, two hidden ReLU layers of eight units, one score unit.
    pub fn test_mlp() -> MlpClassifier {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
        let mut layer = |n_in: usize, n_out: usize, act| DenseLayer {
            w: (0..n_out).map(|_| (0..n_in).map(|_| rng.random_range(-1.5..1.5)).collect()).collect(),
            b: (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect(),
            act,
        };
        let layers =
            vec![layer(2, 8, Activation::Relu), layer(8, 8, Activation::Relu), layer(8, 1, Activation::Identity)];
        MlpClassifier { inputs: vec![FeatureId::P, FeatureId::TT], layers, threshold: 0.0, epsilon: 0.05 }
    }

    /// Random ensemble of depth-3 trees over `inputs`, thresholds drawn from
    /// `[lo, hi)` per input and integral for integral features.
    pub fn test_ensemble(
        inputs: Vec<FeatureId>,
        ranges: &[(f64, f64)],
        n_trees: usize,
        seed: u64,
    ) -> TreeEnsembleRegressor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..n_trees)
            .map(|_| {
                let mut nodes = Vec::new();
                grow(&mut nodes, &inputs, ranges.to_vec(), 3, &mut rng);
                RegressionTree { nodes }
            })
            .collect();
        TreeEnsembleRegressor { inputs, base: 10.0, trees }
    }

    fn grow(
        nodes: &mut Vec<TreeNode>,
        inputs: &[FeatureId],
        ranges: Vec<(f64, f64)>,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let idx = nodes.len();
        nodes.push(TreeNode::Leaf { value: (rng.random_range(-3.0..3.0f64) * 100.0).round() / 100.0 });
        if depth == 0 {
            return idx;
        }
        let f = rng.random_range(0..inputs.len());
        let (lo, hi) = ranges[f];
        let mut thr = rng.random_range(lo..hi);
        if inputs[f].is_integral() {
            thr = thr.round() + 0.5;
        }
        if !(lo < thr && thr < hi) {
            return idx;
        }
        let mut lr = ranges.clone();
        lr[f].1 = thr;
        let mut rr = ranges;
        rr[f].0 = thr;
        let left = grow(nodes, inputs, lr, depth - 1, rng);
        let right = grow(nodes, inputs, rr, depth - 1, rng);
        nodes[idx] = TreeNode::Split { feature: f, threshold: thr, left, right };
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight-line matrix algebra, independent of `DenseLayer::forward`.
    fn naive_forward(m: &MlpClassifier, x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        for layer in &m.layers {
            let mut z = vec![0.0; layer.b.len()];
            for i in 0..z.len() {
                let mut acc = layer.b[i];
                for j in 0..a.len() {
                    acc += layer.w[i][j] * a[j];
                }
                z[i] = if layer.act == Activation::Relu && acc < 0.0 { 0.0 } else { acc };
            }
            a = z;
        }
        a[0]
    }

    /// Recursive descent, independent of the iterative `eval`.
    fn descend(t: &RegressionTree, i: usize, x: &[f64]) -> f64 {
        match &t.nodes[i] {
            TreeNode::Leaf { value } => *value,
            TreeNode::Split { feature, threshold, left, right } => {
                if x[*feature] >= *threshold {
                    descend(t, *right, x)
                } else {
                    descend(t, *left, x)
                }
            }
        }
    }

    fn stump() -> TreeEnsembleRegressor {
        TreeEnsembleRegressor {
            inputs: vec![FeatureId::P],
            base: 1.0,
            trees: vec![RegressionTree {
                nodes: vec![
                    TreeNode::Split { feature: 0, threshold: 100.0, left: 1, right: 2 },
                    TreeNode::Leaf { value: 10.0 },
                    TreeNode::Leaf { value: 20.0 },
                ],
            }],
        }
    }

    #[test]
    fn zero_weight_network_returns_bias() {
        let m = MlpClassifier {
            inputs: vec![FeatureId::P, FeatureId::TT],
            layers: vec![DenseLayer { w: vec![vec![0.0, 0.0]], b: vec![-2.5], act: Activation::Identity }],
            threshold: 0.0,
            epsilon: 0.0,
        };
        for x in [[0.0, 0.0], [1e4, -3.0], [7.0, 7.0]] {
            assert_eq!(m.score(&x).unwrap(), -2.5);
        }
    }

    #[test]
    fn relu_clamps_negative_preactivation() {
        let m = MlpClassifier {
            inputs: vec![FeatureId::P],
            layers: vec![
                DenseLayer { w: vec![vec![1.0]], b: vec![-5.0], act: Activation::Relu },
                DenseLayer { w: vec![vec![4.0]], b: vec![0.75], act: Activation::Identity },
            ],
            threshold: 0.0,
            epsilon: 0.0,
        };
        assert_eq!(m.score(&[3.0]).unwrap(), 0.75);
    }

    #[test]
    fn shipped_mlp_matches_naive_forward() {
        let m = test_mlp();
        m.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let got = m.score(&x).unwrap();
            let want = naive_forward(&m, &x);
            assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn classify_ties_go_to_class_zero() {
        let mk = |b: f64| MlpClassifier {
            inputs: vec![FeatureId::P],
            layers: vec![DenseLayer { w: vec![vec![0.0]], b: vec![b], act: Activation::Identity }],
            threshold: 0.3,
            epsilon: 0.1,
        };
        assert_eq!(mk(0.3).classify(&[1.0]).unwrap(), 0);
        assert_eq!(mk(1.3).classify(&[1.0]).unwrap(), 1);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = test_mlp();
        assert!(matches!(m.score(&[1.0]), Err(Error::DimensionMismatch { expected: 2, got: 1 })));
        assert!(matches!(stump().predict(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn empty_ensemble_returns_base() {
        let e = TreeEnsembleRegressor { inputs: vec![FeatureId::P], base: 3.25, trees: vec![] };
        assert_eq!(e.predict(&[42.0]).unwrap(), 3.25);
    }

    #[test]
    fn stump_routes_strictly_left() {
        let e = stump();
        assert_eq!(e.predict(&[50.0]).unwrap(), 11.0);
        assert_eq!(e.predict(&[100.0]).unwrap(), 21.0);
    }

    #[test]
    fn shipped_ensemble_matches_recursive_descent() {
        let e = test_ensemble(
            vec![FeatureId::P, FeatureId::TT, FeatureId::TA],
            &[(0.0, 5000.0), (20.0, 90.0), (-5.0, 25.0)],
            12,
            7,
        );
        e.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = [
                rng.random_range(0.0..5000.0f64).round(),
                rng.random_range(20.0..90.0f64).round(),
                rng.random_range(-5.0..25.0),
            ];
            let want = e.base + e.trees.iter().map(|t| descend(t, 0, &x)).sum::<f64>();
            assert_eq!(e.predict(&x).unwrap(), want);
        }
    }

    #[test]
    fn inconsistent_path_is_rejected() {
        let mut e = stump();
        e.trees[0].nodes = vec![
            TreeNode::Split { feature: 0, threshold: 100.0, left: 1, right: 2 },
            TreeNode::Split { feature: 0, threshold: 150.0, left: 3, right: 4 },
            TreeNode::Leaf { value: 1.0 },
            TreeNode::Leaf { value: 1.0 },
            TreeNode::Leaf { value: 1.0 },
        ];
        assert!(e.validate().is_err());
    }

    #[test]
    fn model_json_format() {
        let text = ModelFile::Mlp(test_mlp()).to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["type"], "mlp");
        assert_eq!(v["layers"][0]["act"], "relu");
        assert_eq!(v["layers"][2]["act"], "id");
        assert!(v["threshold"].is_number() && v["epsilon"].is_number());
        assert!(v["layers"][0]["w"][0].is_array());

        let text = ModelFile::TreeEnsemble(stump()).to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["type"], "tree_ensemble");
        assert_eq!(v["base"], 1.0);
        assert_eq!(v["trees"][0]["nodes"][1]["leaf"], 10.0);
        assert_eq!(ModelFile::from_json(&text).unwrap(), ModelFile::TreeEnsemble(stump()));
    }

    proptest! {
        #[test]
        fn classify_agrees_with_score(a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let m = test_mlp();
            let s = m.score(&[a, b]).unwrap();
            prop_assert_eq!(m.classify(&[a, b]).unwrap() == 1, s > m.threshold);
        }

        /// Score is continuous and piecewise linear: along a segment, the
        /// change between dense samples is bounded by the product of layer
        /// weight norms times the step length.
        #[test]
        fn score_is_lipschitz(a in -10.0f64..10.0, b in -10.0f64..10.0,
                              c in -10.0f64..10.0, d in -10.0f64..10.0) {
            let m = test_mlp();
            let lip: f64 = m.layers.iter().map(|l| {
                l.w.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
            }).product();
            let steps = 200;
            let len = ((c - a).powi(2) + (d - b).powi(2)).sqrt();
            let mut prev = m.score(&[a, b]).unwrap();
            for k in 1..=steps {
                let t = k as f64 / steps as f64;
                let s = m.score(&[a + t * (c - a), b + t * (d - b)]).unwrap();
                prop_assert!((s - prev).abs() <= lip * len / steps as f64 + 1e-9);
                prev = s;
            }
        }

        #[test]
        fn predict_is_piecewise_constant(p in 0.0f64..5000.0, tt in 20.0f64..90.0) {
            let e = test_ensemble(vec![FeatureId::P, FeatureId::TT], &[(0.0, 5000.0), (20.0, 90.0)], 6, 19);
            let thresholds: Vec<(usize, f64)> = e.trees.iter().flat_map(|t| t.nodes.iter().filter_map(|n| match n {
                TreeNode::Split { feature, threshold, .. } => Some((*feature, *threshold)),
                _ => None,
            })).collect();
            let x = [p, tt];
            let dist = thresholds.iter().map(|(f, t)| (x[*f] - t).abs()).fold(f64::INFINITY, f64::min);
            let delta = dist * 0.5;
            let base = e.predict(&x).unwrap();
            for dx in [[delta, 0.0], [-delta, 0.0], [0.0, delta], [0.0, -delta]] {
                prop_assert_eq!(e.predict(&[p + dx[0], tt + dx[1]]).unwrap(), base);
            }
        }
    }
}
