//! Differentiable models over flat parameter vectors, cross-entropy loss and
//! its analytic gradient, and the one-bit sign quantizer.
//!
//! Parameter layouts (row-major):
//! - logistic: `W[C×f]`, `b[C]`, so `d = (f+1)·C`
//! - mlp: `W1[H×f]`, `b1[H]`, `W2[C×H]`, `b2[C]` with tanh hidden units, so
//!   `d = (f+1)·H + (H+1)·C`

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{arg, Result};
use crate::rng::StreamKey;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    #[default]
    Logistic,
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
}

fn default_hidden() -> usize {
    32
}

/// Shape metadata tying a parameter vector to a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub kind: ModelKind,
    pub features: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn new(kind: ModelKind, features: usize, classes: usize) -> Result<Self> {
        if features == 0 || classes < 2 {
            return arg("model needs at least one feature and two classes");
        }
        if let ModelKind::Mlp { hidden: 0 } = kind {
            return arg("mlp hidden width must be positive");
        }
        Ok(ModelShape { kind, features, classes })
    }

    pub fn dim(&self) -> usize {
        let (f, c) = (self.features, self.classes);
        match self.kind {
            ModelKind::Logistic => (f + 1) * c,
            ModelKind::Mlp { hidden: h } => (f + 1) * h + (h + 1) * c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        ModelParams { shape, values: vec![0.0; shape.dim()] }
    }

    pub fn from_values(shape: ModelShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.dim() {
            return arg(format!(
                "parameter vector has {} entries, shape needs {}",
                values.len(),
                shape.dim()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return arg("parameters must be finite");
        }
        Ok(ModelParams { shape, values })
    }

    /// Logistic starts at zero; the MLP draws every entry uniformly from
    /// `[-1/√f, 1/√f]`.
    pub fn init(shape: ModelShape, key: StreamKey) -> Self {
        match shape.kind {
            ModelKind::Logistic => Self::zeros(shape),
            ModelKind::Mlp { .. } => {
                let bound = 1.0 / (shape.features as f64).sqrt();
                let mut rng = key.rng();
                let values = (0..shape.dim())
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                ModelParams { shape, values }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Vector with every entry in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignVector(Vec<i8>);

/// Sign with the tie rule `sign(0) = +1`.
#[inline]
pub fn sign_of(x: f64) -> i8 {
    if x < 0.0 {
        -1
    } else {
        1
    }
}

/// Sign of an integer vote tally, ties to `+1`.
#[inline]
pub fn sign_of_tally(x: i64) -> i8 {
    if x < 0 {
        -1
    } else {
        1
    }
}

impl SignVector {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return arg("sign vector entries must be -1 or +1");
        }
        Ok(SignVector(signs))
    }

    pub fn filled(d: usize, sign: i8) -> Self {
        SignVector(vec![sign_of(sign as f64); d])
    }

    pub fn from_reals(values: &[f64]) -> Self {
        SignVector(values.iter().map(|&v| sign_of(v)).collect())
    }

    /// Element-wise sign of integer tallies (ties to `+1`).
    pub fn from_tallies(tallies: &[i64]) -> Self {
        SignVector(tallies.iter().map(|&t| sign_of_tally(t)).collect())
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn negated(&self) -> Self {
        SignVector(self.0.iter().map(|&s| -s).collect())
    }

    pub fn to_reals(&self) -> Vec<f64> {
        self.0.iter().map(|&s| s as f64).collect()
    }

    /// Fraction of coordinates where `self` and `other` differ.
    pub fn mismatch_rate(&self, other: &SignVector) -> f64 {
        let diff = self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count();
        diff as f64 / self.0.len().max(1) as f64
    }
}

pub fn sign_quantize(g: &GradientVector) -> SignVector {
    SignVector::from_reals(&g.0)
}

/// Per-sample scratch buffers, reused across a batch.
struct Workspace {
    logits: Vec<f64>,
    hidden: Vec<f64>,
    delta_hidden: Vec<f64>,
}

impl Workspace {
    fn new(shape: &ModelShape) -> Self {
        let h = match shape.kind {
            ModelKind::Logistic => 0,
            ModelKind::Mlp { hidden } => hidden,
        };
        Workspace {
            logits: vec![0.0; shape.classes],
            hidden: vec![0.0; h],
            delta_hidden: vec![0.0; h],
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fill `ws.logits` (and hidden activations) for input `x`.
fn forward(params: &ModelParams, x: &[f64], ws: &mut Workspace) {
    let s = &params.shape;
    let (f, c) = (s.features, s.classes);
    let v = &params.values;
    match s.kind {
        ModelKind::Logistic => {
            let (w, b) = v.split_at(c * f);
            for k in 0..c {
                ws.logits[k] = dot(&w[k * f..(k + 1) * f], x) + b[k];
            }
        }
        ModelKind::Mlp { hidden: h } => {
            let (w1, rest) = v.split_at(h * f);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            for u in 0..h {
                ws.hidden[u] = (dot(&w1[u * f..(u + 1) * f], x) + b1[u]).tanh();
            }
            for k in 0..c {
                ws.logits[k] = dot(&w2[k * h..(k + 1) * h], &ws.hidden) + b2[k];
            }
        }
    }
}

/// Turn logits into softmax probabilities in place; returns `-ln p_y`.
fn softmax_xent(logits: &mut [f64], y: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted_y = logits[y] - max;
    let mut z = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        z += *l;
    }
    let log_py = shifted_y - z.ln();
    for l in logits.iter_mut() {
        *l /= z;
    }
    -log_py
}

/// Accumulate `scale · ∇f(ω, (x, y))` into `out`; returns the sample loss.
fn accumulate_sample_grad(
    params: &ModelParams,
    x: &[f64],
    y: usize,
    scale: f64,
    out: &mut [f64],
    ws: &mut Workspace,
) -> f64 {
    forward(params, x, ws);
    let loss = softmax_xent(&mut ws.logits, y);
    ws.logits[y] -= 1.0; // now dL/dlogits
    let s = &params.shape;
    let (f, c) = (s.features, s.classes);
    match s.kind {
        ModelKind::Logistic => {
            let (gw, gb) = out.split_at_mut(c * f);
            for k in 0..c {
                let dk = scale * ws.logits[k];
                for (g, &xi) in gw[k * f..(k + 1) * f].iter_mut().zip(x) {
                    *g += dk * xi;
                }
                gb[k] += dk;
            }
        }
        ModelKind::Mlp { hidden: h } => {
            let w2 = &params.values[h * f + h..h * f + h + c * h];
            let (gw1, rest) = out.split_at_mut(h * f);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            ws.delta_hidden.iter_mut().for_each(|d| *d = 0.0);
            for k in 0..c {
                let dk = ws.logits[k];
                let row = &w2[k * h..(k + 1) * h];
                for u in 0..h {
                    gw2[k * h + u] += scale * dk * ws.hidden[u];
                    ws.delta_hidden[u] += dk * row[u];
                }
                gb2[k] += scale * dk;
            }
            for u in 0..h {
                let a = ws.hidden[u];
                let dz = scale * ws.delta_hidden[u] * (1.0 - a * a);
                for (g, &xi) in gw1[u * f..(u + 1) * f].iter_mut().zip(x) {
                    *g += dz * xi;
                }
                gb1[u] += dz;
            }
        }
    }
    loss
}

fn check_compatible(params: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return arg("index list must not be empty");
    }
    if params.shape.features != dataset.dim() || params.shape.classes != dataset.classes() {
        return arg("model shape does not match dataset");
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
        return arg(format!("sample index {bad} out of range"));
    }
    Ok(())
}

/// Mean cross-entropy over the indexed samples.
pub fn loss(params: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    check_compatible(params, dataset, indices)?;
    let mut ws = Workspace::new(&params.shape);
    let total: f64 = indices
        .iter()
        .map(|&i| {
            forward(params, dataset.row(i), &mut ws);
            softmax_xent(&mut ws.logits, dataset.label(i))
        })
        .sum();
    Ok(total / indices.len() as f64)
}

/// Analytic gradient of [`loss`] over the same indices.
pub fn gradient(params: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<GradientVector> {
    Ok(loss_and_gradient(params, dataset, indices)?.1)
}

pub fn loss_and_gradient(
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<(f64, GradientVector)> {
    check_compatible(params, dataset, indices)?;
    let mut ws = Workspace::new(&params.shape);
    let mut out = vec![0.0; params.dim()];
    let scale = 1.0 / indices.len() as f64;
    let mut total = 0.0;
    for &i in indices {
        total += accumulate_sample_grad(params, dataset.row(i), dataset.label(i), scale, &mut out, &mut ws);
    }
    Ok((total * scale, GradientVector(out)))
}

pub fn full_loss(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    loss(params, dataset, &all)
}

pub fn full_gradient(params: &ModelParams, dataset: &Dataset) -> Result<GradientVector> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    gradient(params, dataset, &all)
}

/// Gradient of the loss at one sample.
pub fn sample_gradient(params: &ModelParams, dataset: &Dataset, i: usize) -> Result<GradientVector> {
    gradient(params, dataset, &[i])
}

/// `ω − η·direction`.
pub fn sgd_step(params: &ModelParams, direction: &SignVector, eta: f64) -> Result<ModelParams> {
    if direction.len() != params.dim() {
        return arg(format!(
            "direction has {} entries, params have {}",
            direction.len(),
            params.dim()
        ));
    }
    if !(eta > 0.0) {
        return arg("learning rate must be positive");
    }
    let values = params
        .values
        .iter()
        .zip(direction.as_slice())
        .map(|(&w, &s)| w - eta * s as f64)
        .collect();
    Ok(ModelParams { shape: params.shape, values })
}

/// Predicted class, ties toward the smallest index.
pub fn predict(params: &ModelParams, x: &[f64]) -> usize {
    let mut ws = Workspace::new(&params.shape);
    forward(params, x, &mut ws);
    argmax(&ws.logits)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in v.iter().enumerate().skip(1) {
        if s > v[best] {
            best = k;
        }
    }
    best
}

pub fn accuracy(params: &ModelParams, dataset: &Dataset) -> f64 {
    let mut ws = Workspace::new(&params.shape);
    let correct = (0..dataset.len())
        .filter(|&i| {
            forward(params, dataset.row(i), &mut ws);
            argmax(&ws.logits) == dataset.label(i)
        })
        .count();
    correct as f64 / dataset.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn logistic(ds: &Dataset) -> ModelShape {
        ModelShape::new(ModelKind::Logistic, ds.dim(), ds.classes()).unwrap()
    }

    #[test]
    fn dims_follow_layout() {
        assert_eq!(ModelShape::new(ModelKind::Logistic, 784, 10).unwrap().dim(), 7850);
        assert_eq!(
            ModelShape::new(ModelKind::Mlp { hidden: 32 }, 20, 2).unwrap().dim(),
            21 * 32 + 33 * 2
        );
    }

    #[test]
    fn zero_logistic_loss_is_log_classes() {
        let ds = generate_synthetic(10, 3, 12, 2.0, 1).unwrap();
        let p = ModelParams::zeros(logistic(&ds));
        let l = loss(&p, &ds, &[0, 5, 17]).unwrap();
        assert!(close(l, 10f64.ln(), 1e-12));
        let ds2 = generate_synthetic(2, 3, 4, 2.0, 1).unwrap();
        let l2 = loss(&ModelParams::zeros(logistic(&ds2)), &ds2, &[0, 1]).unwrap();
        assert!(close(l2, 2f64.ln(), 1e-12));
        assert!(loss(&p, &ds, &[]).is_err());
        assert!(gradient(&p, &ds, &[]).is_err());
    }

    #[test]
    fn singleton_batch_is_sample_gradient() {
        let ds = generate_synthetic(3, 4, 5, 2.0, 2).unwrap();
        let shape = ModelShape::new(ModelKind::Mlp { hidden: 4 }, 5, 3).unwrap();
        let p = ModelParams::init(shape, StreamKey::new(3));
        assert_eq!(gradient(&p, &ds, &[7]).unwrap(), sample_gradient(&p, &ds, 7).unwrap());
        // mean of singletons equals the batch gradient
        let batch = [1usize, 4, 9];
        let g = gradient(&p, &ds, &batch).unwrap();
        for j in 0..g.dim() {
            let mean: f64 = batch
                .iter()
                .map(|&i| sample_gradient(&p, &ds, i).unwrap().0[j])
                .sum::<f64>()
                / 3.0;
            assert!(close(mean, g.0[j], 1e-12));
        }
    }

    #[test]
    fn sign_quantize_tie_rule() {
        let s = sign_quantize(&GradientVector(vec![0.3, -1.2, 0.0]));
        assert_eq!(s.as_slice(), &[1, -1, 1]);
        let neg = sign_quantize(&GradientVector(vec![-0.1, -5.0, -1e-300]));
        assert_eq!(neg.as_slice(), &[-1, -1, -1]);
        let g = GradientVector(vec![0.5, -0.5, 0.0, 2.0]);
        let flipped = sign_quantize(&GradientVector(g.0.iter().map(|v| -v).collect()));
        assert_eq!(flipped.as_slice(), &[-1, 1, 1, -1]);
        let s = SignVector::new(vec![1, -1, -1, 1]).unwrap();
        assert_eq!(SignVector::from_reals(&s.to_reals()), s);
        assert!(SignVector::new(vec![0]).is_err());
    }

    #[test]
    fn sgd_step_moves_each_coordinate_by_eta() {
        let shape = ModelShape::new(ModelKind::Logistic, 2, 2).unwrap();
        let p = ModelParams::zeros(shape);
        let up = SignVector::filled(6, 1);
        let q = sgd_step(&p, &up, 0.01).unwrap();
        assert!(q.values.iter().all(|&v| v == -0.01));
        let back = sgd_step(&q, &up.negated(), 0.01).unwrap();
        assert_eq!(back.values, p.values);
        let l1: f64 = q.values.iter().zip(&p.values).map(|(a, b)| (a - b).abs()).sum();
        assert!(close(l1, 0.01 * 6.0, 1e-15));
        assert!(sgd_step(&p, &SignVector::filled(5, 1), 0.01).is_err());
        assert!(sgd_step(&p, &up, 0.0).is_err());
    }

    #[test]
    fn zero_params_predict_class_zero() {
        let ds = generate_synthetic(2, 50, 3, 2.0, 4).unwrap();
        let p = ModelParams::zeros(logistic(&ds));
        assert_eq!(accuracy(&p, &ds), 0.5);
    }

    #[test]
    fn blob_mean_separator_is_perfect() {
        // separation 40 puts both blobs ~20 standard deviations from the boundary
        let ds = generate_synthetic(2, 200, 5, 40.0, 5).unwrap();
        let shape = logistic(&ds);
        let mut values = vec![0.0; shape.dim()];
        // class 1 weight row along the axis joining the means; bisector bias 0
        values[5] = 1.0;
        let p = ModelParams::from_values(shape, values).unwrap();
        assert_eq!(accuracy(&p, &ds), 1.0);
    }
}
