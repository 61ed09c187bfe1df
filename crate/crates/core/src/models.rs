//! Small differentiable models and the local training routine.
//!
//! Parameters live in one flat vector so the server can treat every model as
//! an element of R^d. Three model kinds are provided: linear regression,
//! multinomial logistic regression and a one-hidden-layer MLP with dropout on
//! the hidden units.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperspace::{Config, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Logistic,
    Mlp { hidden: usize, activation: Activation },
}

/// Shape of a model: kind, input width and number of outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    pub inputs: usize,
    /// Class count for classifiers, 1 for regression.
    pub outputs: usize,
}

impl Architecture {
    pub fn linear(inputs: usize) -> Self {
        Self {
            kind: ModelKind::Linear,
            inputs,
            outputs: 1,
        }
    }

    pub fn logistic(inputs: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            inputs,
            outputs: classes,
        }
    }

    pub fn mlp(inputs: usize, hidden: usize, classes: usize, activation: Activation) -> Self {
        Self {
            kind: ModelKind::Mlp { hidden, activation },
            inputs,
            outputs: classes,
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self.kind, ModelKind::Linear)
    }

    pub fn hidden(&self) -> usize {
        match self.kind {
            ModelKind::Mlp { hidden, .. } => hidden,
            _ => 0,
        }
    }

    pub fn num_params(&self) -> usize {
        let (d, c) = (self.inputs, self.outputs);
        match self.kind {
            ModelKind::Linear => d + 1,
            ModelKind::Logistic => c * d + c,
            ModelKind::Mlp { hidden: h, .. } => h * d + h + c * h + c,
        }
    }
}

/// A flat parameter vector together with the architecture that reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub weights: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            weights: vec![0.0; arch.num_params()],
        }
    }

    /// Scaled-normal weights (fan-in), zero biases.
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(arch);
        let (d, c) = (arch.inputs, arch.outputs);
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let n = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt()).unwrap();
            slice.iter_mut().for_each(|w| *w = n.sample(rng));
        };
        match arch.kind {
            ModelKind::Linear => fill(&mut p.weights[..d], d),
            ModelKind::Logistic => fill(&mut p.weights[..c * d], d),
            ModelKind::Mlp { hidden: h, .. } => {
                fill(&mut p.weights[..h * d], d);
                let off = h * d + h;
                fill(&mut p.weights[off..off + c * h], h);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn distance(&self, other: &ModelParams) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Examples stored row-major; labels are class indices (as reals) or targets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_rows(dim: usize, rows: &[(Vec<f64>, f64)]) -> Result<Self> {
        let mut ds = Self::new(dim);
        for (x, y) in rows {
            ds.push(x, *y)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, x: &[f64], y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("expected {} features, got {}", self.dim, x.len())));
        }
        self.features.extend_from_slice(x);
        self.labels.push(y);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut ds = Dataset::new(self.dim);
        for &i in idx {
            ds.features.extend_from_slice(self.row(i));
            ds.labels.push(self.labels[i]);
        }
        ds
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        if self.dim != arch.inputs {
            return Err(Error::Shape(format!(
                "model expects {} inputs, data has {}",
                arch.inputs, self.dim
            )));
        }
        if arch.is_classifier() {
            if let Some(y) = self
                .labels
                .iter()
                .find(|y| y.fract() != 0.0 || **y < 0.0 || **y as usize >= arch.outputs)
            {
                return Err(Error::Shape(format!("label {y} is not a class below {}", arch.outputs)));
            }
        }
        Ok(())
    }
}

/// Per-example hidden-unit multipliers: 0 for dropped units, 1/(1-p) otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    hidden: usize,
    scale: Vec<f64>,
}

impl DropoutMask {
    pub fn sample(hidden: usize, examples: usize, p: f64, rng: &mut impl Rng) -> Self {
        let keep = 1.0 / (1.0 - p);
        let scale = (0..hidden * examples)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        Self { hidden, scale }
    }

    fn row(&self, example: usize) -> &[f64] {
        &self.scale[example * self.hidden..(example + 1) * self.hidden]
    }
}

/// Weight decay and proximal pull added on top of the data loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct Regularizer<'a> {
    pub weight_decay: f64,
    pub prox_mu: f64,
    pub anchor: Option<&'a ModelParams>,
}

impl Regularizer<'_> {
    fn value(&self, w: &[f64]) -> f64 {
        let mut v = 0.0;
        if self.weight_decay != 0.0 {
            v += 0.5 * self.weight_decay * w.iter().map(|x| x * x).sum::<f64>();
        }
        if let (Some(a), true) = (self.anchor, self.prox_mu != 0.0) {
            v += 0.5 * self.prox_mu * w.iter().zip(&a.weights).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        v
    }

    fn add_gradient(&self, w: &[f64], g: &mut [f64]) {
        if self.weight_decay != 0.0 {
            g.iter_mut().zip(w).for_each(|(g, x)| *g += self.weight_decay * x);
        }
        if let (Some(a), true) = (self.anchor, self.prox_mu != 0.0) {
            for ((g, x), y) in g.iter_mut().zip(w).zip(&a.weights) {
                *g += self.prox_mu * (x - y);
            }
        }
    }
}

fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
}

/// Mean data loss over `idx` and, if requested, its gradient.
///
/// Regression uses half squared error; classifiers use softmax cross-entropy.
fn data_loss(
    params: &ModelParams,
    data: &Dataset,
    idx: &[usize],
    mask: Option<&DropoutMask>,
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let arch = params.arch;
    let w = &params.weights;
    let (d, c) = (arch.inputs, arch.outputs);
    let mut grad = if want_grad { vec![0.0; w.len()] } else { Vec::new() };
    let mut total = 0.0;
    let mut logits = vec![0.0; c];
    let h = arch.hidden();
    let mut pre = vec![0.0; h];
    let mut act = vec![0.0; h];
    let mut dact = vec![0.0; h];

    for (pos, &i) in idx.iter().enumerate() {
        let x = data.row(i);
        let y = data.labels[i];
        match arch.kind {
            ModelKind::Linear => {
                let pred = w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d];
                let r = pred - y;
                total += 0.5 * r * r;
                if want_grad {
                    grad[..d].iter_mut().zip(x).for_each(|(g, xi)| *g += r * xi);
                    grad[d] += r;
                }
            }
            ModelKind::Logistic => {
                for k in 0..c {
                    logits[k] = w[k * d..(k + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[c * d + k];
                }
                log_softmax_in_place(&mut logits);
                let yk = y as usize;
                total -= logits[yk];
                if want_grad {
                    for k in 0..c {
                        let delta = logits[k].exp() - if k == yk { 1.0 } else { 0.0 };
                        grad[k * d..(k + 1) * d].iter_mut().zip(x).for_each(|(g, xi)| *g += delta * xi);
                        grad[c * d + k] += delta;
                    }
                }
            }
            ModelKind::Mlp { activation, .. } => {
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                let scale = mask.map(|m| m.row(pos));
                for j in 0..h {
                    pre[j] = w1[j * d..(j + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b1[j];
                    let (a, da) = match activation {
                        Activation::Tanh => {
                            let t = pre[j].tanh();
                            (t, 1.0 - t * t)
                        }
                        Activation::Relu => {
                            if pre[j] > 0.0 {
                                (pre[j], 1.0)
                            } else {
                                (0.0, 0.0)
                            }
                        }
                    };
                    let s = scale.map_or(1.0, |s| s[j]);
                    act[j] = a * s;
                    dact[j] = da * s;
                }
                for k in 0..c {
                    logits[k] = w2[k * h..(k + 1) * h].iter().zip(&act).map(|(a, b)| a * b).sum::<f64>() + b2[k];
                }
                log_softmax_in_place(&mut logits);
                let yk = y as usize;
                total -= logits[yk];
                if want_grad {
                    let off_w2 = h * d + h;
                    let off_b2 = off_w2 + c * h;
                    let mut back = vec![0.0; h];
                    for k in 0..c {
                        let delta = logits[k].exp() - if k == yk { 1.0 } else { 0.0 };
                        for j in 0..h {
                            grad[off_w2 + k * h + j] += delta * act[j];
                            back[j] += delta * w2[k * h + j];
                        }
                        grad[off_b2 + k] += delta;
                    }
                    for j in 0..h {
                        let dz = back[j] * dact[j];
                        if dz != 0.0 {
                            grad[j * d..(j + 1) * d].iter_mut().zip(x).for_each(|(g, xi)| *g += dz * xi);
                        }
                        grad[h * d + j] += dz;
                    }
                }
            }
        }
    }

    let n = idx.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (total / n, grad)
}

fn all_indices(data: &Dataset) -> Vec<usize> {
    (0..data.len()).collect()
}

/// Mean per-example loss, without dropout or regularization.
pub fn loss(params: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check(&params.arch)?;
    Ok(data_loss(params, data, &all_indices(data), None, false).0)
}

/// Misclassification rate for classifiers, mean squared error for regression.
pub fn error_rate(params: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check(&params.arch)?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let out = predict_row(params, data.row(i));
        if params.arch.is_classifier() {
            let best = out
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
                .0;
            if best != data.labels[i] as usize {
                total += 1.0;
            }
        } else {
            let r = out[0] - data.labels[i];
            total += r * r;
        }
    }
    Ok(total / data.len() as f64)
}

/// Raw model output for one example: the prediction (regression) or logits.
pub fn predict_row(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let arch = params.arch;
    let w = &params.weights;
    let (d, c) = (arch.inputs, arch.outputs);
    let dot = |a: &[f64]| a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
    match arch.kind {
        ModelKind::Linear => vec![dot(&w[..d]) + w[d]],
        ModelKind::Logistic => (0..c).map(|k| dot(&w[k * d..(k + 1) * d]) + w[c * d + k]).collect(),
        ModelKind::Mlp { hidden: h, activation } => {
            let hidden: Vec<f64> = (0..h)
                .map(|j| {
                    let z = dot(&w[j * d..(j + 1) * d]) + w[h * d + j];
                    match activation {
                        Activation::Tanh => z.tanh(),
                        Activation::Relu => z.max(0.0),
                    }
                })
                .collect();
            let off = h * d + h;
            (0..c)
                .map(|k| {
                    w[off + k * h..off + (k + 1) * h].iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>()
                        + w[off + c * h + k]
                })
                .collect()
        }
    }
}

/// Value of the regularized training objective, used to check [`gradient`].
pub fn objective(params: &ModelParams, data: &Dataset, reg: &Regularizer, mask: Option<&DropoutMask>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check(&params.arch)?;
    Ok(data_loss(params, data, &all_indices(data), mask, false).0 + reg.value(&params.weights))
}

/// Exact gradient of [`objective`].
pub fn gradient(params: &ModelParams, data: &Dataset, reg: &Regularizer, mask: Option<&DropoutMask>) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check(&params.arch)?;
    let (_, mut g) = data_loss(params, data, &all_indices(data), mask, true);
    reg.add_gradient(&params.weights, &mut g);
    Ok(g)
}

/// The client configuration `c` as consumed by [`local_train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalHyperparams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub prox_mu: f64,
}

impl Default for LocalHyperparams {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            epochs: 1,
            batch_size: 32,
            dropout: 0.0,
            prox_mu: 0.0,
        }
    }
}

impl LocalHyperparams {
    /// Reads `lr`, `momentum`, `weight_decay`, `epochs`, `batch`, `dropout`
    /// and `mu` from a client configuration; absent names keep their defaults.
    pub fn from_config(space: &SearchSpace, config: &Config) -> Result<Self> {
        let d = Self::default();
        let get = |name: &str, default: f64| space.real(config, name).unwrap_or(default);
        let hp = Self {
            lr: get("lr", d.lr),
            momentum: get("momentum", d.momentum),
            weight_decay: get("weight_decay", d.weight_decay),
            epochs: get("epochs", d.epochs as f64).round() as usize,
            batch_size: get("batch", d.batch_size as f64).round() as usize,
            dropout: get("dropout", d.dropout),
            prox_mu: get("mu", d.prox_mu),
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, detail: String| {
            Err(Error::OutOfDomain {
                name: name.into(),
                detail,
            })
        };
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} must be finite and >= 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} not in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("{} must be >= 0", self.weight_decay));
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} not in [0, 1)", self.dropout));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return bad("mu", format!("{} must be >= 0", self.prox_mu));
        }
        Ok(())
    }
}

/// Mini-batch SGD with heavy-ball momentum on
/// `loss(w, batch) + wd/2 |w|^2 + mu/2 |w - anchor|^2`.
///
/// Batches come from a fresh seeded shuffle every epoch, the final partial
/// batch is kept, and the velocity starts at zero on every call.
pub fn local_train(
    data: &Dataset,
    init: &ModelParams,
    c: &LocalHyperparams,
    anchor: &ModelParams,
    rng: &mut impl Rng,
) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    c.validate()?;
    data.check(&init.arch)?;
    let reg = Regularizer {
        weight_decay: c.weight_decay,
        prox_mu: c.prox_mu,
        anchor: Some(anchor),
    };
    let hidden = init.arch.hidden();
    let use_dropout = hidden > 0 && c.dropout > 0.0;

    let mut w = init.clone();
    let mut velocity = vec![0.0; w.len()];
    let mut order = all_indices(data);
    for epoch in 0..c.epochs {
        order.shuffle(rng);
        for batch in order.chunks(c.batch_size) {
            let mask = use_dropout.then(|| DropoutMask::sample(hidden, batch.len(), c.dropout, rng));
            let (value, mut g) = data_loss(&w, data, batch, mask.as_ref(), true);
            reg.add_gradient(&w.weights, &mut g);
            if !value.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { epoch });
            }
            for ((wi, vi), gi) in w.weights.iter_mut().zip(velocity.iter_mut()).zip(&g) {
                *vi = c.momentum * *vi + gi;
                *wi -= c.lr * *vi;
            }
        }
    }
    if !w.is_finite() {
        return Err(Error::NonFinite { epoch: c.epochs });
    }
    Ok(w)
}
