//! Task-specific classification heads and classification metrics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, sigmoid, softmax_rows, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    Logistic,
    Softmax,
}

pub const DEFAULT_L2: f64 = 1e-3;
pub const MAX_ITERATIONS: usize = 5000;
pub const GRAD_TOLERANCE: f64 = 1e-6;
/// Cosine scale used to turn prototype similarities into probabilities.
pub const PROTOTYPE_SCALE: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticHead {
    pub weight: Tensor,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead {
    /// `[d × c]`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Nearest-class-mean classifier over cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeHead {
    /// `[c × d]`
    pub prototypes: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Logistic(LogisticHead),
    Softmax(SoftmaxHead),
    Prototype(PrototypeHead),
    /// Always predicts one class; used when no head can be fit.
    Constant { class: usize, num_classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub head: Head,
    pub iterations: usize,
    pub final_loss: f64,
    pub grad_norm: f64,
    /// Set when the labels had a single class and a constant predictor was returned.
    pub degenerate: bool,
}

impl Head {
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Head::Logistic(h) => Some(h.weight.len()),
            Head::Softmax(h) => Some(h.weight.shape()[0]),
            Head::Prototype(h) => Some(h.prototypes.shape()[1]),
            Head::Constant { .. } => None,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Head::Logistic(_) => 2,
            Head::Softmax(h) => h.bias.len(),
            Head::Prototype(h) => h.prototypes.shape()[0],
            Head::Constant { num_classes, .. } => *num_classes,
        }
    }
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Class and class probabilities for one embedding; ties go to the lower index.
pub fn predict(head: &Head, embedding: &[f64]) -> Result<Prediction> {
    if let Some(d) = head.input_dim() {
        if d != embedding.len() {
            return Err(Error::ShapeMismatch {
                op: "predict",
                left: vec![d],
                right: vec![embedding.len()],
            });
        }
    }
    let probabilities = match head {
        Head::Logistic(h) => {
            let z: f64 = h.weight.data().iter().zip(embedding).map(|(w, x)| w * x).sum::<f64>() + h.bias;
            let p = sigmoid(z);
            vec![1.0 - p, p]
        }
        Head::Softmax(h) => {
            let c = h.bias.len();
            let d = embedding.len();
            let mut logits = h.bias.data().to_vec();
            for (i, x) in embedding.iter().enumerate() {
                let row = &h.weight.data()[i * c..(i + 1) * c];
                logits.iter_mut().zip(row).for_each(|(l, w)| *l += x * w);
            }
            debug_assert_eq!(h.weight.len(), d * c);
            softmax_rows(&logits, c)
        }
        Head::Prototype(h) => {
            let c = h.prototypes.shape()[0];
            let mut scores = Vec::with_capacity(c);
            for k in 0..c {
                scores.push(PROTOTYPE_SCALE * cosine_similarity(h.prototypes.row(k), embedding)?);
            }
            softmax_rows(&scores, c)
        }
        Head::Constant { class, num_classes } => {
            let mut p = vec![0.0; *num_classes];
            p[*class] = 1.0;
            p
        }
    };
    Ok(Prediction {
        class: argmax(&probabilities),
        probabilities,
    })
}

/// Largest eigenvalue of `XᵀX / n` for `X` augmented with a ones column.
fn curvature_bound(x: &Tensor) -> f64 {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut v = vec![1.0 / libm::sqrt((d + 1) as f64); d + 1];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut xv = vec![0.0; n];
        for r in 0..n {
            let row = x.row(r);
            xv[r] = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d];
        }
        let mut next = vec![0.0; d + 1];
        for r in 0..n {
            let row = x.row(r);
            for j in 0..d {
                next[j] += row[j] * xv[r];
            }
            next[d] += xv[r];
        }
        next.iter_mut().for_each(|e| *e /= n as f64);
        let norm = libm::sqrt(next.iter().map(|e| e * e).sum());
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = next.into_iter().map(|e| e / norm).collect();
    }
    lambda
}

/// Value and gradients (weight, bias) of the regularized head objective.
pub fn head_objective_grad(
    x: &Tensor,
    labels: &[usize],
    head_type: HeadType,
    weight: &Tensor,
    bias: &Tensor,
    l2: f64,
) -> Result<(f64, Tensor, Tensor)> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.param(weight.clone());
    let b = tape.param(bias.clone());
    let data_loss = match head_type {
        HeadType::Softmax => xv.matmul(w)?.add_row(b)?.softmax_cross_entropy(labels)?,
        HeadType::Logistic => {
            let n = labels.len();
            let targets: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            xv.matmul(w)?.add_row(b)?.reshape(&[n])?.logistic_cross_entropy(&targets)?
        }
    };
    let loss = data_loss.add(w.sum_squares()?.scale(l2)?)?;
    let grads = tape.backward(loss)?;
    Ok((loss.item(), grads.wrt(w), grads.wrt(b)))
}

/// Head training objective (mean cross-entropy plus `l2·‖W‖²`) at a point.
pub fn head_objective(
    embeddings: &Tensor,
    labels: &[usize],
    head_type: HeadType,
    weight: &Tensor,
    bias: &Tensor,
    l2: f64,
) -> Result<f64> {
    Ok(head_objective_grad(embeddings, labels, head_type, weight, bias, l2)?.0)
}

/// Fits a head by accelerated full-batch gradient descent from zero.
pub fn fit_head(
    embeddings: &Tensor,
    labels: &[usize],
    head_type: HeadType,
    num_classes: usize,
    l2: f64,
) -> Result<FitOutcome> {
    let (n, d) = embeddings.dims2("fit_head")?;
    if n == 0 || labels.len() != n {
        return Err(Error::TooFewExamples { needed: 1, got: labels.len().min(n) });
    }
    if head_type == HeadType::Logistic && num_classes != 2 {
        return Err(Error::InvalidConfig("logistic heads are binary".into()));
    }
    if num_classes < 2 {
        return Err(Error::InvalidConfig("a head needs at least two classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes: num_classes });
    }
    embeddings.ensure_finite("fit_head")?;
    if head_type == HeadType::Logistic && labels.iter().all(|&l| l == labels[0]) {
        return Ok(FitOutcome {
            head: Head::Constant { class: labels[0], num_classes },
            iterations: 0,
            final_loss: 0.0,
            grad_norm: 0.0,
            degenerate: true,
        });
    }

    let cols = match head_type {
        HeadType::Softmax => num_classes,
        HeadType::Logistic => 1,
    };
    let hessian_scale = match head_type {
        HeadType::Softmax => 0.5,
        HeadType::Logistic => 0.25,
    };
    let lipschitz = hessian_scale * curvature_bound(embeddings) + 2.0 * l2;
    let step = 1.0 / lipschitz.max(1e-12);

    let mut w = Tensor::zeros(&[d, cols]);
    let mut b = Tensor::zeros(&[cols]);
    let mut w_prev = w.clone();
    let mut b_prev = b.clone();
    let mut t = 1.0f64;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut loss = f64::NAN;
    while iterations < MAX_ITERATIONS {
        // Look-ahead point.
        let t_next = (1.0 + libm::sqrt(1.0 + 4.0 * t * t)) / 2.0;
        let beta = (t - 1.0) / t_next;
        let extrapolate = |cur: &Tensor, prev: &Tensor| {
            let data = cur.data().iter().zip(prev.data()).map(|(c, p)| c + beta * (c - p)).collect();
            Tensor::new(cur.shape(), data).expect("shape")
        };
        let yw = extrapolate(&w, &w_prev);
        let yb = extrapolate(&b, &b_prev);
        let (_, gw, gb) = head_objective_grad(embeddings, labels, head_type, &yw, &yb, l2)?;
        let descend = |y: &Tensor, g: &Tensor| {
            let data = y.data().iter().zip(g.data()).map(|(v, gr)| v - step * gr).collect();
            Tensor::new(y.shape(), data).expect("shape")
        };
        let nw = descend(&yw, &gw);
        let nb = descend(&yb, &gb);
        // Restart momentum when the step points against the gradient.
        let uphill: f64 = gw.data().iter().zip(nw.data().iter().zip(w.data())).map(|(g, (a, c))| g * (a - c)).sum::<f64>()
            + gb.data().iter().zip(nb.data().iter().zip(b.data())).map(|(g, (a, c))| g * (a - c)).sum::<f64>();
        w_prev = core::mem::replace(&mut w, nw);
        b_prev = core::mem::replace(&mut b, nb);
        t = if uphill > 0.0 { 1.0 } else { t_next };
        iterations += 1;

        let (value, gw, gb) = head_objective_grad(embeddings, labels, head_type, &w, &b, l2)?;
        loss = value;
        grad_norm = libm::sqrt(gw.sum_squares() + gb.sum_squares());
        if grad_norm < GRAD_TOLERANCE {
            break;
        }
    }

    let head = match head_type {
        HeadType::Softmax => Head::Softmax(SoftmaxHead { weight: w, bias: b }),
        HeadType::Logistic => Head::Logistic(LogisticHead {
            weight: Tensor::vector(w.into_data()),
            bias: b.item(),
        }),
    };
    Ok(FitOutcome {
        head,
        iterations,
        final_loss: loss,
        grad_norm,
        degenerate: false,
    })
}

/// Builds a prototype head from one `[d]` embedding per class.
pub fn prototype_head(prototypes: Tensor) -> Result<Head> {
    let (c, _) = prototypes.dims2("prototype_head")?;
    if c < 2 {
        return Err(Error::InvalidConfig("prototype head needs at least two classes".into()));
    }
    Ok(Head::Prototype(PrototypeHead { prototypes }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    /// Positive-class F1 for binary heads, macro-F1 otherwise.
    pub f1: f64,
    pub n_eval: usize,
}

fn f1_for(class: usize, predictions: &[usize], labels: &[usize]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == class, l == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize], head_type: HeadType) -> Result<MetricSet> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics",
            left: vec![predictions.len()],
            right: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyEvalPool);
    }
    let n = labels.len();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let f1 = match head_type {
        HeadType::Logistic => f1_for(1, predictions, labels),
        HeadType::Softmax => {
            let mut classes: Vec<usize> = labels.iter().chain(predictions).copied().collect();
            classes.sort_unstable();
            classes.dedup();
            classes.iter().map(|&c| f1_for(c, predictions, labels)).sum::<f64>() / classes.len() as f64
        }
    };
    Ok(MetricSet {
        accuracy: correct as f64 / n as f64,
        f1,
        n_eval: n,
    })
}
