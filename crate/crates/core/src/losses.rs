//! Training objectives: discriminator cross-entropy, the adversarial uniform
//! loss, the confidence balance fraction, and the angular-margin identity
//! loss with its penalty-coefficient variant.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Loss hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Logit scale `s`.
    pub scale: f64,
    /// Additive angular margin `m` on the true class, radians.
    pub margin: f64,
    /// Confidence threshold `T_confidence`.
    pub t_confidence: f64,
    pub n_races: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            scale: 64.0,
            margin: 0.35,
            t_confidence: 0.7,
            n_races: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("s must be positive, got {}", self.scale)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!(
                "m must lie in [0, pi/2), got {}",
                self.margin
            )));
        }
        if !(self.t_confidence > 0.0 && self.t_confidence < 1.0) {
            return Err(Error::Config(format!(
                "t_confidence must lie in (0, 1), got {}",
                self.t_confidence
            )));
        }
        if self.n_races < 2 {
            return Err(Error::Config("need at least 2 races".into()));
        }
        Ok(())
    }
}

/// Per-sample confidences of one batch against a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchConfidence {
    pub p_max: Vec<f64>,
    pub n_batch: usize,
    /// Samples with `p_max < threshold`.
    pub n_confidence: usize,
}

impl BatchConfidence {
    pub fn new(p_max: Vec<f64>, threshold: f64) -> Self {
        let n_confidence = p_max.iter().filter(|&&p| p < threshold).count();
        Self {
            n_batch: p_max.len(),
            n_confidence,
            p_max,
        }
    }
}

/// Fraction of the batch at or above the confidence threshold.
pub fn confidence_balance_loss(batch: &BatchConfidence) -> Result<f64> {
    if batch.n_batch == 0 {
        return Err(Error::invalid("confidence_balance_loss", "empty batch"));
    }
    if batch.n_confidence > batch.n_batch {
        return Err(Error::invalid(
            "confidence_balance_loss",
            format!(
                "{} low-confidence samples in a batch of {}",
                batch.n_confidence, batch.n_batch
            ),
        ));
    }
    Ok((batch.n_batch - batch.n_confidence) as f64 / batch.n_batch as f64)
}

/// Penalty coefficient `K`, a plain number with no gradient attached.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PenaltyK(pub f64);

impl PenaltyK {
    pub fn new(l_conf: f64, l_adv: f64) -> Self {
        PenaltyK(l_conf + l_adv)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn with_logits<T: Scalar>(
    logits: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<T> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let out = f(&mut tape, x)?;
    tape.value(out).item()
}

/// Mean negative log-probability of the true race, `[n, races]` logits.
pub fn discriminator_ce_loss<T: Scalar>(logits: &Tensor<T>, race_labels: &[usize]) -> Result<T> {
    with_logits(logits, |t, x| t.cross_entropy(x, race_labels))
}

/// Mean cross-entropy between the uniform target and the discriminator's
/// softmax. Accepts a single logit vector or an `[n, races]` batch.
pub fn adversarial_uniform_loss<T: Scalar>(logits: &Tensor<T>) -> Result<T> {
    let rows = if logits.ndim() == 1 {
        logits.clone().reshape(vec![1, logits.len()])?
    } else {
        logits.clone()
    };
    if rows.shape().get(1).copied().unwrap_or(0) < 2 {
        return Err(Error::invalid(
            "adversarial_uniform_loss",
            "need at least 2 races",
        ));
    }
    with_logits(&rows, |t, x| t.uniform_cross_entropy(x))
}

fn check_unit_rows<T: Scalar>(op: &'static str, what: &str, t: &Tensor<T>) -> Result<usize> {
    if t.ndim() != 2 {
        return Err(Error::shape(op, format!("{what} must be a matrix, got {:?}", t.shape())));
    }
    let d = t.shape()[1];
    let tol = if T::DTYPE == crate::tensor::DType::F32 { 1e-4 } else { 1e-9 };
    for (i, row) in t.data().chunks(d.max(1)).enumerate() {
        let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > tol {
            return Err(Error::invalid(
                op,
                format!("{what} row {i} has norm {norm}, expected unit length"),
            ));
        }
    }
    Ok(d)
}

/// Identity loss on a tape from cosines `[n, classes]`: the positive class
/// uses `cos(theta_y + m)`, every negative `cos(theta_j + K)`.
pub fn identity_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    cosines: Var,
    labels: &[usize],
    k: PenaltyK,
    cfg: &LossConfig,
) -> Result<Var> {
    if !(k.0 >= 0.0) {
        return Err(Error::invalid(
            "combined_loss",
            format!("penalty coefficient must be non-negative, got {}", k.0),
        ));
    }
    let logits = tape.margin_logits(
        cosines,
        Some(labels),
        T::of(cfg.scale),
        T::of(cfg.margin),
        T::of(k.0),
    )?;
    tape.cross_entropy(logits, labels)
}

/// Angular-margin loss with negative-class penalty `K`, from unit embeddings
/// `[n, d]` and unit class weights `[classes, d]`.
pub fn combined_loss<T: Scalar>(
    embeddings: &Tensor<T>,
    class_weights: &Tensor<T>,
    labels: &[usize],
    k: PenaltyK,
    cfg: &LossConfig,
) -> Result<T> {
    const OP: &str = "combined_loss";
    let d = check_unit_rows(OP, "embeddings", embeddings)?;
    let dw = check_unit_rows(OP, "class weights", class_weights)?;
    if d != dw {
        return Err(Error::shape(OP, format!("embedding dim {d} vs weight dim {dw}")));
    }
    let mut tape = Tape::new();
    let e = tape.constant(embeddings.clone());
    let w = tape.constant(class_weights.clone());
    let cos = tape.matmul_nt(e, w)?;
    let loss = identity_loss_on(&mut tape, cos, labels, k, cfg)?;
    tape.value(loss).item()
}

/// Plain angular-margin identity loss.
pub fn arcface_loss<T: Scalar>(
    embeddings: &Tensor<T>,
    class_weights: &Tensor<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<T> {
    combined_loss(embeddings, class_weights, labels, PenaltyK(0.0), cfg)
}
