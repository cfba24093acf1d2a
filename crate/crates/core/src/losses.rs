//! Distillation losses, as plain functions over pooled embeddings and as
//! tape builders for training.
//!
//! The training objective is
//! `lambda_cos * mean_taps(cos) + lambda_mse * mean_taps(mse)`; the L2
//! penalty on parameters is applied by the optimizer as decoupled weight
//! decay rather than differentiated here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Guard for normalising near-zero vectors.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cos: f64,
    pub lambda_mse: f64,
    /// Softmax temperature for the KL objective.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cos: 1.0,
            lambda_mse: 0.1,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<Vec<String>> {
        if [self.lambda_cos, self.lambda_mse].iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let mut warnings = Vec::new();
        if self.lambda_cos < self.lambda_mse {
            warnings.push(format!(
                "lambda_cos ({}) < lambda_mse ({}): the Euclidean term will dominate direction",
                self.lambda_cos, self.lambda_mse
            ));
        }
        Ok(warnings)
    }
}

fn check_dims(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: dimension {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `1 - <a, b> / (||a|| ||b||)`, in [0, 2].
pub fn cosine_loss(student_up: &[f64], teacher: &[f64]) -> Result<f64> {
    check_dims(student_up, teacher, "cosine_loss")?;
    let dot: f64 = student_up.iter().zip(teacher).map(|(a, b)| a * b).sum();
    let na = student_up.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_EPS);
    let nb = teacher.iter().map(|b| b * b).sum::<f64>().sqrt().max(NORM_EPS);
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// `(1/d) * sum((a - b)^2)`.
pub fn mse_loss(student_up: &[f64], teacher: &[f64]) -> Result<f64> {
    check_dims(student_up, teacher, "mse_loss")?;
    let d = student_up.len().max(1) as f64;
    Ok(student_up.iter().zip(teacher).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLoss {
    pub total: f64,
    /// Per-tap cosine losses, in tap order.
    pub cos: Vec<f64>,
    /// Per-tap MSE losses, in tap order.
    pub mse: Vec<f64>,
}

/// Combines per-tap terms with `weights`.
pub fn combine_tap_losses(cos: &[f64], mse: &[f64], weights: &LossWeights) -> Result<TrainLoss> {
    if cos.is_empty() || cos.len() != mse.len() {
        return Err(Error::Contract(format!(
            "need one cosine and one mse term per tap, got {} and {}",
            cos.len(),
            mse.len()
        )));
    }
    let n = cos.len() as f64;
    let total = weights.lambda_cos * cos.iter().sum::<f64>() / n + weights.lambda_mse * mse.iter().sum::<f64>() / n;
    Ok(TrainLoss {
        total,
        cos: cos.to_vec(),
        mse: mse.to_vec(),
    })
}

/// Training loss over `(student_up, teacher)` pairs, one per matched layer.
pub fn train_loss<A: AsRef<[f64]>, B: AsRef<[f64]>>(pairs: &[(A, B)], weights: &LossWeights) -> Result<TrainLoss> {
    if pairs.is_empty() {
        return Err(Error::Contract("train_loss needs at least one tap".into()));
    }
    let mut cos = Vec::with_capacity(pairs.len());
    let mut mse = Vec::with_capacity(pairs.len());
    for (s, t) in pairs {
        cos.push(cosine_loss(s.as_ref(), t.as_ref())?);
        mse.push(mse_loss(s.as_ref(), t.as_ref())?);
    }
    combine_tap_losses(&cos, &mse, weights)
}

/// Mean over unmasked positions of `KL(p_t || p_s)`, `p = softmax(logits / tau)`.
/// Logits are row-major `[L, classes]`.
pub fn kl_loss(teacher_logits: &[f64], student_logits: &[f64], classes: usize, mask: &[bool], tau: f64) -> Result<f64> {
    if teacher_logits.len() != student_logits.len() || teacher_logits.len() != classes * mask.len() {
        return Err(Error::Shape(format!(
            "kl_loss: teacher {} / student {} logits for {} positions x {classes} classes",
            teacher_logits.len(),
            student_logits.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Domain("kl_loss: mask has no true entries".into()));
    }
    let mut total = 0.0;
    for ((t, s), _) in teacher_logits
        .chunks(classes)
        .zip(student_logits.chunks(classes))
        .zip(mask)
        .filter(|(_, &m)| m)
    {
        let lt = log_softmax(t, tau);
        let ls = log_softmax(s, tau);
        total += lt
            .iter()
            .zip(&ls)
            .map(|(a, b)| if a.is_finite() { a.exp() * (a - b) } else { 0.0 })
            .sum::<f64>();
    }
    Ok((total / count as f64).max(0.0))
}

fn log_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v / tau).collect();
    let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scaled.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
    scaled.iter().map(|v| v - lse).collect()
}

/// Cosine loss on the tape: `1 - <a/|a|, b/|b|>`.
pub fn tape_cosine_loss<T: Real>(tape: &mut Tape<T>, student_up: Var, teacher: Var) -> Result<Var> {
    let a = tape.l2_normalize(student_up, NORM_EPS);
    let b = tape.l2_normalize(teacher, NORM_EPS);
    let dot = tape.dot(a, b)?;
    tape.combine(&[(dot, -1.0)], 1.0)
}

pub fn tape_mse_loss<T: Real>(tape: &mut Tape<T>, student_up: Var, teacher: Var) -> Result<Var> {
    tape.mean_squared_diff(student_up, teacher)
}

/// Per-tap cosine and MSE nodes plus the weighted total.
#[derive(Debug, Clone)]
pub struct TapeTrainLoss {
    pub total: Var,
    pub cos: Vec<Var>,
    pub mse: Vec<Var>,
}

pub fn tape_train_loss<T: Real>(tape: &mut Tape<T>, pairs: &[(Var, Var)], weights: &LossWeights) -> Result<TapeTrainLoss> {
    if pairs.is_empty() {
        return Err(Error::Contract("train_loss needs at least one tap".into()));
    }
    let n = pairs.len() as f64;
    let mut cos = Vec::with_capacity(pairs.len());
    let mut mse = Vec::with_capacity(pairs.len());
    let mut terms = Vec::with_capacity(2 * pairs.len());
    for &(s, t) in pairs {
        let c = tape_cosine_loss(tape, s, t)?;
        let m = tape_mse_loss(tape, s, t)?;
        terms.push((c, weights.lambda_cos / n));
        terms.push((m, weights.lambda_mse / n));
        cos.push(c);
        mse.push(m);
    }
    let total = tape.combine(&terms, 0.0)?;
    Ok(TapeTrainLoss { total, cos, mse })
}

/// KL objective on the tape against constant teacher logits.
pub fn tape_kl_loss<T: Real>(tape: &mut Tape<T>, student_logits: Var, teacher_logits: &Tensor<T>, mask: &[bool], tau: f64) -> Result<Var> {
    tape.kl_div(student_logits, teacher_logits, mask, tau)
}
