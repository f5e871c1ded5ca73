//! Training objectives for the two use cases, with the complex upstream
//! gradient `dJ/dRe(y_i) + i dJ/dIm(y_i)` for each sample of a batch.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UseCase {
    /// Real part regresses x, imaginary part regresses y.
    #[default]
    #[serde(rename = "I", alias = "i", alias = "1")]
    I,
    /// Real part is a LOS logit, imaginary part regresses the time of arrival.
    #[serde(rename = "II", alias = "ii", alias = "2")]
    II,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub use_case: UseCase,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            use_case: UseCase::I,
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("loss.{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    /// Batch loss. `first`/`second` are the targets carried by the real and
    /// imaginary output: `(x, y)` for use case I, `(los, toa)` for use case II.
    pub fn evaluate(&self, yhat: &[Complex64], first: &[f64], second: &[f64]) -> Result<LossValue> {
        match self.use_case {
            UseCase::I => loss_case_i(yhat, first, second, self.alpha),
            UseCase::II => loss_case_ii(yhat, first, second, self.beta),
        }
    }
}

/// Loss value with one complex upstream gradient per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Vec<Complex64>,
}

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::dim(op, "empty batch"));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len("mse", pred.len(), truth.len())?;
    let n = pred.len() as f64;
    let loss = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.iter().zip(truth).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on raw logits, `max(x,0) - xy + ln(1 + e^-|x|)` per entry.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len("bce_with_logits", logits.len(), labels.len())?;
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract(format!("label {bad} is not binary")));
    }
    let n = logits.len() as f64;
    let loss = logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
        .sum::<f64>()
        / n;
    let grad = logits.iter().zip(labels).map(|(&x, &y)| (sigmoid(x) - y) / n).collect();
    Ok((loss, grad))
}

fn split(yhat: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
    yhat.iter().map(|z| (z.re, z.im)).unzip()
}

pub fn loss_case_i(yhat: &[Complex64], a: &[f64], b: &[f64], alpha: f64) -> Result<LossValue> {
    same_len("loss_case_i", yhat.len(), a.len())?;
    same_len("loss_case_i", yhat.len(), b.len())?;
    let (re, im) = split(yhat);
    let (lr, gr) = mse(&re, a)?;
    let (li, gi) = mse(&im, b)?;
    Ok(LossValue {
        loss: alpha * lr + (1.0 - alpha) * li,
        grad: gr
            .iter()
            .zip(&gi)
            .map(|(r, i)| Complex64::new(alpha * r, (1.0 - alpha) * i))
            .collect(),
    })
}

pub fn loss_case_ii(yhat: &[Complex64], los: &[f64], toa: &[f64], beta: f64) -> Result<LossValue> {
    same_len("loss_case_ii", yhat.len(), los.len())?;
    same_len("loss_case_ii", yhat.len(), toa.len())?;
    let (re, im) = split(yhat);
    let (lb, gb) = bce_with_logits(&re, los)?;
    let (lt, gt) = mse(&im, toa)?;
    Ok(LossValue {
        loss: beta * lb + (1.0 - beta) * lt,
        grad: gb
            .iter()
            .zip(&gt)
            .map(|(r, i)| Complex64::new(beta * r, (1.0 - beta) * i))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositioningError {
    /// Mean squared Euclidean error.
    pub mse: f64,
    /// Euclidean error of each sample, in input order.
    pub per_sample: Vec<f64>,
}

pub fn positioning_error(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<PositioningError> {
    same_len("positioning_error", pred.len(), truth.len())?;
    let per_sample: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p[0] - t[0]).hypot(p[1] - t[1]))
        .collect();
    let mse = per_sample.iter().map(|e| e * e).sum::<f64>() / per_sample.len() as f64;
    Ok(PositioningError { mse, per_sample })
}
