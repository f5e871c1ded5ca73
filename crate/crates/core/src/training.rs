//! Local mini-batch SGD, the staged learning-rate schedule, and the
//! finite-difference gradient checker.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctensor::ComplexTensor;
use crate::cvnn::{backward_into, forward, NetConfig, NetParams, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, UseCase};
use crate::precise::batch_loss_dd;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Staged,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    /// Total iterations `T`. In federated runs, one iteration is one round.
    pub iterations: usize,
    pub batch_size: usize,
    /// SGD updates per iteration.
    pub local_steps: usize,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 1e-4,
            iterations: 85,
            batch_size: 32,
            local_steps: 1,
            seed: 0,
            schedule: Schedule::Staged,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("train.eta must be positive, got {}", self.eta)));
        }
        for (name, v) in [
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("local_steps", self.local_steps),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Learning rate at iteration `t` (1-based).
    pub fn lr(&self, t: usize) -> f64 {
        match self.schedule {
            Schedule::Staged => lr_schedule(self.eta, t),
            Schedule::Constant => self.eta,
        }
    }
}

/// `eta` up to iteration 50, `eta/5` through 75, then `eta/2`. The rise after
/// 75 is deliberate.
pub fn lr_schedule(eta: f64, t: usize) -> f64 {
    match t {
        0..=50 => eta,
        51..=75 => eta / 5.0,
        _ => eta / 2.0,
    }
}

/// One prepared training example: the normalised network input plus labels.
/// Seconds per unit of the TOA regression target. 10 ns keeps indoor
/// delays near 1.
pub const TOA_UNIT_S: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub input: ComplexTensor,
    pub position: [f64; 2],
    pub los: bool,
    /// Time of arrival in units of [`TOA_UNIT_S`].
    pub toa: f64,
}

impl Example {
    /// Targets for the real and imaginary output.
    pub fn targets(&self, case: UseCase) -> (f64, f64) {
        match case {
            UseCase::I => (self.position[0], self.position[1]),
            UseCase::II => (f64::from(u8::from(self.los)), self.toa),
        }
    }
}

/// `w <- w - lr g` on every planar array, modReLU offsets included.
pub fn sgd_step(params: &NetParams, grad: &NetParams, lr: f64) -> Result<NetParams> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grad, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(params: &mut NetParams, grad: &NetParams, lr: f64) -> Result<()> {
    if params.kind != grad.kind || params.modrelu_q.len() != grad.modrelu_q.len() {
        return Err(Error::dim("sgd_step", "gradient layout differs from parameters"));
    }
    for ((p, g), name) in params.tensors_mut().into_iter().zip(grad.tensors()).zip(TENSOR_NAMES) {
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "sgd_step",
                format!("{name}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        let (pr, pi) = p.planes_mut();
        for (w, d) in pr.iter_mut().zip(g.re()) {
            *w -= lr * d;
        }
        for (w, d) in pi.iter_mut().zip(g.im()) {
            *w -= lr * d;
        }
    }
    for (q, d) in params.modrelu_q.iter_mut().zip(&grad.modrelu_q) {
        *q -= lr * d;
    }
    Ok(())
}

/// Accumulates `src` into `acc` (same layout assumed).
fn accumulate(acc: &mut NetParams, src: &NetParams) {
    for (a, s) in acc.tensors_mut().into_iter().zip(src.tensors()) {
        let (ar, ai) = a.planes_mut();
        for (x, y) in ar.iter_mut().zip(s.re()) {
            *x += y;
        }
        for (x, y) in ai.iter_mut().zip(s.im()) {
            *x += y;
        }
    }
    for (x, y) in acc.modrelu_q.iter_mut().zip(&src.modrelu_q) {
        *x += y;
    }
}

const GRAD_CHUNK: usize = 8;

/// Network outputs for a batch, in order.
pub fn predict_batch(params: &NetParams, net: &NetConfig, batch: &[&Example]) -> Result<Vec<Complex64>> {
    batch
        .par_iter()
        .map(|ex| forward(params, net, &ex.input).map(|(y, _)| y))
        .collect()
}

pub fn batch_loss(params: &NetParams, net: &NetConfig, loss: &LossConfig, batch: &[&Example]) -> Result<f64> {
    let yhat = predict_batch(params, net, batch)?;
    let (t1, t2): (Vec<f64>, Vec<f64>) = batch.iter().map(|ex| ex.targets(loss.use_case)).unzip();
    Ok(loss.evaluate(&yhat, &t1, &t2)?.loss)
}

/// Batch loss and its gradient. Per-sample work runs in parallel; gradients
/// are summed sequentially in batch order so the result is reproducible.
pub fn batch_gradient(
    params: &NetParams,
    net: &NetConfig,
    loss: &LossConfig,
    batch: &[&Example],
) -> Result<(f64, NetParams)> {
    let passes = batch
        .par_iter()
        .map(|ex| forward(params, net, &ex.input))
        .collect::<Result<Vec<_>>>()?;
    let yhat: Vec<Complex64> = passes.iter().map(|(y, _)| *y).collect();
    let (t1, t2): (Vec<f64>, Vec<f64>) = batch.iter().map(|ex| ex.targets(loss.use_case)).unzip();
    let value = loss.evaluate(&yhat, &t1, &t2)?;
    // Fixed-size chunks keep the summation order independent of the thread count.
    let partials = passes
        .par_chunks(GRAD_CHUNK)
        .zip(value.grad.par_chunks(GRAD_CHUNK))
        .map(|(chunk, ups)| {
            let mut acc = params.zeros_like();
            for ((_, cache), up) in chunk.iter().zip(ups) {
                backward_into(params, net, cache, *up, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parts = partials.into_iter();
    let mut total = parts.next().unwrap_or_else(|| params.zeros_like());
    for g in parts {
        accumulate(&mut total, &g);
    }
    Ok((value.loss, total))
}

/// Draws index batches without replacement, reshuffling at every epoch. The
/// last batch of an epoch is the remainder, possibly smaller than requested.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

/// Seed of the batch sampler owned by client `client`. Centralized training
/// uses client 0, so a one-client federation sees the same batches.
pub fn sampler_seed(seed: u64, client: usize) -> u64 {
    seed ^ 0x5EED_0000_0000_0000 ^ (client as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub params: NetParams,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    /// Samples consumed over all local steps.
    pub samples: usize,
}

/// `local_steps` SGD updates on `shard` at learning rate `lr`.
pub fn local_train(
    params: &NetParams,
    net: &NetConfig,
    shard: &[Example],
    train: &TrainConfig,
    loss: &LossConfig,
    sampler: &mut BatchSampler,
    lr: f64,
) -> Result<LocalOutcome> {
    if shard.is_empty() {
        return Err(Error::Contract("local training on an empty shard".into()));
    }
    if train.local_steps == 0 || train.batch_size == 0 {
        return Err(Error::config("local_steps and batch_size must be at least 1"));
    }
    let mut p = params.clone();
    let mut losses = Vec::with_capacity(train.local_steps);
    let mut samples = 0;
    for _ in 0..train.local_steps {
        let idx = sampler.next_batch(train.batch_size);
        let batch: Vec<&Example> = idx.iter().map(|&i| &shard[i]).collect();
        let (l, g) = batch_gradient(&p, net, loss, &batch)?;
        sgd_step_in_place(&mut p, &g, lr)?;
        losses.push(l);
        samples += batch.len();
    }
    Ok(LocalOutcome {
        params: p,
        losses,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Centralized training for `train.iterations` iterations.
pub fn train_centralized(
    init: &NetParams,
    net: &NetConfig,
    data: &[Example],
    train: &TrainConfig,
    loss: &LossConfig,
) -> Result<(NetParams, Vec<IterationRecord>)> {
    let mut sampler = BatchSampler::new(data.len(), sampler_seed(train.seed, 0));
    let mut params = init.clone();
    let mut trace = Vec::with_capacity(train.iterations);
    for t in 1..=train.iterations {
        let lr = train.lr(t);
        let out = local_train(&params, net, data, train, loss, &mut sampler, lr)?;
        params = out.params;
        let mean = out.losses.iter().sum::<f64>() / out.losses.len() as f64;
        trace.push(IterationRecord { t, loss: mean, lr });
    }
    Ok((params, trace))
}

/// Held-out metrics of a parameter set. Positioning fields are filled for
/// use case I, TOA/LOS fields for use case II.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub loss: f64,
    /// Mean squared Euclidean error in m^2.
    pub positioning_mse: Option<f64>,
    /// Mean Euclidean error in m.
    pub mean_positioning_error: Option<f64>,
    /// Mean squared TOA error in squared target units.
    pub toa_mse: Option<f64>,
    pub los_accuracy: Option<f64>,
}

/// Metrics plus per-sample Euclidean errors (use case I only) for CDFs.
pub fn evaluate(
    params: &NetParams,
    net: &NetConfig,
    loss: &LossConfig,
    data: &[Example],
) -> Result<(EvalMetrics, Vec<f64>)> {
    let batch: Vec<&Example> = data.iter().collect();
    let yhat = predict_batch(params, net, &batch)?;
    let (t1, t2): (Vec<f64>, Vec<f64>) = batch.iter().map(|ex| ex.targets(loss.use_case)).unzip();
    let mut m = EvalMetrics {
        samples: data.len(),
        loss: loss.evaluate(&yhat, &t1, &t2)?.loss,
        ..EvalMetrics::default()
    };
    let mut per_sample = Vec::new();
    match loss.use_case {
        UseCase::I => {
            let pred: Vec<[f64; 2]> = yhat.iter().map(|y| [y.re, y.im]).collect();
            let truth: Vec<[f64; 2]> = data.iter().map(|ex| ex.position).collect();
            let e = crate::losses::positioning_error(&pred, &truth)?;
            m.positioning_mse = Some(e.mse);
            m.mean_positioning_error = Some(e.per_sample.iter().sum::<f64>() / e.per_sample.len() as f64);
            per_sample = e.per_sample;
        }
        UseCase::II => {
            let n = data.len() as f64;
            let correct = yhat.iter().zip(data).filter(|(y, ex)| (y.re >= 0.0) == ex.los).count();
            m.los_accuracy = Some(correct as f64 / n);
            m.toa_mse = Some(
                yhat.iter()
                    .zip(data)
                    .map(|(y, ex)| (y.im - ex.toa).powi(2))
                    .sum::<f64>()
                    / n,
            );
        }
    }
    Ok((m, per_sample))
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Location of one real scalar inside a parameter set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ScalarIndex {
    pub tensor: &'static str,
    pub index: usize,
    /// `"re"`, `"im"`, or `"q"` for modReLU offsets.
    pub component: &'static str,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerError {
    pub tensor: &'static str,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<ScalarIndex>,
    pub per_tensor: Vec<LayerError>,
    pub checked: usize,
}

/// Scales the analytic gradient of one complex weight before comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultInjection {
    pub tensor: usize,
    pub index: usize,
    pub factor: f64,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Central differences over every real scalar of `params` (real and
/// imaginary parts separately; imaginary parts skipped for the real baseline).
/// Perturbed losses are evaluated in double-double precision by
/// [`crate::precise`], so the comparison is limited by the step, not by
/// rounding in the loss.
pub fn grad_check(
    params: &NetParams,
    net: &NetConfig,
    loss: &LossConfig,
    batch: &[&Example],
    step: f64,
    fault: Option<FaultInjection>,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::config("grad-check step must be positive"));
    }
    let (_, mut grad) = batch_gradient(params, net, loss, batch)?;
    if let Some(f) = fault {
        let t = grad
            .tensors_mut()
            .into_iter()
            .nth(f.tensor)
            .ok_or_else(|| Error::config(format!("fault tensor {} out of range", f.tensor)))?;
        if f.index >= t.len() {
            return Err(Error::config(format!("fault index {} out of range", f.index)));
        }
        let z = t.at(f.index);
        t.set_at(f.index, z * f.factor);
    }

    let mut probes: Vec<(usize, usize, usize)> = Vec::new();
    let with_imag = params.kind == crate::cvnn::ModelKind::Cvnn;
    for (ti, t) in params.tensors().iter().enumerate() {
        for k in 0..t.len() {
            probes.push((ti, k, 0));
            if with_imag {
                probes.push((ti, k, 1));
            }
        }
    }
    for k in 0..params.modrelu_q.len() {
        probes.push((TENSOR_NAMES.len(), k, 2));
    }

    let eval = |p: &NetParams| batch_loss_dd(p, net, loss, batch);
    let errors = probes
        .par_iter()
        .map(|&(ti, k, comp)| -> Result<f64> {
            let mut plus = params.clone();
            let mut minus = params.clone();
            // The perturbed values are rounded to f64; divide by the step
            // actually taken rather than the nominal one.
            let (analytic, taken) = match comp {
                2 => {
                    plus.modrelu_q[k] += step;
                    minus.modrelu_q[k] -= step;
                    (grad.modrelu_q[k], plus.modrelu_q[k] - minus.modrelu_q[k])
                }
                _ => {
                    let bump = |p: &mut NetParams, d: f64| -> f64 {
                        let t = p.tensors_mut().into_iter().nth(ti).expect("tensor index");
                        let v = if comp == 0 {
                            &mut t.re_mut()[k]
                        } else {
                            &mut t.im_mut()[k]
                        };
                        *v += d;
                        *v
                    };
                    let taken = bump(&mut plus, step) - bump(&mut minus, -step);
                    let g = grad.tensors()[ti];
                    (if comp == 0 { g.re()[k] } else { g.im()[k] }, taken)
                }
            };
            let numeric = (eval(&plus)? - eval(&minus)?).to_f64() / taken;
            Ok(rel_err(analytic, numeric))
        })
        .collect::<Result<Vec<_>>>()?;

    let name = |ti: usize| TENSOR_NAMES.get(ti).copied().unwrap_or("modrelu_q");
    let mut per_tensor: Vec<LayerError> = Vec::new();
    let mut worst: Option<(f64, usize)> = None;
    for (i, (&(ti, _, _), &e)) in probes.iter().zip(&errors).enumerate() {
        match per_tensor.iter_mut().find(|l| l.tensor == name(ti)) {
            Some(l) => l.max_rel_err = l.max_rel_err.max(e),
            None => per_tensor.push(LayerError {
                tensor: name(ti),
                max_rel_err: e,
            }),
        }
        if worst.is_none_or(|(w, _)| e > w) {
            worst = Some((e, i));
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst.map_or(0.0, |(e, _)| e),
        worst: worst.map(|(_, i)| {
            let (ti, k, comp) = probes[i];
            ScalarIndex {
                tensor: name(ti),
                index: k,
                component: ["re", "im", "q"][comp],
            }
        }),
        per_tensor,
        checked: probes.len(),
    })
}
