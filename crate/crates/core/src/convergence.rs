//! The convergence bound for partial-transmission federated training and
//! its empirical check on a strongly convex complex least-squares problem.
//!
//! Gradients here use the crate-wide convention `dJ/da + i dJ/db`, which is
//! the gradient of `J` over the real-lifted vector `[Re w; Im w]`. `Z` and
//! `mu` are the extreme eigenvalues of the real-lifted Hessian, so a step of
//! `1/Z` is the classical smooth, strongly convex step.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctensor::ComplexTensor;
use crate::error::{Error, Result};
use crate::federated::{aggregate, AggregationMode, MaskPolicy, MaskSampler, TransmissionMask, TRACE_SCHEMA_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    /// Lipschitz constant of the gradient.
    pub z: f64,
    /// Strong-convexity constant.
    pub mu: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    /// Samples per round over all clients.
    pub n: f64,
    /// Expected number of untransmitted sample-halves per round.
    pub e: f64,
}

impl BoundConstants {
    pub fn new(z: f64, mu: f64, zeta1: f64, zeta2: f64, n: f64, e: f64) -> Result<Self> {
        let c = Self {
            z,
            mu,
            zeta1,
            zeta2,
            n,
            e,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.z, self.mu, self.zeta1, self.zeta2, self.n, self.e];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("bound constants must be finite"));
        }
        if !(self.mu > 0.0 && self.mu <= self.z) {
            return Err(Error::config(format!(
                "need 0 < mu <= Z, got mu = {}, Z = {}",
                self.mu, self.z
            )));
        }
        if self.zeta1 < 0.0 || self.zeta2 < 0.0 {
            return Err(Error::config("zeta1 and zeta2 must be nonnegative"));
        }
        if !(self.n > 0.0) || self.e < 0.0 || self.e > 2.0 * self.n {
            return Err(Error::config(format!(
                "need N > 0 and 0 <= E <= 2N, got N = {}, E = {}",
                self.n, self.e
            )));
        }
        Ok(())
    }

    /// Contraction factor `1 - mu/Z + 4 mu zeta2 E / (N Z)`.
    pub fn a(&self) -> f64 {
        1.0 - self.mu / self.z + 4.0 * self.mu * self.zeta2 * self.e / (self.n * self.z)
    }

    /// Additive term per round, `2 zeta1 E / (Z N)`.
    pub fn drift(&self) -> f64 {
        2.0 * self.zeta1 * self.e / (self.z * self.n)
    }

    /// Limit of the bound as `t` grows, when `A < 1`.
    pub fn asymptotic_gap(&self) -> Option<f64> {
        let a = self.a();
        (a < 1.0).then(|| self.drift() / (1.0 - a))
    }
}

/// `E = 2N - sum |B_u| p_r,u - sum |B_u| p_m,u`.
pub fn expected_shortfall(batch_sizes: &[usize], p_r: &[f64], p_m: &[f64]) -> Result<f64> {
    if p_r.len() != batch_sizes.len() || p_m.len() != batch_sizes.len() {
        return Err(Error::dim(
            "expected_shortfall",
            format!(
                "{} batch sizes, {} real and {} imaginary probabilities",
                batch_sizes.len(),
                p_r.len(),
                p_m.len()
            ),
        ));
    }
    if let Some(p) = p_r.iter().chain(p_m).find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::config(format!("transmission probability {p} outside [0, 1]")));
    }
    let n: f64 = batch_sizes.iter().map(|&b| b as f64).sum();
    let sent: f64 = batch_sizes
        .iter()
        .zip(p_r.iter().zip(p_m))
        .map(|(&b, (r, m))| b as f64 * (r + m))
        .sum();
    Ok(2.0 * n - sent)
}

/// Upper bound on the expected gap after `t` rounds, starting from
/// `initial_gap`: `A^t g0 + (1 - A^t)/(1 - A) * 2 zeta1 E / (Z N)`, which is
/// the recursion `g <- A g + 2 zeta1 E/(Z N)` iterated `t` times. `A = 1`
/// uses the limit `t`; `A > 1` gives no bound.
pub fn bound_at(t: usize, c: &BoundConstants, initial_gap: f64) -> Result<f64> {
    c.validate()?;
    let a = c.a();
    if a > 1.0 {
        return Err(Error::Contract(format!(
            "contraction factor A = {a} exceeds 1; the bound diverges"
        )));
    }
    let at = a.powi(t as i32);
    let coeff = if a == 1.0 { t as f64 } else { (1.0 - at) / (1.0 - a) };
    Ok(at * initial_gap + coeff * c.drift())
}

// ---------------------------------------------------------------------------
// Toy problem

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub clients: usize,
    pub rows_per_client: usize,
    pub dim: usize,
    /// Spread of the per-client optima around a shared one.
    pub heterogeneity: f64,
    pub noise: f64,
    /// Distance of the starting point from the optimum.
    pub init_distance: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            clients: 4,
            rows_per_client: 12,
            dim: 3,
            heterogeneity: 1.0,
            noise: 0.1,
            init_distance: 3.0,
            seed: 0,
        }
    }
}

/// One client's rows of `X` (row-major, `rows x dim`) and targets `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyClient {
    pub x: Vec<Complex64>,
    pub y: Vec<Complex64>,
}

impl ToyClient {
    pub fn rows(&self) -> usize {
        self.y.len()
    }
}

/// `J(w) = (1/N) sum_u ||X_u w - y_u||^2` with `N` the total row count.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    pub dim: usize,
    pub clients: Vec<ToyClient>,
    pub optimum: ComplexTensor,
    pub optimal_loss: f64,
    pub init: ComplexTensor,
}

fn cnormal(rng: &mut ChaCha8Rng) -> Complex64 {
    let (a, b): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
    Complex64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
}

/// Real-lifted rows: row `k` of `X` maps `[a; b]` to `[Re; Im]` of `x_k w`.
fn lifted_normal_equations(dim: usize, clients: &[ToyClient], n: f64) -> (DMatrix<f64>, DVector<f64>) {
    let mut h = DMatrix::<f64>::zeros(2 * dim, 2 * dim);
    let mut rhs = DVector::<f64>::zeros(2 * dim);
    for c in clients {
        for (k, y) in c.y.iter().enumerate() {
            let row = &c.x[k * dim..(k + 1) * dim];
            // Re part row: [xr, -xi]; Im part row: [xi, xr].
            let mut re_row = vec![0.0; 2 * dim];
            let mut im_row = vec![0.0; 2 * dim];
            for j in 0..dim {
                re_row[j] = row[j].re;
                re_row[dim + j] = -row[j].im;
                im_row[j] = row[j].im;
                im_row[dim + j] = row[j].re;
            }
            for i in 0..2 * dim {
                for j in 0..2 * dim {
                    h[(i, j)] += re_row[i] * re_row[j] + im_row[i] * im_row[j];
                }
                rhs[i] += re_row[i] * y.re + im_row[i] * y.im;
            }
        }
    }
    let s = 2.0 / n;
    (h * s, rhs * s)
}

impl ToyProblem {
    pub fn generate(cfg: &ToyConfig) -> Result<Self> {
        if cfg.clients == 0 || cfg.rows_per_client == 0 || cfg.dim == 0 {
            return Err(Error::config(
                "toy problem needs at least one client, row and dimension",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shared: Vec<Complex64> = (0..cfg.dim).map(|_| cnormal(&mut rng)).collect();
        let clients = (0..cfg.clients)
            .map(|_| {
                let local: Vec<Complex64> = shared
                    .iter()
                    .map(|s| s + cnormal(&mut rng) * cfg.heterogeneity)
                    .collect();
                let x: Vec<Complex64> = (0..cfg.rows_per_client * cfg.dim).map(|_| cnormal(&mut rng)).collect();
                let y = (0..cfg.rows_per_client)
                    .map(|k| {
                        let row = &x[k * cfg.dim..(k + 1) * cfg.dim];
                        row.iter().zip(&local).map(|(a, b)| a * b).sum::<Complex64>() + cnormal(&mut rng) * cfg.noise
                    })
                    .collect();
                ToyClient { x, y }
            })
            .collect();
        let mut p = Self::from_clients(cfg.dim, clients)?;
        let dir: Vec<Complex64> = (0..cfg.dim).map(|_| cnormal(&mut rng)).collect();
        let norm = dir.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let init: Vec<Complex64> = p
            .optimum
            .iter()
            .zip(&dir)
            .map(|(o, d)| o + d * (cfg.init_distance / norm))
            .collect();
        p.init = ComplexTensor::from_complex(&[cfg.dim], &init)?;
        Ok(p)
    }

    /// Builds a problem from explicit client data; the start point is zero.
    pub fn from_clients(dim: usize, clients: Vec<ToyClient>) -> Result<Self> {
        for (u, c) in clients.iter().enumerate() {
            if c.x.len() != c.rows() * dim || c.rows() == 0 {
                return Err(Error::dim(
                    "toy problem",
                    format!("client {u}: X has {} entries for {} rows", c.x.len(), c.rows()),
                ));
            }
        }
        let n = clients.iter().map(|c| c.rows()).sum::<usize>() as f64;
        let (h, rhs) = lifted_normal_equations(dim, &clients, n);
        let chol = h
            .clone()
            .cholesky()
            .ok_or_else(|| Error::config("design is singular: the objective is not strongly convex (mu = 0)"))?;
        let v = chol.solve(&rhs);
        let optimum = ComplexTensor::from_parts(
            &[dim],
            v.rows(0, dim).iter().copied().collect(),
            v.rows(dim, dim).iter().copied().collect(),
        )?;
        let mut p = Self {
            dim,
            clients,
            optimum,
            optimal_loss: 0.0,
            init: ComplexTensor::zeros(&[dim]),
        };
        p.optimal_loss = p.loss(&p.optimum);
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.clients.iter().map(|c| c.rows()).sum()
    }

    pub fn batch_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.rows()).collect()
    }

    fn residual(&self, u: usize, k: usize, w: &ComplexTensor) -> Complex64 {
        let c = &self.clients[u];
        let row = &c.x[k * self.dim..(k + 1) * self.dim];
        row.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<Complex64>() - c.y[k]
    }

    pub fn loss(&self, w: &ComplexTensor) -> f64 {
        let mut s = 0.0;
        for (u, c) in self.clients.iter().enumerate() {
            for k in 0..c.rows() {
                s += self.residual(u, k, w).norm_sqr();
            }
        }
        s / self.n() as f64
    }

    pub fn gap(&self, w: &ComplexTensor) -> f64 {
        self.loss(w) - self.optimal_loss
    }

    /// Gradient of the single-row loss `|x_k w - y_k|^2`: `2 conj(x_k) r_k`.
    pub fn sample_gradient(&self, u: usize, k: usize, w: &ComplexTensor) -> Vec<Complex64> {
        let r = self.residual(u, k, w);
        let row = &self.clients[u].x[k * self.dim..(k + 1) * self.dim];
        row.iter().map(|x| 2.0 * x.conj() * r).collect()
    }

    fn sum_gradient(&self, u: usize, w: &ComplexTensor) -> Vec<Complex64> {
        let mut g = vec![Complex64::new(0.0, 0.0); self.dim];
        for k in 0..self.clients[u].rows() {
            for (a, b) in g.iter_mut().zip(self.sample_gradient(u, k, w)) {
                *a += b;
            }
        }
        g
    }

    /// Gradient of client `u`'s mean row loss.
    pub fn client_gradient(&self, u: usize, w: &ComplexTensor) -> ComplexTensor {
        let rows = self.clients[u].rows() as f64;
        let g: Vec<Complex64> = self.sum_gradient(u, w).into_iter().map(|z| z / rows).collect();
        ComplexTensor::from_complex(&[self.dim], &g).expect("dimension matches")
    }

    pub fn gradient(&self, w: &ComplexTensor) -> ComplexTensor {
        let mut g = vec![Complex64::new(0.0, 0.0); self.dim];
        for u in 0..self.clients.len() {
            for (a, b) in g.iter_mut().zip(self.sum_gradient(u, w)) {
                *a += b;
            }
        }
        let n = self.n() as f64;
        let g: Vec<Complex64> = g.into_iter().map(|z| z / n).collect();
        ComplexTensor::from_complex(&[self.dim], &g).expect("dimension matches")
    }

    /// `(Z, mu)`: extreme eigenvalues of the real-lifted Hessian.
    pub fn curvature(&self) -> (f64, f64) {
        let (h, _) = lifted_normal_equations(self.dim, &self.clients, self.n() as f64);
        let eig = SymmetricEigen::new(h).eigenvalues;
        let z = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mu = eig.iter().copied().fold(f64::INFINITY, f64::min);
        (z, mu)
    }

    /// Same problem with every `X` and `y` entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let clients = self
            .clients
            .iter()
            .map(|cl| ToyClient {
                x: cl.x.iter().map(|z| z * c).collect(),
                y: cl.y.iter().map(|z| z * c).collect(),
            })
            .collect();
        let mut p = Self::from_clients(self.dim, clients)?;
        p.init = self.init.clone();
        Ok(p)
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// One probe of the gradient-growth condition: `(||grad J(w)||^2, s)` with `s`
/// the largest squared norm of the real or imaginary part of any per-row gradient.
fn zeta_probe(p: &ToyProblem, w: &ComplexTensor) -> (f64, f64) {
    let g = p.gradient(w);
    let big = norm_sq(g.re()) + norm_sq(g.im());
    let mut s: f64 = 0.0;
    for (u, c) in p.clients.iter().enumerate() {
        for k in 0..c.rows() {
            let sg = p.sample_gradient(u, k, w);
            let re: f64 = sg.iter().map(|z| z.re * z.re).sum();
            let im: f64 = sg.iter().map(|z| z.im * z.im).sum();
            s = s.max(re).max(im);
        }
    }
    (big, s)
}

fn probe_points(p: &ToyProblem, count: usize, rng: &mut ChaCha8Rng) -> Vec<ComplexTensor> {
    let base = 1.0 + p.optimum.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    (0..count)
        .map(|_| {
            let radius = base * 10f64.powf(rng.random_range(-4.0..2.0));
            let dir: Vec<Complex64> = (0..p.dim).map(|_| cnormal(rng)).collect();
            let norm = dir.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let w: Vec<Complex64> = p
                .optimum
                .iter()
                .zip(&dir)
                .map(|(o, d)| o + d * (radius / norm))
                .collect();
            ComplexTensor::from_complex(&[p.dim], &w).expect("dimension matches")
        })
        .collect()
}

/// Smallest `zeta1 + zeta2` with `zeta1 + zeta2 G_i >= s_i` for every probe
/// `(G_i, s_i)` and `zeta1, zeta2 >= 0`. The objective, as a function of
/// `zeta2`, is convex and piecewise linear, so its minimum sits at a breakpoint.
pub fn fit_zeta_lp(points: &[(f64, f64)]) -> (f64, f64) {
    let zeta1_for = |z2: f64| points.iter().map(|&(g, s)| s - z2 * g).fold(0.0, f64::max);
    let mut candidates = vec![0.0];
    for (i, &(gi, si)) in points.iter().enumerate() {
        if gi > 0.0 {
            candidates.push(si / gi);
        }
        for &(gj, sj) in &points[i + 1..] {
            if gi != gj {
                let z2 = (si - sj) / (gi - gj);
                if z2 > 0.0 {
                    candidates.push(z2);
                }
            }
        }
    }
    let mut best = (zeta1_for(0.0), 0.0);
    for z2 in candidates {
        let z1 = zeta1_for(z2);
        if z1 + z2 < best.0 + best.1 {
            best = (z1, z2);
        }
    }
    best
}

/// Upper hull of the probe cloud; only these points can bind the fit.
fn upper_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZetaFit {
    pub zeta1: f64,
    pub zeta2: f64,
    pub probes: usize,
    pub refinements: usize,
}

/// Fits the gradient-growth constants on sampled parameters, then keeps
/// adding violating fresh probes and refitting until a fresh batch passes.
pub fn fit_zeta(p: &ToyProblem, probes: usize, seed: u64) -> ZetaFit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<(f64, f64)> = probe_points(p, probes, &mut rng)
        .iter()
        .map(|w| zeta_probe(p, w))
        .collect();
    let mut refinements = 0;
    loop {
        let hull = upper_hull(&points);
        let (z1, z2) = fit_zeta_lp(&hull);
        let fresh: Vec<(f64, f64)> = probe_points(p, probes, &mut rng)
            .iter()
            .map(|w| zeta_probe(p, w))
            .collect();
        let violators: Vec<(f64, f64)> = fresh
            .into_iter()
            .filter(|&(g, s)| s > (z1 + z2 * g) * (1.0 + 1e-12))
            .collect();
        if violators.is_empty() || refinements >= 20 {
            return ZetaFit {
                zeta1: z1,
                zeta2: z2,
                probes: points.len(),
                refinements,
            };
        }
        points.extend(violators);
        refinements += 1;
    }
}

/// Constants of the bound for `p` under per-client transmission probabilities.
pub fn estimate_constants(p: &ToyProblem, p_r: &[f64], p_m: &[f64], seed: u64) -> Result<BoundConstants> {
    let (z, mu) = p.curvature();
    if !(mu > 1e-12 * z) {
        return Err(Error::config(format!(
            "objective is not strongly convex: smallest Hessian eigenvalue {mu:e}"
        )));
    }
    let fit = fit_zeta(p, 256, seed);
    let e = expected_shortfall(&p.batch_sizes(), p_r, p_m)?;
    BoundConstants::new(z, mu.min(z), fit.zeta1, fit.zeta2, p.n() as f64, e)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub probes: usize,
    /// Largest `||grad(w1) - grad(w2)|| / (Z ||w1 - w2||)`; at most 1 when Lipschitz holds.
    pub lipschitz_ratio: f64,
    /// Smallest slack of the strong-convexity inequality, relative to its scale.
    pub convexity_slack: f64,
    /// Largest `s / (zeta1 + zeta2 G)` over the probes.
    pub zeta_ratio: f64,
}

impl AssumptionCheck {
    pub fn holds(&self) -> bool {
        self.lipschitz_ratio <= 1.0 + 1e-9 && self.convexity_slack >= -1e-9 && self.zeta_ratio <= 1.0 + 1e-9
    }
}

fn sub(a: &ComplexTensor, b: &ComplexTensor) -> ComplexTensor {
    a.add(&b.scale(Complex64::new(-1.0, 0.0))).expect("same shape")
}

fn real_dot(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
    a.re().iter().zip(b.re()).map(|(x, y)| x * y).sum::<f64>()
        + a.im().iter().zip(b.im()).map(|(x, y)| x * y).sum::<f64>()
}

/// Checks smoothness, strong convexity and gradient growth on random probe pairs.
pub fn check_assumptions(p: &ToyProblem, c: &BoundConstants, pairs: usize, seed: u64) -> AssumptionCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let a = probe_points(p, pairs, &mut rng);
    let b = probe_points(p, pairs, &mut rng);
    let mut out = AssumptionCheck {
        probes: pairs,
        lipschitz_ratio: 0.0,
        convexity_slack: f64::INFINITY,
        zeta_ratio: 0.0,
    };
    for (w1, w2) in a.iter().zip(&b) {
        let d = sub(w2, w1);
        let dn = real_dot(&d, &d);
        let (g1, g2) = (p.gradient(w1), p.gradient(w2));
        let dg = sub(&g2, &g1);
        out.lipschitz_ratio = out.lipschitz_ratio.max(real_dot(&dg, &dg).sqrt() / (c.z * dn.sqrt()));
        let (j1, j2) = (p.loss(w1), p.loss(w2));
        let lower = j1 + real_dot(&d, &g1) + 0.5 * c.mu * dn;
        out.convexity_slack = out.convexity_slack.min((j2 - lower) / j2.abs().max(1.0));
        let (big, s) = zeta_probe(p, w1);
        let cap = c.zeta1 + c.zeta2 * big;
        out.zeta_ratio = out.zeta_ratio.max(if cap > 0.0 {
            s / cap
        } else if s > 0.0 {
            f64::INFINITY
        } else {
            0.0
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Empirical validation

/// Runs federated gradient descent on `p`: every client takes one full-batch
/// step of `lr` on its mean loss, then the server aggregates. Returns the
/// optimality gap at rounds `0..=rounds`.
pub fn run_toy_federation(
    p: &ToyProblem,
    rounds: usize,
    policy: &MaskPolicy,
    mode: AggregationMode,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let clients = p.clients.len();
    policy.validate(clients, rounds)?;
    let mut masks = MaskSampler::new(policy.clone(), clients, seed);
    let sizes = p.batch_sizes();
    let mut w = p.init.clone();
    let mut gaps = Vec::with_capacity(rounds + 1);
    gaps.push(p.gap(&w));
    for t in 1..=rounds {
        let locals: Vec<ComplexTensor> = (0..clients)
            .map(|u| sub(&w, &p.client_gradient(u, &w).scale(Complex64::new(lr, 0.0))))
            .collect();
        let mask: TransmissionMask = masks.next(t)?;
        w = aggregate(&locals, &sizes, &mask, &w, mode)?;
        gaps.push(p.gap(&w));
    }
    Ok(gaps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub rounds: usize,
    pub seeds: usize,
    pub mask_policy: MaskPolicy,
    pub aggregation: AggregationMode,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            rounds: 60,
            seeds: 20,
            mask_policy: MaskPolicy::AlwaysFull,
            aggregation: AggregationMode::Weighted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub t: usize,
    /// `None` when the bound diverges (`A > 1`).
    pub bound: Option<f64>,
    pub empirical_mean_gap: f64,
    pub empirical_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub constants: BoundConstants,
    pub a: f64,
    pub initial_gap: f64,
    pub rows: Vec<BoundRow>,
    /// Largest per-round ratio of the mean gap while it exceeds `1e-10` of the start.
    pub max_decay_ratio: Option<f64>,
    /// Whether the mean gap stayed under the bound at every round (false if the bound diverges).
    pub bound_holds: bool,
    pub final_mean_gap: f64,
}

/// Runs the toy federation over `cfg.seeds` mask streams at `lr = 1/Z` and
/// compares the mean gap with [`bound_at`] round by round.
pub fn validate_bound(p: &ToyProblem, c: &BoundConstants, cfg: &ValidationConfig) -> Result<BoundReport> {
    c.validate()?;
    if cfg.seeds == 0 {
        return Err(Error::config("validation needs at least one seed"));
    }
    let lr = 1.0 / c.z;
    let runs = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|s| run_toy_federation(p, cfg.rounds, &cfg.mask_policy, cfg.aggregation, lr, s))
        .collect::<Result<Vec<_>>>()?;
    let k = runs.len() as f64;
    let initial_gap = runs[0][0];
    let mut rows = Vec::with_capacity(cfg.rounds);
    let mut means = vec![initial_gap];
    let mut bound_holds = true;
    for t in 1..=cfg.rounds {
        let mean = runs.iter().map(|r| r[t]).sum::<f64>() / k;
        let var = runs.iter().map(|r| (r[t] - mean).powi(2)).sum::<f64>() / k;
        let bound = bound_at(t, c, initial_gap).ok();
        match bound {
            Some(b) if mean <= b * (1.0 + 1e-9) + 1e-12 * initial_gap => {}
            _ => bound_holds = false,
        }
        means.push(mean);
        rows.push(BoundRow {
            t,
            bound,
            empirical_mean_gap: mean,
            empirical_std: var.sqrt(),
        });
    }
    let floor = 1e-10 * initial_gap;
    let max_decay_ratio = means
        .windows(2)
        .take_while(|w| w[0] > floor && w[1] > floor)
        .map(|w| w[1] / w[0])
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
    Ok(BoundReport {
        a: c.a(),
        constants: c.clone(),
        initial_gap,
        final_mean_gap: *means.last().expect("at least the initial gap"),
        rows,
        max_decay_ratio,
        bound_holds,
    })
}

pub const BOUND_CSV_HEADER: &str = "schema_version,t,bound,empirical_mean_gap,empirical_std";

pub fn report_csv(report: &BoundReport) -> String {
    let mut s = String::from(BOUND_CSV_HEADER);
    s.push('\n');
    for r in &report.rows {
        let b = r.bound.map(|b| b.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            TRACE_SCHEMA_VERSION, r.t, b, r.empirical_mean_gap, r.empirical_std
        ));
    }
    s
}
