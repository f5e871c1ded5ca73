//! Extended-precision reference evaluation of the network loss.
//!
//! A central difference at step `h` inherits the rounding noise of the loss
//! evaluation divided by `h`; in plain `f64` that is about `1e-16 |J| / 1e-6`,
//! too coarse for a `1e-6` relative check on small gradient entries. This
//! module re-implements the forward pass and both objectives in double-double
//! arithmetic (about 106 bits) straight from the layer definitions, sharing
//! no code with `cvnn::forward`.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::ctensor::Padding;
use crate::cvnn::{Activation, ModelKind, NetConfig, NetParams};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, UseCase};
use crate::training::Example;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn scale(self, s: f64) -> Self {
        self * Dd::new(s)
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let x = self.hi.sqrt();
        let (p, e) = two_prod(x, x);
        let r = (self - Dd { hi: p, lo: e }).hi * (0.5 / x);
        let (s, t) = two_sum(x, r);
        let (hi, lo) = quick_two_sum(s, t);
        Dd { hi, lo }
    }

    pub fn exp(self) -> Self {
        if self.hi < -700.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2.scale(k)).scale(1.0 / 1024.0);
        // Taylor series on |r| < 4e-4; 12 terms is far below 1e-32.
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..=12 {
            term = term * r / Dd::new(f64::from(n));
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale(2f64.powi(k as i32))
    }

    /// Natural log for positive arguments, by one Newton step on `exp`.
    pub fn ln(self) -> Self {
        let y = Dd::new(self.hi.ln());
        y + self * (-y).exp() - Dd::ONE
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        let e = e + (self.hi * b.lo + self.lo * b.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b.scale(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.scale(q2);
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Cdd {
    re: Dd,
    im: Dd,
}

impl Cdd {
    fn add(self, o: Cdd) -> Cdd {
        Cdd {
            re: self.re + o.re,
            im: self.im + o.im,
        }
    }

    fn mul(self, o: Cdd) -> Cdd {
        Cdd {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }
}

/// Dense planar tensor of `Cdd` with explicit row-major strides.
struct Grid {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<Cdd>,
}

impl Grid {
    fn at(&self, c: usize, y: usize, x: usize) -> Cdd {
        self.v[(c * self.h + y) * self.w + x]
    }
}

fn lift(t: &crate::ctensor::ComplexTensor) -> Vec<Cdd> {
    t.re()
        .iter()
        .zip(t.im())
        .map(|(&r, &i)| Cdd {
            re: Dd::new(r),
            im: Dd::new(i),
        })
        .collect()
}

fn activate(act: Activation, z: Cdd, q: Dd) -> Cdd {
    match act {
        Activation::Crelu => Cdd {
            re: if z.re.hi > 0.0 { z.re } else { Dd::ZERO },
            im: if z.im.hi > 0.0 { z.im } else { Dd::ZERO },
        },
        Activation::Modrelu => {
            let r = (z.re * z.re + z.im * z.im).sqrt();
            if r.hi == 0.0 || (r + q).hi < 0.0 {
                return Cdd::default();
            }
            let s = (r + q) / r;
            Cdd {
                re: z.re * s,
                im: z.im * s,
            }
        }
    }
}

fn conv(input: &Grid, kernel: &[Cdd], bias: &[Cdd], out_ch: usize, k: usize, padding: Padding) -> Result<Grid> {
    let (ph, oh) = padding
        .geometry(input.h, k)
        .ok_or_else(|| Error::dim("reference conv", "kernel exceeds input"))?;
    let (pw, ow) = padding
        .geometry(input.w, k)
        .ok_or_else(|| Error::dim("reference conv", "kernel exceeds input"))?;
    let mut v = Vec::with_capacity(out_ch * oh * ow);
    for o in 0..out_ch {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[o];
                for c in 0..input.c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let (iy, ix) = ((y + dy) as isize - ph as isize, (x + dx) as isize - pw as isize);
                            if iy < 0 || ix < 0 || iy >= input.h as isize || ix >= input.w as isize {
                                continue;
                            }
                            let w = kernel[((o * input.c + c) * k + dy) * k + dx];
                            acc = acc.add(w.mul(input.at(c, iy as usize, ix as usize)));
                        }
                    }
                }
                v.push(acc);
            }
        }
    }
    Ok(Grid {
        c: out_ch,
        h: oh,
        w: ow,
        v,
    })
}

fn pool(input: &Grid, window: usize, stride: usize) -> Grid {
    let ow = (input.w - window) / stride + 1;
    let mut v = Vec::with_capacity(input.c * input.h * ow);
    for c in 0..input.c {
        for y in 0..input.h {
            for x in 0..ow {
                let mut acc = Cdd::default();
                for j in 0..window {
                    acc = acc.add(input.at(c, y, x * stride + j));
                }
                v.push(Cdd {
                    re: acc.re / Dd::new(window as f64),
                    im: acc.im / Dd::new(window as f64),
                });
            }
        }
    }
    Grid {
        c: input.c,
        h: input.h,
        w: ow,
        v,
    }
}

fn dense(x: &[Cdd], w: &[Cdd], b: &[Cdd]) -> Vec<Cdd> {
    let n = b.len();
    (0..n)
        .map(|j| {
            x.iter()
                .enumerate()
                .fold(b[j], |acc, (i, xi)| acc.add(xi.mul(w[i * n + j])))
        })
        .collect()
}

/// Network output in double-double precision, as `(Re y, Im y)`.
pub fn forward_dd(params: &NetParams, cfg: &NetConfig, ex: &Example) -> Result<(Dd, Dd)> {
    params.check_layout(cfg)?;
    let (c, l) = (cfg.antennas, cfg.subcarriers);
    let h = lift(&ex.input);
    let input = match params.kind {
        ModelKind::Cvnn => Grid { c: 1, h: c, w: l, v: h },
        ModelKind::Rvnn => {
            let mut v: Vec<Cdd> = h.iter().map(|z| Cdd { re: z.re, im: Dd::ZERO }).collect();
            v.extend(h.iter().map(|z| Cdd { re: z.im, im: Dd::ZERO }));
            Grid { c: 2, h: c, w: l, v }
        }
    };
    let q = |i: usize| Dd::new(params.modrelu_q.get(i).copied().unwrap_or(0.0));
    let act = cfg.activation;

    let mut g = conv(
        &input,
        &lift(&params.conv1_kernel),
        &lift(&params.conv1_bias),
        cfg.conv1_channels,
        cfg.conv1_kernel,
        cfg.padding,
    )?;
    g.v.iter_mut().for_each(|z| *z = activate(act, *z, q(0)));
    let g = pool(&g, cfg.pool1_window, cfg.pool1_stride);
    let mut g = conv(
        &g,
        &lift(&params.conv2_kernel),
        &lift(&params.conv2_bias),
        cfg.conv2_channels,
        cfg.conv2_kernel,
        cfg.padding,
    )?;
    g.v.iter_mut().for_each(|z| *z = activate(act, *z, q(1)));
    let g = pool(&g, cfg.pool2_window, cfg.pool2_stride);
    let mut a = dense(&g.v, &lift(&params.fc1_weight), &lift(&params.fc1_bias));
    a.iter_mut().for_each(|z| *z = activate(act, *z, q(2)));
    let mut a = dense(&a, &lift(&params.fc2_weight), &lift(&params.fc2_bias));
    a.iter_mut().for_each(|z| *z = activate(act, *z, q(3)));
    let out = dense(&a, &lift(&params.out_weight), &lift(&params.out_bias));
    Ok(match params.kind {
        ModelKind::Cvnn => (out[0].re, out[0].im),
        ModelKind::Rvnn => (out[0].re, out[1].re),
    })
}

fn softplus_neg_abs(x: Dd) -> Dd {
    (Dd::ONE + (-x.abs()).exp()).ln()
}

/// Batch loss in double-double precision.
pub fn batch_loss_dd(params: &NetParams, cfg: &NetConfig, loss: &LossConfig, batch: &[&Example]) -> Result<Dd> {
    if batch.is_empty() {
        return Err(Error::dim("reference loss", "empty batch"));
    }
    let n = Dd::new(batch.len() as f64);
    let (mut first, mut second) = (Dd::ZERO, Dd::ZERO);
    for ex in batch {
        let (re, im) = forward_dd(params, cfg, ex)?;
        let (t1, t2) = ex.targets(loss.use_case);
        let d2 = im - Dd::new(t2);
        second = second + d2 * d2;
        first = first
            + match loss.use_case {
                UseCase::I => {
                    let d = re - Dd::new(t1);
                    d * d
                }
                UseCase::II => {
                    let pos = if re.hi > 0.0 { re } else { Dd::ZERO };
                    pos - re * Dd::new(t1) + softplus_neg_abs(re)
                }
            };
    }
    let w = match loss.use_case {
        UseCase::I => loss.alpha,
        UseCase::II => loss.beta,
    };
    Ok(Dd::new(w) * first / n + (Dd::ONE - Dd::new(w)) * second / n)
}
