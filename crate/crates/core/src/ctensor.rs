//! Dense complex tensors with planar storage and the numerical kernels the
//! network layers are built from.
//!
//! Real and imaginary components live in two separate row-major arrays, so
//! projecting a tensor onto its real or imaginary half is a plain slice.
//!
//! Every kernel that is complex-linear in its data argument has a matching
//! `*_backward` that maps an upstream gradient `G = dJ/dRe(y) + i dJ/dIm(y)`
//! onto the same convention for the inputs. For `y = w x` this is
//! `g_w = G conj(x)` and `g_x = G conj(w)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn from_parts(shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(Error::dim(
                "from_parts",
                format!(
                    "shape {:?} needs {} entries, got re={} im={}",
                    shape,
                    n,
                    re.len(),
                    im.len()
                ),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            re,
            im,
        })
    }

    pub fn from_real(shape: &[usize], re: Vec<f64>) -> Result<Self> {
        let im = vec![0.0; re.len()];
        Self::from_parts(shape, re, im)
    }

    pub fn from_complex(shape: &[usize], values: &[Complex64]) -> Result<Self> {
        let re = values.iter().map(|z| z.re).collect();
        let im = values.iter().map(|z| z.im).collect();
        Self::from_parts(shape, re, im)
    }

    pub fn scalar(z: Complex64) -> Self {
        Self {
            shape: vec![1],
            re: vec![z.re],
            im: vec![z.im],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.im
    }

    /// Both planes at once, for callers that update them together.
    pub fn planes_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.re, &mut self.im)
    }

    pub fn at(&self, flat: usize) -> Complex64 {
        Complex64::new(self.re[flat], self.im[flat])
    }

    pub fn set_at(&mut self, flat: usize, z: Complex64) {
        self.re[flat] = z.re;
        self.im[flat] = z.im;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {i} out of bounds for extent {n}");
            acc * n + i
        })
    }

    pub fn get(&self, index: &[usize]) -> Complex64 {
        self.at(self.offset(index))
    }

    pub fn set(&mut self, index: &[usize], z: Complex64) {
        let k = self.offset(index);
        self.set_at(k, z);
    }

    pub fn iter(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.re.iter().zip(&self.im).map(|(&re, &im)| Complex64::new(re, im))
    }

    pub fn to_complex_vec(&self) -> Vec<Complex64> {
        self.iter().collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape, shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            re: self.re.clone(),
            im: self.im.clone(),
        })
    }

    pub fn conj(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            re: self.re.clone(),
            im: self.im.iter().map(|v| -v).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        let mut out = Self::zeros(&self.shape);
        for k in 0..self.len() {
            out.set_at(k, f(self.at(k)));
        }
        out
    }

    pub fn scale(&self, alpha: Complex64) -> Self {
        self.map(|z| alpha * z)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape("add", other)?;
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        for (a, b) in self.re.iter_mut().zip(&other.re) {
            *a += b;
        }
        for (a, b) in self.im.iter_mut().zip(&other.im) {
            *a += b;
        }
        Ok(())
    }

    fn check_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }

    pub fn is_real(&self) -> bool {
        self.im.iter().all(|&v| v == 0.0)
    }

    /// Largest absolute difference of any component against `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.re
            .iter()
            .zip(&other.re)
            .chain(self.im.iter().zip(&other.im))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Zero-padding policy for [`cconv2d`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output keeps the input extent; `k-1` zeros split as `(k-1)/2` before and the rest after.
    #[default]
    Same,
    Valid,
}

impl Padding {
    /// Leading pad and output extent along one axis.
    pub fn geometry(self, input: usize, kernel: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Same => Some(((kernel - 1) / 2, input)),
            Padding::Valid => (kernel <= input).then(|| (0, input - kernel + 1)),
        }
    }
}

#[inline]
fn cmul_add(acc_re: &mut f64, acc_im: &mut f64, ar: f64, ai: f64, br: f64, bi: f64) {
    *acc_re += ar * br - ai * bi;
    *acc_im += ar * bi + ai * br;
}

/// Complex matrix product of `[m,k]` by `[k,n]`.
pub fn cmatmul(a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(
            "cmatmul",
            format!("cannot multiply {:?} by {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = ComplexTensor::zeros(&[m, n]);
    for i in 0..m {
        let (or, oi) = (&mut out.re[i * n..(i + 1) * n], &mut out.im[i * n..(i + 1) * n]);
        for p in 0..k {
            let (ar, ai) = (a.re[i * k + p], a.im[i * k + p]);
            let (br, bi) = (&b.re[p * n..(p + 1) * n], &b.im[p * n..(p + 1) * n]);
            for (((r, im), &br), &bi) in or.iter_mut().zip(oi.iter_mut()).zip(br).zip(bi) {
                cmul_add(r, im, ar, ai, br, bi);
            }
        }
    }
    Ok(out)
}

/// Gradients of `cmatmul(a, b)`: `(G b^H, a^H G)`.
pub fn cmatmul_backward(
    a: &ComplexTensor,
    b: &ComplexTensor,
    grad_out: &ComplexTensor,
) -> Result<(ComplexTensor, ComplexTensor)> {
    let mut gb = ComplexTensor::zeros(&b.shape);
    let ga = cmatmul_backward_acc(a, b, grad_out, &mut gb)?;
    Ok((ga, gb))
}

/// Like [`cmatmul_backward`] but adds `a^H G` into `gb_acc` and returns `G b^H`.
pub fn cmatmul_backward_acc(
    a: &ComplexTensor,
    b: &ComplexTensor,
    grad_out: &ComplexTensor,
    gb_acc: &mut ComplexTensor,
) -> Result<ComplexTensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(
            "cmatmul_backward",
            format!("cannot multiply {:?} by {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    if grad_out.shape != [m, n] || gb_acc.shape != b.shape {
        return Err(Error::dim(
            "cmatmul_backward",
            format!(
                "upstream {:?} or accumulator {:?} does not match [{m}, {n}] and {:?}",
                grad_out.shape, gb_acc.shape, b.shape
            ),
        ));
    }
    let mut ga = ComplexTensor::zeros(&[m, k]);
    for i in 0..m {
        let (gr, gi) = (&grad_out.re[i * n..(i + 1) * n], &grad_out.im[i * n..(i + 1) * n]);
        for p in 0..k {
            let (ar, ai) = (a.re[i * k + p], a.im[i * k + p]);
            let (br, bi) = (&b.re[p * n..(p + 1) * n], &b.im[p * n..(p + 1) * n]);
            // G * conj(b)
            let (mut sr, mut si) = (0.0, 0.0);
            for (((&gr, &gi), &br), &bi) in gr.iter().zip(gi).zip(br).zip(bi) {
                cmul_add(&mut sr, &mut si, gr, gi, br, -bi);
            }
            ga.re[i * k + p] = sr;
            ga.im[i * k + p] = si;
            // conj(a) * G
            let (or, oi) = (&mut gb_acc.re[p * n..(p + 1) * n], &mut gb_acc.im[p * n..(p + 1) * n]);
            for (((r, im), &gr), &gi) in or.iter_mut().zip(oi.iter_mut()).zip(gr).zip(gi) {
                cmul_add(r, im, ar, -ai, gr, gi);
            }
        }
    }
    Ok(ga)
}

struct ConvGeometry {
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize], padding: Padding) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(Error::dim(
                "cconv2d",
                format!("expected input [c,h,w] and kernel [o,c,kh,kw], got {input:?} and {kernel:?}"),
            ));
        }
        let (in_ch, h, w) = (input[0], input[1], input[2]);
        let (out_ch, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != in_ch {
            return Err(Error::dim(
                "cconv2d",
                format!("kernel expects {kc} input channels, input {input:?} has {in_ch}"),
            ));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::dim("cconv2d", "kernel extents must be positive"));
        }
        let too_big = || {
            Error::dim(
                "cconv2d",
                format!("kernel {kh}x{kw} does not fit input {h}x{w} with {padding:?} padding"),
            )
        };
        let (pad_top, out_h) = padding.geometry(h, kh).ok_or_else(too_big)?;
        let (pad_left, out_w) = padding.geometry(w, kw).ok_or_else(too_big)?;
        Ok(Self {
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Output indices `i` in `0..out` whose source `i + k - pad` lies in `0..input`.
    fn span(out: usize, input: usize, k: usize, pad: usize) -> (usize, usize, isize) {
        let d = k as isize - pad as isize;
        let lo = (-d).max(0) as usize;
        let hi = (input as isize - d).clamp(0, out as isize) as usize;
        (lo, hi.max(lo), d)
    }
}

/// Complex 2D cross-correlation, stride 1: `Y_o = b_o + sum_c W_{o,c} * X_c`.
pub fn cconv2d(
    input: &ComplexTensor,
    kernel: &ComplexTensor,
    bias: &ComplexTensor,
    padding: Padding,
) -> Result<ComplexTensor> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, padding)?;
    if bias.len() != g.out_ch {
        return Err(Error::dim(
            "cconv2d",
            format!("bias has {} entries for {} output channels", bias.len(), g.out_ch),
        ));
    }
    let plane = g.out_h * g.out_w;
    let mut out = ComplexTensor::zeros(&[g.out_ch, g.out_h, g.out_w]);
    for o in 0..g.out_ch {
        out.re[o * plane..(o + 1) * plane].fill(bias.re[o]);
        out.im[o * plane..(o + 1) * plane].fill(bias.im[o]);
        for c in 0..g.in_ch {
            for a in 0..g.kh {
                let (i0, i1, di) = ConvGeometry::span(g.out_h, g.h, a, g.pad_top);
                for b in 0..g.kw {
                    let kidx = ((o * g.in_ch + c) * g.kh + a) * g.kw + b;
                    let (wr, wi) = (kernel.re[kidx], kernel.im[kidx]);
                    let (j0, j1, dj) = ConvGeometry::span(g.out_w, g.w, b, g.pad_left);
                    for i in i0..i1 {
                        let y = (i as isize + di) as usize;
                        let src = (c * g.h + y) * g.w;
                        let dst = o * plane + i * g.out_w;
                        for j in j0..j1 {
                            let x = src + (j as isize + dj) as usize;
                            let (xr, xi) = (input.re[x], input.im[x]);
                            out.re[dst + j] += wr * xr - wi * xi;
                            out.im[dst + j] += wr * xi + wi * xr;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`cconv2d`] with respect to input, kernel and bias.
#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub input: ComplexTensor,
    pub kernel: ComplexTensor,
    pub bias: ComplexTensor,
}

pub fn cconv2d_backward(
    input: &ComplexTensor,
    kernel: &ComplexTensor,
    padding: Padding,
    grad_out: &ComplexTensor,
) -> Result<Conv2dGrads> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, padding)?;
    if grad_out.shape != [g.out_ch, g.out_h, g.out_w] {
        return Err(Error::dim(
            "cconv2d_backward",
            format!(
                "upstream {:?} does not match [{}, {}, {}]",
                grad_out.shape, g.out_ch, g.out_h, g.out_w
            ),
        ));
    }
    let plane = g.out_h * g.out_w;
    let mut gx = ComplexTensor::zeros(&input.shape);
    let mut gw = ComplexTensor::zeros(&kernel.shape);
    let mut gb = ComplexTensor::zeros(&[g.out_ch]);
    for o in 0..g.out_ch {
        let gslice = o * plane..(o + 1) * plane;
        gb.re[o] = grad_out.re[gslice.clone()].iter().sum();
        gb.im[o] = grad_out.im[gslice].iter().sum();
        for c in 0..g.in_ch {
            for a in 0..g.kh {
                let (i0, i1, di) = ConvGeometry::span(g.out_h, g.h, a, g.pad_top);
                for b in 0..g.kw {
                    let kidx = ((o * g.in_ch + c) * g.kh + a) * g.kw + b;
                    let (wr, wi) = (kernel.re[kidx], kernel.im[kidx]);
                    let (j0, j1, dj) = ConvGeometry::span(g.out_w, g.w, b, g.pad_left);
                    let (mut sr, mut si) = (0.0, 0.0);
                    for i in i0..i1 {
                        let y = (i as isize + di) as usize;
                        let src = (c * g.h + y) * g.w;
                        let up = o * plane + i * g.out_w;
                        for j in j0..j1 {
                            let x = src + (j as isize + dj) as usize;
                            let (gr, gi) = (grad_out.re[up + j], grad_out.im[up + j]);
                            let (xr, xi) = (input.re[x], input.im[x]);
                            // G * conj(x)
                            sr += gr * xr + gi * xi;
                            si += gi * xr - gr * xi;
                            // G * conj(w)
                            gx.re[x] += gr * wr + gi * wi;
                            gx.im[x] += gi * wr - gr * wi;
                        }
                    }
                    gw.re[kidx] = sr;
                    gw.im[kidx] = si;
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: gx,
        kernel: gw,
        bias: gb,
    })
}

fn pool_geometry(shape: &[usize], window: usize, stride: usize) -> Result<(usize, usize, usize)> {
    let w = *shape
        .last()
        .ok_or_else(|| Error::dim("avgpool1d", "cannot pool a rank-0 tensor"))?;
    if window == 0 || stride == 0 {
        return Err(Error::dim("avgpool1d", "window and stride must be at least 1"));
    }
    if window > w {
        return Err(Error::dim(
            "avgpool1d",
            format!("window {window} exceeds last-axis extent {w} of {shape:?}"),
        ));
    }
    let outer = shape[..shape.len() - 1].iter().product();
    Ok((outer, w, (w - window) / stride + 1))
}

/// Average pooling along the last axis only.
pub fn avgpool1d(input: &ComplexTensor, window: usize, stride: usize) -> Result<ComplexTensor> {
    let (outer, w, out_w) = pool_geometry(&input.shape, window, stride)?;
    let mut shape = input.shape.clone();
    *shape.last_mut().unwrap() = out_w;
    let mut out = ComplexTensor::zeros(&shape);
    let denom = window as f64;
    for r in 0..outer {
        for j in 0..out_w {
            let start = r * w + j * stride;
            let sr: f64 = input.re[start..start + window].iter().sum();
            let si: f64 = input.im[start..start + window].iter().sum();
            out.re[r * out_w + j] = sr / denom;
            out.im[r * out_w + j] = si / denom;
        }
    }
    Ok(out)
}

pub fn avgpool1d_backward(
    input_shape: &[usize],
    window: usize,
    stride: usize,
    grad_out: &ComplexTensor,
) -> Result<ComplexTensor> {
    let (outer, w, out_w) = pool_geometry(input_shape, window, stride)?;
    if grad_out.len() != outer * out_w {
        return Err(Error::dim(
            "avgpool1d_backward",
            format!("upstream {:?} does not match pooled {input_shape:?}", grad_out.shape),
        ));
    }
    let mut gx = ComplexTensor::zeros(input_shape);
    let denom = window as f64;
    for r in 0..outer {
        for j in 0..out_w {
            let (gr, gi) = (grad_out.re[r * out_w + j] / denom, grad_out.im[r * out_w + j] / denom);
            let start = r * w + j * stride;
            for k in start..start + window {
                gx.re[k] += gr;
                gx.im[k] += gi;
            }
        }
    }
    Ok(gx)
}

/// Row-major linearisation into a rank-1 tensor.
pub fn flatten(input: &ComplexTensor) -> ComplexTensor {
    ComplexTensor {
        shape: vec![input.len()],
        re: input.re.clone(),
        im: input.im.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ComplexTensor {
        let n: usize = shape.iter().product();
        let re = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let im = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ComplexTensor::from_parts(shape, re, im).unwrap()
    }

    fn naive_matmul(a: &ComplexTensor, b: &ComplexTensor) -> ComplexTensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = ComplexTensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = c(0.0, 0.0);
                for p in 0..k {
                    s += a.get(&[i, p]) * b.get(&[p, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    fn naive_conv(x: &ComplexTensor, k: &ComplexTensor, b: &ComplexTensor, pad: Padding) -> ComplexTensor {
        let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let (pt, pl, oh, ow) = match pad {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, w),
            Padding::Valid => (0, 0, h - kh + 1, w - kw + 1),
        };
        let mut out = ComplexTensor::zeros(&[co, oh, ow]);
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = b.at(o);
                    for cc in 0..ci {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let y = i as isize + a as isize - pt as isize;
                                let xx = j as isize + bb as isize - pl as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                s += k.get(&[o, cc, a, bb]) * x.get(&[cc, y as usize, xx as usize]);
                            }
                        }
                    }
                    out.set(&[o, i, j], s);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_unit_cases() {
        let a = ComplexTensor::from_complex(&[1, 1], &[c(1.0, 0.0)]).unwrap();
        let b = ComplexTensor::from_complex(&[1, 1], &[c(0.0, 1.0)]).unwrap();
        assert_eq!(cmatmul(&a, &b).unwrap().at(0), c(0.0, 1.0));
        let a = ComplexTensor::from_complex(&[1, 1], &[c(1.0, 1.0)]).unwrap();
        let b = ComplexTensor::from_complex(&[1, 1], &[c(1.0, -1.0)]).unwrap();
        assert_eq!(cmatmul(&a, &b).unwrap().at(0), c(2.0, 0.0));
    }

    #[test]
    fn matmul_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        assert!(cmatmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let err = cmatmul(&ComplexTensor::zeros(&[2, 3]), &ComplexTensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn conv_identity_and_sum() {
        let x = ComplexTensor::from_complex(&[1, 1, 1], &[c(2.0, 3.0)]).unwrap();
        let k = ComplexTensor::from_complex(&[1, 1, 1, 1], &[c(1.0, 0.0)]).unwrap();
        let b = ComplexTensor::zeros(&[1]);
        assert_eq!(cconv2d(&x, &k, &b, Padding::Same).unwrap().at(0), c(2.0, 3.0));

        let x = ComplexTensor::from_complex(&[1, 2, 2], &[c(1.0, 1.0); 4]).unwrap();
        let k = ComplexTensor::from_complex(&[1, 1, 2, 2], &[c(1.0, 0.0); 4]).unwrap();
        let y = cconv2d(&x, &k, &b, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.at(0), c(4.0, 4.0));
    }

    #[test]
    fn conv_matches_oracle_same_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 5, 6], &mut rng);
        let k = random(&[3, 2, 2, 2], &mut rng);
        let b = random(&[3], &mut rng);
        let y = cconv2d(&x, &k, &b, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[3, 5, 6]);
        assert!(y.max_abs_diff(&naive_conv(&x, &k, &b, Padding::Same)) < 1e-12);
    }

    #[test]
    fn conv_valid_kernel_too_large() {
        let x = ComplexTensor::zeros(&[1, 2, 5]);
        let k = ComplexTensor::zeros(&[1, 1, 3, 3]);
        assert!(cconv2d(&x, &k, &ComplexTensor::zeros(&[1]), Padding::Valid).is_err());
        assert!(cconv2d(&x, &k, &ComplexTensor::zeros(&[1]), Padding::Same).is_ok());
    }

    #[test]
    fn conv_real_inputs_stay_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = ComplexTensor::from_real(&[2, 4, 7], random(&[2, 4, 7], &mut rng).re().to_vec()).unwrap();
        let k = ComplexTensor::from_real(&[3, 2, 3, 2], random(&[3, 2, 3, 2], &mut rng).re().to_vec()).unwrap();
        let b = ComplexTensor::from_real(&[3], vec![0.5, -0.25, 1.0]).unwrap();
        assert!(cconv2d(&x, &k, &b, Padding::Same)
            .unwrap()
            .im()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn pool_cases() {
        let x = ComplexTensor::from_complex(&[1, 1, 2], &[c(1.0, 1.0), c(3.0, 3.0)]).unwrap();
        assert_eq!(avgpool1d(&x, 2, 1).unwrap().at(0), c(2.0, 2.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 3, 10], &mut rng);
        assert_eq!(avgpool1d(&x, 1, 1).unwrap(), x);
        let y = avgpool1d(&x, 5, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        for ch in 0..2 {
            for h in 0..3 {
                for j in 0..3 {
                    let mut s = c(0.0, 0.0);
                    for k in 0..5 {
                        s += x.get(&[ch, h, j * 2 + k]);
                    }
                    assert!((y.get(&[ch, h, j]) - s / 5.0).norm() < 1e-12);
                }
            }
        }
        assert!(avgpool1d(&x, 11, 1).is_err());
    }

    #[test]
    fn flatten_is_row_major() {
        let vals = [c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0), c(4.0, 0.0)];
        let x = ComplexTensor::from_complex(&[2, 1, 2], &vals).unwrap();
        let f = flatten(&x);
        assert_eq!(f.shape(), &[4]);
        assert_eq!(f.to_complex_vec(), vals);
        assert_eq!(flatten(&f), f);
        assert_eq!(f.reshape(&[2, 1, 2]).unwrap(), x);
    }

    /// Backward kernels against the directional derivative of the forward map:
    /// for a real loss `J = Re <G, f(x)>` the gradient in the `d/da + i d/db`
    /// convention must reproduce `dJ` along any perturbation.
    #[test]
    fn backward_kernels_match_directional_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&[2, 3, 6], &mut rng);
        let k = random(&[2, 2, 2, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let gout = random(&[2, 3, 6], &mut rng);
        let dx = random(&[2, 3, 6], &mut rng);
        let dk = random(&[2, 2, 2, 3], &mut rng);
        let grads = cconv2d_backward(&x, &k, Padding::Same, &gout).unwrap();
        let pair = |g: &ComplexTensor, d: &ComplexTensor| -> f64 {
            g.re().iter().zip(d.re()).map(|(a, b)| a * b).sum::<f64>()
                + g.im().iter().zip(d.im()).map(|(a, b)| a * b).sum::<f64>()
        };
        // conv is linear in x and in k separately, so finite differences are exact up to rounding
        let y0 = cconv2d(&x, &k, &b, Padding::Same).unwrap();
        let y1 = cconv2d(&x.add(&dx).unwrap(), &k, &b, Padding::Same).unwrap();
        let dy = y1.add(&y0.scale(c(-1.0, 0.0))).unwrap();
        assert!((pair(&gout, &dy) - pair(&grads.input, &dx)).abs() < 1e-10);
        let y2 = cconv2d(&x, &k.add(&dk).unwrap(), &b, Padding::Same).unwrap();
        let dy = y2.add(&y0.scale(c(-1.0, 0.0))).unwrap();
        assert!((pair(&gout, &dy) - pair(&grads.kernel, &dk)).abs() < 1e-10);

        let a = random(&[3, 4], &mut rng);
        let bm = random(&[4, 2], &mut rng);
        let g = random(&[3, 2], &mut rng);
        let da = random(&[3, 4], &mut rng);
        let (ga, _) = cmatmul_backward(&a, &bm, &g).unwrap();
        let dy = cmatmul(&da, &bm).unwrap();
        assert!((pair(&g, &dy) - pair(&ga, &da)).abs() < 1e-10);

        let gp = random(&[2, 3, 3], &mut rng);
        let gx = avgpool1d_backward(&[2, 3, 6], 2, 2, &gp).unwrap();
        let dy = avgpool1d(&dx, 2, 2).unwrap();
        assert!((pair(&gp, &dy) - pair(&gx, &dx)).abs() < 1e-12);
    }
}
