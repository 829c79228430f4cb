//! Image-specific differentiable operators: Gaussian filtering, the
//! piecewise-linear scale curve, HSV→RGB with fixed hue, CIELab lightness,
//! conjugate selection and Gaussian soft histograms.

use std::sync::Arc;

use super::{shape_err, Graph, Op, Scalar, TensorError, Var};
use crate::colorlab::{RGB_TO_XYZ, WHITE_XYZ};

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Scale factor of the piecewise-linear curve at `x`, with `knots.len() − 1`
/// equal intervals on [0,1]: `k_0 + Σ_m (k_{m+1} − k_m)·clip(M·x − m)`.
pub fn curve_scale_value<T: Scalar>(x: T, knots: &[T]) -> T {
    let (m, f) = curve_locate(x, knots.len() - 1);
    knots[m] + (knots[m + 1] - knots[m]) * f
}

/// Interval index and in-interval fraction; saturates at both ends.
fn curve_locate<T: Scalar>(x: T, intervals: usize) -> (usize, T) {
    let u = x * T::from_usize(intervals).unwrap();
    if u <= T::zero() {
        (0, T::zero())
    } else if u >= T::from_usize(intervals).unwrap() {
        (intervals - 1, T::one())
    } else {
        let m = u.floor().to_usize().unwrap().min(intervals - 1);
        (m, u - T::from_usize(m).unwrap())
    }
}

fn srgb_to_linear<T: Scalar>(c: T) -> (T, T) {
    let thresh = T::lit(0.04045);
    if c <= thresh {
        let k = T::lit(1.0 / 12.92);
        (c * k, k)
    } else {
        let base = (c + T::lit(0.055)) / T::lit(1.055);
        let p = T::lit(2.4);
        (base.powf(p), p * base.powf(p - T::one()) / T::lit(1.055))
    }
}

fn lab_f<T: Scalar>(t: T) -> (T, T) {
    let delta = 6.0 / 29.0;
    if t > T::lit(delta * delta * delta) {
        let c = t.cbrt();
        (c, T::one() / (T::lit(3.0) * c * c))
    } else {
        let k = T::lit(1.0 / (3.0 * delta * delta));
        (t * k + T::lit(4.0 / 29.0), k)
    }
}

impl<T: Scalar> Graph<T> {
    /// Separable "valid" correlation of every [H,W] plane with a 1-D kernel
    /// along both axes: [C,H,W] → [C,H−k+1,W−k+1].
    pub fn gaussian_valid(&mut self, x: Var, kernel: &Arc<[T]>) -> Result<Var, TensorError> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(shape_err("gaussian_valid", format!("input must be [C,H,W], got {s:?}"))),
        };
        let k = kernel.len();
        if k == 0 || h < k || w < k {
            return Err(shape_err(
                "gaussian_valid",
                format!("{h}x{w} plane is smaller than the {k}-tap window"),
            ));
        }
        let (oh, ow) = (h - k + 1, w - k + 1);
        let xv = self.value(x);
        let mut out = vec![T::zero(); c * oh * ow];
        let mut tmp = vec![T::zero(); h * ow];
        for ch in 0..c {
            let plane = &xv[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for ox in 0..ow {
                    let row = &plane[y * w + ox..y * w + ox + k];
                    tmp[y * ow + ox] = row.iter().zip(kernel.iter()).map(|(&a, &b)| a * b).sum();
                }
            }
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for oy in 0..oh {
                for (t, &kv) in kernel.iter().enumerate() {
                    let src = &tmp[(oy + t) * ow..(oy + t + 1) * ow];
                    for (d, &s) in dst[oy * ow..(oy + 1) * ow].iter_mut().zip(src) {
                        *d += kv * s;
                    }
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::GaussianValid(x, Arc::clone(kernel)), &[x]))
    }

    /// Evaluates the piecewise-linear scale curve defined by `knots` at each
    /// element of `x`.
    pub fn curve_scale(&mut self, x: Var, knots: Var) -> Result<Var, TensorError> {
        let kn = self.value(knots);
        if self.shape(knots).len() != 1 || kn.len() < 2 {
            return Err(shape_err(
                "curve_scale",
                format!(
                    "knots must be a vector of at least 2 values, got {:?}",
                    self.shape(knots)
                ),
            ));
        }
        let out = self.value(x).iter().map(|&v| curve_scale_value(v, kn)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::CurveScale { x, knots }, &[x, knots]))
    }

    /// Hexcone HSV → planar RGB with a fixed (non-differentiable) hue plane.
    pub fn hsv_to_rgb(&mut self, hue: Arc<[T]>, s: Var, v: Var) -> Result<Var, TensorError> {
        if self.shape(s) != self.shape(v) || hue.len() != self.numel(s) {
            return Err(shape_err(
                "hsv_to_rgb",
                format!(
                    "hue has {} values, s {:?}, v {:?}",
                    hue.len(),
                    self.shape(s),
                    self.shape(v)
                ),
            ));
        }
        let n = hue.len();
        let (sv, vv) = (self.value(s), self.value(v));
        let mut out = vec![T::zero(); 3 * n];
        for i in 0..n {
            let rgb = hsv_pixel(hue[i], sv[i], vv[i]).0;
            for c in 0..3 {
                out[c * n + i] = rgb[c];
            }
        }
        let mut shape = vec![3];
        shape.extend_from_slice(self.shape(s));
        Ok(self.push(shape, out, Op::HsvToRgb { hue, s, v }, &[s, v]))
    }

    /// CIELab L* of planar companded sRGB: [3, ...] → [...].
    pub fn lightness(&mut self, rgb: Var) -> Result<Var, TensorError> {
        let shape = self.shape(rgb).to_vec();
        if shape.first() != Some(&3) {
            return Err(shape_err("lightness", format!("input must be [3, ...], got {shape:?}")));
        }
        let n = self.numel(rgb) / 3;
        let v = self.value(rgb);
        let out = (0..n)
            .map(|i| lightness_pixel([v[i], v[n + i], v[2 * n + i]]).0)
            .collect();
        Ok(self.push(shape[1..].to_vec(), out, Op::Lightness(rgb), &[rgb]))
    }

    /// Per-element choice between the raw prediction and its reflection
    /// about the input, each clipped so it cannot pass the target; the one
    /// closer to the target wins, ties going to the raw prediction.
    pub fn conjugate_select(&mut self, pred: Var, input: &[T], target: &[T]) -> Result<Var, TensorError> {
        let n = self.numel(pred);
        if input.len() != n || target.len() != n {
            return Err(shape_err(
                "conjugate_select",
                format!(
                    "prediction has {n} values, input {}, target {}",
                    input.len(),
                    target.len()
                ),
            ));
        }
        let pv = self.value(pred);
        let mut out = Vec::with_capacity(n);
        let mut factor = Vec::with_capacity(n);
        for i in 0..n {
            let (v, f) = conjugate_pixel(pv[i], input[i], target[i]);
            out.push(v);
            factor.push(f);
        }
        let shape = self.shape(pred).to_vec();
        Ok(self.push(shape, out, Op::Conjugate { pred, factor }, &[pred]))
    }

    /// Gaussian-kernel histogram with `bins` centers at `(b + 0.5)/bins`.
    pub fn soft_histogram(&mut self, x: Var, bins: usize, sigma: f64) -> Result<Var, TensorError> {
        if bins < 2 {
            return Err(TensorError::Invalid {
                op: "soft_histogram",
                detail: format!("need at least 2 bins, got {bins}"),
            });
        }
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(TensorError::Invalid {
                op: "soft_histogram",
                detail: format!("bandwidth must be positive, got {sigma}"),
            });
        }
        let sigma = T::lit(sigma);
        let centers = bin_centers::<T>(bins);
        let inv = T::one() / (T::lit(2.0) * sigma * sigma);
        let mut out = vec![T::zero(); bins];
        for &p in self.value(x) {
            for (o, &c) in out.iter_mut().zip(&centers) {
                let d = p - c;
                *o += (-(d * d) * inv).exp();
            }
        }
        Ok(self.push(vec![bins], out, Op::SoftHistogram { x, bins, sigma }, &[x]))
    }
}

fn bin_centers<T: Scalar>(bins: usize) -> Vec<T> {
    (0..bins).map(|b| T::lit((b as f64 + 0.5) / bins as f64)).collect()
}

/// RGB of one HSV pixel plus the partials (d/ds, d/dv) of each channel.
fn hsv_pixel<T: Scalar>(h: T, s: T, v: T) -> ([T; 3], [[T; 2]; 3]) {
    let one = T::one();
    let h6 = h * T::lit(6.0);
    let fl = h6.floor();
    let sector = fl.to_i64().unwrap_or(0).rem_euclid(6);
    let f = h6 - fl;
    let p = (v * (one - s), [-v, one - s]);
    let q = (v * (one - s * f), [-v * f, one - s * f]);
    let t = (v * (one - s * (one - f)), [-v * (one - f), one - s * (one - f)]);
    let vv = (v, [T::zero(), one]);
    let chans = match sector {
        0 => [vv, t, p],
        1 => [q, vv, p],
        2 => [p, vv, t],
        3 => [p, q, vv],
        4 => [t, p, vv],
        _ => [vv, p, q],
    };
    (chans.map(|c| c.0), chans.map(|c| c.1))
}

/// L* of one pixel and its partials with respect to r, g, b.
fn lightness_pixel<T: Scalar>(rgb: [T; 3]) -> (T, [T; 3]) {
    let lin = rgb.map(srgb_to_linear);
    let coeff = [
        T::lit(RGB_TO_XYZ[1][0] / WHITE_XYZ[1]),
        T::lit(RGB_TO_XYZ[1][1] / WHITE_XYZ[1]),
        T::lit(RGB_TO_XYZ[1][2] / WHITE_XYZ[1]),
    ];
    let y = coeff[0] * lin[0].0 + coeff[1] * lin[1].0 + coeff[2] * lin[2].0;
    let (f, df) = lab_f(y);
    let scale = T::lit(116.0) * df;
    (
        T::lit(116.0) * f - T::lit(16.0),
        [0, 1, 2].map(|c| scale * coeff[c] * lin[c].1),
    )
}

/// Selected value and d(value)/d(pred) for one element.
pub(crate) fn conjugate_pixel<T: Scalar>(pred: T, input: T, target: T) -> (T, T) {
    let reflected = T::lit(2.0) * input - pred;
    let clip = |x: T| -> (T, bool) {
        if input > target {
            if x < target {
                (target, true)
            } else {
                (x, false)
            }
        } else if x > target {
            (target, true)
        } else {
            (x, false)
        }
    };
    let (c1, active1) = clip(reflected);
    let (c2, active2) = clip(pred);
    let d1 = (c1 - target) * (c1 - target);
    let d2 = (c2 - target) * (c2 - target);
    if d1 < d2 {
        (c1, if active1 { T::zero() } else { -T::one() })
    } else {
        (c2, if active2 { T::zero() } else { T::one() })
    }
}

pub(super) fn gaussian_valid_backward<T: Scalar>(shape: &[usize], kernel: &[T], g: &[T]) -> Vec<T> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut gx = vec![T::zero(); c * h * w];
    let mut gtmp = vec![T::zero(); h * ow];
    for ch in 0..c {
        gtmp.fill(T::zero());
        let go = &g[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for (t, &kv) in kernel.iter().enumerate() {
                let dst = &mut gtmp[(oy + t) * ow..(oy + t + 1) * ow];
                for (d, &s) in dst.iter_mut().zip(&go[oy * ow..(oy + 1) * ow]) {
                    *d += kv * s;
                }
            }
        }
        let gplane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for ox in 0..ow {
                let d = gtmp[y * ow + ox];
                for (t, &kv) in kernel.iter().enumerate() {
                    gplane[y * w + ox + t] += kv * d;
                }
            }
        }
    }
    gx
}

pub(super) fn curve_backward<T: Scalar>(xv: &[T], kn: &[T], x: Var, knots: Var, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let intervals = kn.len() - 1;
    let mscale = T::from_usize(intervals).unwrap();
    let mut gx = vec![T::zero(); xv.len()];
    let mut gk = vec![T::zero(); kn.len()];
    for (i, (&v, &d)) in xv.iter().zip(g).enumerate() {
        let u = v * mscale;
        let (m, f) = curve_locate(v, intervals);
        gk[m] += d * (T::one() - f);
        gk[m + 1] += d * f;
        if u > T::zero() && u < mscale {
            gx[i] = d * mscale * (kn[m + 1] - kn[m]);
        }
    }
    vec![(x, gx), (knots, gk)]
}

pub(super) fn hsv_to_rgb_backward<T: Scalar>(
    hue: &[T],
    sv: &[T],
    vv: &[T],
    s: Var,
    v: Var,
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let n = hue.len();
    let mut gs = vec![T::zero(); n];
    let mut gv = vec![T::zero(); n];
    for i in 0..n {
        let partials = hsv_pixel(hue[i], sv[i], vv[i]).1;
        for (c, [ds, dv]) in partials.iter().enumerate() {
            let d = g[c * n + i];
            gs[i] += d * *ds;
            gv[i] += d * *dv;
        }
    }
    vec![(s, gs), (v, gv)]
}

pub(super) fn lightness_backward<T: Scalar>(rgb: &[T], g: &[T]) -> Vec<T> {
    let n = g.len();
    let mut gx = vec![T::zero(); 3 * n];
    for i in 0..n {
        let partials = lightness_pixel([rgb[i], rgb[n + i], rgb[2 * n + i]]).1;
        for c in 0..3 {
            gx[c * n + i] = g[i] * partials[c];
        }
    }
    gx
}

pub(super) fn soft_histogram_backward<T: Scalar>(xv: &[T], bins: usize, sigma: T, g: &[T]) -> Vec<T> {
    let centers = bin_centers::<T>(bins);
    let inv = T::one() / (T::lit(2.0) * sigma * sigma);
    let inv_var = T::one() / (sigma * sigma);
    xv.iter()
        .map(|&p| {
            centers
                .iter()
                .zip(g)
                .map(|(&c, &d)| {
                    let diff = p - c;
                    -d * (-(diff * diff) * inv).exp() * diff * inv_var
                })
                .sum()
        })
        .collect()
}
