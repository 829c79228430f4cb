//! Convolution, pooling and fully connected layers.

use super::{shape_err, Graph, Op, Scalar, TensorError, Var};

fn dims3(g_shape: &[usize], op: &'static str, what: &str) -> Result<(usize, usize, usize), TensorError> {
    match *g_shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err(op, format!("{what} must be [C,H,W], got {g_shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    /// 3×3 cross-correlation with zero padding 1 and stride 1, plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (cin, h, wd) = dims3(self.shape(x), "conv2d", "input")?;
        let (cout, wcin, kh, kw) = match *self.shape(w) {
            [a, b, c, d] => (a, b, c, d),
            ref s => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel must be [C_out,C_in,3,3], got {s:?}"),
                ))
            }
        };
        if kh != 3 || kw != 3 {
            return Err(shape_err(
                "conv2d",
                format!("kernel spatial size {kh}x{kw}, expected 3x3"),
            ));
        }
        if wcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("kernel C_in = {wcin} but input has {cin} channels"),
            ));
        }
        if self.shape(b) != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {:?}, expected [{cout}]", self.shape(b)),
            ));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let plane = h * wd;
        let mut out = vec![T::zero(); cout * plane];
        for co in 0..cout {
            let dst = &mut out[co * plane..(co + 1) * plane];
            dst.fill(bv[co]);
            for ci in 0..cin {
                let src = &xv[ci * plane..(ci + 1) * plane];
                let k = &wv[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                correlate_add(dst, src, k, h, wd);
            }
        }
        Ok(self.push(vec![cout, h, wd], out, Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    /// 2×2 mean pooling, stride 2; a trailing odd row/column is averaged over
    /// the partial window.
    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = dims3(self.shape(x), "avg_pool2d", "input")?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    let mut n = 0;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            acc += xv[(ch * h + y) * w + xx];
                            n += 1;
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = acc / T::from_usize(n).unwrap();
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::AvgPool2d(x), &[x]))
    }

    /// Per-channel spatial mean: [C,H,W] → [C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = dims3(self.shape(x), "global_avg_pool", "input")?;
        let n = T::from_usize(h * w).unwrap();
        let out = self
            .value(x)
            .chunks_exact(h * w)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        Ok(self.push(vec![c], out, Op::GlobalAvgPool(x), &[x]))
    }

    /// `W·x + b` for `x: [n]`, `W: [m,n]`, `b: [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let n = match *self.shape(x) {
            [n] => n,
            ref s => return Err(shape_err("dense", format!("input must be a vector, got {s:?}"))),
        };
        let m = match *self.shape(w) {
            [m, wn] if wn == n => m,
            ref s => {
                return Err(shape_err(
                    "dense",
                    format!("weight shape {s:?} incompatible with input length {n}"),
                ))
            }
        };
        if self.shape(b) != [m] {
            return Err(shape_err(
                "dense",
                format!("bias shape {:?}, expected [{m}]", self.shape(b)),
            ));
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let out = (0..m)
            .map(|r| wv[r * n..(r + 1) * n].iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>() + bv[r])
            .collect();
        Ok(self.push(vec![m], out, Op::Dense { x, w, b }, &[x, w, b]))
    }
}

/// `dst[y,x] += Σ k[ky,kx] · src[y+ky-1, x+kx-1]` with zero padding.
fn correlate_add<T: Scalar>(dst: &mut [T], src: &[T], k: &[T], h: usize, w: usize) {
    for ky in 0..3 {
        for kx in 0..3 {
            let kv = k[ky * 3 + kx];
            if kv == T::zero() {
                continue;
            }
            let (y0, y1) = valid_range(ky, h);
            let (x0, x1) = valid_range(kx, w);
            for y in y0..y1 {
                let sy = y + ky - 1;
                let d = &mut dst[y * w + x0..y * w + x1];
                let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                for (a, &b) in d.iter_mut().zip(s) {
                    *a += kv * b;
                }
            }
        }
    }
}

/// Output coordinates whose tap `k` lands inside `0..n`.
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

pub(super) fn conv2d_backward<T: Scalar>(graph: &Graph<T>, x: Var, w: Var, b: Var, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let (cin, h, wd) = (graph.shape(x)[0], graph.shape(x)[1], graph.shape(x)[2]);
    let cout = graph.shape(w)[0];
    let plane = h * wd;
    let xv = graph.value(x);
    let wv = graph.value(w);
    let mut gx = vec![T::zero(); xv.len()];
    let mut gw = vec![T::zero(); wv.len()];
    let mut gb = vec![T::zero(); cout];
    for co in 0..cout {
        let go = &g[co * plane..(co + 1) * plane];
        gb[co] = go.iter().copied().sum();
        for ci in 0..cin {
            let src = &xv[ci * plane..(ci + 1) * plane];
            let base = (co * cin + ci) * 9;
            let gsrc = &mut gx[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let (y0, y1) = valid_range(ky, h);
                    let (x0, x1) = valid_range(kx, wd);
                    let kv = wv[base + ky * 3 + kx];
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let grow = &go[y * wd + x0..y * wd + x1];
                        let soff = sy * wd + x0 + kx - 1;
                        let srow = &src[soff..soff + (x1 - x0)];
                        for (&d, &s) in grow.iter().zip(srow) {
                            acc += d * s;
                        }
                        let gdst = &mut gsrc[soff..soff + (x1 - x0)];
                        for (gd, &d) in gdst.iter_mut().zip(grow) {
                            *gd += kv * d;
                        }
                    }
                    gw[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
    vec![(x, gx), (w, gw), (b, gb)]
}

pub(super) fn avg_pool2d_backward<T: Scalar>(shape: &[usize], g: &[T]) -> Vec<T> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let ys = 2 * oy..(2 * oy + 2).min(h);
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let n = T::from_usize(ys.len() * xs.len()).unwrap();
                let share = g[(ch * oh + oy) * ow + ox] / n;
                for y in ys {
                    for xx in xs.clone() {
                        gx[(ch * h + y) * w + xx] += share;
                    }
                }
            }
        }
    }
    gx
}

pub(super) fn global_avg_pool_backward<T: Scalar>(shape: &[usize], g: &[T]) -> Vec<T> {
    let plane = shape[1] * shape[2];
    let n = T::from_usize(plane).unwrap();
    g.iter().flat_map(|&d| std::iter::repeat_n(d / n, plane)).collect()
}

pub(super) fn dense_backward<T: Scalar>(graph: &Graph<T>, x: Var, w: Var, b: Var, g: &[T]) -> Vec<(Var, Vec<T>)> {
    let xv = graph.value(x);
    let wv = graph.value(w);
    let n = xv.len();
    let mut gx = vec![T::zero(); n];
    let mut gw = vec![T::zero(); wv.len()];
    for (r, &d) in g.iter().enumerate() {
        let row = &wv[r * n..(r + 1) * n];
        for ((gxi, gwi), (&wi, &xi)) in gx.iter_mut().zip(&mut gw[r * n..(r + 1) * n]).zip(row.iter().zip(xv)) {
            *gxi += d * wi;
            *gwi = d * xi;
        }
    }
    vec![(x, gx), (w, gw), (b, g.to_vec())]
}
