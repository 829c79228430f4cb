//! Radix-2 FFT and FFT-domain circular convolution.

use num_complex::Complex;

use super::{shape_err, Graph, Op, Scalar, TensorError, Var};

/// In-place iterative Cooley–Tukey transform. `inverse` applies the
/// conjugate twiddles and the 1/n scale. Length must be a power of two.
pub fn fft_in_place<T: Scalar>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length {n} is not a power of two");
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let angle = sign * 2.0 * std::f64::consts::PI / len as f64;
        let half = len / 2;
        let twiddles: Vec<Complex<T>> = (0..half)
            .map(|k| {
                let a = angle * k as f64;
                Complex::new(T::lit(a.cos()), T::lit(a.sin()))
            })
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let u = buf[start + k];
                let v = buf[start + k + half] * twiddles[k];
                buf[start + k] = u + v;
                buf[start + k + half] = u - v;
            }
        }
        len <<= 1;
    }
    if inverse {
        let scale = T::one() / T::from_usize(n).unwrap();
        for c in buf.iter_mut() {
            *c = *c * scale;
        }
    }
}

fn spectrum<T: Scalar>(x: &[T]) -> Vec<Complex<T>> {
    let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft_in_place(&mut buf, false);
    buf
}

fn real_inverse<T: Scalar>(mut buf: Vec<Complex<T>>) -> Vec<T> {
    fft_in_place(&mut buf, true);
    buf.into_iter().map(|c| c.re).collect()
}

/// `c[k] = Σ_j a[j]·b[(k−j) mod d]` via the FFT.
fn circ_conv<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    let fa = spectrum(a);
    let fb = spectrum(b);
    real_inverse(fa.iter().zip(&fb).map(|(x, y)| x * y).collect())
}

/// `r[j] = Σ_k g[k]·b[(k−j) mod d]`, the adjoint of convolving with `b`.
fn circ_corr<T: Scalar>(g: &[T], b: &[T]) -> Vec<T> {
    let fg = spectrum(g);
    let fb = spectrum(b);
    real_inverse(fg.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect())
}

/// O(d²) reference circular convolution.
pub fn circular_convolve_direct<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    let d = a.len();
    (0..d)
        .map(|k| (0..d).map(|j| a[j] * b[(k + d - j) % d]).sum())
        .collect()
}

impl<T: Scalar> Graph<T> {
    /// Circular convolution of two equal-length power-of-two vectors.
    pub fn circular_conv(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = self.numel(a);
        if self.shape(a) != [d] || self.shape(b) != [d] {
            return Err(shape_err(
                "circular_conv",
                format!(
                    "operands must be equal-length vectors, got {:?} and {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        if !d.is_power_of_two() {
            return Err(shape_err("circular_conv", format!("length {d} is not a power of two")));
        }
        let out = circ_conv(self.value(a), self.value(b));
        Ok(self.push(vec![d], out, Op::CircConv(a, b), &[a, b]))
    }
}

pub(super) fn circ_conv_backward<T: Scalar>(av: &[T], bv: &[T], a: Var, b: Var, g: &[T]) -> Vec<(Var, Vec<T>)> {
    vec![(a, circ_corr(g, bv)), (b, circ_corr(g, av))]
}
