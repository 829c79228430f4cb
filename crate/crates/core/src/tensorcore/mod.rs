//! Define-by-run reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] owns every array created during one forward pass. Arrays are
//! addressed by [`Var`] handles; node creation order is a topological order,
//! so [`Graph::backward`] walks nodes in reverse index order. Gradients are
//! accumulated additively when a node feeds several consumers.
//!
//! The engine is generic over [`Scalar`] so training can run in `f32` while
//! gradient verification runs in `f64`.

mod fft;
mod gradcheck;
mod image_ops;
mod nn;
mod sketch;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use fft::{circular_convolve_direct, fft_in_place};
pub use gradcheck::{grad_check, grad_check_many, GradCheckConfig, GradReport};
pub use image_ops::{curve_scale_value, gaussian_kernel};
pub use sketch::SketchSeed;

/// Floating-point element type of a graph.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Handle to an array inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Tanh(Var),
    Abs(Var),
    Relu(Var),
    Clamp01(Var),
    Pow(Var, T),
    SignedSqrt(Var),
    L2Normalize(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Slice(Var, usize),
    Concat(Vec<Var>),
    Select(Arc<[bool]>, Var, Var),
    Conv2d { x: Var, w: Var, b: Var },
    AvgPool2d(Var),
    GlobalAvgPool(Var),
    Dense { x: Var, w: Var, b: Var },
    CountSketch(Var, Arc<SketchSeed>),
    CircConv(Var, Var),
    GaussianValid(Var, Arc<[T]>),
    CurveScale { x: Var, knots: Var },
    HsvToRgb { hue: Arc<[T]>, s: Var, v: Var },
    Lightness(Var),
    Conjugate { pred: Var, factor: Vec<T> },
    SoftHistogram { x: Var, bins: usize, sigma: T },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    tracked: bool,
}

/// One forward pass worth of arrays plus the operations that produced them.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, shape: &[usize], values: Vec<T>, tracked: bool) -> Result<Var, TensorError> {
        if numel(shape) != values.len() {
            return Err(shape_err(
                "leaf",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), values.len()),
            ));
        }
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value: values,
            grad: None,
            op: Op::Leaf,
            tracked,
        });
        Ok(id)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, shape: &[usize], values: Vec<T>) -> Result<Var, TensorError> {
        self.leaf(shape, values, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> Result<Var, TensorError> {
        self.leaf(shape, values, false)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, parents: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            tracked,
        });
        id
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient after [`Graph::backward`]; `None` if `v` is unreachable or untracked.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Scalar value of a one-element array.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn same_numel(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        self.same_numel(op_name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, op, &[a, b]))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let k = T::lit(k);
        self.map(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn offset(&mut self, x: Var, k: f64) -> Var {
        let k = T::lit(k);
        self.map(x, |v| v + k, Op::Offset(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Clips to [0,1]; subgradient 1 strictly inside, 0 outside.
    pub fn clamp01(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()).min(T::one()), Op::Clamp01(x))
    }

    /// `x^p` for positive `x`, 0 elsewhere.
    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        let p = T::lit(p);
        self.map(x, |v| if v > T::zero() { v.powf(p) } else { T::zero() }, Op::Pow(x, p))
    }

    /// `sign(x)·(sqrt(|x| + ε) − sqrt(ε))`, a smooth signed square root.
    pub fn signed_sqrt(&mut self, x: Var) -> Var {
        let eps = T::lit(SIGNED_SQRT_EPS);
        let base = eps.sqrt();
        self.map(
            x,
            |v| {
                let m = (v.abs() + eps).sqrt() - base;
                if v < T::zero() {
                    -m
                } else {
                    m
                }
            },
            Op::SignedSqrt(x),
        )
    }

    /// `x / sqrt(Σx² + ε)`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let eps = T::lit(L2_EPS);
        let norm = (self.value(x).iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
        self.map(x, |v| v / norm, Op::L2Normalize(x, norm))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.numel(x)).unwrap();
        let s = self.value(x).iter().copied().sum::<T>() / n;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if numel(shape) != self.numel(x) {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), &[x]))
    }

    /// Rows `start..start+count` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().ok_or_else(|| shape_err("slice_rows", "scalar input"))?;
        if start + count > rows {
            return Err(shape_err(
                "slice_rows",
                format!(
                    "rows {start}..{} out of bounds for leading dimension {rows}",
                    start + count
                ),
            ));
        }
        let stride = numel(&shape[1..]);
        let value = self.value(x)[start * stride..(start + count) * stride].to_vec();
        let mut out_shape = shape;
        out_shape[0] = count;
        Ok(self.push(out_shape, value, Op::Slice(x, start * stride), &[x]))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(shape_err(
                    "concat",
                    format!("trailing shape {:?} differs from {tail:?}", &self.shape(p)[1..]),
                ));
            }
            rows += self.shape(p)[0];
            value.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(shape, value, Op::Concat(parts.to_vec()), parts))
    }

    /// Elementwise `if mask { a } else { b }`.
    pub fn select(&mut self, mask: Arc<[bool]>, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_numel("select", a, b)?;
        if mask.len() != self.numel(a) {
            return Err(shape_err(
                "select",
                format!("mask has {} entries for {} values", mask.len(), self.numel(a)),
            ));
        }
        let value = mask
            .iter()
            .zip(self.value(a).iter().zip(self.value(b)))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, Op::Select(mask, a, b), &[a, b]))
    }

    /// Populates gradients of every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_backward(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (parent, g) in contributions {
                let node = &mut self.nodes[parent.0];
                if !node.tracked {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| self.value(v);
        let unary = |x: Var, f: &dyn Fn(usize) -> T| -> Vec<(Var, Vec<T>)> {
            vec![(x, (0..g.len()).map(|k| g[k] * f(k)).collect())]
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect()),
                    (*b, g.iter().zip(va).map(|(&d, &x)| d * x).collect()),
                ]
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                vec![
                    (*a, g.iter().zip(vb).map(|(&d, &y)| d / y).collect()),
                    (*b, (0..g.len()).map(|k| -g[k] * out[k] / vb[k]).collect()),
                ]
            }
            Op::Scale(x, k) => unary(*x, &|_| *k),
            Op::Offset(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Tanh(x) => unary(*x, &|k| T::one() - out[k] * out[k]),
            Op::Abs(x) => {
                let vx = val(*x);
                unary(*x, &|k| {
                    if vx[k] > T::zero() {
                        T::one()
                    } else if vx[k] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Relu(x) => {
                let vx = val(*x);
                unary(*x, &|k| if vx[k] > T::zero() { T::one() } else { T::zero() })
            }
            Op::Clamp01(x) => {
                let vx = val(*x);
                unary(*x, &|k| {
                    if vx[k] > T::zero() && vx[k] < T::one() {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Pow(x, p) => {
                let vx = val(*x);
                unary(*x, &|k| {
                    if vx[k] > T::zero() {
                        *p * vx[k].powf(*p - T::one())
                    } else {
                        T::zero()
                    }
                })
            }
            Op::SignedSqrt(x) => {
                let vx = val(*x);
                let eps = T::lit(SIGNED_SQRT_EPS);
                let half = T::lit(0.5);
                unary(*x, &|k| half / (vx[k].abs() + eps).sqrt())
            }
            Op::L2Normalize(x, norm) => {
                let dot: T = out.iter().zip(g).map(|(&y, &d)| y * d).sum();
                vec![(*x, out.iter().zip(g).map(|(&y, &d)| (d - y * dot) / *norm).collect())]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.numel(*x)])],
            Op::Mean(x) => {
                let n = T::from_usize(self.numel(*x)).unwrap();
                vec![(*x, vec![g[0] / n; self.numel(*x)])]
            }
            Op::Slice(x, offset) => {
                let mut gx = vec![T::zero(); self.numel(*x)];
                gx[*offset..*offset + g.len()].copy_from_slice(g);
                vec![(*x, gx)]
            }
            Op::Concat(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.numel(p);
                        let piece = g[start..start + n].to_vec();
                        start += n;
                        (p, piece)
                    })
                    .collect()
            }
            Op::Select(mask, a, b) => {
                let ga = mask
                    .iter()
                    .zip(g)
                    .map(|(&m, &d)| if m { d } else { T::zero() })
                    .collect();
                let gb = mask
                    .iter()
                    .zip(g)
                    .map(|(&m, &d)| if m { T::zero() } else { d })
                    .collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d { x, w, b } => nn::conv2d_backward(self, *x, *w, *b, g),
            Op::AvgPool2d(x) => vec![(*x, nn::avg_pool2d_backward(self.shape(*x), g))],
            Op::GlobalAvgPool(x) => vec![(*x, nn::global_avg_pool_backward(self.shape(*x), g))],
            Op::Dense { x, w, b } => nn::dense_backward(self, *x, *w, *b, g),
            Op::CountSketch(x, seed) => vec![(*x, seed.transpose(g))],
            Op::CircConv(a, b) => fft::circ_conv_backward(val(*a), val(*b), *a, *b, g),
            Op::GaussianValid(x, kernel) => {
                vec![(*x, image_ops::gaussian_valid_backward(self.shape(*x), kernel, g))]
            }
            Op::CurveScale { x, knots } => image_ops::curve_backward(val(*x), val(*knots), *x, *knots, g),
            Op::HsvToRgb { hue, s, v } => image_ops::hsv_to_rgb_backward(hue, val(*s), val(*v), *s, *v, g),
            Op::Lightness(rgb) => vec![(*rgb, image_ops::lightness_backward(val(*rgb), g))],
            Op::Conjugate { pred, factor } => {
                vec![(*pred, g.iter().zip(factor).map(|(&d, &f)| d * f).collect())]
            }
            Op::SoftHistogram { x, bins, sigma } => {
                vec![(*x, image_ops::soft_histogram_backward(val(*x), *bins, *sigma, g))]
            }
        }
    }
}

pub(crate) const SIGNED_SQRT_EPS: f64 = 1e-6;
pub(crate) const L2_EPS: f64 = 1e-12;
