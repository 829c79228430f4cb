//! Count Sketch projection.

use std::sync::Arc;

use rand::Rng;

use super::{shape_err, Graph, Op, Scalar, TensorError, Var};

/// Fixed hash/sign tables mapping an `n`-vector into `dim` buckets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SketchSeed {
    dim: usize,
    hash: Vec<usize>,
    sign: Vec<i8>,
}

impl SketchSeed {
    pub fn new(dim: usize, hash: Vec<usize>, sign: Vec<i8>) -> Result<Self, TensorError> {
        let invalid = |detail: String| TensorError::Invalid {
            op: "count_sketch",
            detail,
        };
        if dim == 0 {
            return Err(invalid("sketch dimension must be positive".into()));
        }
        if hash.len() != sign.len() {
            return Err(invalid(format!(
                "hash table has {} entries but sign table has {}",
                hash.len(),
                sign.len()
            )));
        }
        if let Some(&h) = hash.iter().find(|&&h| h >= dim) {
            return Err(invalid(format!("hash index {h} outside [0,{dim})")));
        }
        if sign.iter().any(|&s| s != 1 && s != -1) {
            return Err(invalid("signs must be ±1".into()));
        }
        Ok(Self { dim, hash, sign })
    }

    /// Uniform hashes and Rademacher signs.
    pub fn random<R: Rng + ?Sized>(input_len: usize, dim: usize, rng: &mut R) -> Self {
        let hash = (0..input_len).map(|_| rng.gen_range(0..dim)).collect();
        let sign = (0..input_len).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        Self { dim, hash, sign }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_len(&self) -> usize {
        self.hash.len()
    }

    pub fn hash(&self) -> &[usize] {
        &self.hash
    }

    pub fn sign(&self) -> &[i8] {
        &self.sign
    }

    /// `ψ(x)[j] = Σ_{i: h(i)=j} s(i)·x(i)`.
    pub fn apply<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        for ((&h, &s), &v) in self.hash.iter().zip(&self.sign).zip(x) {
            if s > 0 {
                out[h] += v;
            } else {
                out[h] -= v;
            }
        }
        out
    }

    /// Adjoint of [`SketchSeed::apply`].
    pub fn transpose<T: Scalar>(&self, g: &[T]) -> Vec<T> {
        self.hash
            .iter()
            .zip(&self.sign)
            .map(|(&h, &s)| if s > 0 { g[h] } else { -g[h] })
            .collect()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn count_sketch(&mut self, x: Var, seed: &Arc<SketchSeed>) -> Result<Var, TensorError> {
        if self.shape(x) != [seed.input_len()] {
            return Err(shape_err(
                "count_sketch",
                format!(
                    "input shape {:?} does not match sketch input length {}",
                    self.shape(x),
                    seed.input_len()
                ),
            ));
        }
        let out = seed.apply(self.value(x));
        Ok(self.push(vec![seed.dim()], out, Op::CountSketch(x, Arc::clone(seed)), &[x]))
    }
}
