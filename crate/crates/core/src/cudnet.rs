//! The filter-regression network.
//!
//! Three HSV streams (original, simulated, map) pass through the same four
//! conv → avg-pool → tanh blocks and a global average pool. The features are
//! fused by three chained compact bilinear stages, `MCB(MCB(MCB(f_n, f_d),
//! f_m), f_n)`, and a dense head regresses 64 knots: 32 for the saturation
//! curve, 32 for the value curve. Knots are `1 + tanh(·)`, so a zero head is
//! the identity filter.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorlab::{rgb_to_hsv, CvdKind, RgbImage};
use crate::preprocess::{build_triplet, to_model_input, InputTriplet};
use crate::tensorcore::{curve_scale_value, Graph, Scalar, SketchSeed, TensorError, Var};

/// Smallest accepted image side; four 2× poolings need 16 pixels.
pub const MIN_SIDE: usize = 16;
pub const KNOTS_PER_CURVE: usize = 32;
pub const HEAD_OUTPUTS: usize = 2 * KNOTS_PER_CURVE;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image is {height}x{width}; both sides must be at least {MIN_SIDE}")]
    TooSmall { height: usize, width: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid curve: {0}")]
    Curve(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output channels of the four convolution blocks.
    pub channels: [usize; 4],
    /// Count-Sketch dimension; a power of two.
    pub sketch_dim: usize,
    /// Seed for the fixed Count-Sketch tables.
    pub sketch_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 64],
            sketch_dim: 512,
            sketch_seed: 0x5eed,
        }
    }
}

impl ModelConfig {
    /// The narrow-bottleneck variant: last block has 16 channels.
    pub fn low_bottleneck() -> Self {
        Self {
            channels: [16, 32, 64, 16],
            ..Self::default()
        }
    }

    pub fn feature_len(&self) -> usize {
        self.channels[3]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.sketch_dim.is_power_of_two() || self.sketch_dim < 2 {
            return Err(ModelError::Tensor(TensorError::Invalid {
                op: "model config",
                detail: format!("sketch dimension {} must be a power of two ≥ 2", self.sketch_dim),
            }));
        }
        if self.channels.contains(&0) {
            return Err(ModelError::Tensor(TensorError::Invalid {
                op: "model config",
                detail: "channel widths must be positive".into(),
            }));
        }
        Ok(())
    }
}

/// A named learnable array, stored in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    fn glorot(name: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut t = Self::zeros(name, shape);
        for v in &mut t.data {
            *v = rng.gen_range(-bound..bound) as f32;
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| T::lit(f64::from(v))).collect()
    }
}

/// Count-Sketch tables, two per fusion stage.
#[derive(Clone, Debug)]
pub struct SketchSet {
    pub stages: [[Arc<SketchSeed>; 2]; 3],
}

impl SketchSet {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sketch_seed);
        let (c, d) = (cfg.feature_len(), cfg.sketch_dim);
        let mut make = |n| Arc::new(SketchSeed::random(n, d, &mut rng));
        let s1 = [make(c), make(c)];
        let s2 = [make(d), make(c)];
        let s3 = [make(d), make(c)];
        Self { stages: [s1, s2, s3] }
    }
}

/// All learnable parameters. The conv blocks are shared by the three
/// input streams.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// Declaration order: conv0.w, conv0.b, …, conv3.w, conv3.b, head.w, head.b.
    pub params: Vec<ParamTensor>,
    pub sketches: SketchSet,
}

impl PartialEq for ModelWeights {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

pub const NUM_PARAMS: usize = 10;

impl ModelWeights {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(NUM_PARAMS);
        let mut cin = 3;
        for (k, &cout) in config.channels.iter().enumerate() {
            params.push(ParamTensor::glorot(
                format!("conv{k}.weight"),
                &[cout, cin, 3, 3],
                cin * 9,
                cout * 9,
                &mut rng,
            ));
            params.push(ParamTensor::zeros(format!("conv{k}.bias"), &[cout]));
            cin = cout;
        }
        let d = config.sketch_dim;
        params.push(ParamTensor::glorot(
            "head.weight",
            &[HEAD_OUTPUTS, d],
            d,
            HEAD_OUTPUTS,
            &mut rng,
        ));
        params.push(ParamTensor::zeros("head.bias", &[HEAD_OUTPUTS]));
        let sketches = SketchSet::new(&config);
        Ok(Self {
            config,
            params,
            sketches,
        })
    }

    /// Rebuilds weights from stored arrays, checking every shape.
    pub fn from_params(config: ModelConfig, params: Vec<ParamTensor>) -> Result<Self, ModelError> {
        let reference = Self::init(config.clone(), 0)?;
        if params.len() != reference.params.len() {
            return Err(ModelError::Tensor(TensorError::Invalid {
                op: "model weights",
                detail: format!("expected {} arrays, got {}", reference.params.len(), params.len()),
            }));
        }
        for (p, r) in params.iter().zip(&reference.params) {
            if p.shape != r.shape || p.data.len() != r.data.len() {
                return Err(ModelError::Tensor(TensorError::Invalid {
                    op: "model weights",
                    detail: format!("{} has shape {:?}, expected {:?}", r.name, p.shape, r.shape),
                }));
            }
        }
        Ok(Self {
            sketches: reference.sketches,
            config,
            params,
        })
    }

    /// Zeroes the regression head so every knot is 1.
    pub fn zero_head(&mut self) {
        for p in &mut self.params[8..] {
            p.data.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(ParamTensor::len).sum()
    }

    /// Places every parameter in `g` as a tracked leaf.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Result<ParamVars, TensorError> {
        let vars = self
            .params
            .iter()
            .map(|p| g.param(&p.shape, p.values()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ParamVars::from_slice(&vars))
    }
}

/// Graph handles for the parameters, in declaration order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub conv: [(Var, Var); 4],
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ParamVars {
    pub fn from_slice(v: &[Var]) -> Self {
        assert_eq!(v.len(), NUM_PARAMS, "expected {NUM_PARAMS} parameter handles");
        Self {
            conv: [(v[0], v[1]), (v[2], v[3]), (v[4], v[5]), (v[6], v[7])],
            head_weight: v[8],
            head_bias: v[9],
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.conv.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.push(self.head_weight);
        out.push(self.head_bias);
        out
    }
}

/// Two 32-knot scale curves for S and V; each knot in [0,2].
#[derive(Clone, Debug, PartialEq)]
pub struct CurveParams {
    pub s_knots: Vec<f64>,
    pub v_knots: Vec<f64>,
}

impl CurveParams {
    pub fn new(s_knots: Vec<f64>, v_knots: Vec<f64>) -> Result<Self, ModelError> {
        for (name, k) in [("s", &s_knots), ("v", &v_knots)] {
            if k.len() != KNOTS_PER_CURVE {
                return Err(ModelError::Curve(format!(
                    "{name} curve has {} knots, expected {KNOTS_PER_CURVE}",
                    k.len()
                )));
            }
            if let Some(bad) = k.iter().find(|v| !(0.0..=2.0).contains(*v)) {
                return Err(ModelError::Curve(format!("{name} knot {bad} outside [0,2]")));
            }
        }
        Ok(Self { s_knots, v_knots })
    }

    pub fn identity() -> Self {
        Self {
            s_knots: vec![1.0; KNOTS_PER_CURVE],
            v_knots: vec![1.0; KNOTS_PER_CURVE],
        }
    }

    /// Knots as one 64-vector, S first.
    pub fn to_vec(&self) -> Vec<f64> {
        self.s_knots.iter().chain(&self.v_knots).copied().collect()
    }

    pub fn mean_abs_deviation_from_identity(&self) -> f64 {
        let all = self.to_vec();
        all.iter().map(|k| (k - 1.0).abs()).sum::<f64>() / all.len() as f64
    }
}

/// Scale factor of a knot curve at `x` ∈ [0,1].
pub fn apply_curve(x: f64, knots: &[f64]) -> f64 {
    curve_scale_value(x, knots)
}

/// Applies both curves to an image: `s' = clamp01(s·S(s))`, `v' = clamp01(v·V(v))`, hue kept.
pub fn apply_filter(img: &RgbImage, curve: &CurveParams) -> RgbImage {
    let hsv = rgb_to_hsv(img);
    let data: Vec<f64> = hsv
        .pixels()
        .flat_map(|[h, s, v]| {
            let s2 = (s * apply_curve(s, &curve.s_knots)).clamp(0.0, 1.0);
            let v2 = (v * apply_curve(v, &curve.v_knots)).clamp(0.0, 1.0);
            crate::colorlab::hsv_to_rgb_px([h, s2, v2]).map(crate::colorlab::clamp_unit)
        })
        .collect();
    RgbImage::from_vec_unchecked(img.height(), img.width(), data)
}

pub fn check_size(height: usize, width: usize) -> Result<(), ModelError> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(ModelError::TooSmall { height, width });
    }
    Ok(())
}

/// Four conv → pool → tanh blocks and a global pool over one [3,H,W] stream.
pub fn extract_features<T: Scalar>(g: &mut Graph<T>, x: Var, conv: &[(Var, Var); 4]) -> Result<Var, ModelError> {
    let (h, w) = match *g.shape(x) {
        [3, h, w] => (h, w),
        ref s => {
            return Err(ModelError::Tensor(TensorError::Shape {
                op: "extract_features",
                detail: format!("stream must be [3,H,W], got {s:?}"),
            }))
        }
    };
    check_size(h, w)?;
    let mut act = x;
    for &(wt, b) in conv {
        let c = g.conv2d(act, wt, b)?;
        let p = g.avg_pool2d(c)?;
        act = g.tanh(p);
    }
    Ok(g.global_avg_pool(act)?)
}

/// One compact bilinear stage: signed sqrt and L2 normalization of the
/// circular convolution of the two sketches.
pub fn mcb<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, seeds: &[Arc<SketchSeed>; 2]) -> Result<Var, TensorError> {
    let sa = g.count_sketch(a, &seeds[0])?;
    let sb = g.count_sketch(b, &seeds[1])?;
    let c = g.circular_conv(sa, sb)?;
    let r = g.signed_sqrt(c);
    Ok(g.l2_normalize(r))
}

pub fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    f_n: Var,
    f_d: Var,
    f_m: Var,
    sketches: &SketchSet,
) -> Result<Var, TensorError> {
    if g.shape(f_n) != g.shape(f_d) || g.shape(f_n) != g.shape(f_m) {
        return Err(TensorError::Shape {
            op: "fuse",
            detail: format!(
                "feature shapes differ: {:?}, {:?}, {:?}",
                g.shape(f_n),
                g.shape(f_d),
                g.shape(f_m)
            ),
        });
    }
    let g1 = mcb(g, f_n, f_d, &sketches.stages[0])?;
    let g2 = mcb(g, g1, f_m, &sketches.stages[1])?;
    mcb(g, g2, f_n, &sketches.stages[2])
}

/// `1 + tanh(W·g + b)`, split into (S knots, V knots).
pub fn regress_nodes<T: Scalar>(
    g: &mut Graph<T>,
    fused: Var,
    params: &ParamVars,
) -> Result<(Var, Var, Var), TensorError> {
    let raw = g.dense(fused, params.head_weight, params.head_bias)?;
    let t = g.tanh(raw);
    let knots = g.offset(t, 1.0);
    let s = g.slice_rows(knots, 0, KNOTS_PER_CURVE)?;
    let v = g.slice_rows(knots, KNOTS_PER_CURVE, KNOTS_PER_CURVE)?;
    Ok((knots, s, v))
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Predicted image, planar RGB [3,H,W].
    pub image: Var,
    /// All 64 knots.
    pub knots: Var,
}

/// Full forward pass on a prepared triplet.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamVars,
    sketches: &SketchSet,
    triplet: &InputTriplet,
) -> Result<ForwardVars, ModelError> {
    let (h, w) = (triplet.height(), triplet.width());
    check_size(h, w)?;
    let input = to_model_input(g, triplet)?;
    let mut feats = Vec::with_capacity(3);
    for k in 0..3 {
        let stream = g.slice_rows(input, 3 * k, 3)?;
        feats.push(extract_features(g, stream, &params.conv)?);
    }
    let fused = fuse(g, feats[0], feats[1], feats[2], sketches)?;
    let (knots, s_knots, v_knots) = regress_nodes(g, fused, params)?;

    let hsv = rgb_to_hsv(&triplet.original);
    let plane = |c: usize| hsv.channel(c).into_iter().map(T::lit).collect::<Vec<T>>();
    let hue: Arc<[T]> = plane(0).into();
    let n = h * w;
    let s = g.constant(&[n], plane(1))?;
    let v = g.constant(&[n], plane(2))?;
    let s_scale = g.curve_scale(s, s_knots)?;
    let s_scaled = g.mul(s, s_scale)?;
    let s_out = g.clamp01(s_scaled);
    let v_scale = g.curve_scale(v, v_knots)?;
    let v_scaled = g.mul(v, v_scale)?;
    let v_out = g.clamp01(v_scaled);
    let rgb = g.hsv_to_rgb(hue, s_out, v_out)?;
    let image = g.reshape(rgb, &[3, h, w])?;
    Ok(ForwardVars { image, knots })
}

/// Planar [3,H,W] values back to an interleaved image.
pub fn planar_to_image<T: Scalar>(height: usize, width: usize, planar: &[T]) -> RgbImage {
    let n = height * width;
    let mut data = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            data.push(crate::colorlab::clamp_unit(planar[c * n + i].as_f64()));
        }
    }
    RgbImage::from_vec_unchecked(height, width, data)
}

/// Curves regressed for `img`, without applying them.
pub fn regress_curve(img: &RgbImage, weights: &ModelWeights, kind: CvdKind) -> Result<CurveParams, ModelError> {
    predict(img, weights, kind).map(|(_, c)| c)
}

/// Runs the network and applies its filter to `img`.
pub fn predict(img: &RgbImage, weights: &ModelWeights, kind: CvdKind) -> Result<(RgbImage, CurveParams), ModelError> {
    check_size(img.height(), img.width())?;
    let triplet = build_triplet(img, kind);
    let mut g = Graph::<f64>::new();
    let params = weights.bind(&mut g)?;
    let out = forward(&mut g, &params, &weights.sketches, &triplet)?;
    let knots = g.value(out.knots);
    let curve = CurveParams {
        s_knots: knots[..KNOTS_PER_CURVE].to_vec(),
        v_knots: knots[KNOTS_PER_CURVE..].to_vec(),
    };
    let image = planar_to_image(img.height(), img.width(), g.value(out.image));
    Ok((image, curve))
}
