//! Finite-difference verification of every differentiable operator and
//! loss term, in double precision.
//!
//! Each case draws a random point from a seeded generator and compares
//! [`Graph::backward`] against central differences. Coordinates where the
//! function has a kink within the probe step are skipped.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorlab::{lightness, CvdKind, RgbImage};
use crate::cudnet::{fuse, ModelConfig, ModelWeights, ParamVars, SketchSet};
use crate::datagen::{gen_pair, GenConfig};
use crate::losses::{
    apply_stencil, histogram_loss, identity_loss_graph, lab_loss, lab_loss_terms, ms_ssim_graph, objective, ChangeMask,
    LossConfig, PreparedPair,
};
use crate::preprocess::build_triplet;
use crate::tensorcore::{
    gaussian_kernel, grad_check_many, GradCheckConfig, GradReport, Graph, SketchSeed, TensorError, Var,
};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_POINTS: usize = 20;

type LossFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + Send + Sync>;

/// One random point of a case: the inputs and the scalar function of them.
pub struct Instance {
    pub inputs: Vec<(Vec<usize>, Vec<f64>)>,
    pub f: LossFn,
    pub max_checks_per_input: Option<usize>,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Operator,
    Loss,
    /// Deliberately wrong gradient; never part of the default suite.
    Fixture,
}

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub kind: CaseKind,
    build: fn(&mut ChaCha8Rng) -> Instance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub kind: CaseKind,
    pub points: usize,
    pub checked: usize,
    pub skipped: usize,
    /// Worst coordinate over all points.
    pub worst: GradReport,
}

impl CaseResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.worst.max_rel_error < tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn input(shape: &[usize], values: Vec<f64>) -> (Vec<usize>, Vec<f64>) {
    (shape.to_vec(), values)
}

/// `Σ r_i·y_i` with fixed random `r`, so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, r: &[f64]) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let c = g.constant(&shape, r.to_vec())?;
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

fn unary(
    rng: &mut ChaCha8Rng,
    lo: f64,
    hi: f64,
    op: impl Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError> + Send + Sync + 'static,
) -> Instance {
    let x = uniform(rng, 12, lo, hi);
    let r = uniform(rng, 64, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[3, 4], x)],
        f: Box::new(move |g, v| {
            let y = op(g, v[0])?;
            let r = &r[..g.numel(y)];
            project(g, y, r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn binary(
    rng: &mut ChaCha8Rng,
    b_range: (f64, f64),
    op: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var, TensorError> + Send + Sync + 'static,
) -> Instance {
    let a = uniform(rng, 10, -1.5, 1.5);
    let b = uniform(rng, 10, b_range.0, b_range.1);
    let r = uniform(rng, 10, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[10], a), input(&[10], b)],
        f: Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(h, w, |_, _| {
        [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ]
    })
    .expect("in range")
}

fn network_inputs(weights: &ModelWeights) -> Vec<(Vec<usize>, Vec<f64>)> {
    weights.params.iter().map(|p| (p.shape.clone(), p.values())).collect()
}

/// Weights with a head large enough that the curves move visibly.
fn network_weights(rng: &mut ChaCha8Rng) -> ModelWeights {
    let mut w = ModelWeights::init(ModelConfig::default(), rng.gen()).expect("default config is valid");
    for v in &mut w.params[9].data {
        *v = rng.gen_range(-0.3..0.3);
    }
    w
}

const NETWORK_CHECKS: Option<usize> = Some(2);
const OPERATOR_EPS: f64 = 1e-5;
/// Hundreds of per-pixel clamp and abs crossings sit near any weight
/// perturbation; a smaller step keeps their bias below tolerance.
const NETWORK_EPS: f64 = 1e-6;

fn op_add(rng: &mut ChaCha8Rng) -> Instance {
    binary(rng, (-1.5, 1.5), |g, a, b| g.add(a, b))
}

fn op_sub(rng: &mut ChaCha8Rng) -> Instance {
    binary(rng, (-1.5, 1.5), |g, a, b| g.sub(a, b))
}

fn op_mul(rng: &mut ChaCha8Rng) -> Instance {
    binary(rng, (-1.5, 1.5), |g, a, b| g.mul(a, b))
}

fn op_div(rng: &mut ChaCha8Rng) -> Instance {
    binary(rng, (0.5, 2.0), |g, a, b| g.div(a, b))
}

fn op_scale_offset(rng: &mut ChaCha8Rng) -> Instance {
    let (k, c) = (rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0));
    unary(rng, -1.0, 1.0, move |g, x| {
        let s = g.scale(x, k);
        Ok(g.offset(s, c))
    })
}

fn op_tanh(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, -2.0, 2.0, |g, x| Ok(g.tanh(x)))
}

fn op_abs(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, -1.0, 1.0, |g, x| Ok(g.abs(x)))
}

fn op_relu(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, -1.0, 1.0, |g, x| Ok(g.relu(x)))
}

fn op_clamp01(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, -0.5, 1.5, |g, x| Ok(g.clamp01(x)))
}

fn op_pow(rng: &mut ChaCha8Rng) -> Instance {
    let p = rng.gen_range(0.1..2.5);
    unary(rng, 0.2, 1.5, move |g, x| Ok(g.pow(x, p)))
}

fn op_signed_sqrt(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, -1.0, 1.0, |g, x| Ok(g.signed_sqrt(x)))
}

fn op_l2_normalize(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, -1.0, 1.0, |g, x| Ok(g.l2_normalize(x)))
}

fn op_reductions(rng: &mut ChaCha8Rng) -> Instance {
    let k = rng.gen_range(0.5..2.0);
    unary(rng, -1.0, 1.0, move |g, x| {
        let s = g.sum(x);
        let m = g.mean(x);
        let m = g.scale(m, k);
        let t = g.tanh(s);
        g.add(t, m)
    })
}

fn op_reshape_slice_concat(rng: &mut ChaCha8Rng) -> Instance {
    unary(rng, -1.0, 1.0, |g, x| {
        let r = g.reshape(x, &[4, 3])?;
        let a = g.slice_rows(r, 1, 2)?;
        let b = g.slice_rows(r, 0, 1)?;
        let t = g.tanh(a);
        let c = g.concat(&[t, b, a])?;
        g.reshape(c, &[15])
    })
}

fn op_select(rng: &mut ChaCha8Rng) -> Instance {
    let mask: Arc<[bool]> = (0..10).map(|_| rng.gen_bool(0.5)).collect();
    binary(rng, (-1.5, 1.5), move |g, a, b| {
        let t = g.tanh(b);
        g.select(Arc::clone(&mask), a, t)
    })
}

fn op_conv2d(rng: &mut ChaCha8Rng) -> Instance {
    let x = uniform(rng, 2 * 5 * 6, -1.0, 1.0);
    let w = uniform(rng, 3 * 2 * 9, -0.5, 0.5);
    let b = uniform(rng, 3, -0.5, 0.5);
    let r = uniform(rng, 3 * 5 * 6, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[2, 5, 6], x), input(&[3, 2, 3, 3], w), input(&[3], b)],
        f: Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn op_avg_pool2d(rng: &mut ChaCha8Rng) -> Instance {
    let x = uniform(rng, 2 * 5 * 7, -1.0, 1.0);
    let r = uniform(rng, 2 * 3 * 4, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[2, 5, 7], x)],
        f: Box::new(move |g, v| {
            let y = g.avg_pool2d(v[0])?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn op_global_avg_pool(rng: &mut ChaCha8Rng) -> Instance {
    let x = uniform(rng, 3 * 4 * 4, -1.0, 1.0);
    let r = uniform(rng, 3, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[3, 4, 4], x)],
        f: Box::new(move |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn op_dense(rng: &mut ChaCha8Rng) -> Instance {
    let x = uniform(rng, 6, -1.0, 1.0);
    let w = uniform(rng, 4 * 6, -1.0, 1.0);
    let b = uniform(rng, 4, -1.0, 1.0);
    let r = uniform(rng, 4, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[6], x), input(&[4, 6], w), input(&[4], b)],
        f: Box::new(move |g, v| {
            let y = g.dense(v[0], v[1], v[2])?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn op_circular_conv(rng: &mut ChaCha8Rng) -> Instance {
    let a = uniform(rng, 16, -1.0, 1.0);
    let b = uniform(rng, 16, -1.0, 1.0);
    let r = uniform(rng, 16, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[16], a), input(&[16], b)],
        f: Box::new(move |g, v| {
            let y = g.circular_conv(v[0], v[1])?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn op_count_sketch(rng: &mut ChaCha8Rng) -> Instance {
    let seed = Arc::new(SketchSeed::random(12, 8, rng));
    let x = uniform(rng, 12, -1.0, 1.0);
    let r = uniform(rng, 8, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[12], x)],
        f: Box::new(move |g, v| {
            let y = g.count_sketch(v[0], &seed)?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn op_mcb_fusion(rng: &mut ChaCha8Rng) -> Instance {
    let cfg = ModelConfig {
        channels: [4, 4, 4, 8],
        sketch_dim: 16,
        sketch_seed: rng.gen(),
    };
    let sketches = SketchSet::new(&cfg);
    let feats: Vec<_> = (0..3).map(|_| input(&[8], uniform(rng, 8, -1.0, 1.0))).collect();
    let r = uniform(rng, 16, -1.0, 1.0);
    Instance {
        inputs: feats,
        f: Box::new(move |g, v| {
            let y = fuse(g, v[0], v[1], v[2], &sketches)?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn op_gaussian_valid(rng: &mut ChaCha8Rng) -> Instance {
    let kernel: Arc<[f64]> = gaussian_kernel(5, 1.0).into();
    let x = uniform(rng, 2 * 7 * 8, -1.0, 1.0);
    let r = uniform(rng, 2 * 3 * 4, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[2, 7, 8], x)],
        f: Box::new(move |g, v| {
            let y = g.gaussian_valid(v[0], &kernel)?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn op_curve_scale(rng: &mut ChaCha8Rng) -> Instance {
    let x = uniform(rng, 20, 0.0, 1.0);
    let k = uniform(rng, 32, 0.5, 1.5);
    let r = uniform(rng, 20, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[20], x), input(&[32], k)],
        f: Box::new(move |g, v| {
            let s = g.curve_scale(v[0], v[1])?;
            let y = g.mul(v[0], s)?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn op_hsv_to_rgb(rng: &mut ChaCha8Rng) -> Instance {
    let hue: Arc<[f64]> = uniform(rng, 12, 0.0, 1.0).into();
    let s = uniform(rng, 12, 0.05, 0.95);
    let v = uniform(rng, 12, 0.05, 0.95);
    let r = uniform(rng, 36, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[12], s), input(&[12], v)],
        f: Box::new(move |g, x| {
            let y = g.hsv_to_rgb(Arc::clone(&hue), x[0], x[1])?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn op_lightness(rng: &mut ChaCha8Rng) -> Instance {
    let x = uniform(rng, 3 * 10, 0.0, 1.0);
    let r = uniform(rng, 10, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[3, 10], x)],
        f: Box::new(move |g, v| {
            let y = g.lightness(v[0])?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn op_conjugate_select(rng: &mut ChaCha8Rng) -> Instance {
    let pred = uniform(rng, 16, 0.0, 100.0);
    let inp = uniform(rng, 16, 0.0, 100.0);
    let tgt = uniform(rng, 16, 0.0, 100.0);
    let r = uniform(rng, 16, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[16], pred)],
        f: Box::new(move |g, v| {
            let y = g.conjugate_select(v[0], &inp, &tgt)?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn op_soft_histogram(rng: &mut ChaCha8Rng) -> Instance {
    let x = uniform(rng, 24, 0.0, 1.0);
    let r = uniform(rng, 16, -1.0, 1.0);
    Instance {
        inputs: vec![input(&[24], x)],
        f: Box::new(move |g, v| {
            let y = g.soft_histogram(v[0], 16, 1.0 / 16.0)?;
            project(g, y, &r)
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn op_ms_ssim(rng: &mut ChaCha8Rng) -> Instance {
    let a = uniform(rng, 24 * 24, 0.1, 0.9);
    let b = uniform(rng, 24 * 24, 0.1, 0.9);
    Instance {
        inputs: vec![input(&[1, 24, 24], a), input(&[1, 24, 24], b)],
        f: Box::new(|g, v| ms_ssim_graph(g, v[0], v[1])),
        max_checks_per_input: Some(20),
        eps: OPERATOR_EPS,
    }
}

fn loss_lab(rng: &mut ChaCha8Rng) -> Instance {
    let pred = random_image(rng, 16, 16);
    let tgt = random_image(rng, 16, 16);
    Instance {
        inputs: vec![input(&[3, 16, 16], crate::preprocess::to_planar(&pred))],
        f: Box::new(move |g, v| lab_loss(g, v[0], &tgt)),
        max_checks_per_input: Some(30),
        eps: OPERATOR_EPS,
    }
}

fn loss_histogram(rng: &mut ChaCha8Rng) -> Instance {
    let pred = random_image(rng, 16, 16);
    let tgt = random_image(rng, 16, 16);
    let cfg = LossConfig::default();
    Instance {
        inputs: vec![input(&[3, 16, 16], crate::preprocess::to_planar(&pred))],
        f: Box::new(move |g, v| histogram_loss(g, v[0], &tgt, &cfg)),
        max_checks_per_input: Some(30),
        eps: OPERATOR_EPS,
    }
}

/// Stencil, conjugate selection on L, then both Lab terms.
fn loss_conjugate_composition(rng: &mut ChaCha8Rng) -> Instance {
    let pred = random_image(rng, 16, 16);
    let inp = random_image(rng, 16, 16);
    let tgt = random_image(rng, 16, 16);
    let mask = ChangeMask {
        height: 16,
        width: 16,
        changed: (0..256).map(|_| rng.gen_bool(0.7)).collect(),
    };
    let (in_l, tgt_l) = (lightness(&inp), lightness(&tgt));
    Instance {
        inputs: vec![input(&[3, 16, 16], crate::preprocess::to_planar(&pred))],
        f: Box::new(move |g, v| {
            let phi = apply_stencil(g, v[0], &tgt, &mask)?;
            let l = g.lightness(phi)?;
            let sel = g.conjugate_select(l, &in_l, &tgt_l)?;
            let sel = g.reshape(sel, &[16, 16])?;
            let (l1, ms) = lab_loss_terms(g, sel, &tgt_l)?;
            g.add(l1, ms)
        }),
        max_checks_per_input: Some(30),
        eps: OPERATOR_EPS,
    }
}

fn loss_identity(rng: &mut ChaCha8Rng) -> Instance {
    let weights = network_weights(rng);
    let target = build_triplet(&random_image(rng, 16, 16), CvdKind::Deuteranopia);
    let inputs = network_inputs(&weights);
    let sketches = weights.sketches.clone();
    let cfg = LossConfig::default();
    Instance {
        inputs,
        f: Box::new(move |g, v| {
            let params = ParamVars::from_slice(v);
            identity_loss_graph(g, &params, &sketches, &target, &cfg).map_err(model_to_tensor)
        }),
        max_checks_per_input: NETWORK_CHECKS,
        eps: NETWORK_EPS,
    }
}

fn loss_total(rng: &mut ChaCha8Rng) -> Instance {
    let weights = network_weights(rng);
    let gen = GenConfig {
        height: 16,
        width: 16,
        ..GenConfig::default()
    };
    let pair = gen_pair(rng.gen_range(0..1_000_000), &gen).expect("default generator config succeeds");
    let prepared = PreparedPair::new(&pair.input, &pair.target, gen.kind).expect("same size");
    let inputs = network_inputs(&weights);
    let sketches = weights.sketches.clone();
    let cfg = LossConfig::default();
    Instance {
        inputs,
        f: Box::new(move |g, v| {
            let params = ParamVars::from_slice(v);
            let vars = objective(g, &params, &sketches, &prepared, &cfg).map_err(model_to_tensor)?;
            Ok(vars.total)
        }),
        max_checks_per_input: NETWORK_CHECKS,
        eps: NETWORK_EPS,
    }
}

/// Multiplies by a detached copy of its input: the backward pass misses
/// half of the true derivative.
fn fixture_detached(rng: &mut ChaCha8Rng) -> Instance {
    let x = uniform(rng, 6, 0.5, 1.5);
    Instance {
        inputs: vec![input(&[6], x)],
        f: Box::new(|g, v| {
            let copy = g.value(v[0]).to_vec();
            let c = g.constant(&[6], copy)?;
            let y = g.mul(v[0], c)?;
            Ok(g.sum(y))
        }),
        max_checks_per_input: None,
        eps: OPERATOR_EPS,
    }
}

fn model_to_tensor(e: crate::cudnet::ModelError) -> TensorError {
    match e {
        crate::cudnet::ModelError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "model",
            detail: other.to_string(),
        },
    }
}

macro_rules! case {
    ($name:literal, $kind:ident, $f:ident) => {
        GradCase {
            name: $name,
            kind: CaseKind::$kind,
            build: $f,
        }
    };
}

pub const CASES: &[GradCase] = &[
    case!("add", Operator, op_add),
    case!("sub", Operator, op_sub),
    case!("mul", Operator, op_mul),
    case!("div", Operator, op_div),
    case!("scale_offset", Operator, op_scale_offset),
    case!("tanh", Operator, op_tanh),
    case!("abs", Operator, op_abs),
    case!("relu", Operator, op_relu),
    case!("clamp01", Operator, op_clamp01),
    case!("pow", Operator, op_pow),
    case!("signed_sqrt", Operator, op_signed_sqrt),
    case!("l2_normalize", Operator, op_l2_normalize),
    case!("sum_mean", Operator, op_reductions),
    case!("reshape_slice_concat", Operator, op_reshape_slice_concat),
    case!("select", Operator, op_select),
    case!("conv2d", Operator, op_conv2d),
    case!("avg_pool2d", Operator, op_avg_pool2d),
    case!("global_avg_pool", Operator, op_global_avg_pool),
    case!("dense", Operator, op_dense),
    case!("circular_conv", Operator, op_circular_conv),
    case!("count_sketch", Operator, op_count_sketch),
    case!("mcb_fusion", Operator, op_mcb_fusion),
    case!("gaussian_valid", Operator, op_gaussian_valid),
    case!("curve_scale", Operator, op_curve_scale),
    case!("hsv_to_rgb", Operator, op_hsv_to_rgb),
    case!("lightness", Operator, op_lightness),
    case!("conjugate_select", Operator, op_conjugate_select),
    case!("soft_histogram", Operator, op_soft_histogram),
    case!("ms_ssim", Operator, op_ms_ssim),
    case!("lab_loss", Loss, loss_lab),
    case!("histogram_loss", Loss, loss_histogram),
    case!("conjugate_lab_loss", Loss, loss_conjugate_composition),
    case!("identity_loss", Loss, loss_identity),
    case!("total_loss", Loss, loss_total),
    case!("detached-fixture", Fixture, fixture_detached),
];

impl GradCase {
    pub fn instance(&self, rng: &mut ChaCha8Rng) -> Instance {
        (self.build)(rng)
    }
}

pub fn find_case(name: &str) -> Option<&'static GradCase> {
    CASES.iter().find(|c| c.name == name)
}

/// Runs one case at `points` random points drawn from `seed`.
pub fn run_case(case: &GradCase, seed: u64, points: usize) -> Result<CaseResult, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv(case.name));
    let mut result = CaseResult {
        name: case.name,
        kind: case.kind,
        points,
        checked: 0,
        skipped: 0,
        worst: GradReport::default(),
    };
    for _ in 0..points {
        let inst = (case.build)(&mut rng);
        let cfg = GradCheckConfig {
            max_checks_per_input: inst.max_checks_per_input,
            eps: inst.eps,
            seed: rng.gen(),
            skip_kinks: true,
        };
        let rep = grad_check_many(&inst.f, &inst.inputs, &cfg)?;
        if rep.checked > 0 && (result.checked == 0 || rep.max_rel_error > result.worst.max_rel_error) {
            result.worst = rep.clone();
        }
        result.checked += rep.checked;
        result.skipped += rep.skipped;
    }
    result.worst.checked = result.checked;
    result.worst.skipped = result.skipped;
    Ok(result)
}

/// Every non-fixture case, or only `only` when given.
pub fn run_suite(seed: u64, points: usize, only: Option<&str>) -> Result<Vec<CaseResult>, TensorError> {
    let selected: Vec<&GradCase> = match only {
        Some(name) => vec![find_case(name).ok_or_else(|| TensorError::Invalid {
            op: "grad-check",
            detail: format!("unknown operator {name:?}"),
        })?],
        None => CASES.iter().filter(|c| c.kind != CaseKind::Fixture).collect(),
    };
    selected.into_iter().map(|c| run_case(c, seed, points)).collect()
}

pub(crate) fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_operators_pass() {
        for name in ["mul", "conv2d", "circular_conv", "curve_scale", "conjugate_select"] {
            let r = run_case(find_case(name).unwrap(), 1, 3).unwrap();
            assert!(r.passed(DEFAULT_TOLERANCE), "{r:?}");
        }
    }

    #[test]
    fn fixture_fails() {
        let r = run_case(find_case("detached-fixture").unwrap(), 1, 2).unwrap();
        assert!(!r.passed(DEFAULT_TOLERANCE));
        assert!((r.worst.numeric / r.worst.analytic - 2.0).abs() < 1e-6);
    }

    #[test]
    fn unknown_case_rejected() {
        assert!(run_suite(0, 1, Some("nope")).is_err());
        assert!(CASES.iter().filter(|c| c.kind == CaseKind::Fixture).count() == 1);
    }
}
