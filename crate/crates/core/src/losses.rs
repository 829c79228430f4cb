//! Training objective.
//!
//! `total = lab_l1 + ms_ssim_term + hist + λ_id·identity`, where the first
//! two terms compare the L channel of the stenciled, conjugate-selected
//! prediction against the target, `hist` compares soft RGB histograms of the
//! raw prediction and the target, and `identity` is the Lab plus histogram
//! loss of the network applied to the target itself.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::colorlab::{lightness, CvdKind, ImageError, RgbImage};
use crate::cudnet::{forward, ModelError, ModelWeights, ParamVars, SketchSet};
use crate::imageio::quantize;
use crate::preprocess::{build_triplet, to_planar, InputTriplet};
use crate::tensorcore::{gaussian_kernel, Graph, Scalar, TensorError, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Stabilizers for a unit value range.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Number of MS-SSIM scales usable for an `h`×`w` image: the coarsest
/// scale must still hold one full window.
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let side = h.min(w);
    (1..=MS_SSIM_WEIGHTS.len())
        .take_while(|&s| side >> (s - 1) >= SSIM_WINDOW)
        .last()
        .unwrap_or(0)
}

/// The first `scales` standard weights, renormalized to sum to 1.
pub fn ms_ssim_weights(scales: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_id: f64,
    pub bins: usize,
    pub sigma: f64,
    /// `c_h` in the histogram weight `c_h / (H·W)`.
    pub hist_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_id: 1.0,
            bins: 64,
            sigma: 1.0 / 64.0,
            hist_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub lab_l1: f64,
    pub ms_ssim_term: f64,
    pub hist: f64,
    pub identity: f64,
    pub total: f64,
}

impl LossReport {
    /// Field names in CSV column order.
    pub const FIELDS: [&'static str; 5] = ["lab_l1", "ms_ssim_term", "hist", "identity", "total"];

    pub fn values(&self) -> [f64; 5] {
        [self.lab_l1, self.ms_ssim_term, self.hist, self.identity, self.total]
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

/// Pixels where input and target differ after 8-bit quantization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeMask {
    pub height: usize,
    pub width: usize,
    pub changed: Vec<bool>,
}

impl ChangeMask {
    pub fn count(&self) -> usize {
        self.changed.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.changed.iter().any(|&c| c)
    }

    /// Repeated once per planar RGB channel.
    pub fn planar3(&self) -> Arc<[bool]> {
        self.changed
            .iter()
            .chain(&self.changed)
            .chain(&self.changed)
            .copied()
            .collect()
    }
}

pub fn stencil_mask(i: &RgbImage, t: &RgbImage) -> Result<ChangeMask, ImageError> {
    i.same_dims(t)?;
    let changed = i
        .pixels()
        .zip(t.pixels())
        .map(|(a, b)| (0..3).any(|c| quantize(a[c]) != quantize(b[c])))
        .collect();
    Ok(ChangeMask {
        height: i.height(),
        width: i.width(),
        changed,
    })
}

fn planar_const<T: Scalar>(g: &mut Graph<T>, img: &RgbImage) -> Result<Var, TensorError> {
    let v = to_planar(img).into_iter().map(T::lit).collect();
    g.constant(&[3, img.height(), img.width()], v)
}

/// Prediction on changed pixels, the constant target elsewhere.
pub fn apply_stencil<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    t: &RgbImage,
    mask: &ChangeMask,
) -> Result<Var, TensorError> {
    let expected = [3, t.height(), t.width()];
    if g.shape(pred) != expected || mask.height != t.height() || mask.width != t.width() {
        return Err(TensorError::Shape {
            op: "apply_stencil",
            detail: format!(
                "prediction {:?}, target {}x{}, mask {}x{}",
                g.shape(pred),
                t.height(),
                t.width(),
                mask.height,
                mask.width
            ),
        });
    }
    let target = planar_const(g, t)?;
    g.select(mask.planar3(), pred, target)
}

fn ssim_maps<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, kernel: &Arc<[T]>) -> Result<(Var, Var), TensorError> {
    let mu_a = g.gaussian_valid(a, kernel)?;
    let mu_b = g.gaussian_valid(b, kernel)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.gaussian_valid(aa, kernel)?;
    let e_bb = g.gaussian_valid(bb, kernel)?;
    let e_ab = g.gaussian_valid(ab, kernel)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let l_num = g.scale(mu_ab, 2.0);
    let l_num = g.offset(l_num, SSIM_C1);
    let l_den = g.add(mu_aa, mu_bb)?;
    let l_den = g.offset(l_den, SSIM_C1);
    let lum = g.div(l_num, l_den)?;

    let cs_num = g.scale(cov, 2.0);
    let cs_num = g.offset(cs_num, SSIM_C2);
    let cs_den = g.add(var_a, var_b)?;
    let cs_den = g.offset(cs_den, SSIM_C2);
    let cs = g.div(cs_num, cs_den)?;
    Ok((lum, cs))
}

/// Multi-scale SSIM of two [1,H,W] planes with unit value range. Uses as
/// many scales as fit (see [`ms_ssim_scales`]); with one scale it is the
/// plain mean SSIM.
pub fn ms_ssim_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var, TensorError> {
    let (h, w) = match *g.shape(a) {
        [1, h, w] => (h, w),
        ref s => {
            return Err(TensorError::Shape {
                op: "ms_ssim",
                detail: format!("expected a [1,H,W] plane, got {s:?}"),
            })
        }
    };
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::Shape {
            op: "ms_ssim",
            detail: format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        });
    }
    let scales = ms_ssim_scales(h, w);
    if scales == 0 {
        return Err(TensorError::Invalid {
            op: "ms_ssim",
            detail: format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let kernel: Arc<[T]> = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
        .into_iter()
        .map(T::lit)
        .collect();
    if scales == 1 {
        let (lum, cs) = ssim_maps(g, a, b, &kernel)?;
        let map = g.mul(lum, cs)?;
        return Ok(g.mean(map));
    }
    let weights = ms_ssim_weights(scales);
    let (mut a, mut b) = (a, b);
    let mut acc: Option<Var> = None;
    for (s, &wt) in weights.iter().enumerate() {
        let (lum, cs) = ssim_maps(g, a, b, &kernel)?;
        let term = if s + 1 == scales {
            let map = g.mul(lum, cs)?;
            g.mean(map)
        } else {
            g.mean(cs)
        };
        let factor = g.pow(term, wt);
        acc = Some(match acc {
            Some(p) => g.mul(p, factor)?,
            None => factor,
        });
        if s + 1 < scales {
            a = g.avg_pool2d(a)?;
            b = g.avg_pool2d(b)?;
        }
    }
    Ok(acc.expect("at least two scales"))
}

/// `(mean|L_pred − L_tgt| / 100, 1 − MS-SSIM(L_pred/100, L_tgt/100))` for an
/// [H,W] L plane against constant target lightness.
pub fn lab_loss_terms<T: Scalar>(g: &mut Graph<T>, pred_l: Var, tgt_l: &[f64]) -> Result<(Var, Var), TensorError> {
    let (h, w) = match *g.shape(pred_l) {
        [h, w] => (h, w),
        ref s => {
            return Err(TensorError::Shape {
                op: "lab_loss",
                detail: format!("expected an [H,W] L plane, got {s:?}"),
            })
        }
    };
    if tgt_l.len() != h * w {
        return Err(TensorError::Shape {
            op: "lab_loss",
            detail: format!("prediction has {} pixels, target {}", h * w, tgt_l.len()),
        });
    }
    let tgt = g.constant(&[1, h, w], tgt_l.iter().map(|&v| T::lit(v / 100.0)).collect())?;
    let pred = g.scale(pred_l, 0.01);
    let pred = g.reshape(pred, &[1, h, w])?;
    let diff = g.sub(pred, tgt)?;
    let diff = g.abs(diff);
    let l1 = g.mean(diff);
    let ms = ms_ssim_graph(g, pred, tgt)?;
    let one_minus = g.scale(ms, -1.0);
    let one_minus = g.offset(one_minus, 1.0);
    Ok((l1, one_minus))
}

/// L-channel loss between a planar [3,H,W] prediction and a target image.
pub fn lab_loss<T: Scalar>(g: &mut Graph<T>, pred_rgb: Var, tgt: &RgbImage) -> Result<Var, TensorError> {
    let pred_l = g.lightness(pred_rgb)?;
    let pred_l = g.reshape(pred_l, &[tgt.height(), tgt.width()])?;
    let (l1, ms) = lab_loss_terms(g, pred_l, &lightness(tgt))?;
    g.add(l1, ms)
}

/// Per-channel soft histograms of a [3,H,W] array, concatenated to [3·bins].
pub fn soft_histograms<T: Scalar>(g: &mut Graph<T>, rgb: Var, cfg: &LossConfig) -> Result<Var, TensorError> {
    let mut parts = Vec::with_capacity(3);
    for c in 0..3 {
        let ch = g.slice_rows(rgb, c, 1)?;
        parts.push(g.soft_histogram(ch, cfg.bins, cfg.sigma)?);
    }
    g.concat(&parts)
}

/// `c_h/(H·W) · Σ_c ‖hist_c(pred) − hist_c(tgt)‖₁`.
pub fn histogram_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred_rgb: Var,
    tgt: &RgbImage,
    cfg: &LossConfig,
) -> Result<Var, TensorError> {
    if g.shape(pred_rgb) != [3, tgt.height(), tgt.width()] {
        return Err(TensorError::Shape {
            op: "histogram_loss",
            detail: format!(
                "prediction {:?}, target {}x{}",
                g.shape(pred_rgb),
                tgt.height(),
                tgt.width()
            ),
        });
    }
    let target = planar_const(g, tgt)?;
    let hp = soft_histograms(g, pred_rgb, cfg)?;
    let ht = soft_histograms(g, target, cfg)?;
    let d = g.sub(hp, ht)?;
    let d = g.abs(d);
    let s = g.sum(d);
    Ok(g.scale(s, cfg.hist_scale / tgt.num_pixels() as f64))
}

/// A training pair with everything that does not depend on the weights
/// computed once.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub input: InputTriplet,
    pub target: InputTriplet,
    pub mask: ChangeMask,
    pub input_l: Vec<f64>,
    pub target_l: Vec<f64>,
}

impl PreparedPair {
    pub fn new(i: &RgbImage, t: &RgbImage, kind: CvdKind) -> Result<Self, ImageError> {
        let mask = stencil_mask(i, t)?;
        Ok(Self {
            input: build_triplet(i, kind),
            target: build_triplet(t, kind),
            mask,
            input_l: lightness(i),
            target_l: lightness(t),
        })
    }

    pub fn target_image(&self) -> &RgbImage {
        &self.target.original
    }
}

/// Graph handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub lab_l1: Var,
    pub ms_ssim_term: Var,
    pub hist: Var,
    pub identity: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report<T: Scalar>(&self, g: &Graph<T>) -> LossReport {
        LossReport {
            lab_l1: g.scalar(self.lab_l1).as_f64(),
            ms_ssim_term: g.scalar(self.ms_ssim_term).as_f64(),
            hist: g.scalar(self.hist).as_f64(),
            identity: g.scalar(self.identity).as_f64(),
            total: g.scalar(self.total).as_f64(),
        }
    }
}

/// Identity term: the network applied to the target should leave it alone.
pub fn identity_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamVars,
    sketches: &SketchSet,
    target: &InputTriplet,
    cfg: &LossConfig,
) -> Result<Var, ModelError> {
    let t_hat = forward(g, params, sketches, target)?.image;
    let lab = lab_loss(g, t_hat, &target.original)?;
    let hist = histogram_loss(g, t_hat, &target.original, cfg)?;
    Ok(g.add(lab, hist)?)
}

/// Builds the full objective for one pair.
pub fn objective<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamVars,
    sketches: &SketchSet,
    pair: &PreparedPair,
    cfg: &LossConfig,
) -> Result<LossVars, ModelError> {
    let t = pair.target_image();
    let (h, w) = (t.height(), t.width());
    let pred = forward(g, params, sketches, &pair.input)?.image;
    let phi = apply_stencil(g, pred, t, &pair.mask)?;
    let phi_l = g.lightness(phi)?;
    let input_l: Vec<T> = pair.input_l.iter().map(|&v| T::lit(v)).collect();
    let target_l: Vec<T> = pair.target_l.iter().map(|&v| T::lit(v)).collect();
    let v = g.conjugate_select(phi_l, &input_l, &target_l)?;
    let v = g.reshape(v, &[h, w])?;
    let (lab_l1, ms_ssim_term) = lab_loss_terms(g, v, &pair.target_l)?;
    let hist = histogram_loss(g, pred, t, cfg)?;
    let identity = identity_loss_graph(g, params, sketches, &pair.target, cfg)?;
    let mut total = g.add(lab_l1, ms_ssim_term)?;
    total = g.add(total, hist)?;
    let weighted = g.scale(identity, cfg.lambda_id);
    total = g.add(total, weighted)?;
    Ok(LossVars {
        lab_l1,
        ms_ssim_term,
        hist,
        identity,
        total,
    })
}

pub fn identity_loss(t: &RgbImage, w: &ModelWeights, kind: CvdKind) -> Result<f64, ModelError> {
    let mut g = Graph::<f64>::new();
    let params = w.bind(&mut g)?;
    let loss = identity_loss_graph(
        &mut g,
        &params,
        &w.sketches,
        &build_triplet(t, kind),
        &LossConfig::default(),
    )?;
    Ok(g.scalar(loss))
}

pub fn total_loss(
    i: &RgbImage,
    t: &RgbImage,
    w: &ModelWeights,
    kind: CvdKind,
    lambda_id: f64,
) -> Result<LossReport, ModelError> {
    let pair = PreparedPair::new(i, t, kind).map_err(|e| {
        ModelError::Tensor(TensorError::Invalid {
            op: "total_loss",
            detail: e.to_string(),
        })
    })?;
    let cfg = LossConfig {
        lambda_id,
        ..LossConfig::default()
    };
    let mut g = Graph::<f64>::new();
    let params = w.bind(&mut g)?;
    let vars = objective(&mut g, &params, &w.sketches, &pair, &cfg)?;
    Ok(vars.report(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cudnet::ModelConfig;
    use crate::tensorcore::{grad_check_many, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
    }

    #[test]
    fn scale_counts() {
        assert_eq!(ms_ssim_scales(10, 64), 0);
        assert_eq!(ms_ssim_scales(16, 16), 1);
        assert_eq!(ms_ssim_scales(22, 22), 2);
        assert_eq!(ms_ssim_scales(64, 64), 3);
        assert_eq!(ms_ssim_scales(176, 200), 5);
        assert!((ms_ssim_weights(3).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stencil_matches_loop() {
        let i = random_image(1, 8, 9);
        let mut tdata = i.data().to_vec();
        assert!(stencil_mask(&i, &i).unwrap().is_empty());
        tdata[3 * 10 + 1] = (tdata[3 * 10 + 1] + 0.5) % 1.0;
        let t = RgbImage::new(8, 9, tdata).unwrap();
        let m = stencil_mask(&i, &t).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.changed[10]);
        let t = random_image(2, 8, 9);
        let m = stencil_mask(&i, &t).unwrap();
        for p in 0..72 {
            let (a, b) = (i.pixel_at(p), t.pixel_at(p));
            let want = (0..3).any(|c| (a[c] * 255.0 + 0.5).floor() != (b[c] * 255.0 + 0.5).floor());
            assert_eq!(m.changed[p], want);
        }
        assert!(stencil_mask(&i, &random_image(3, 9, 8)).is_err());
    }

    #[test]
    fn stencil_gradient_only_on_changed_pixels() {
        let t = random_image(4, 4, 4);
        let mut mask = ChangeMask {
            height: 4,
            width: 4,
            changed: vec![false; 16],
        };
        mask.changed[5] = true;
        mask.changed[11] = true;
        let mut g = Graph::<f64>::new();
        let p = g.param(&[3, 4, 4], vec![0.3; 48]).unwrap();
        let phi = apply_stencil(&mut g, p, &t, &mask).unwrap();
        let s = g.sum(phi);
        g.backward(s).unwrap();
        let grad = g.grad(p).unwrap();
        for c in 0..3 {
            for px in 0..16 {
                let want = if mask.changed[px] { 1.0 } else { 0.0 };
                assert_eq!(grad[c * 16 + px], want);
            }
        }
        let planar = to_planar(&t);
        for (k, &v) in g.value(phi).iter().enumerate() {
            if !mask.changed[k % 16] {
                assert_eq!(v, planar[k]);
            }
        }
    }

    #[test]
    fn lab_loss_zero_at_equality_and_offset_closed_form() {
        let t = random_image(5, 16, 16);
        let mut g = Graph::<f64>::new();
        let p = g.param(&[3, 16, 16], to_planar(&t)).unwrap();
        let l = lab_loss(&mut g, p, &t).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);

        let tl = lightness(&t);
        let shifted: Vec<f64> = tl.iter().map(|v| v + 5.0).collect();
        let pl = g.param(&[16, 16], shifted).unwrap();
        let (l1, _) = lab_loss_terms(&mut g, pl, &tl).unwrap();
        assert!((g.scalar(l1) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn histogram_loss_properties() {
        let cfg = LossConfig::default();
        let t = random_image(6, 8, 8);
        let mut g = Graph::<f64>::new();
        let same = g.constant(&[3, 8, 8], to_planar(&t)).unwrap();
        let l = histogram_loss(&mut g, same, &t, &cfg).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);

        // reversed pixel order leaves the histogram unchanged
        let rev: Vec<f64> = t.pixels().collect::<Vec<_>>().into_iter().rev().flatten().collect();
        let rev = RgbImage::new(8, 8, rev).unwrap();
        let p = random_image(7, 8, 8);
        let pv = g.constant(&[3, 8, 8], to_planar(&p)).unwrap();
        let a = histogram_loss(&mut g, pv, &t, &cfg).unwrap();
        let b = histogram_loss(&mut g, pv, &rev, &cfg).unwrap();
        assert!((g.scalar(a) - g.scalar(b)).abs() < 1e-9);

        // 2×2 tiling doubles both sides: the 1/(HW) weight keeps the loss level
        let tile = |img: &RgbImage| RgbImage::from_fn(16, 16, |y, x| img.pixel(y % 8, x % 8)).unwrap();
        let (pt, tt) = (tile(&p), tile(&t));
        let pv2 = g.constant(&[3, 16, 16], to_planar(&pt)).unwrap();
        let c = histogram_loss(&mut g, pv2, &tt, &cfg).unwrap();
        let ratio = g.scalar(c) / g.scalar(a);
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn ms_ssim_graph_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<f64> = (0..22 * 22).map(|_| rng.gen_range(0.2..0.8)).collect();
        let b: Vec<f64> = (0..22 * 22).map(|_| rng.gen_range(0.2..0.8)).collect();
        let cfg = GradCheckConfig {
            max_checks_per_input: Some(20),
            ..GradCheckConfig::default()
        };
        let rep = grad_check_many(
            |g, v| ms_ssim_graph(g, v[0], v[1]),
            &[(vec![1, 22, 22], a), (vec![1, 22, 22], b)],
            &cfg,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn loss_terms_nonnegative_and_report_sums() {
        let w = ModelWeights::init(ModelConfig::default(), 9).unwrap();
        let i = random_image(10, 16, 16);
        let t = random_image(11, 16, 16);
        let r = total_loss(&i, &t, &w, CvdKind::Deuteranopia, 0.5).unwrap();
        for v in [r.lab_l1, r.ms_ssim_term, r.hist, r.identity] {
            assert!(v >= 0.0);
        }
        let sum = r.lab_l1 + r.ms_ssim_term + r.hist + 0.5 * r.identity;
        assert!((r.total - sum).abs() < 1e-12);
        assert!(r.non_finite().is_none());
    }

    #[test]
    fn identity_weights_give_zero_identity_and_pair_loss() {
        let mut w = ModelWeights::init(ModelConfig::default(), 12).unwrap();
        w.zero_head();
        let t = random_image(13, 16, 16);
        assert!(identity_loss(&t, &w, CvdKind::Deuteranopia).unwrap() < 1e-9);
        let r = total_loss(&t, &t, &w, CvdKind::Deuteranopia, 1.0).unwrap();
        assert!(r.total < 1e-9, "{r:?}");
    }

    #[test]
    fn unchanged_pair_blocks_lab_gradient() {
        let w = ModelWeights::init(ModelConfig::default(), 14).unwrap();
        let t = random_image(15, 16, 16);
        let pair = PreparedPair::new(&t, &t, CvdKind::Deuteranopia).unwrap();
        let mut g = Graph::<f64>::new();
        let params = w.bind(&mut g).unwrap();
        let vars = objective(&mut g, &params, &w.sketches, &pair, &LossConfig::default()).unwrap();
        assert!(g.scalar(vars.lab_l1) < 1e-12);
        let lab = g.add(vars.lab_l1, vars.ms_ssim_term).unwrap();
        g.backward(lab).unwrap();
        for v in params.all() {
            if let Some(gr) = g.grad(v) {
                assert!(gr.iter().all(|&x| x == 0.0));
            }
        }
    }
}
