//! Evaluation metrics: SSIM, MS-SSIM, PSNR, the dataset-level MAE of SSIM
//! and PSNR against the reference conversion, and the dichromat L gap.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::colorlab::{lightness, simulate_cvd, CvdKind, RgbImage};
use crate::losses::{ms_ssim_scales, ms_ssim_weights, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::tensorcore::gaussian_kernel;

pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("images differ in size: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("{0}x{1} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    TooSmall(usize, usize),
    #[error("no samples to average")]
    Empty,
    #[error("region {0} is empty")]
    EmptyRegion(char),
    #[error("pixel index {index} outside a {len}-pixel image")]
    BadIndex { index: usize, len: usize },
    #[error("regions overlap at pixel {0}")]
    Overlap(usize),
    #[error("requested {requested} scales; at most {available} fit")]
    Scales { requested: usize, available: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One single-channel image with values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "plane data length");
        Self { height, width, data }
    }

    /// CIELab L scaled to [0,1].
    pub fn lightness(img: &RgbImage) -> Self {
        Self::new(
            img.height(),
            img.width(),
            lightness(img).into_iter().map(|l| l / 100.0).collect(),
        )
    }

    pub fn rgb_channel(img: &RgbImage, c: usize) -> Self {
        Self::new(img.height(), img.width(), img.channel(c))
    }

    /// 2×2 mean, partial windows at odd edges.
    pub fn downsample(&self) -> Self {
        let (oh, ow) = (self.height.div_ceil(2), self.width.div_ceil(2));
        let mut out = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut acc, mut n) = (0.0, 0.0);
                for y in 2 * oy..(2 * oy + 2).min(self.height) {
                    for x in 2 * ox..(2 * ox + 2).min(self.width) {
                        acc += self.data[y * self.width + x];
                        n += 1.0;
                    }
                }
                out.push(acc / n);
            }
        }
        Self::new(oh, ow, out)
    }

    fn map2(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self::new(
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    /// Separable valid filtering with a 1-D kernel on both axes.
    fn filter_valid(&self, k: &[f64]) -> Self {
        let n = k.len();
        let (oh, ow) = (self.height + 1 - n, self.width + 1 - n);
        let mut rows = vec![0.0; self.height * ow];
        for y in 0..self.height {
            for x in 0..ow {
                let src = &self.data[y * self.width + x..y * self.width + x + n];
                rows[y * ow + x] = src.iter().zip(k).map(|(a, b)| a * b).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..n).map(|t| k[t] * rows[(y + t) * ow + x]).sum();
            }
        }
        Self::new(oh, ow, out)
    }
}

fn check_pair(a: &Plane, b: &Plane) -> Result<(), MetricError> {
    if a.height != b.height || a.width != b.width {
        return Err(MetricError::DimensionMismatch(a.height, a.width, b.height, b.width));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(MetricError::TooSmall(a.height, a.width));
    }
    Ok(())
}

/// Mean luminance and contrast-structure terms over all windows.
fn ssim_components(a: &Plane, b: &Plane) -> (Vec<f64>, Vec<f64>) {
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mu_a = a.filter_valid(&k);
    let mu_b = b.filter_valid(&k);
    let e_aa = a.map2(a, |x, y| x * y).filter_valid(&k);
    let e_bb = b.map2(b, |x, y| x * y).filter_valid(&k);
    let e_ab = a.map2(b, |x, y| x * y).filter_valid(&k);
    let n = mu_a.data.len();
    let mut lum = Vec::with_capacity(n);
    let mut cs = Vec::with_capacity(n);
    for i in 0..n {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = e_aa.data[i] - ma * ma;
        let vb = e_bb.data[i] - mb * mb;
        let cov = e_ab.data[i] - ma * mb;
        lum.push((2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1));
        cs.push((2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2));
    }
    (lum, cs)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), unit range.
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    let (lum, cs) = ssim_components(a, b);
    Ok(lum.iter().zip(&cs).map(|(l, c)| l * c).sum::<f64>() / lum.len() as f64)
}

/// MS-SSIM with as many scales as fit.
pub fn ms_ssim(a: &Plane, b: &Plane) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    ms_ssim_with_scales(a, b, ms_ssim_scales(a.height, a.width))
}

/// MS-SSIM over a fixed number of scales, renormalized weights.
pub fn ms_ssim_with_scales(a: &Plane, b: &Plane, scales: usize) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    let available = ms_ssim_scales(a.height, a.width);
    if scales == 0 || scales > available {
        return Err(MetricError::Scales {
            requested: scales,
            available,
        });
    }
    if scales == 1 {
        return ssim(a, b);
    }
    let weights = ms_ssim_weights(scales);
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut acc = 1.0;
    for (s, &w) in weights.iter().enumerate() {
        let (lum, cs) = ssim_components(&a, &b);
        let term = if s + 1 == scales {
            lum.iter().zip(&cs).map(|(l, c)| l * c).sum::<f64>() / lum.len() as f64
        } else {
            mean(&cs)
        };
        acc *= term.max(0.0).powf(w);
        a = a.downsample();
        b = b.downsample();
    }
    Ok(acc)
}

/// `10·log10(1/MSE)` over all channels; identical images give [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(MetricError::DimensionMismatch(
            a.height(),
            a.width(),
            b.height(),
            b.width(),
        ));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Which channel SSIM is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SsimChannel {
    /// CIELab L scaled to [0,1].
    #[default]
    Lightness,
    /// Mean of per-channel RGB SSIM.
    RgbMean,
}

pub fn image_ssim(a: &RgbImage, b: &RgbImage, channel: SsimChannel) -> Result<f64, MetricError> {
    match channel {
        SsimChannel::Lightness => ssim(&Plane::lightness(a), &Plane::lightness(b)),
        SsimChannel::RgbMean => {
            let mut total = 0.0;
            for c in 0..3 {
                total += ssim(&Plane::rgb_channel(a, c), &Plane::rgb_channel(b, c))?;
            }
            Ok(total / 3.0)
        }
    }
}

/// Metrics of one evaluated sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EvalRow {
    pub ssim_pred_in: f64,
    pub ssim_pred_tgt: f64,
    pub psnr_pred_in: f64,
    pub psnr_pred_tgt: f64,
    pub ssim_in_tgt: f64,
    pub psnr_in_tgt: f64,
}

impl EvalRow {
    pub fn compute(
        input: &RgbImage,
        pred: &RgbImage,
        target: &RgbImage,
        channel: SsimChannel,
    ) -> Result<Self, MetricError> {
        Ok(Self {
            ssim_pred_in: image_ssim(pred, input, channel)?,
            ssim_pred_tgt: image_ssim(pred, target, channel)?,
            psnr_pred_in: psnr(pred, input)?,
            psnr_pred_tgt: psnr(pred, target)?,
            ssim_in_tgt: image_ssim(input, target, channel)?,
            psnr_in_tgt: psnr(input, target)?,
        })
    }

    pub fn ssim_deviation(&self) -> f64 {
        (self.ssim_pred_tgt - self.ssim_in_tgt).abs()
    }

    pub fn psnr_deviation(&self) -> f64 {
        (self.psnr_pred_tgt - self.psnr_in_tgt).abs()
    }
}

fn mean_of(rows: &[EvalRow], f: impl Fn(&EvalRow) -> f64) -> Result<f64, MetricError> {
    if rows.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(rows.iter().map(f).sum::<f64>() / rows.len() as f64)
}

/// `(1/N)·Σ |SSIM(Î,T) − SSIM(I,T)|`.
pub fn ssim_mae(rows: &[EvalRow]) -> Result<f64, MetricError> {
    mean_of(rows, EvalRow::ssim_deviation)
}

/// `(1/N)·Σ |PSNR(Î,T) − PSNR(I,T)|`.
pub fn psnr_mae(rows: &[EvalRow]) -> Result<f64, MetricError> {
    mean_of(rows, EvalRow::psnr_deviation)
}

/// Absolute difference of mean L between two pixel sets of the dichromat
/// simulation of `img`.
pub fn cud_gap(img: &RgbImage, region_a: &[usize], region_b: &[usize], kind: CvdKind) -> Result<f64, MetricError> {
    let n = img.num_pixels();
    for (name, r) in [('a', region_a), ('b', region_b)] {
        if r.is_empty() {
            return Err(MetricError::EmptyRegion(name));
        }
        if let Some(&index) = r.iter().find(|&&i| i >= n) {
            return Err(MetricError::BadIndex { index, len: n });
        }
    }
    let mut in_a = vec![false; n];
    region_a.iter().for_each(|&i| in_a[i] = true);
    if let Some(&i) = region_b.iter().find(|&&i| in_a[i]) {
        return Err(MetricError::Overlap(i));
    }
    let l = lightness(&simulate_cvd(img, kind));
    let mean_l = |r: &[usize]| r.iter().map(|&i| l[i]).sum::<f64>() / r.len() as f64;
    Ok((mean_l(region_a) - mean_l(region_b)).abs())
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    image: &'a str,
    ssim_pred_in: f64,
    ssim_pred_tgt: f64,
    psnr_pred_in: f64,
    psnr_pred_tgt: f64,
    ssim_mae: f64,
    psnr_mae: f64,
}

/// Writes one row per image and a final `mean` row; the MAE columns of an
/// image row hold that image's absolute deviation.
pub fn write_report<W: Write>(out: W, names: &[String], rows: &[EvalRow]) -> Result<(), MetricError> {
    if rows.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut w = csv::Writer::from_writer(out);
    for (name, r) in names.iter().zip(rows) {
        w.serialize(ReportRecord {
            image: name,
            ssim_pred_in: r.ssim_pred_in,
            ssim_pred_tgt: r.ssim_pred_tgt,
            psnr_pred_in: r.psnr_pred_in,
            psnr_pred_tgt: r.psnr_pred_tgt,
            ssim_mae: r.ssim_deviation(),
            psnr_mae: r.psnr_deviation(),
        })?;
    }
    w.serialize(ReportRecord {
        image: "mean",
        ssim_pred_in: mean_of(rows, |r| r.ssim_pred_in)?,
        ssim_pred_tgt: mean_of(rows, |r| r.ssim_pred_tgt)?,
        psnr_pred_in: mean_of(rows, |r| r.psnr_pred_in)?,
        psnr_pred_tgt: mean_of(rows, |r| r.psnr_pred_tgt)?,
        ssim_mae: ssim_mae(rows)?,
        psnr_mae: psnr_mae(rows)?,
    })?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ms_ssim_graph;
    use crate::tensorcore::Graph;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(seed: u64, h: usize, w: usize) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::new(h, w, (0..h * w).map(|_| rng.gen()).collect())
    }

    /// Direct 2-D windowed SSIM, one window at a time.
    fn ssim_direct(a: &Plane, b: &Plane) -> f64 {
        let k = gaussian_kernel(11, 1.5);
        let (oh, ow) = (a.height - 10, a.width - 10);
        let mut total = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wgt = k[dy] * k[dx];
                        let i = (oy + dy) * a.width + ox + dx;
                        let (x, y) = (a.data[i], b.data[i]);
                        ma += wgt * x;
                        mb += wgt * y;
                        saa += wgt * x * x;
                        sbb += wgt * y * y;
                        sab += wgt * x * y;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                let c1 = 0.0001;
                let c2 = 0.0009;
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total / (oh * ow) as f64
    }

    #[test]
    fn ssim_matches_direct_window() {
        let a = random_plane(1, 32, 32);
        let b = random_plane(2, 32, 32);
        assert!((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = random_plane(3, 20, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let inv = Plane::new(20, 24, a.data.iter().map(|v| 1.0 - v).collect());
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert!(matches!(
            ssim(&random_plane(4, 10, 30), &random_plane(5, 10, 30)),
            Err(MetricError::TooSmall(10, 30))
        ));
    }

    #[test]
    fn one_scale_ms_ssim_is_ssim() {
        let a = random_plane(6, 64, 64);
        let b = random_plane(7, 64, 64);
        let one = ms_ssim_with_scales(&a, &b, 1).unwrap();
        assert!((one - ssim(&a, &b).unwrap()).abs() < 1e-9);
        assert!(ms_ssim_with_scales(&a, &b, 4).is_err());
    }

    #[test]
    fn ms_ssim_agrees_with_graph() {
        for (h, w) in [(16, 16), (44, 40), (64, 64)] {
            let a = random_plane(8, h, w);
            let b = Plane::new(h, w, a.data.iter().map(|v| 0.7 * v + 0.1).collect());
            let mut g = Graph::<f64>::new();
            let va = g.constant(&[1, h, w], a.data.clone()).unwrap();
            let vb = g.constant(&[1, h, w], b.data.clone()).unwrap();
            let m = ms_ssim_graph(&mut g, va, vb).unwrap();
            assert!((g.scalar(m) - ms_ssim(&a, &b).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn psnr_closed_forms() {
        let a = RgbImage::filled(4, 4, [0.2, 0.5, 0.9]).unwrap();
        let b = RgbImage::filled(4, 4, [0.3, 0.6, 0.8]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let black = RgbImage::filled(4, 4, [0.0; 3]).unwrap();
        let white = RgbImage::filled(4, 4, [1.0; 3]).unwrap();
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
    }

    #[test]
    fn psnr_monotone_in_noise() {
        let base = RgbImage::filled(8, 8, [0.5; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pattern: Vec<f64> = (0..192).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1, 0.2, 0.4] {
            let noisy = RgbImage::new(8, 8, pattern.iter().map(|s| 0.5 + amp * s).collect()).unwrap();
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn mae_hand_computed() {
        let row = |spt, sit, ppt, pit| EvalRow {
            ssim_pred_tgt: spt,
            ssim_in_tgt: sit,
            psnr_pred_tgt: ppt,
            psnr_in_tgt: pit,
            ..EvalRow::default()
        };
        let rows = [
            row(0.9, 0.8, 30.0, 25.0),
            row(0.5, 0.7, 20.0, 22.0),
            row(1.0, 1.0, 40.0, 40.0),
        ];
        // |0.1| + |−0.2| + 0 = 0.3 → 0.1; |5| + |−2| + 0 = 7 → 7/3
        assert!((ssim_mae(&rows).unwrap() - 0.1).abs() < 1e-12);
        assert!((psnr_mae(&rows).unwrap() - 7.0 / 3.0).abs() < 1e-12);
        let mut rev = rows;
        rev.reverse();
        assert_eq!(ssim_mae(&rev).unwrap(), ssim_mae(&rows).unwrap());
        assert!(matches!(ssim_mae(&[]), Err(MetricError::Empty)));
    }

    #[test]
    fn identity_prediction_has_zero_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut rows = Vec::new();
        for _ in 0..3 {
            let i = RgbImage::from_fn(16, 16, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap();
            let t = RgbImage::from_fn(16, 16, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap();
            rows.push(EvalRow::compute(&i, &i, &t, SsimChannel::Lightness).unwrap());
        }
        assert_eq!(ssim_mae(&rows).unwrap(), 0.0);
        assert_eq!(psnr_mae(&rows).unwrap(), 0.0);
    }

    #[test]
    fn gap_of_uniform_regions() {
        let img = RgbImage::from_fn(2, 4, |_, x| if x < 2 { [0.8, 0.2, 0.2] } else { [0.2, 0.2, 0.8] }).unwrap();
        let (a, b) = ([0, 1, 4, 5], [2, 3, 6, 7]);
        let sim = simulate_cvd(&img, CvdKind::Deuteranopia);
        let la = lightness(&sim)[0];
        let lb = lightness(&sim)[2];
        assert!((cud_gap(&img, &a, &b, CvdKind::Deuteranopia).unwrap() - (la - lb).abs()).abs() < 1e-12);
        assert_eq!(cud_gap(&img, &[0], &[1], CvdKind::Deuteranopia).unwrap(), 0.0);
        assert!(cud_gap(&img, &[], &b, CvdKind::Deuteranopia).is_err());
        assert!(cud_gap(&img, &[0, 2], &b, CvdKind::Deuteranopia).is_err());
    }

    #[test]
    fn report_layout() {
        let rows = vec![EvalRow::default(); 2];
        let mut buf = Vec::new();
        write_report(&mut buf, &["a.png".into(), "b.png".into()], &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "image,ssim_pred_in,ssim_pred_tgt,psnr_pred_in,psnr_pred_tgt,ssim_mae,psnr_mae"
        );
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean,"));
    }

    proptest! {
        #[test]
        fn ssim_symmetric(seed in 0u64..1000) {
            let a = random_plane(seed, 24, 24);
            let b = random_plane(seed + 1, 24, 24);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
            prop_assert!((ms_ssim(&a, &b).unwrap() - ms_ssim(&b, &a).unwrap()).abs() < 1e-9);
            let m = ms_ssim(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}
