//! Color-space conversions and dichromat simulation.
//!
//! Images are stored interleaved (row-major, three channels per pixel) in
//! 64-bit floats. Companded sRGB lives in [0,1]; HSV stores hue as a fraction
//! of a full turn; CIELab uses the D65 white point.

use std::fmt;
use std::marker::PhantomData;
use std::sync::LazyLock;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("pixel buffer has {actual} values, expected {expected} for {height}x{width}x3")]
    LengthMismatch {
        height: usize,
        width: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{space} channel {channel} at pixel {pixel} is {value}, outside its valid range")]
    OutOfRange {
        space: &'static str,
        pixel: usize,
        channel: usize,
        value: f64,
    },
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

/// Marker for a color encoding. `validate` checks one pixel.
pub trait ColorSpace: Copy + PartialEq + fmt::Debug + Send + Sync + 'static {
    const NAME: &'static str;
    fn channel_ok(channel: usize, value: f64) -> bool;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rgb;
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hsv;
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lab;

impl ColorSpace for Rgb {
    const NAME: &'static str = "rgb";
    fn channel_ok(_: usize, v: f64) -> bool {
        (0.0..=1.0).contains(&v)
    }
}

impl ColorSpace for Hsv {
    const NAME: &'static str = "hsv";
    fn channel_ok(channel: usize, v: f64) -> bool {
        if channel == 0 {
            (0.0..1.0).contains(&v)
        } else {
            (0.0..=1.0).contains(&v)
        }
    }
}

impl ColorSpace for Lab {
    const NAME: &'static str = "lab";
    fn channel_ok(channel: usize, v: f64) -> bool {
        if channel == 0 {
            (0.0..=100.0).contains(&v)
        } else {
            v.is_finite()
        }
    }
}

/// An H×W×3 pixel array tagged with its color encoding.
#[derive(Clone, PartialEq)]
pub struct Image<S: ColorSpace> {
    height: usize,
    width: usize,
    data: Vec<f64>,
    _space: PhantomData<S>,
}

pub type RgbImage = Image<Rgb>;
pub type HsvImage = Image<Hsv>;
pub type LabImage = Image<Lab>;

impl<S: ColorSpace> fmt::Debug for Image<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image")
            .field("space", &S::NAME)
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl<S: ColorSpace> Image<S> {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        let expected = height * width * 3;
        if data.len() != expected {
            return Err(ImageError::LengthMismatch {
                height,
                width,
                expected,
                actual: data.len(),
            });
        }
        for (i, &v) in data.iter().enumerate() {
            if !S::channel_ok(i % 3, v) {
                return Err(ImageError::OutOfRange {
                    space: S::NAME,
                    pixel: i / 3,
                    channel: i % 3,
                    value: v,
                });
            }
        }
        Ok(Self::from_vec_unchecked(height, width, data))
    }

    pub(crate) fn from_vec_unchecked(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
        Self {
            height,
            width,
            data,
            _space: PhantomData,
        }
    }

    /// Builds an image by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    /// A single-color image.
    pub fn filled(height: usize, width: usize, px: [f64; 3]) -> Result<Self, ImageError> {
        Self::from_fn(height, width, |_, _| px)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        self.pixel_at(y * self.width + x)
    }

    pub fn pixel_at(&self, index: usize) -> [f64; 3] {
        let p = &self.data[index * 3..index * 3 + 3];
        [p[0], p[1], p[2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// One channel as a dense H×W plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn same_dims<T: ColorSpace>(&self, other: &Image<T>) -> Result<(), ImageError> {
        if self.height != other.height || self.width != other.width {
            return Err(ImageError::DimensionMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }

    fn map_pixels<T: ColorSpace>(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Image<T> {
        let mut data = Vec::with_capacity(self.data.len());
        for p in self.pixels() {
            data.extend_from_slice(&f(p));
        }
        Image::from_vec_unchecked(self.height, self.width, data)
    }
}

/// The two dichromacies handled by the simulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum CvdKind {
    Protanopia,
    Deuteranopia,
}

impl CvdKind {
    pub fn short_name(self) -> &'static str {
        match self {
            CvdKind::Protanopia => "protan",
            CvdKind::Deuteranopia => "deutan",
        }
    }
}

impl fmt::Display for CvdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl std::str::FromStr for CvdKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "protan" | "protanopia" => Ok(CvdKind::Protanopia),
            "deutan" | "deuteranopia" => Ok(CvdKind::Deuteranopia),
            other => Err(format!("unknown cvd kind `{other}` (expected deutan or protan)")),
        }
    }
}

// ---------------------------------------------------------------------------
// Scalar transfer functions
// ---------------------------------------------------------------------------

/// sRGB companded value to linear light.
pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Linear light to companded sRGB.
pub fn linear_to_srgb(l: f64) -> f64 {
    if l <= 0.003_130_8 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

/// Linear sRGB to CIE XYZ, D65.
pub const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// D65 reference white, taken as the XYZ image of linear (1,1,1) so that
/// sRGB white maps to L=100, a=b=0 exactly.
pub const WHITE_XYZ: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&RGB_TO_XYZ));

/// Viénot–Brettel–Mollon protanopia projection on linear sRGB.
pub const PROTANOPIA: [[f64; 3]; 3] = [
    [0.112_38, 0.887_62, 0.0],
    [0.112_38, 0.887_62, 0.0],
    [0.004_01, -0.004_01, 1.0],
];

/// Viénot–Brettel–Mollon deuteranopia projection on linear sRGB.
pub const DEUTERANOPIA: [[f64; 3]; 3] = [
    [0.292_75, 0.707_25, 0.0],
    [0.292_75, 0.707_25, 0.0],
    [-0.022_34, 0.022_34, 1.0],
];

pub fn cvd_matrix(kind: CvdKind) -> &'static [[f64; 3]; 3] {
    match kind {
        CvdKind::Protanopia => &PROTANOPIA,
        CvdKind::Deuteranopia => &DEUTERANOPIA,
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    let inv = 1.0 / det;
    [
        [
            c00 * inv,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv,
        ],
        [
            c01 * inv,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv,
        ],
        [
            c02 * inv,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv,
        ],
    ]
}

const LAB_DELTA: f64 = 6.0 / 29.0;

fn lab_f(t: f64) -> f64 {
    if t > LAB_DELTA * LAB_DELTA * LAB_DELTA {
        t.cbrt()
    } else {
        t / (3.0 * LAB_DELTA * LAB_DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    if f > LAB_DELTA {
        f * f * f
    } else {
        3.0 * LAB_DELTA * LAB_DELTA * (f - 4.0 / 29.0)
    }
}

pub fn clamp_unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Per-pixel conversions
// ---------------------------------------------------------------------------

/// Hexcone RGB → HSV. Hue is 0 for achromatic pixels.
pub fn rgb_to_hsv_px([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return [0.0, s, v];
    }
    let sector = if max == r {
        (g - b) / delta
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let mut h = sector / 6.0;
    if h < 0.0 {
        h += 1.0;
    }
    if h >= 1.0 {
        h -= 1.0;
    }
    [h, s, v]
}

pub fn hsv_to_rgb_px([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i64).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_lab_px(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz = mat_vec(&RGB_TO_XYZ, lin);
    let fx = lab_f(xyz[0] / WHITE_XYZ[0]);
    let fy = lab_f(xyz[1] / WHITE_XYZ[1]);
    let fz = lab_f(xyz[2] / WHITE_XYZ[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// CIELab lightness of one sRGB pixel.
pub fn lightness_px(rgb: [f64; 3]) -> f64 {
    let y = RGB_TO_XYZ[1][0] * srgb_to_linear(rgb[0])
        + RGB_TO_XYZ[1][1] * srgb_to_linear(rgb[1])
        + RGB_TO_XYZ[1][2] * srgb_to_linear(rgb[2]);
    116.0 * lab_f(y / WHITE_XYZ[1]) - 16.0
}

/// CIELab → sRGB; out-of-gamut channels are clamped to [0,1].
pub fn lab_to_rgb_px([l, a, b]: [f64; 3]) -> [f64; 3] {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let xyz = [
        WHITE_XYZ[0] * lab_f_inv(fx),
        WHITE_XYZ[1] * lab_f_inv(fy),
        WHITE_XYZ[2] * lab_f_inv(fz),
    ];
    mat_vec(&XYZ_TO_RGB, xyz).map(|c| clamp_unit(linear_to_srgb(c)))
}

pub fn simulate_cvd_px(rgb: [f64; 3], kind: CvdKind) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    mat_vec(cvd_matrix(kind), lin).map(|c| clamp_unit(linear_to_srgb(clamp_unit(c))))
}

// ---------------------------------------------------------------------------
// Whole-image operations
// ---------------------------------------------------------------------------

pub fn rgb_to_hsv(img: &RgbImage) -> HsvImage {
    img.map_pixels(rgb_to_hsv_px)
}

pub fn hsv_to_rgb(img: &HsvImage) -> RgbImage {
    img.map_pixels(|p| hsv_to_rgb_px(p).map(clamp_unit))
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    img.map_pixels(|p| {
        let mut lab = rgb_to_lab_px(p);
        lab[0] = lab[0].clamp(0.0, 100.0);
        lab
    })
}

pub fn lab_to_rgb(img: &LabImage) -> RgbImage {
    img.map_pixels(lab_to_rgb_px)
}

/// Dichromat view of `img`: linear-RGB projection, then re-compand and clamp.
pub fn simulate_cvd(img: &RgbImage, kind: CvdKind) -> RgbImage {
    img.map_pixels(|p| simulate_cvd_px(p, kind))
}

pub fn invert(img: &RgbImage) -> RgbImage {
    img.map_pixels(|p| p.map(|c| 1.0 - c))
}

/// Clips arbitrary reals into a valid RGB image.
pub fn clamp01(height: usize, width: usize, data: &[f64]) -> Result<RgbImage, ImageError> {
    if data.len() != height * width * 3 {
        return Err(ImageError::LengthMismatch {
            height,
            width,
            expected: height * width * 3,
            actual: data.len(),
        });
    }
    Ok(RgbImage::from_vec_unchecked(
        height,
        width,
        data.iter().map(|&v| clamp_unit(v)).collect(),
    ))
}

/// Per-pixel CIELab lightness plane.
pub fn lightness(img: &RgbImage) -> Vec<f64> {
    img.pixels().map(lightness_px).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn hsv_reference_values() {
        assert_eq!(rgb_to_hsv_px([1.0, 0.0, 0.0]), [0.0, 1.0, 1.0]);
        assert_eq!(rgb_to_hsv_px([0.5, 0.5, 0.5]), [0.0, 0.0, 0.5]);
        let p = rgb_to_hsv_px([0.0, 0.5, 1.0]);
        assert!(close(p, [210.0 / 360.0, 1.0, 1.0], 1e-12), "{p:?}");

        assert_eq!(hsv_to_rgb_px([0.0, 0.0, 0.3]), [0.3, 0.3, 0.3]);
        assert_eq!(hsv_to_rgb_px([0.0, 1.0, 1.0]), [1.0, 0.0, 0.0]);
        let back = hsv_to_rgb_px([210.0 / 360.0, 1.0, 1.0]);
        assert!(close(back, [0.0, 0.5, 1.0], 1e-6), "{back:?}");
    }

    #[test]
    fn lab_reference_values() {
        let white = rgb_to_lab_px([1.0, 1.0, 1.0]);
        assert!(close(white, [100.0, 0.0, 0.0], 0.01), "{white:?}");
        assert!(close(rgb_to_lab_px([0.0; 3]), [0.0; 3], 1e-12));
        let gray = rgb_to_lab_px([0.5; 3]);
        assert!((gray[0] - 53.39).abs() < 0.01, "{gray:?}");
        assert!(gray[1].abs() < 1e-9 && gray[2].abs() < 1e-9);

        assert!(close(lab_to_rgb_px([100.0, 0.0, 0.0]), [1.0; 3], 1e-3));
        assert!(close(lab_to_rgb_px([0.0; 3]), [0.0; 3], 1e-9));
        assert!(close(lab_to_rgb_px([53.39, 0.0, 0.0]), [0.5; 3], 1e-3));
    }

    #[test]
    fn lab_out_of_gamut_is_clamped() {
        let p = lab_to_rgb_px([50.0, 120.0, -120.0]);
        assert!(p.iter().all(|c| (0.0..=1.0).contains(c)), "{p:?}");
    }

    #[test]
    fn deuteranopia_red() {
        // Linear red projects onto (0.29275, 0.29275, -0.02234); the blue
        // component clips to zero before re-companding.
        let expected = linear_to_srgb(0.292_75);
        let p = simulate_cvd_px([1.0, 0.0, 0.0], CvdKind::Deuteranopia);
        assert!(close(p, [expected, expected, 0.0], 1e-12), "{p:?}");
        assert!((expected - 0.577_352_9).abs() < 1e-6);
    }

    #[test]
    fn cvd_matrices_are_projections_fixing_gray() {
        for kind in [CvdKind::Protanopia, CvdKind::Deuteranopia] {
            let m = cvd_matrix(kind);
            for row in m {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            for col in 0..3 {
                let e = {
                    let mut v = [0.0; 3];
                    v[col] = 1.0;
                    v
                };
                let once = mat_vec(m, e);
                let twice = mat_vec(m, once);
                assert!(close(once, twice, 1e-12));
            }
        }
    }

    #[test]
    fn clamp01_cases() {
        let img = clamp01(1, 1, &[-0.2, 0.5, 1.7]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
        assert!(clamp01(1, 2, &[0.0; 3]).is_err());
    }

    #[test]
    fn invert_cases() {
        let img = RgbImage::new(1, 2, vec![1.0, 1.0, 1.0, 0.25, 0.5, 0.75]).unwrap();
        let inv = invert(&img);
        assert_eq!(inv.data(), &[0.0, 0.0, 0.0, 0.75, 0.5, 0.25]);
        assert_eq!(invert(&inv), img);
    }

    #[test]
    fn constructor_validates() {
        assert!(matches!(
            RgbImage::new(1, 1, vec![0.0, 1.5, 0.0]),
            Err(ImageError::OutOfRange { channel: 1, .. })
        ));
        assert!(matches!(
            HsvImage::new(1, 1, vec![1.0, 0.5, 0.5]),
            Err(ImageError::OutOfRange { channel: 0, .. })
        ));
        assert!(matches!(
            LabImage::new(1, 1, vec![50.0]),
            Err(ImageError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("deutan".parse::<CvdKind>().unwrap(), CvdKind::Deuteranopia);
        assert_eq!("protan".parse::<CvdKind>().unwrap(), CvdKind::Protanopia);
        assert!("tritan".parse::<CvdKind>().is_err());
    }

    proptest! {
        #[test]
        fn hsv_round_trip(r in 0.0..=1.0f64, g in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let hsv = rgb_to_hsv_px([r, g, b]);
            prop_assert!((0.0..1.0).contains(&hsv[0]));
            prop_assert!(close(hsv_to_rgb_px(hsv), [r, g, b], 1e-6));
        }

        #[test]
        fn lab_round_trip(r in 0.0..=1.0f64, g in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            prop_assert!(close(lab_to_rgb_px(rgb_to_lab_px([r, g, b])), [r, g, b], 1e-4));
        }

        #[test]
        fn simulation_idempotent(r in 0.0..=1.0f64, g in 0.0..=1.0f64, b in 0.0..=1.0f64, deut in any::<bool>()) {
            let kind = if deut { CvdKind::Deuteranopia } else { CvdKind::Protanopia };
            let once = simulate_cvd_px([r, g, b], kind);
            prop_assert!(close(simulate_cvd_px(once, kind), once, 1e-6));
            prop_assert!(close(simulate_cvd_px([r, r, r], kind), [r, r, r], 1e-6));
        }
    }
}
