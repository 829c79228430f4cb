//! Expanded model input: original image, its dichromat simulation, and the
//! map image `clamp01(|invert(I^n) − invert(I^d)|)`, all in HSV.

use crate::colorlab::{clamp01, invert, rgb_to_hsv, simulate_cvd, ColorSpace, CvdKind, Image, RgbImage};
use crate::tensorcore::{Graph, Scalar, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct InputTriplet {
    pub original: RgbImage,
    pub simulated: RgbImage,
    pub map: RgbImage,
}

impl InputTriplet {
    pub fn height(&self) -> usize {
        self.original.height()
    }

    pub fn width(&self) -> usize {
        self.original.width()
    }
}

pub fn build_triplet(original: &RgbImage, kind: CvdKind) -> InputTriplet {
    let simulated = simulate_cvd(original, kind);
    let (inv_n, inv_d) = (invert(original), invert(&simulated));
    let diff: Vec<f64> = inv_n
        .data()
        .iter()
        .zip(inv_d.data())
        .map(|(a, b)| (a - b).abs())
        .collect();
    let map = clamp01(original.height(), original.width(), &diff).expect("dimensions preserved");
    InputTriplet {
        original: original.clone(),
        simulated,
        map,
    }
}

/// Interleaved H×W×3 → planar 3×H×W.
pub fn to_planar<S: ColorSpace>(img: &Image<S>) -> Vec<f64> {
    let n = img.num_pixels();
    let mut out = vec![0.0; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * n + i] = px[c];
        }
    }
    out
}

/// 9×H×W planar HSV stack: `[I^n, I^d, I^m]`.
pub fn model_input_planes(t: &InputTriplet) -> Vec<f64> {
    let mut out = Vec::with_capacity(9 * t.original.num_pixels());
    for img in [&t.original, &t.simulated, &t.map] {
        out.extend(to_planar(&rgb_to_hsv(img)));
    }
    out
}

/// The stacked input as a constant graph leaf of shape [9,H,W].
pub fn to_model_input<T: Scalar>(g: &mut Graph<T>, t: &InputTriplet) -> Result<Var, TensorError> {
    let values = model_input_planes(t).into_iter().map(T::lit).collect();
    g.constant(&[9, t.height(), t.width()], values)
}
