//! Central finite-difference verification of [`Graph::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_checks_per_input: Option<usize>,
    pub seed: u64,
    /// Skip coordinates where the one-sided differences disagree, i.e.
    /// where `f` has a kink within `eps` of the point.
    pub skip_kinks: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_checks_per_input: None,
            seed: 0,
            skip_kinks: false,
        }
    }
}

/// Worst coordinate found by a gradient check.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Kink test: central differences at `h` and `h/2` must agree, and the gap
/// between one-sided slopes must halve with the step. Both hold to high
/// order for smooth functions.
const KINK_TOLERANCE: f64 = 2e-5;

/// Relative error with a floor at 1e-3 of the largest numeric gradient
/// component, so coordinates far below the gradient's scale are compared
/// on that scale instead of their own.
fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

fn evaluate<F>(f: &F, inputs: &[(Vec<usize>, Vec<f64>)], with_grad: bool) -> Result<(f64, Vec<Vec<f64>>), TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|(shape, values)| g.param(shape, values.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut g, &vars)?;
    if g.numel(out) != 1 {
        return Err(TensorError::NonScalarLoss(g.shape(out).to_vec()));
    }
    let value = g.scalar(out);
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    g.backward(out)?;
    let grads = vars
        .iter()
        .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.numel(v)], <[f64]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Compares backward gradients of a scalar function of several inputs
/// against central differences `(f(x+ε·e_i) − f(x−ε·e_i)) / 2ε`.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    cfg: &GradCheckConfig,
) -> Result<GradReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let (base, analytic) = evaluate(&f, inputs, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (k, (_, values)) in inputs.iter().enumerate() {
        let n = values.len();
        let indices: Vec<usize> = match cfg.max_checks_per_input {
            Some(m) if m < n => {
                let mut idx = sample(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut numeric = Vec::with_capacity(indices.len());
        for &i in &indices {
            let mut at = |h: f64| -> Result<(f64, f64), TensorError> {
                probe[k].1[i] = values[i] + h;
                let (up, _) = evaluate(&f, &probe, false)?;
                probe[k].1[i] = values[i] - h;
                let (down, _) = evaluate(&f, &probe, false)?;
                probe[k].1[i] = values[i];
                Ok((up, down))
            };
            let (up, down) = at(cfg.eps)?;
            let central = (up - down) / (2.0 * cfg.eps);
            if !cfg.skip_kinks {
                numeric.push((central, 0.0, 0.0));
                continue;
            }
            let (up2, down2) = at(cfg.eps / 2.0)?;
            let central2 = (up2 - down2) / cfg.eps;
            let gap = (up - 2.0 * base + down) / cfg.eps;
            let gap2 = (up2 - 2.0 * base + down2) / (cfg.eps / 2.0);
            numeric.push((central, (central - central2).abs(), (gap - 2.0 * gap2).abs()));
        }
        let scale = numeric
            .iter()
            .map(|v| v.0.abs())
            .chain(analytic[k].iter().map(|a| a.abs()))
            .fold(0.0f64, f64::max);
        let floor = (1e-3 * scale).max(1e-10);
        for (&i, &(num, drift, bend)) in indices.iter().zip(&numeric) {
            if cfg.skip_kinks && drift.max(bend) > KINK_TOLERANCE * num.abs().max(floor) {
                report.skipped += 1;
                continue;
            }
            let ana = analytic[k][i];
            let err = rel_error(ana, num, floor);
            if report.checked == 0 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.input = k;
                report.index = i;
                report.analytic = ana;
                report.numeric = num;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Single-input form; returns the maximum relative error.
pub fn grad_check<F>(f: F, shape: &[usize], x: &[f64], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let cfg = GradCheckConfig {
        eps,
        ..GradCheckConfig::default()
    };
    grad_check_many(|g, v| f(g, v[0]), &[(shape.to_vec(), x.to_vec())], &cfg).map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let err = grad_check(|g, x| Ok(g.sum(x)), &[4], &[0.1, 0.2, -0.3, 0.4], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // clamp at its plateau edge: subgradient 0, central difference 1/2
        let err = grad_check(
            |g, x| {
                let c = g.clamp01(x);
                Ok(g.sum(c))
            },
            &[1],
            &[1.0],
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1, "kink at the plateau edge should be visible, got {err}");
    }

    #[test]
    fn samples_subset() {
        let cfg = GradCheckConfig {
            max_checks_per_input: Some(3),
            ..GradCheckConfig::default()
        };
        let rep = grad_check_many(|g, v| Ok(g.sum(v[0])), &[(vec![10], vec![0.5; 10])], &cfg).unwrap();
        assert_eq!(rep.checked, 3);
    }

    #[test]
    fn kinks_can_be_skipped() {
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let a = g.abs(v[0]);
            Ok(g.sum(a))
        };
        let x = vec![(vec![3], vec![0.5, 1e-7, -0.3])];
        let strict = grad_check_many(f, &x, &GradCheckConfig::default()).unwrap();
        assert!(strict.max_rel_error > 0.1);
        let cfg = GradCheckConfig {
            skip_kinks: true,
            ..GradCheckConfig::default()
        };
        let rep = grad_check_many(f, &x, &cfg).unwrap();
        assert_eq!((rep.checked, rep.skipped), (2, 1));
        assert!(rep.max_rel_error < 1e-9);
    }
}
