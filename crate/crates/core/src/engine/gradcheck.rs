//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter tensor; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    /// Seeds the coordinate sample.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` where the max was reached.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compare the analytic gradient returned by `f` against central differences.
///
/// `f` maps parameter values to `(value, gradient per parameter)`; only the
/// gradient of the unperturbed call is used.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let (base, analytic) = f(params)?;
    if !base.is_finite() {
        return Err(Error::Check("objective is not finite at the base point".into()));
    }
    if analytic.len() != params.len()
        || analytic.iter().zip(params).any(|(g, p)| g.shape() != p.shape())
    {
        return Err(Error::Check("gradient shapes do not match parameters".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut point = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (pi, param) in params.iter().enumerate() {
        let n = param.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = param.data()[c];
            point[pi].data_mut()[c] = orig + opts.eps;
            let (plus, _) = f(&point)?;
            point[pi].data_mut()[c] = orig - opts.eps;
            let (minus, _) = f(&point)?;
            point[pi].data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Check(format!(
                    "objective not finite when perturbing parameter {pi}, coordinate {c}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[pi].data()[c];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, c));
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let p = vec![Tensor::row_vector(vec![0.3, -1.2, 2.0]), Tensor::scalar(4.0)];
        let f = |ps: &[Tensor]| {
            let v = ps.iter().flat_map(|t| t.data()).map(|x| x * x).sum();
            let g = ps.iter().map(|t| t.map(|x| 2.0 * x)).collect();
            Ok((v, g))
        };
        let r = finite_diff_check(f, &p, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coords_checked, 4);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let p = vec![Tensor::row_vector(vec![0.3, -1.2])];
        let f = |ps: &[Tensor]| {
            let v = ps[0].data().iter().map(|x| x * x).sum();
            Ok((v, vec![ps[0].map(|x| 3.0 * x)]))
        };
        let r = finite_diff_check(f, &p, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error > 1e-2);
        assert_eq!(r.worst, Some((0, 1)));
    }

    #[test]
    fn non_finite_perturbation_errors() {
        let p = vec![Tensor::scalar(0.0)];
        let f = |ps: &[Tensor]| {
            let x = ps[0].item();
            let v = if x > 0.0 { f64::INFINITY } else { 0.0 };
            Ok((v, vec![Tensor::scalar(0.0)]))
        };
        assert!(matches!(
            finite_diff_check(f, &p, GradCheckOptions::default()),
            Err(Error::Check(_))
        ));
    }

    #[test]
    fn coordinate_sampling_limits_work() {
        let p = vec![Tensor::zeros(10, 10)];
        let f = |ps: &[Tensor]| Ok((ps[0].sum(), vec![Tensor::full(10, 10, 1.0)]));
        let opts = GradCheckOptions {
            max_coords_per_param: Some(7),
            ..Default::default()
        };
        let r = finite_diff_check(f, &p, opts).unwrap();
        assert_eq!(r.coords_checked, 7);
    }
}
