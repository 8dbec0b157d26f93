//! Central finite-difference checking of hand-derived gradients.

/// Floor for the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct FiniteDiffOptions {
    /// Step size, must lie in `[1e-4, 1e-2]`.
    pub h: f64,
    /// Upper bound on the number of coordinates probed; `0` means all.
    pub max_coords: usize,
}

impl Default for FiniteDiffOptions {
    fn default() -> Self {
        Self { h: 1e-3, max_coords: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` at `theta`.
///
/// Returns the max over probed coordinates of
/// `|analytic − central| / max(|analytic|, |central|, 1e-8)`.
pub fn finite_diff_check<F>(theta: &[f64], analytic: &[f64], mut f: F, opts: &FiniteDiffOptions) -> FiniteDiffReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    assert!(
        (1e-4..=1e-2).contains(&opts.h),
        "finite-difference step {} outside [1e-4, 1e-2]",
        opts.h
    );
    let n = theta.len();
    let coords: Vec<usize> = if opts.max_coords == 0 || n <= opts.max_coords {
        (0..n).collect()
    } else {
        // evenly spaced, always including the first coordinate
        (0..opts.max_coords).map(|i| i * n / opts.max_coords).collect()
    };

    let mut work = theta.to_vec();
    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: coords.len(),
    };
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + opts.h;
        let plus = f(&work);
        work[i] = orig - opts.h;
        let minus = f(&work);
        work[i] = orig;
        let central = (plus - minus) / (2.0 * opts.h);
        let a = analytic[i];
        let denom = a.abs().max(central.abs()).max(REL_ERR_FLOOR);
        let rel = (a - central).abs() / denom;
        if rel > report.max_rel_err || rel.is_nan() {
            report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst_index = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = finite_diff_check(&[3.0], &[6.0], |t| t[0] * t[0], &FiniteDiffOptions::default());
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let r = finite_diff_check(&[1.0, -2.0], &[0.0, 0.0], |_| 4.2, &FiniteDiffOptions::default());
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = finite_diff_check(
            &[1.0, 2.0],
            &[2.0, 4.4],
            |t| t[0] * t[0] + t[1] * t[1],
            &FiniteDiffOptions::default(),
        );
        assert!(r.max_rel_err > 0.05);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn coordinate_subsampling() {
        let theta = vec![0.5; 100];
        let grad = vec![1.0; 100];
        let opts = FiniteDiffOptions {
            h: 1e-3,
            max_coords: 10,
        };
        let r = finite_diff_check(&theta, &grad, |t| t.iter().sum(), &opts);
        assert_eq!(r.checked, 10);
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    #[should_panic]
    fn step_out_of_range_panics() {
        let opts = FiniteDiffOptions { h: 0.5, max_coords: 0 };
        finite_diff_check(&[1.0], &[1.0], |t| t[0], &opts);
    }
}
