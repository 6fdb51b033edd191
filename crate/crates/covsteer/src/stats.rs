//! Chi-squared quantiles for chance-constraint tightening and confidence
//! ellipsoids.

use crate::error::{Error, Result};
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};

/// The `level`-quantile of the chi-squared distribution with `dof` degrees of
/// freedom: the x with P(χ²_dof ≤ x) = level.
pub fn chi2_quantile(dof: usize, level: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::InvalidParameter(
            "chi-squared needs at least 1 degree of freedom".into(),
        ));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidQuantileLevel(level));
    }
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| Error::InvalidParameter(format!("chi-squared setup failed: {e}")))?;
    // The library inversion stops around 1e-9; polish it to machine
    // precision with Newton steps on the (smooth, monotone) CDF.
    let mut x = dist.inverse_cdf(level);
    for _ in 0..3 {
        let density = dist.pdf(x);
        if !(density > 0.0) {
            break;
        }
        let step = (dist.cdf(x) - level) / density;
        x -= step;
        if step.abs() <= 1e-15 * x.abs() {
            break;
        }
    }
    Ok(x)
}

/// √(quantile); this is the factor that converts a covariance square root
/// into a confidence-ellipsoid radius, and the tightening coefficient in the
/// control-norm chance constraint.
pub fn chi2_quantile_sqrt(dof: usize, level: f64) -> Result<f64> {
    Ok(chi2_quantile(dof, level)?.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_dof_has_closed_form() {
        // For 2 degrees of freedom the CDF is 1 − exp(−x/2), so the quantile
        // is −2 ln(1 − level); at level 1 − e⁻¹ that is exactly 2.
        let level = 1.0 - (-1.0f64).exp();
        assert_relative_eq!(chi2_quantile(2, level).unwrap(), 2.0, max_relative = 1e-10);
        assert_relative_eq!(
            chi2_quantile_sqrt(2, level).unwrap(),
            std::f64::consts::SQRT_2,
            max_relative = 1e-10
        );
        assert_relative_eq!(
            chi2_quantile(2, 0.95).unwrap(),
            -2.0 * 0.05f64.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn reference_values_for_flight_levels() {
        assert_relative_eq!(
            chi2_quantile_sqrt(2, 0.95).unwrap(),
            2.447746830680816,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            chi2_quantile_sqrt(3, 0.95).unwrap(),
            2.795483482915113,
            max_relative = 1e-9
        );
    }

    #[test]
    fn monotone_in_level_and_dof() {
        let q1 = chi2_quantile(3, 0.90).unwrap();
        let q2 = chi2_quantile(3, 0.95).unwrap();
        let q3 = chi2_quantile(3, 0.99).unwrap();
        assert!(q1 < q2 && q2 < q3);
        assert!(chi2_quantile(2, 0.95).unwrap() < chi2_quantile(3, 0.95).unwrap());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(chi2_quantile(0, 0.5).is_err());
        assert!(chi2_quantile(2, 0.0).is_err());
        assert!(chi2_quantile(2, 1.0).is_err());
        assert!(chi2_quantile(2, -0.1).is_err());
    }
}
