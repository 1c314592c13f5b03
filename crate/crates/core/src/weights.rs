//! Velocity weights and the integrability test for admissible weights.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{BgkError, Result};
use crate::velocity_grid::{norm_sq, Vec3};

/// Radial quadrature resolution.
const POINTS_PER_DECADE: f64 = 1e4;
/// Inner radius of the logarithmic radial grid; `[0, R_MIN]` is one trapezoid panel.
const R_MIN: f64 = 1e-4;
/// Increment-ratio threshold for the numerical divergence heuristic.
const RATIO_THRESHOLD: f64 = 0.9;

/// Doubling radii for the numeric cross-check.
pub const DEFAULT_RADII: [f64; 4] = [20.0, 40.0, 80.0, 160.0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightFunction {
    #[default]
    Identity,
    /// `1 + α|v|^β`.
    Polynomial { alpha: f64, beta: f64 },
    /// `1 / (|f| + floor)`; depends on the field value.
    Relative { floor: f64 },
}

impl fmt::Display for WeightFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightFunction::Identity => write!(f, "identity"),
            WeightFunction::Polynomial { alpha, beta } => {
                write!(f, "polynomial(alpha={alpha}, beta={beta})")
            }
            WeightFunction::Relative { floor } => write!(f, "relative(floor={floor})"),
        }
    }
}

impl WeightFunction {
    pub fn polynomial(alpha: f64, beta: f64) -> Result<Self> {
        let w = WeightFunction::Polynomial { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn relative(floor: f64) -> Result<Self> {
        let w = WeightFunction::Relative { floor };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightFunction::Identity => Ok(()),
            WeightFunction::Polynomial { alpha, beta } => {
                if alpha.is_finite() && alpha > 0.0 && beta.is_finite() && beta > 0.0 {
                    Ok(())
                } else {
                    Err(BgkError::Config(format!(
                        "polynomial weight needs alpha > 0 and beta > 0, got ({alpha}, {beta})"
                    )))
                }
            }
            WeightFunction::Relative { floor } => {
                if floor.is_finite() && floor > 0.0 {
                    Ok(())
                } else {
                    Err(BgkError::Config(format!(
                        "relative weight floor must be positive, got {floor}"
                    )))
                }
            }
        }
    }

    /// True when the weight is a fixed function of `v`.
    pub fn is_fixed(&self) -> bool {
        !matches!(self, WeightFunction::Relative { .. })
    }

    /// `w(v)`; `field_value` must be given exactly for the relative kind.
    pub fn eval(&self, v: &Vec3, field_value: Option<f64>) -> Result<f64> {
        match (*self, field_value) {
            (WeightFunction::Relative { floor }, Some(f)) => Ok(1.0 / (f.abs() + floor)),
            (WeightFunction::Relative { .. }, None) => Err(BgkError::Config(
                "relative weight requires the field value".into(),
            )),
            (_, Some(_)) => Err(BgkError::Config(
                "field value supplied to a fixed weight".into(),
            )),
            (w, None) => Ok(w.radial(norm_sq(v).sqrt())),
        }
    }

    /// Weight as a function of `|v|`. Relative weights evaluate to 1 here.
    #[inline]
    pub fn radial(&self, r: f64) -> f64 {
        match *self {
            WeightFunction::Polynomial { alpha, beta } => 1.0 + alpha * r.powf(beta),
            _ => 1.0,
        }
    }

    /// Fixed weight at `v`; panics for the relative kind.
    #[inline]
    pub fn at(&self, v: &Vec3) -> f64 {
        assert!(self.is_fixed(), "relative weight needs a field value");
        self.radial(norm_sq(v).sqrt())
    }

    /// Large-|v| exponent `p` with `w(v) ~ |v|^p`.
    fn growth(&self) -> Option<f64> {
        match *self {
            WeightFunction::Identity => Some(0.0),
            WeightFunction::Polynomial { beta, .. } => Some(beta),
            WeightFunction::Relative { .. } => None,
        }
    }
}

/// `4π ∫_a^b r² g(r) dr` on a logarithmic trapezoid grid.
pub fn radial_integral<G: Fn(f64) -> f64>(g: &G, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut total = 0.0;
    let mut lo = a;
    if a < R_MIN {
        let hi = R_MIN.min(b);
        total += 0.5 * (hi - a) * (a * a * g(a) + hi * hi * g(hi));
        lo = hi;
    }
    if b > lo {
        let (sa, sb) = (lo.ln(), b.ln());
        let n = ((POINTS_PER_DECADE * (b / lo).log10()).ceil() as usize).max(16);
        let ds = (sb - sa) / n as f64;
        // r = e^s, dr = r ds
        let h = |s: f64| {
            let r = s.exp();
            r * r * r * g(r)
        };
        let mut acc = 0.5 * (h(sa) + h(sb));
        for i in 1..n {
            acc += h(sa + i as f64 * ds);
        }
        total += acc * ds;
    }
    4.0 * PI * total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Finite,
    Divergent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityRow {
    pub radius: f64,
    pub i1: f64,
    pub i2: f64,
    /// `(I₁(R_k) − I₁(R_{k−1})) / (I₁(R_{k−1}) − I₁(R_{k−2}))`.
    pub i1_increment_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityReport {
    pub weight: WeightFunction,
    pub decay: f64,
    /// Decided by the analytic tail exponent.
    pub verdict: Verdict,
    /// Decided by the partial-integral heuristic alone.
    pub numeric_verdict: Verdict,
    /// Exponent `q` of the radial tail `r^q` of the first integrand.
    pub tail_exponent: f64,
    pub rows: Vec<IntegrabilityRow>,
}

impl IntegrabilityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("R,I1,I2,I1_increment_ratio\n");
        for r in &self.rows {
            let ratio = r
                .i1_increment_ratio
                .map(|x| format!("{x:e}"))
                .unwrap_or_default();
            s.push_str(&format!("{:e},{:e},{:e},{}\n", r.radius, r.i1, r.i2, ratio));
        }
        s
    }
}

/// Checks `∫(1+|v|²)²/w² < ∞` and `∫w² e^{−2c|v|²} < ∞`.
///
/// The second condition always holds for polynomial weights; the first holds
/// iff the radial tail `r^{6−2β}` is integrable, i.e. `β > 7/2`. Partial
/// integrals at `radii` are reported as a cross-check.
pub fn integrability_check(
    w: &WeightFunction,
    c: f64,
    radii: &[f64],
) -> Result<IntegrabilityReport> {
    w.validate()?;
    let p = w
        .growth()
        .ok_or_else(|| BgkError::Unsupported("integrability of a field-dependent weight".into()))?;
    if !(c.is_finite() && c > 0.0) {
        return Err(BgkError::Config(format!(
            "decay rate must be positive, got {c}"
        )));
    }
    if radii.len() < 3 || radii[0] <= 0.0 || radii.windows(2).any(|x| x[1] <= x[0]) {
        return Err(BgkError::Config(
            "need at least three strictly increasing positive radii".into(),
        ));
    }
    let g1 = |r: f64| {
        let a = 1.0 + r * r;
        let wr = w.radial(r);
        a * a / (wr * wr)
    };
    let g2 = |r: f64| {
        let wr = w.radial(r);
        wr * wr * (-2.0 * c * r * r).exp()
    };
    let mut rows: Vec<IntegrabilityRow> = Vec::with_capacity(radii.len());
    let (mut i1, mut i2, mut prev) = (0.0, 0.0, 0.0);
    for (k, &r) in radii.iter().enumerate() {
        i1 += radial_integral(&g1, prev, r);
        i2 += radial_integral(&g2, prev, r);
        prev = r;
        let ratio = (k >= 2).then(|| {
            let d1 = i1 - rows[k - 1].i1;
            let d0 = rows[k - 1].i1 - rows[k - 2].i1;
            d1 / d0
        });
        rows.push(IntegrabilityRow {
            radius: r,
            i1,
            i2,
            i1_increment_ratio: ratio,
        });
    }

    let ratios: Vec<f64> = rows.iter().filter_map(|r| r.i1_increment_ratio).collect();
    let last = &ratios[ratios.len().saturating_sub(2)..];
    let i1_ok = last.iter().all(|&q| q.is_finite() && q < RATIO_THRESHOLD);
    let (n, m) = (rows.len(), rows.len() - 2);
    let i2_ok = (rows[n - 1].i2 - rows[m].i2).abs() < 1e-12 * rows[n - 1].i2.abs().max(1.0);
    let numeric_verdict = if i1_ok && i2_ok {
        Verdict::Finite
    } else {
        Verdict::Divergent
    };

    let tail_exponent = 6.0 - 2.0 * p;
    let verdict = if tail_exponent < -1.0 {
        Verdict::Finite
    } else {
        Verdict::Divergent
    };
    Ok(IntegrabilityReport {
        weight: *w,
        decay: c,
        verdict,
        numeric_verdict,
        tail_exponent,
        rows,
    })
}

/// `Σ_{φ∈{1,v,|v|²}} (|Ω| ∫ φ²/w² dv)^{1/2}`.
///
/// Radial integrals are taken to a cutoff where the weight dominates, with the
/// remaining power-law tail added in closed form.
pub fn macro_bound_constant(w: &WeightFunction, omega_measure: f64) -> Result<f64> {
    w.validate()?;
    let (alpha, beta) = match *w {
        WeightFunction::Polynomial { alpha, beta } if beta > 3.5 => (alpha, beta),
        _ => {
            return Err(BgkError::Config(format!(
                "macro bound constant is infinite for weight {w}"
            )))
        }
    };
    let cutoff = (1e8 / alpha).powf(1.0 / beta).max(10.0);
    let mut total = 0.0;
    for q in [0, 2, 4] {
        let g = |r: f64| r.powi(q) / w.radial(r).powi(2);
        let head = radial_integral(&g, 0.0, cutoff);
        // ∫_R^∞ r^{2+q} / (α r^β)² dr
        let e = 3.0 + q as f64 - 2.0 * beta;
        let tail = 4.0 * PI * cutoff.powf(e) / (-e * alpha * alpha);
        total += (omega_measure * (head + tail)).sqrt();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const RADII: [f64; 4] = DEFAULT_RADII;

    #[test]
    fn evaluation_examples() {
        let w = WeightFunction::polynomial(0.1, 4.0).unwrap();
        assert_eq!(w.eval(&[0.0; 3], None).unwrap(), 1.0);
        assert_relative_eq!(
            w.eval(&[10.0, 0.0, 0.0], None).unwrap(),
            1001.0,
            max_relative = 1e-14
        );
        let r = WeightFunction::relative(1e-3).unwrap();
        assert_relative_eq!(
            r.eval(&[1.0; 3], Some(0.0)).unwrap(),
            1000.0,
            max_relative = 1e-12
        );
        assert!(r.eval(&[1.0; 3], None).is_err());
        assert_eq!(
            WeightFunction::Identity
                .eval(&[3.0, 4.0, 5.0], None)
                .unwrap(),
            1.0
        );
    }

    #[test]
    fn invalid_parameters() {
        assert!(WeightFunction::polynomial(0.0, 4.0).is_err());
        assert!(WeightFunction::polynomial(0.1, -1.0).is_err());
        assert!(WeightFunction::relative(0.0).is_err());
    }

    #[test]
    fn radial_integral_of_gaussian() {
        // 4π ∫ r² e^{-r²/2} dr = (2π)^{3/2}
        let v = radial_integral(&|r: f64| (-0.5 * r * r).exp(), 0.0, 40.0);
        assert_relative_eq!(v, (2.0 * PI).powf(1.5), max_relative = 1e-8);
    }

    #[test]
    fn admissible_weight_is_finite() {
        let w = WeightFunction::polynomial(0.1, 4.0).unwrap();
        let rep = integrability_check(&w, 0.5, &RADII).unwrap();
        assert_eq!(rep.verdict, Verdict::Finite);
        assert_eq!(rep.numeric_verdict, Verdict::Finite);
        // Tail increments shrink by 2^{7-2β} = 1/2.
        let q = rep.rows[3].i1_increment_ratio.unwrap();
        assert!((q - 0.5).abs() < 0.01, "ratio {q}");
    }

    #[test]
    fn cubic_and_boundary_weights_diverge() {
        for beta in [3.0, 3.5] {
            let w = WeightFunction::polynomial(0.1, beta).unwrap();
            let rep = integrability_check(&w, 0.5, &RADII).unwrap();
            assert_eq!(rep.verdict, Verdict::Divergent, "beta {beta}");
            assert_eq!(rep.numeric_verdict, Verdict::Divergent, "beta {beta}");
        }
        let rep = integrability_check(&WeightFunction::Identity, 0.5, &RADII).unwrap();
        assert_eq!(rep.verdict, Verdict::Divergent);
        assert_eq!(rep.numeric_verdict, Verdict::Divergent);
    }

    #[test]
    fn cubic_partials_grow_linearly() {
        // r²(1+r²)²/(0.1 r³)² → 100 for large r, so I₁ increments double.
        let w = WeightFunction::polynomial(0.1, 3.0).unwrap();
        let rep = integrability_check(&w, 0.5, &RADII).unwrap();
        assert!((rep.rows[3].i1_increment_ratio.unwrap() - 2.0).abs() < 0.05);
    }

    #[test]
    fn relative_kind_is_unsupported() {
        let w = WeightFunction::relative(1e-3).unwrap();
        assert!(matches!(
            integrability_check(&w, 0.5, &RADII),
            Err(BgkError::Unsupported(_))
        ));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let w = WeightFunction::polynomial(0.1, 4.0).unwrap();
        let csv = integrability_check(&w, 0.5, &RADII).unwrap().to_csv();
        assert!(csv.starts_with("R,I1,I2,I1_increment_ratio\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn macro_constant_against_brute_force() {
        let w = WeightFunction::polynomial(0.1, 4.0).unwrap();
        let c = macro_bound_constant(&w, 1.0).unwrap();
        // Plain uniform trapezoid to a large radius, tail added by hand.
        let brute = |q: i32| {
            let (r_max, n) = (2000.0, 4_000_000);
            let h = r_max / n as f64;
            let g = |r: f64| r * r * r.powi(q) / w.radial(r).powi(2);
            let mut s = 0.5 * (g(0.0) + g(r_max));
            for i in 1..n {
                s += g(i as f64 * h);
            }
            let e = 3.0 + q as f64 - 8.0;
            4.0 * PI * (s * h + r_max.powf(e) / (-e * 0.01))
        };
        let expect: f64 = [0, 2, 4].iter().map(|&q| brute(q).sqrt()).sum();
        assert_relative_eq!(c, expect, max_relative = 1e-6);
        assert!(macro_bound_constant(&WeightFunction::Identity, 1.0).is_err());
        let cubic = WeightFunction::polynomial(0.1, 3.0).unwrap();
        assert!(macro_bound_constant(&cubic, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn polynomial_weight_at_least_one_and_monotone(alpha in 1e-3f64..10.0, beta in 0.1f64..8.0,
                                                       r in 0.0f64..50.0, dr in 0.0f64..5.0) {
            let w = WeightFunction::polynomial(alpha, beta).unwrap();
            prop_assert!(w.radial(r) >= 1.0);
            prop_assert!(w.radial(r + dr) >= w.radial(r));
        }

        #[test]
        fn analytic_verdict_matches_threshold(beta in 0.5f64..8.0) {
            prop_assume!((beta - 3.5).abs() > 0.05);
            let w = WeightFunction::polynomial(0.1, beta).unwrap();
            let rep = integrability_check(&w, 0.5, &RADII).unwrap();
            let expect = if beta > 3.5 { Verdict::Finite } else { Verdict::Divergent };
            prop_assert_eq!(rep.verdict, expect);
        }
    }
}
