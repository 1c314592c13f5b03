//! Local Maxwellians and the map between raw moments and macroscopic state.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BgkError, Result};
use crate::velocity_grid::{norm_sq, RawMoments, Vec3, VelocityGrid};

/// Temperatures at or below this value are treated as non-realizable.
pub const TEMPERATURE_FLOOR: f64 = 1e-12;

/// Density, bulk velocity and temperature of a local equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroState {
    rho: f64,
    u: Vec3,
    temperature: f64,
}

impl MacroState {
    pub fn new(rho: f64, u: Vec3, temperature: f64) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0)
            || !(temperature.is_finite() && temperature > TEMPERATURE_FLOOR)
            || !u.iter().all(|c| c.is_finite())
        {
            return Err(BgkError::Realizability {
                rho,
                temperature,
                location: None,
            });
        }
        Ok(Self {
            rho,
            u,
            temperature,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn u(&self) -> Vec3 {
        self.u
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// `E = 3ρT + ρ|u|²`.
    pub fn energy(&self) -> f64 {
        3.0 * self.rho * self.temperature + self.rho * norm_sq(&self.u)
    }

    /// Exact raw moments of the Maxwellian on all of ℝ³.
    pub fn raw_moments(&self) -> RawMoments {
        RawMoments {
            m0: self.rho,
            m1: [
                self.rho * self.u[0],
                self.rho * self.u[1],
                self.rho * self.u[2],
            ],
            m2: self.energy(),
        }
    }
}

/// Structural constants of the ansatz space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuralBounds {
    pub rho_min: f64,
    pub rho_max: f64,
    pub u_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub l2_sup: f64,
}

impl StructuralBounds {
    pub fn new(
        rho_min: f64,
        rho_max: f64,
        u_max: f64,
        t_min: f64,
        t_max: f64,
        l2_sup: f64,
    ) -> Result<Self> {
        let ok = rho_min > 0.0
            && rho_min <= rho_max
            && t_min > 0.0
            && t_min <= t_max
            && u_max >= 0.0
            && l2_sup > 0.0;
        if !ok {
            return Err(BgkError::Config(
                "structural bounds require 0 < rho_min <= rho_max, 0 < T_min <= T_max, u_max >= 0, l2_sup > 0".into(),
            ));
        }
        Ok(Self {
            rho_min,
            rho_max,
            u_max,
            t_min,
            t_max,
            l2_sup,
        })
    }

    pub fn contains(&self, s: &MacroState) -> bool {
        (self.rho_min..=self.rho_max).contains(&s.rho())
            && (self.t_min..=self.t_max).contains(&s.temperature())
            && norm_sq(&s.u()).sqrt() <= self.u_max
    }
}

/// `ρ (2πT)^{-3/2} exp(-|v-u|²/(2T))`.
#[inline]
pub fn maxwellian_eval(state: &MacroState, v: &Vec3) -> f64 {
    let t = state.temperature;
    let d = [v[0] - state.u[0], v[1] - state.u[1], v[2] - state.u[2]];
    state.rho * (2.0 * PI * t).powf(-1.5) * (-norm_sq(&d) / (2.0 * t)).exp()
}

/// Maxwellian tabulated on a grid through its per-axis factors.
pub fn maxwellian_on_grid(state: &MacroState, grid: &VelocityGrid) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    maxwellian_on_grid_into(state, grid, &mut out);
    out
}

/// In-place variant of [`maxwellian_on_grid`].
pub fn maxwellian_on_grid_into(state: &MacroState, grid: &VelocityGrid, out: &mut [f64]) {
    let n = grid.points_per_axis();
    assert_eq!(out.len(), grid.len());
    let t = state.temperature;
    let factor = |k: usize| -> Vec<f64> {
        grid.nodes_1d()
            .iter()
            .map(|&x| (-(x - state.u[k]).powi(2) / (2.0 * t)).exp())
            .collect()
    };
    let (e1, e2, e3) = (factor(0), factor(1), factor(2));
    let pre = state.rho * (2.0 * PI * t).powf(-1.5);
    for i in 0..n {
        let a = pre * e1[i];
        for j in 0..n {
            let ab = a * e2[j];
            let base = (i * n + j) * n;
            for k in 0..n {
                out[base + k] = ab * e3[k];
            }
        }
    }
}

/// `ρ = m0`, `u = m1/m0`, `T = (m2 - m0|u|²)/(3 m0)`.
pub fn state_from_raw(m: &RawMoments) -> Result<MacroState> {
    let fail = |temperature: f64| BgkError::Realizability {
        rho: m.m0,
        temperature,
        location: None,
    };
    if !(m.m0.is_finite() && m.m0 > 0.0) {
        return Err(fail(f64::NAN));
    }
    let u = [m.m1[0] / m.m0, m.m1[1] / m.m0, m.m1[2] / m.m0];
    let t = (m.m2 - m.m0 * norm_sq(&u)) / (3.0 * m.m0);
    if !(t.is_finite() && t > TEMPERATURE_FLOOR) {
        return Err(fail(t));
    }
    MacroState::new(m.m0, u, t)
}

/// `∫ M_state(v) e^{-|v|²} dv = ρ(1+2T)^{-3/2} exp(-|u|²/(1+2T))`.
pub fn gaussian_inner(state: &MacroState) -> f64 {
    let s = 1.0 + 2.0 * state.temperature;
    state.rho * s.powf(-1.5) * (-norm_sq(&state.u) / s).exp()
}

/// Differences of macroscopic quantities between two tabulated fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroDistance {
    pub d_rho: f64,
    pub d_u: f64,
    pub d_temperature: f64,
    /// `∫(1+|v|²)|f-g| dv`.
    pub weighted_l1: f64,
}

pub fn macro_distance_bounds(f: &[f64], g: &[f64], grid: &VelocityGrid) -> Result<MacroDistance> {
    let sf = state_from_raw(&grid.raw_moments(f))?;
    let sg = state_from_raw(&grid.raw_moments(g))?;
    let diff: Vec<f64> = f.iter().zip(g).map(|(a, b)| (a - b).abs()).collect();
    let weighted_l1 = grid.weighted_sum(&diff, |v| 1.0 + norm_sq(v));
    let du = [sf.u[0] - sg.u[0], sf.u[1] - sg.u[1], sf.u[2] - sg.u[2]];
    Ok(MacroDistance {
        d_rho: (sf.rho - sg.rho).abs(),
        d_u: norm_sq(&du).sqrt(),
        d_temperature: (sf.temperature - sg.temperature).abs(),
        weighted_l1,
    })
}

/// Diagnostic estimate of the Lipschitz constants of the Maxwellian map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Largest observed `sup_v |M(f)-M(g)| e^{c|v|²} / ∫(1+|v|²)|f-g|`.
    pub lipschitz: f64,
    /// Fitted Gaussian decay rate of `|M(f)-M(g)|`.
    pub decay: f64,
    pub samples: usize,
}

/// Samples Maxwellian pairs within `bounds` and estimates `(L_M, c_M)`.
///
/// The decay rate is fitted from the slope of `ln|ΔM|` against `|v|²` along
/// the first axis; the reported constant is a sample supremum, never a bound.
pub fn lipschitz_probe<R: Rng>(
    bounds: &StructuralBounds,
    grid: &VelocityGrid,
    samples: usize,
    rng: &mut R,
) -> Result<LipschitzEstimate> {
    let draw = |rng: &mut R| -> Result<MacroState> {
        let dir: f64 = rng.gen_range(-1.0..1.0);
        MacroState::new(
            rng.gen_range(bounds.rho_min..=bounds.rho_max),
            [bounds.u_max * dir, 0.0, 0.0],
            rng.gen_range(bounds.t_min..=bounds.t_max),
        )
    };
    let mut decay = f64::INFINITY;
    let mut pairs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let a = draw(rng)?;
        let b = draw(rng)?;
        // Far-field decay along v₁ of the larger-temperature member dominates.
        let r1 = 2.0 * (bounds.t_max.sqrt() + bounds.u_max) + 2.0;
        let r2 = r1 + 2.0;
        let d = |r: f64| {
            let v = [r, 0.0, 0.0];
            (maxwellian_eval(&a, &v) - maxwellian_eval(&b, &v)).abs()
        };
        let (d1, d2) = (d(r1), d(r2));
        if d1 > 0.0 && d2 > 0.0 {
            let c = -(d2.ln() - d1.ln()) / (r2 * r2 - r1 * r1);
            decay = decay.min(c);
        }
        pairs.push((a, b));
    }
    let decay = if decay.is_finite() {
        decay.max(1e-6)
    } else {
        0.5 / bounds.t_max
    };
    let mut lipschitz: f64 = 0.0;
    for (a, b) in &pairs {
        let fa = maxwellian_on_grid(a, grid);
        let fb = maxwellian_on_grid(b, grid);
        let dist = macro_distance_bounds(&fa, &fb, grid)?;
        if dist.weighted_l1 <= 0.0 {
            continue;
        }
        let sup = fa
            .iter()
            .zip(&fb)
            .enumerate()
            .map(|(q, (x, y))| (x - y).abs() * (decay * norm_sq(&grid.node(q))).exp())
            .fold(0.0, f64::max);
        lipschitz = lipschitz.max(sup / dist.weighted_l1);
    }
    Ok(LipschitzEstimate {
        lipschitz,
        decay,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counterexamples::PerturbationSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit() -> MacroState {
        MacroState::new(1.0, [0.0; 3], 1.0).unwrap()
    }

    #[test]
    fn unit_maxwellian_at_origin() {
        let m = maxwellian_eval(&unit(), &[0.0; 3]);
        assert_relative_eq!(m, (2.0 * PI).powf(-1.5), max_relative = 1e-15);
        assert!((m - 0.0634936359342410).abs() < 1e-12);
    }

    #[test]
    fn linear_in_density_and_translation_invariant() {
        let two = MacroState::new(2.0, [0.0; 3], 1.0).unwrap();
        let shifted = MacroState::new(1.0, [1.0, 0.0, 0.0], 1.0).unwrap();
        for v in [[0.3, -1.0, 2.0], [0.0; 3], [4.0, 0.1, 0.0]] {
            assert_eq!(
                maxwellian_eval(&two, &v),
                2.0 * maxwellian_eval(&unit(), &v)
            );
        }
        assert_eq!(
            maxwellian_eval(&shifted, &[1.0, 0.0, 0.0]),
            maxwellian_eval(&unit(), &[0.0; 3])
        );
    }

    #[test]
    fn construction_rejects_nonpositive() {
        assert!(MacroState::new(0.0, [0.0; 3], 1.0).is_err());
        assert!(MacroState::new(1.0, [0.0; 3], -1.0).is_err());
        assert!(MacroState::new(1.0, [0.0; 3], 1e-13).is_err());
    }

    #[test]
    fn state_from_normalized_moments() {
        let s = state_from_raw(&RawMoments {
            m0: 1.0,
            m1: [0.0; 3],
            m2: 3.0,
        })
        .unwrap();
        assert_eq!((s.rho(), s.u(), s.temperature()), (1.0, [0.0; 3], 1.0));
    }

    #[test]
    fn state_from_first_counterexample_moments() {
        let eps = 0.01;
        let s = state_from_raw(&RawMoments {
            m0: 1.0 + eps,
            m1: [0.0; 3],
            m2: 4.0 + 3.0 * eps,
        })
        .unwrap();
        assert_relative_eq!(
            s.temperature(),
            (4.0 + 3.0 * eps) / (3.0 * (1.0 + eps)),
            max_relative = 1e-15
        );
        assert!((s.temperature() - 1.330033).abs() < 1e-6);
    }

    #[test]
    fn realizability_boundary() {
        let err = state_from_raw(&RawMoments {
            m0: 1.0,
            m1: [2.0, 0.0, 0.0],
            m2: 3.0,
        })
        .unwrap_err();
        assert!(matches!(err, BgkError::Realizability { .. }));
        assert!(state_from_raw(&RawMoments {
            m0: -1.0,
            m1: [0.0; 3],
            m2: 3.0
        })
        .is_err());
    }

    #[test]
    fn gaussian_inner_closed_forms() {
        assert_relative_eq!(
            gaussian_inner(&unit()),
            3f64.powf(-1.5),
            max_relative = 1e-15
        );
        assert!((gaussian_inner(&unit()) - 0.1924501).abs() < 1e-7);
        let s = 0.1;
        let st = MacroState::new(1.0, [0.0; 3], 1.0 + s / 3.0).unwrap();
        assert_relative_eq!(
            gaussian_inner(&st),
            (3.0 + 2.0 * s / 3.0).powf(-1.5),
            max_relative = 1e-14
        );
    }

    #[test]
    fn gaussian_inner_matches_quadrature_on_random_states() {
        let grid = VelocityGrid::new(10.0, 81).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let st = MacroState::new(
                rng.gen_range(0.2..3.0),
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ],
                rng.gen_range(0.5..2.0),
            )
            .unwrap();
            let quad = grid
                .integrate3(|v| maxwellian_eval(&st, v) * (-norm_sq(v)).exp())
                .unwrap();
            assert!((quad - gaussian_inner(&st)).abs() < 1e-8);
        }
    }

    #[test]
    fn distance_of_identical_and_scaled_fields() {
        let grid = VelocityGrid::new(8.0, 41).unwrap();
        let g = maxwellian_on_grid(&unit(), &grid);
        let d = macro_distance_bounds(&g, &g, &grid).unwrap();
        assert_eq!(
            (d.d_rho, d.d_u, d.d_temperature, d.weighted_l1),
            (0.0, 0.0, 0.0, 0.0)
        );
        let f: Vec<f64> = g.iter().map(|x| 2.0 * x).collect();
        let d = macro_distance_bounds(&f, &g, &grid).unwrap();
        assert!((d.d_rho - 1.0).abs() < 1e-10);
        assert!(d.d_u < 1e-12 && d.d_temperature < 1e-10);
    }

    #[test]
    fn distance_with_k_perturbation() {
        let spec = PerturbationSpec::new(0.01).unwrap();
        let grid = spec.adaptive_grid(0.4).unwrap();
        let g = maxwellian_on_grid(&unit(), &grid);
        let f: Vec<f64> = grid
            .nodes()
            .iter()
            .zip(&g)
            .map(|(v, m)| m + spec.eval(v))
            .collect();
        let d = macro_distance_bounds(&g, &f, &grid).unwrap();
        assert!((d.d_rho - 0.01).abs() < 1e-9);
        assert!(d.weighted_l1 >= 1.03 - 1e-7);
        assert!(d.d_rho <= d.weighted_l1);
    }

    #[test]
    fn lipschitz_probe_reports_finite_constants() {
        let b = StructuralBounds::new(0.5, 2.0, 1.0, 0.5, 2.0, 1.0).unwrap();
        let grid = VelocityGrid::new(8.0, 33).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = lipschitz_probe(&b, &grid, 12, &mut rng).unwrap();
        assert!(est.lipschitz.is_finite() && est.lipschitz > 0.0);
        assert!(est.decay > 0.0 && est.decay <= 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn moment_round_trip(rho in 0.3f64..3.0, u0 in -1.2f64..1.2, u1 in -1.2f64..1.2,
                             u2 in -1.2f64..1.2, t in 0.5f64..2.0) {
            let grid = VelocityGrid::new(10.0, 129).unwrap();
            let st = MacroState::new(rho, [u0, u1, u2], t).unwrap();
            let back = state_from_raw(&grid.raw_moments(&maxwellian_on_grid(&st, &grid))).unwrap();
            prop_assert!(((back.rho() - rho) / rho).abs() < 1e-7);
            prop_assert!(((back.temperature() - t) / t).abs() < 1e-7);
            for k in 0..3 {
                prop_assert!((back.u()[k] - st.u()[k]).abs() < 1e-7);
            }
        }

        #[test]
        fn density_gap_bounded_by_weighted_l1(r1 in 0.3f64..2.0, r2 in 0.3f64..2.0,
                                              t1 in 0.5f64..2.0, t2 in 0.5f64..2.0, u in -1.0f64..1.0) {
            let grid = VelocityGrid::new(10.0, 41).unwrap();
            let a = maxwellian_on_grid(&MacroState::new(r1, [u, 0.0, 0.0], t1).unwrap(), &grid);
            let b = maxwellian_on_grid(&MacroState::new(r2, [0.0; 3], t2).unwrap(), &grid);
            let d = macro_distance_bounds(&a, &b, &grid).unwrap();
            prop_assert!(d.d_rho <= d.weighted_l1);
        }
    }
}
