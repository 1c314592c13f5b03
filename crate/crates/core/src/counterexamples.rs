//! The perturbation `K_ε` and the two loss/accuracy counterexample families
//! for the space-homogeneous BGK model with `Kn = 1`.
//!
//! `K_ε` is a pair of Maxwellians of mass `ε/2` and unit temperature centred
//! at `±ε^{-1/2} e₁`. Its `L²` norm is `O(ε)` while its energy moment stays
//! `O(1)`, so a residual made of `K_ε` makes the standard loss vanish without
//! the error vanishing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{BgkError, Result};
use crate::maxwellian::{
    gaussian_inner, maxwellian_eval, maxwellian_on_grid, maxwellian_on_grid_into, state_from_raw,
    MacroState,
};
use crate::velocity_grid::{RawMoments, Vec3, VelocityGrid};
use crate::weights::WeightFunction;

/// Distance kept between a bump centre and the edge of a quadrature box.
pub const BUMP_MARGIN: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    epsilon: f64,
}

impl PerturbationSpec {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(BgkError::Config(format!(
                "epsilon must lie in (0, 1), got {epsilon}"
            )));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `|u_ε| = ε^{-1/2}`.
    pub fn shift(&self) -> f64 {
        self.epsilon.sqrt().recip()
    }

    fn bumps(&self) -> [MacroState; 2] {
        let s = self.shift();
        let half = 0.5 * self.epsilon;
        [
            MacroState::new(half, [s, 0.0, 0.0], 1.0).expect("valid bump"),
            MacroState::new(half, [-s, 0.0, 0.0], 1.0).expect("valid bump"),
        ]
    }

    pub fn eval(&self, v: &Vec3) -> f64 {
        let [a, b] = self.bumps();
        maxwellian_eval(&a, v) + maxwellian_eval(&b, v)
    }

    pub fn tabulate(&self, grid: &VelocityGrid) -> Vec<f64> {
        let [a, b] = self.bumps();
        let mut out = maxwellian_on_grid(&a, grid);
        let mut tmp = vec![0.0; grid.len()];
        maxwellian_on_grid_into(&b, grid, &mut tmp);
        out.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
        out
    }

    /// Closed-form raw moments `(ε, 0, 1+3ε)`.
    pub fn raw_moments(&self) -> RawMoments {
        RawMoments {
            m0: self.epsilon,
            m1: [0.0; 3],
            m2: 1.0 + 3.0 * self.epsilon,
        }
    }

    /// `‖K_ε‖² = ε²(1+e^{-1/ε}) / (16 π^{3/2})`.
    pub fn l2norm_sq(&self) -> f64 {
        let e = self.epsilon;
        e * e * (1.0 + (-1.0 / e).exp()) / (16.0 * PI.powf(1.5))
    }

    /// Half width `ε^{-1/2} + 8` that contains both bumps.
    pub fn adaptive_half_width(&self) -> f64 {
        self.shift() + BUMP_MARGIN
    }

    pub fn adaptive_grid(&self, max_spacing: f64) -> Result<VelocityGrid> {
        VelocityGrid::with_max_spacing(self.adaptive_half_width(), max_spacing)
    }

    /// Rejects grids that cut into a bump.
    pub fn check_domain(&self, grid: &VelocityGrid) -> Result<()> {
        let need = self.adaptive_half_width();
        if grid.half_width() < need - 1e-12 {
            return Err(BgkError::Domain(format!(
                "velocity half width {} < {need:.4} needed for epsilon = {}",
                grid.half_width(),
                self.epsilon
            )));
        }
        Ok(())
    }

    /// `(v₁, K_ε(v₁, 0, 0))` samples.
    pub fn profile(&self, v1: &[f64]) -> Vec<(f64, f64)> {
        v1.iter().map(|&x| (x, self.eval(&[x, 0.0, 0.0]))).collect()
    }
}

/// `∫ w² K_ε² dv` on a grid that must contain both bumps.
pub fn weighted_k_norm_sq(
    spec: &PerturbationSpec,
    w: &WeightFunction,
    grid: &VelocityGrid,
) -> Result<f64> {
    if !w.is_fixed() {
        return Err(BgkError::Unsupported(
            "weighted K norm needs a fixed weight".into(),
        ));
    }
    spec.check_domain(grid)?;
    grid.integrate3(|v| {
        let k = spec.eval(v);
        let wv = w.at(v);
        wv * wv * k * k
    })
}

/// `∫ w² K_ε² dv` computed on the half space `v₁ ≥ 0` and doubled.
///
/// The box covers `[max(0, s−8), s+8] × [−8, 8]²` around the right bump, so
/// the cost does not grow as `ε → 0`. Relies on `K_ε` and `w` being even in `v₁`.
pub fn weighted_k_norm_sq_local(
    spec: &PerturbationSpec,
    w: &WeightFunction,
    max_spacing: f64,
) -> Result<f64> {
    if !w.is_fixed() {
        return Err(BgkError::Unsupported(
            "weighted K norm needs a fixed weight".into(),
        ));
    }
    let s = spec.shift();
    let (a, b) = ((s - BUMP_MARGIN).max(0.0), s + BUMP_MARGIN);
    let n1 = ((b - a) / max_spacing).ceil() as usize + 1;
    let h1 = (b - a) / (n1 - 1) as f64;
    let cross = VelocityGrid::with_max_spacing(BUMP_MARGIN, max_spacing)?;
    let (x, wx) = (cross.nodes_1d(), cross.weights_1d());
    let mut total = 0.0;
    for i in 0..n1 {
        let v1 = a + i as f64 * h1;
        let w1 = if i == 0 || i == n1 - 1 { 0.5 * h1 } else { h1 };
        let mut acc = 0.0;
        for (&v2, &w2) in x.iter().zip(wx) {
            let mut inner = 0.0;
            for (&v3, &w3) in x.iter().zip(wx) {
                let v = [v1, v2, v3];
                let k = spec.eval(&v);
                let wv = w.at(&v);
                inner += wv * wv * k * k * w3;
            }
            acc += inner * w2;
        }
        total += acc * w1;
    }
    Ok(2.0 * total)
}

/// Space-homogeneous problem with `Kn = 1` and normalized initial data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogeneousProblem {
    /// Initial datum as a sum of Maxwellians.
    f0: Vec<MacroState>,
    terminal_time: f64,
}

impl Default for HomogeneousProblem {
    fn default() -> Self {
        Self {
            f0: vec![MacroState::new(1.0, [0.0; 3], 1.0).expect("unit state")],
            terminal_time: 0.1,
        }
    }
}

impl HomogeneousProblem {
    /// Validates that `f0` has raw moments `(1, 0, 3)`.
    pub fn new(f0: Vec<MacroState>, terminal_time: f64) -> Result<Self> {
        if !(terminal_time.is_finite() && terminal_time > 0.0) {
            return Err(BgkError::Config(format!(
                "terminal time must be positive, got {terminal_time}"
            )));
        }
        if f0.is_empty() {
            return Err(BgkError::Config("initial mixture is empty".into()));
        }
        let p = Self { f0, terminal_time };
        let m = p.f0_moments();
        let off =
            (m.m0 - 1.0).abs() + m.m1.iter().map(|c| c.abs()).sum::<f64>() + (m.m2 - 3.0).abs();
        if off > 1e-6 {
            return Err(BgkError::Config(format!(
                "initial data must have moments (1, 0, 3), got ({}, {:?}, {})",
                m.m0, m.m1, m.m2
            )));
        }
        Ok(p)
    }

    pub fn terminal_time(&self) -> f64 {
        self.terminal_time
    }

    pub fn with_terminal_time(mut self, terminal_time: f64) -> Result<Self> {
        self.terminal_time = terminal_time;
        Self::new(self.f0, self.terminal_time)
    }

    pub fn components(&self) -> &[MacroState] {
        &self.f0
    }

    pub fn f0(&self, v: &Vec3) -> f64 {
        self.f0.iter().map(|s| maxwellian_eval(s, v)).sum()
    }

    pub fn f0_on_grid(&self, grid: &VelocityGrid) -> Vec<f64> {
        let mut out = vec![0.0; grid.len()];
        let mut tmp = vec![0.0; grid.len()];
        for s in &self.f0 {
            maxwellian_on_grid_into(s, grid, &mut tmp);
            out.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y);
        }
        out
    }

    fn f0_moments(&self) -> RawMoments {
        self.f0.iter().fold(RawMoments::default(), |acc, s| {
            let m = s.raw_moments();
            RawMoments {
                m0: acc.m0 + m.m0,
                m1: [
                    acc.m1[0] + m.m1[0],
                    acc.m1[1] + m.m1[1],
                    acc.m1[2] + m.m1[2],
                ],
                m2: acc.m2 + m.m2,
            }
        })
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.terminal_time).contains(&t) {
            return Err(BgkError::OutOfRange(format!(
                "time {t} outside [0, {}]",
                self.terminal_time
            )));
        }
        Ok(())
    }
}

fn unit_state() -> MacroState {
    MacroState::new(1.0, [0.0; 3], 1.0).expect("unit state")
}

/// `e^{-t} f₀(v) + (1-e^{-t}) M_{(1,0,1)}(v)`.
pub fn exact_homogeneous(problem: &HomogeneousProblem, t: f64, v: &Vec3) -> Result<f64> {
    problem.check_time(t)?;
    Ok(exact_homogeneous_unchecked(problem, t, v))
}

fn exact_homogeneous_unchecked(problem: &HomogeneousProblem, t: f64, v: &Vec3) -> f64 {
    let e = (-t).exp();
    e * problem.f0(v) + (1.0 - e) * maxwellian_eval(&unit_state(), v)
}

/// Equilibrium of the first family: `(1+ε, 0, (4+3ε)/(3(1+ε)))`.
pub fn counterexample1_state(spec: &PerturbationSpec) -> MacroState {
    let e = spec.epsilon();
    MacroState::new(1.0 + e, [0.0; 3], (4.0 + 3.0 * e) / (3.0 * (1.0 + e))).expect("valid state")
}

/// `e^{-t}(f₀ + K_ε) + (1-e^{-t}) M_*`.
pub fn counterexample1_field(
    spec: &PerturbationSpec,
    problem: &HomogeneousProblem,
    t: f64,
    v: &Vec3,
) -> f64 {
    let e = (-t).exp();
    e * (problem.f0(v) + spec.eval(v))
        + (1.0 - e) * maxwellian_eval(&counterexample1_state(spec), v)
}

/// `‖M_a − M_b‖_{L²}` in closed form, using `∫M_a M_b = ρ_aρ_b (2π(T_a+T_b))^{-3/2} e^{-|u_a-u_b|²/(2(T_a+T_b))}`.
pub fn maxwellian_l2_distance(a: &MacroState, b: &MacroState) -> f64 {
    let inner = |p: &MacroState, q: &MacroState| {
        let s = p.temperature() + q.temperature();
        let du: f64 = (0..3).map(|k| (p.u()[k] - q.u()[k]).powi(2)).sum();
        p.rho() * q.rho() * (2.0 * PI * s).powf(-1.5) * (-du / (2.0 * s)).exp()
    };
    (inner(a, a) + inner(b, b) - 2.0 * inner(a, b))
        .max(0.0)
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample1Report {
    pub epsilon: f64,
    pub standard_loss: f64,
    pub weighted_ini_loss: f64,
    /// `(t, ‖f̃⁽¹⁾ − f‖_{L²_v}(t))`.
    pub l2_error: Vec<(f64, f64)>,
    /// `‖M_* − M_{(1,0,1)}‖_{L²_v}`.
    pub maxwellian_gap: f64,
}

/// Default spacing of the adaptive velocity grids used by the reports.
pub const REPORT_SPACING: f64 = 0.4;

pub fn counterexample1_report(
    spec: &PerturbationSpec,
    problem: &HomogeneousProblem,
    lambda_ini: f64,
    w: &WeightFunction,
    eval_times: &[f64],
) -> Result<Counterexample1Report> {
    let grid = spec.adaptive_grid(REPORT_SPACING)?;
    counterexample1_report_on(spec, problem, lambda_ini, w, eval_times, &grid)
}

pub fn counterexample1_report_on(
    spec: &PerturbationSpec,
    problem: &HomogeneousProblem,
    lambda_ini: f64,
    w: &WeightFunction,
    eval_times: &[f64],
    grid: &VelocityGrid,
) -> Result<Counterexample1Report> {
    spec.check_domain(grid)?;
    check_eval_times(problem, eval_times)?;
    let star = counterexample1_state(spec);
    let unit = unit_state();
    let f0 = problem.f0_on_grid(grid);
    let k = spec.tabulate(grid);
    let ms = maxwellian_on_grid(&star, grid);
    let m1 = maxwellian_on_grid(&unit, grid);

    let mut l2_error = Vec::with_capacity(eval_times.len());
    for &t in eval_times {
        let e = (-t).exp();
        let diff: Vec<f64> = (0..grid.len())
            .map(|q| {
                let approx = e * (f0[q] + k[q]) + (1.0 - e) * ms[q];
                let exact = e * f0[q] + (1.0 - e) * m1[q];
                (approx - exact).powi(2)
            })
            .collect();
        l2_error.push((t, grid.integrate_values(&diff).sqrt()));
    }
    let gap: Vec<f64> = ms.iter().zip(&m1).map(|(a, b)| (a - b).powi(2)).collect();
    Ok(Counterexample1Report {
        epsilon: spec.epsilon(),
        standard_loss: lambda_ini * spec.l2norm_sq(),
        weighted_ini_loss: lambda_ini * weighted_k_norm_sq(spec, w, grid)?,
        l2_error,
        maxwellian_gap: grid.integrate_values(&gap).sqrt(),
    })
}

fn check_eval_times(problem: &HomogeneousProblem, times: &[f64]) -> Result<()> {
    for &t in times {
        if !(t > 0.0 && t <= problem.terminal_time()) {
            return Err(BgkError::OutOfRange(format!(
                "evaluation time {t} outside (0, {}]",
                problem.terminal_time()
            )));
        }
    }
    Ok(())
}

/// Closed-form macroscopic state of the second family at time `t`.
pub fn counterexample2_moments(spec: &PerturbationSpec, t: f64) -> MacroState {
    let e = spec.epsilon();
    let rho = 1.0 + e * t;
    let temp = (3.0 + t * (1.0 + 3.0 * e)) / (3.0 * (1.0 + e * t));
    MacroState::new(rho, [0.0; 3], temp).expect("valid state")
}

/// Duhamel representation of the second family,
/// `e^{-t}f₀ + (1-e^{-t})K_ε + ∫₀ᵗ e^{-(t-s)} M_{state(s)} ds`,
/// with the time integral done by composite Simpson.
#[derive(Debug, Clone)]
pub struct Counterexample2Field {
    pub spec: PerturbationSpec,
    pub problem: HomogeneousProblem,
    /// Even number of Simpson panels.
    pub panels: usize,
}

impl Counterexample2Field {
    pub fn new(spec: PerturbationSpec, problem: HomogeneousProblem) -> Self {
        Self {
            spec,
            problem,
            panels: 64,
        }
    }

    pub fn value(&self, t: f64, v: &Vec3) -> f64 {
        let e = (-t).exp();
        let duhamel = simpson(
            |s| (-(t - s)).exp() * maxwellian_eval(&counterexample2_moments(&self.spec, s), v),
            0.0,
            t,
            self.panels,
        );
        e * self.problem.f0(v) + (1.0 - e) * self.spec.eval(v) + duhamel
    }

    /// `∂_t f̃ = M_{state(t)} − f̃ + K_ε`.
    pub fn time_derivative(&self, t: f64, v: &Vec3) -> f64 {
        maxwellian_eval(&counterexample2_moments(&self.spec, t), v) - self.value(t, v)
            + self.spec.eval(v)
    }
}

/// Composite Simpson rule with `panels` (rounded up to even) subintervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    if b == a {
        return 0.0;
    }
    let n = (panels.max(2) + 1) & !1;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let c = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += c * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Time-marched second family.
#[derive(Debug, Clone)]
pub struct Counterexample2Trajectory {
    pub dt: f64,
    /// Macroscopic state after every step, starting with `t = 0`.
    pub states: Vec<(f64, MacroState)>,
    /// Fields at the requested snapshot times.
    pub snapshots: Vec<(f64, Vec<f64>)>,
}

impl Counterexample2Trajectory {
    pub fn state_at(&self, t: f64) -> Option<MacroState> {
        let idx = (t / self.dt).round() as usize;
        self.states
            .get(idx)
            .filter(|(s, _)| (s - t).abs() < 1e-9 * t.max(1.0) + 1e-12)
            .map(|(_, m)| *m)
    }
}

/// Marches `∂_t f = M[f] − f + K_ε` to `t_end` on the grid.
///
/// Each step is a two-stage exponential Runge–Kutta step: a predictor
/// `f* = e^{-dt} fⁿ + (1−e^{-dt})(M[fⁿ] + K)`, then a correction
/// `fⁿ⁺¹ = f* + φ₂ (M[f*] − M[fⁿ])` with `φ₂ = (dt − 1 + e^{-dt}) / dt`.
/// Moments grow linearly in time, so the step is second order for them.
pub fn counterexample2_solve(
    spec: &PerturbationSpec,
    problem: &HomogeneousProblem,
    grid: &VelocityGrid,
    dt: f64,
    t_end: f64,
    snapshot_times: &[f64],
) -> Result<Counterexample2Trajectory> {
    spec.check_domain(grid)?;
    let forcing = spec.tabulate(grid);
    march_forced(
        &problem.f0_on_grid(grid),
        Some(&forcing),
        grid,
        dt,
        t_end,
        snapshot_times,
    )
}

/// Forced or unforced homogeneous march with the step described on
/// [`counterexample2_solve`].
pub fn march_forced(
    f0: &[f64],
    forcing: Option<&[f64]>,
    grid: &VelocityGrid,
    dt: f64,
    t_end: f64,
    snapshot_times: &[f64],
) -> Result<Counterexample2Trajectory> {
    if !(dt > 0.0 && t_end >= 0.0) {
        return Err(BgkError::Config(
            "dt must be positive and t_end non-negative".into(),
        ));
    }
    let steps = (t_end / dt).round() as usize;
    if ((steps as f64) * dt - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(BgkError::Config(format!(
            "dt = {dt} does not divide {t_end}"
        )));
    }
    let snap_idx: Vec<(usize, f64)> = snapshot_times
        .iter()
        .map(|&t| {
            let i = (t / dt).round() as usize;
            if i > steps || ((i as f64) * dt - t).abs() > 1e-9 * t.max(1.0) {
                Err(BgkError::OutOfRange(format!(
                    "snapshot time {t} is not a step time"
                )))
            } else {
                Ok((i, t))
            }
        })
        .collect::<Result<_>>()?;

    let n = grid.len();
    let e = (-dt).exp();
    let a = 1.0 - e;
    let phi2 = (dt - a) / dt;
    let mut f = f0.to_vec();
    let mut m_old = vec![0.0; n];
    let mut m_new = vec![0.0; n];
    let mut star = vec![0.0; n];
    let mut state = state_from_raw(&grid.raw_moments(&f))?;
    let mut states = Vec::with_capacity(steps + 1);
    let mut snapshots = Vec::with_capacity(snap_idx.len());
    states.push((0.0, state));
    let take = |i: usize, f: &[f64], out: &mut Vec<(f64, Vec<f64>)>| {
        for &(j, t) in &snap_idx {
            if j == i {
                out.push((t, f.to_vec()));
            }
        }
    };
    take(0, &f, &mut snapshots);
    for step in 1..=steps {
        maxwellian_on_grid_into(&state, grid, &mut m_old);
        for q in 0..n {
            let k = forcing.map_or(0.0, |g| g[q]);
            star[q] = e * f[q] + a * (m_old[q] + k);
        }
        let mid = state_from_raw(&grid.raw_moments(&star))?;
        maxwellian_on_grid_into(&mid, grid, &mut m_new);
        for q in 0..n {
            f[q] = star[q] + phi2 * (m_new[q] - m_old[q]);
        }
        state = state_from_raw(&grid.raw_moments(&f))?;
        states.push((step as f64 * dt, state));
        take(step, &f, &mut snapshots);
    }
    Ok(Counterexample2Trajectory {
        dt,
        states,
        snapshots,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample2Report {
    pub epsilon: f64,
    pub standard_loss: f64,
    pub weighted_pde_loss: f64,
    /// `(t, ∫₀ᵗ e^{-(t-s)} I_ε(s) ds − (1−e^{-t}) kφ)`.
    pub projection_lower_bound: Vec<(f64, f64)>,
    /// `⟨K_ε, e^{-|v|²}⟩ = 3^{-3/2} ε e^{-1/(3ε)}`.
    pub kphi: f64,
    pub ln_kphi: f64,
    /// `(3 + 2𝒯/3)^{-5/2}`.
    pub kappa: f64,
}

/// `ln(3^{-3/2} ε e^{-1/(3ε)})`.
pub fn ln_kphi(spec: &PerturbationSpec) -> f64 {
    let e = spec.epsilon();
    -1.5 * 3f64.ln() + e.ln() - 1.0 / (3.0 * e)
}

/// `I_ε(s) = 3^{-3/2} − ⟨M_{state(s)}, e^{-|v|²}⟩`.
pub fn projection_integrand(spec: &PerturbationSpec, s: f64) -> f64 {
    3f64.powf(-1.5) - gaussian_inner(&counterexample2_moments(spec, s))
}

pub fn projection_lower_bound(spec: &PerturbationSpec, t: f64) -> f64 {
    let integral = simpson(
        |s| (-(t - s)).exp() * projection_integrand(spec, s),
        0.0,
        t,
        256,
    );
    integral - (1.0 - (-t).exp()) * ln_kphi(spec).exp()
}

/// `(κ/4)(t − 1 + e^{-t})`.
pub fn kappa_threshold(terminal_time: f64, t: f64) -> f64 {
    let kappa = (3.0 + 2.0 * terminal_time / 3.0).powf(-2.5);
    0.25 * kappa * (t - 1.0 + (-t).exp())
}

pub fn counterexample2_report(
    spec: &PerturbationSpec,
    problem: &HomogeneousProblem,
    w: &WeightFunction,
    eval_times: &[f64],
) -> Result<Counterexample2Report> {
    check_eval_times(problem, eval_times)?;
    let tt = problem.terminal_time();
    let grid = spec.adaptive_grid(REPORT_SPACING)?;
    let ln_k = ln_kphi(spec);
    Ok(Counterexample2Report {
        epsilon: spec.epsilon(),
        standard_loss: tt * spec.l2norm_sq(),
        weighted_pde_loss: tt * weighted_k_norm_sq(spec, w, &grid)?,
        projection_lower_bound: eval_times
            .iter()
            .map(|&t| (t, projection_lower_bound(spec, t)))
            .collect(),
        kphi: ln_k.exp(),
        ln_kphi: ln_k,
        kappa: (3.0 + 2.0 * tt / 3.0).powf(-2.5),
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Default ε sweep.
pub const EPSILON_SWEEP: [f64; 5] = [0.2, 0.1, 0.05, 0.02, 0.01];

/// One row of the loss/accuracy curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub standard_loss: f64,
    pub weighted_loss: f64,
    /// Family 1: `L²_v` error; family 2: projection lower bound.
    pub error_or_bound: f64,
    /// Family 1 only.
    pub maxwellian_gap: Option<f64>,
}

pub fn sweep_family1(
    epsilons: &[f64],
    problem: &HomogeneousProblem,
    lambda_ini: f64,
    w: &WeightFunction,
    t_eval: f64,
) -> Result<Vec<SweepRow>> {
    epsilons
        .iter()
        .map(|&e| {
            let spec = PerturbationSpec::new(e)?;
            let r = counterexample1_report(&spec, problem, lambda_ini, w, &[t_eval])?;
            Ok(SweepRow {
                epsilon: e,
                standard_loss: r.standard_loss,
                weighted_loss: r.weighted_ini_loss,
                error_or_bound: r.l2_error[0].1,
                maxwellian_gap: Some(r.maxwellian_gap),
            })
        })
        .collect()
}

pub fn sweep_family2(
    epsilons: &[f64],
    problem: &HomogeneousProblem,
    w: &WeightFunction,
    t_eval: f64,
) -> Result<Vec<SweepRow>> {
    epsilons
        .iter()
        .map(|&e| {
            let spec = PerturbationSpec::new(e)?;
            let r = counterexample2_report(&spec, problem, w, &[t_eval])?;
            Ok(SweepRow {
                epsilon: e,
                standard_loss: r.standard_loss,
                weighted_loss: r.weighted_pde_loss,
                error_or_bound: r.projection_lower_bound[0].1,
                maxwellian_gap: None,
            })
        })
        .collect()
}
