//! Residuals of the BGK model, the standard / weighted / relative losses, the
//! stability aggregate and the macroscopic error bound.
//!
//! All velocity integrals are weighted sums over a [`TensorVelocities`] set;
//! space-time integrals over sampled points are `mean × measure`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::counterexamples::{
    counterexample1_field, exact_homogeneous, Counterexample2Field, HomogeneousProblem,
    PerturbationSpec,
};
use crate::error::{BgkError, Result};
use crate::maxwellian::{maxwellian_eval, state_from_raw, MacroState};
use crate::velocity_grid::{norm_sq, RawMoments, Vec3, VelocityGrid};
use crate::weights::{macro_bound_constant, WeightFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Periodic,
    NeumannZero,
}

/// Initial data; every variant is a Maxwellian or a sum of Maxwellians in `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// `ρ = 1 + 0.5 sin 2πx`, `u = 0`, `T = 1 + 0.5 sin(2πx + 0.2)`.
    Smooth1d,
    /// `ρ = 1 − 0.875 h`, `u = 0`, `T = 1 − 0.2 h`, `h = (1 + tanh 100x)/2`.
    Riemann1d,
    /// Spatially uniform sum of Maxwellians.
    Mixture { components: Vec<MacroState> },
}

impl InitialCondition {
    /// Local state at `x`, for single-Maxwellian data.
    pub fn state(&self, x: &[f64; 3]) -> Option<MacroState> {
        match self {
            InitialCondition::Smooth1d => {
                let s = 2.0 * PI * x[0];
                MacroState::new(1.0 + 0.5 * s.sin(), [0.0; 3], 1.0 + 0.5 * (s + 0.2).sin()).ok()
            }
            InitialCondition::Riemann1d => {
                let h = 0.5 * (1.0 + (100.0 * x[0]).tanh());
                MacroState::new(1.0 - 0.875 * h, [0.0; 3], 1.0 - 0.2 * h).ok()
            }
            InitialCondition::Mixture { components } if components.len() == 1 => {
                Some(components[0])
            }
            InitialCondition::Mixture { .. } => None,
        }
    }

    pub fn eval(&self, x: &[f64; 3], v: &Vec3) -> f64 {
        match self {
            InitialCondition::Mixture { components } => {
                components.iter().map(|s| maxwellian_eval(s, v)).sum()
            }
            _ => maxwellian_eval(&self.state(x).expect("maxwellian initial data"), v),
        }
    }
}

/// Cauchy problem for the BGK model on a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    /// 0 for the space-homogeneous model.
    pub spatial_dim: usize,
    pub domain: Vec<[f64; 2]>,
    pub boundary: Vec<BoundaryKind>,
    pub kn: f64,
    pub terminal_time: f64,
    pub initial: InitialCondition,
    pub velocity_half_width: f64,
}

impl ProblemSpec {
    pub fn smooth_1d(kn: f64) -> Self {
        Self {
            spatial_dim: 1,
            domain: vec![[-0.5, 0.5]],
            boundary: vec![BoundaryKind::Periodic],
            kn,
            terminal_time: 0.1,
            initial: InitialCondition::Smooth1d,
            velocity_half_width: 10.0,
        }
    }

    pub fn riemann_1d(kn: f64) -> Self {
        Self {
            spatial_dim: 1,
            domain: vec![[-0.5, 0.5]],
            boundary: vec![BoundaryKind::NeumannZero],
            kn,
            terminal_time: 0.1,
            initial: InitialCondition::Riemann1d,
            velocity_half_width: 10.0,
        }
    }

    /// Space-homogeneous problem with `Kn = 1`.
    pub fn homogeneous(problem: &HomogeneousProblem) -> Self {
        Self {
            spatial_dim: 0,
            domain: vec![],
            boundary: vec![],
            kn: 1.0,
            terminal_time: problem.terminal_time(),
            initial: InitialCondition::Mixture {
                components: problem.components().to_vec(),
            },
            velocity_half_width: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BgkError::Config(m.to_string()));
        if self.spatial_dim > 3 {
            return bad("spatial_dim must be 0..=3");
        }
        if self.domain.len() != self.spatial_dim || self.boundary.len() != self.spatial_dim {
            return bad("domain and boundary need one entry per spatial axis");
        }
        if self.domain.iter().any(|[lo, hi]| !(hi > lo)) {
            return bad("domain extents must be positive");
        }
        if !(self.kn.is_finite() && self.kn > 0.0) {
            return bad("kn must be positive");
        }
        if !(self.terminal_time.is_finite() && self.terminal_time > 0.0) {
            return bad("terminal_time must be positive");
        }
        if !(self.velocity_half_width > 0.0) {
            return bad("velocity_half_width must be positive");
        }
        if self.spatial_dim > 1 && !matches!(self.initial, InitialCondition::Mixture { .. }) {
            return bad("only 1D initial profiles are provided");
        }
        Ok(())
    }

    /// `|Ω|`; 1 for the homogeneous model.
    pub fn domain_measure(&self) -> f64 {
        self.domain.iter().map(|[lo, hi]| hi - lo).product()
    }

    pub fn f0(&self, x: &[f64; 3], v: &Vec3) -> f64 {
        self.initial.eval(x, v)
    }
}

/// A space-time point; only the first `d` spatial coordinates are used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StPoint {
    pub t: f64,
    pub x: [f64; 3],
}

impl StPoint {
    pub fn new(t: f64, x: [f64; 3]) -> Self {
        Self { t, x }
    }

    pub fn homogeneous(t: f64) -> Self {
        Self { t, x: [0.0; 3] }
    }
}

/// Tensor-product velocity set with per-axis quadrature weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorVelocities {
    pub axes: [Vec<f64>; 3],
    pub weights: [Vec<f64>; 3],
}

impl TensorVelocities {
    pub fn new(axes: [Vec<f64>; 3], weights: [Vec<f64>; 3]) -> Self {
        for k in 0..3 {
            assert_eq!(axes[k].len(), weights[k].len(), "axis {k} nodes/weights");
        }
        Self { axes, weights }
    }

    pub fn from_grid(grid: &VelocityGrid) -> Self {
        let n = grid.nodes_1d().to_vec();
        let w = grid.weights_1d().to_vec();
        Self::new([n.clone(), n.clone(), n], [w.clone(), w.clone(), w])
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.axes[0].len(), self.axes[1].len(), self.axes[2].len()]
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, q: usize) -> [usize; 3] {
        let [_, n2, n3] = self.dims();
        [q / (n2 * n3), (q / n3) % n2, q % n3]
    }

    pub fn node(&self, q: usize) -> Vec3 {
        let [i, j, k] = self.index(q);
        [self.axes[0][i], self.axes[1][j], self.axes[2][k]]
    }

    pub fn weight(&self, q: usize) -> f64 {
        let [i, j, k] = self.index(q);
        self.weights[0][i] * self.weights[1][j] * self.weights[2][k]
    }

    pub fn nodes(&self) -> Vec<Vec3> {
        (0..self.len()).map(|q| self.node(q)).collect()
    }

    pub fn weights_flat(&self) -> Vec<f64> {
        (0..self.len()).map(|q| self.weight(q)).collect()
    }
}

/// Values and first derivatives on `points × velocities`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBlock {
    pub values: Vec<f64>,
    pub dt: Vec<f64>,
    /// One entry per spatial axis.
    pub dx: Vec<Vec<f64>>,
}

/// An evaluatable phase-space field with first derivatives in `(t, x)`.
pub trait DistributionField {
    fn spatial_dim(&self) -> usize;

    fn values(&self, points: &[StPoint], vel: &TensorVelocities) -> Result<Vec<f64>>;

    fn derivatives(&self, points: &[StPoint], vel: &TensorVelocities) -> Result<FieldBlock>;

    /// Closed-form or separable raw moments, when the field provides them.
    fn moments(&self, _point: &StPoint) -> Option<Result<RawMoments>> {
        None
    }
}

/// Pointwise analytic fields.
pub trait PointwiseField {
    fn spatial_dim(&self) -> usize;
    fn value(&self, p: &StPoint, v: &Vec3) -> f64;
    fn time_derivative(&self, p: &StPoint, v: &Vec3) -> f64;
    fn space_derivative(&self, _p: &StPoint, _v: &Vec3, _axis: usize) -> f64 {
        0.0
    }
}

/// Adapter from [`PointwiseField`] to [`DistributionField`].
#[derive(Debug, Clone)]
pub struct Pointwise<F>(pub F);

impl<F: PointwiseField> DistributionField for Pointwise<F> {
    fn spatial_dim(&self) -> usize {
        self.0.spatial_dim()
    }

    fn values(&self, points: &[StPoint], vel: &TensorVelocities) -> Result<Vec<f64>> {
        let nodes = vel.nodes();
        Ok(points
            .iter()
            .flat_map(|p| nodes.iter().map(move |v| self.0.value(p, v)))
            .collect())
    }

    fn derivatives(&self, points: &[StPoint], vel: &TensorVelocities) -> Result<FieldBlock> {
        let nodes = vel.nodes();
        let grid = |f: &dyn Fn(&StPoint, &Vec3) -> f64| -> Vec<f64> {
            points
                .iter()
                .flat_map(|p| nodes.iter().map(move |v| f(p, v)))
                .collect()
        };
        Ok(FieldBlock {
            values: grid(&|p, v| self.0.value(p, v)),
            dt: grid(&|p, v| self.0.time_derivative(p, v)),
            dx: (0..self.0.spatial_dim())
                .map(|k| grid(&|p, v| self.0.space_derivative(p, v, k)))
                .collect(),
        })
    }
}

/// Exact solution of the homogeneous problem.
#[derive(Debug, Clone)]
pub struct ExactHomogeneous(pub HomogeneousProblem);

impl PointwiseField for ExactHomogeneous {
    fn spatial_dim(&self) -> usize {
        0
    }
    fn value(&self, p: &StPoint, v: &Vec3) -> f64 {
        exact_homogeneous(&self.0, p.t.min(self.0.terminal_time()), v).expect("time in range")
    }
    fn time_derivative(&self, p: &StPoint, v: &Vec3) -> f64 {
        let unit = MacroState::new(1.0, [0.0; 3], 1.0).expect("unit");
        (-p.t).exp() * (maxwellian_eval(&unit, v) - self.0.f0(v))
    }
}

/// First counterexample family.
#[derive(Debug, Clone)]
pub struct Counterexample1(pub PerturbationSpec, pub HomogeneousProblem);

impl PointwiseField for Counterexample1 {
    fn spatial_dim(&self) -> usize {
        0
    }
    fn value(&self, p: &StPoint, v: &Vec3) -> f64 {
        counterexample1_field(&self.0, &self.1, p.t, v)
    }
    fn time_derivative(&self, p: &StPoint, v: &Vec3) -> f64 {
        let star = crate::counterexamples::counterexample1_state(&self.0);
        (-p.t).exp() * (maxwellian_eval(&star, v) - self.1.f0(v) - self.0.eval(v))
    }
}

impl PointwiseField for Counterexample2Field {
    fn spatial_dim(&self) -> usize {
        0
    }
    fn value(&self, p: &StPoint, v: &Vec3) -> f64 {
        Counterexample2Field::value(self, p.t, v)
    }
    fn time_derivative(&self, p: &StPoint, v: &Vec3) -> f64 {
        Counterexample2Field::time_derivative(self, p.t, v)
    }
}

/// Where the moments that define `M[f̃]` come from.
#[derive(Debug, Clone, Copy)]
pub enum MomentRule<'a> {
    /// The field's own [`DistributionField::moments`].
    FieldProvided,
    /// Quadrature of the field on a velocity grid.
    Quadrature(&'a VelocityGrid),
}

/// `M[f̃]` states at each point, with the failing location on error.
pub fn local_states(
    field: &dyn DistributionField,
    points: &[StPoint],
    rule: MomentRule<'_>,
) -> Result<Vec<MacroState>> {
    let raw: Vec<RawMoments> = match rule {
        MomentRule::FieldProvided => points
            .iter()
            .map(|p| {
                field.moments(p).unwrap_or_else(|| {
                    Err(BgkError::Unsupported(
                        "field does not provide moments".into(),
                    ))
                })
            })
            .collect::<Result<_>>()?,
        MomentRule::Quadrature(grid) => {
            let tv = TensorVelocities::from_grid(grid);
            let vals = field.values(points, &tv)?;
            vals.chunks(grid.len())
                .map(|c| grid.raw_moments(c))
                .collect()
        }
    };
    raw.iter()
        .zip(points)
        .map(|(m, p)| {
            state_from_raw(m).map_err(|e| match e {
                BgkError::Realizability {
                    rho, temperature, ..
                } => BgkError::Realizability {
                    rho,
                    temperature,
                    location: Some(format!("t = {}, x = {:?}", p.t, p.x)),
                },
                other => other,
            })
        })
        .collect()
}

/// `∂_t f̃ + v·∇_x f̃ − (M[f̃] − f̃)/Kn` on `points × vel`, row-major.
pub fn pde_residual(
    field: &dyn DistributionField,
    problem: &ProblemSpec,
    points: &[StPoint],
    vel: &TensorVelocities,
    rule: MomentRule<'_>,
) -> Result<Vec<f64>> {
    let block = field.derivatives(points, vel)?;
    let states = local_states(field, points, rule)?;
    let nodes = vel.nodes();
    let q = nodes.len();
    let d = problem.spatial_dim;
    let mut out = Vec::with_capacity(points.len() * q);
    for (p, st) in states.iter().enumerate() {
        for (k, v) in nodes.iter().enumerate() {
            let i = p * q + k;
            let mut r = block.dt[i];
            for a in 0..d {
                r += v[a] * block.dx[a][i];
            }
            r -= (maxwellian_eval(st, v) - block.values[i]) / problem.kn;
            out.push(r);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_bc: f64,
    pub lambda_ini: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bc: 1.0,
            lambda_ini: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_bc, self.lambda_ini]
            .iter()
            .all(|l| l.is_finite() && *l >= 0.0)
        {
            Ok(())
        } else {
            Err(BgkError::Config(
                "loss weights must be finite and non-negative".into(),
            ))
        }
    }
}

/// Matching points on opposite faces of a periodic axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPair {
    pub axis: usize,
    pub lo: StPoint,
    pub hi: StPoint,
}

/// One batch of collocation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collocation {
    pub pde: Vec<StPoint>,
    pub ini: Vec<StPoint>,
    pub bc: Vec<BoundaryPair>,
    pub velocities: TensorVelocities,
    pub batch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pde: f64,
    pub bc: f64,
    pub ini: f64,
    pub total: f64,
    pub weight: WeightFunction,
    pub lambda: LossWeights,
    pub stability_rhs: Option<f64>,
    /// Points where `M[f̃]` had to be clamped to a realizable state.
    pub clamped: usize,
}

impl LossReport {
    pub fn new(pde: f64, bc: f64, ini: f64, weight: WeightFunction, lambda: LossWeights) -> Self {
        Self {
            pde,
            bc,
            ini,
            total: pde + lambda.lambda_bc * bc + lambda.lambda_ini * ini,
            weight,
            lambda,
            stability_rhs: None,
            clamped: 0,
        }
    }

    pub fn flavor(&self) -> &'static str {
        match self.weight {
            WeightFunction::Identity => "standard",
            WeightFunction::Polynomial { .. } => "weighted",
            WeightFunction::Relative { .. } => "relative",
        }
    }
}

/// Measures used to scale sampled means.
pub fn sample_measures(problem: &ProblemSpec) -> (f64, f64, Vec<f64>) {
    let omega = problem.domain_measure();
    let pde = problem.terminal_time * omega;
    // Boundary face of axis a: time interval times the other extents.
    let bc = (0..problem.spatial_dim)
        .map(|a| {
            let [lo, hi] = problem.domain[a];
            problem.terminal_time * omega / (hi - lo)
        })
        .collect();
    (pde, omega, bc)
}

fn weight_sq(w: &WeightFunction, v: &Vec3, f: f64) -> f64 {
    let x = match w {
        WeightFunction::Relative { floor } => 1.0 / (f.abs() + floor),
        _ => w.at(v),
    };
    x * x
}

/// Standard (`Identity`), theory-guided (`Polynomial`) or relative loss.
pub fn loss(
    field: &dyn DistributionField,
    problem: &ProblemSpec,
    w: &WeightFunction,
    batch: &Collocation,
    lambda: LossWeights,
    rule: MomentRule<'_>,
) -> Result<LossReport> {
    lambda.validate()?;
    let vel = &batch.velocities;
    let nodes = vel.nodes();
    let vw = vel.weights_flat();
    let q = nodes.len();
    let (m_pde, m_ini, m_bc) = sample_measures(problem);

    let pde = if batch.pde.is_empty() {
        0.0
    } else {
        let res = pde_residual(field, problem, &batch.pde, vel, rule)?;
        let vals = if matches!(w, WeightFunction::Relative { .. }) {
            field.values(&batch.pde, vel)?
        } else {
            vec![0.0; res.len()]
        };
        let s: f64 = (0..res.len())
            .map(|i| vw[i % q] * weight_sq(w, &nodes[i % q], vals[i]) * res[i] * res[i])
            .sum();
        m_pde * s / batch.pde.len() as f64
    };

    let ini = if batch.ini.is_empty() {
        0.0
    } else {
        let vals = field.values(&batch.ini, vel)?;
        let mut s = 0.0;
        for (p, pt) in batch.ini.iter().enumerate() {
            for k in 0..q {
                let f = vals[p * q + k];
                let r = f - problem.f0(&pt.x, &nodes[k]);
                s += vw[k] * weight_sq(w, &nodes[k], f) * r * r;
            }
        }
        m_ini * s / batch.ini.len() as f64
    };

    let mut bc = 0.0;
    for a in 0..problem.spatial_dim {
        if problem.boundary[a] != BoundaryKind::Periodic {
            continue;
        }
        let pairs: Vec<&BoundaryPair> = batch.bc.iter().filter(|b| b.axis == a).collect();
        if pairs.is_empty() {
            continue;
        }
        let lo: Vec<StPoint> = pairs.iter().map(|b| b.lo).collect();
        let hi: Vec<StPoint> = pairs.iter().map(|b| b.hi).collect();
        let (fl, fh) = (field.values(&lo, vel)?, field.values(&hi, vel)?);
        let mut s = 0.0;
        for i in 0..fl.len() {
            let v = &nodes[i % q];
            let delta = fh[i] - fl[i];
            let integrand = match w {
                WeightFunction::Identity => delta * delta,
                WeightFunction::Polynomial { .. } => {
                    let ww = w.at(v);
                    (v[a] * ww * ww * delta).powi(2)
                }
                WeightFunction::Relative { .. } => weight_sq(w, v, fl[i]) * delta * delta,
            };
            s += vw[i % q] * integrand;
        }
        bc += m_bc[a] * s / pairs.len() as f64;
    }
    Ok(LossReport::new(pde, bc, ini, *w, lambda))
}

pub fn loss_standard(
    field: &dyn DistributionField,
    problem: &ProblemSpec,
    batch: &Collocation,
    lambda: LossWeights,
    rule: MomentRule<'_>,
) -> Result<LossReport> {
    loss(
        field,
        problem,
        &WeightFunction::Identity,
        batch,
        lambda,
        rule,
    )
}

pub fn loss_weighted(
    field: &dyn DistributionField,
    problem: &ProblemSpec,
    w: &WeightFunction,
    batch: &Collocation,
    lambda: LossWeights,
    rule: MomentRule<'_>,
) -> Result<LossReport> {
    loss(field, problem, w, batch, lambda, rule)
}

/// Spatial quadrature nodes and weights; weights sum to `|Ω|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialQuadrature {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl SpatialQuadrature {
    pub fn homogeneous() -> Self {
        Self {
            points: vec![[0.0; 3]],
            weights: vec![1.0],
        }
    }

    /// Periodic midpoint-free rule `x_i = lo + i L/n` with equal weights.
    pub fn periodic_1d(lo: f64, hi: f64, n: usize) -> Self {
        let h = (hi - lo) / n as f64;
        Self {
            points: (0..n).map(|i| [lo + i as f64 * h, 0.0, 0.0]).collect(),
            weights: vec![h; n],
        }
    }

    /// Composite trapezoid including both endpoints.
    pub fn trapezoid_1d(lo: f64, hi: f64, n: usize) -> Self {
        let h = (hi - lo) / (n - 1) as f64;
        Self {
            points: (0..n).map(|i| [lo + i as f64 * h, 0.0, 0.0]).collect(),
            weights: (0..n)
                .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
                .collect(),
        }
    }

    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn at_time(&self, t: f64) -> Vec<StPoint> {
        self.points.iter().map(|&x| StPoint::new(t, x)).collect()
    }
}

/// `‖w(f − f̃)(t)‖₂` over `Ω × grid`.
pub fn weighted_error(
    a: &dyn DistributionField,
    b: &dyn DistributionField,
    w: &WeightFunction,
    grid: &VelocityGrid,
    space: &SpatialQuadrature,
    t: f64,
) -> Result<f64> {
    if !w.is_fixed() {
        return Err(BgkError::Unsupported(
            "weighted error needs a fixed weight".into(),
        ));
    }
    let tv = TensorVelocities::from_grid(grid);
    let pts = space.at_time(t);
    let (fa, fb) = (a.values(&pts, &tv)?, b.values(&pts, &tv)?);
    let w2: Vec<f64> = grid.nodes().iter().map(|v| w.at(v).powi(2)).collect();
    let q = grid.len();
    let mut total = 0.0;
    for (p, wx) in space.weights.iter().enumerate() {
        let diff: Vec<f64> = (0..q)
            .map(|k| w2[k] * (fa[p * q + k] - fb[p * q + k]).powi(2))
            .collect();
        total += wx * grid.integrate_values(&diff);
    }
    Ok(total.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroErrorCheck {
    /// `‖Δρ‖_{L¹} + ‖Δ(ρu)‖_{L¹} + ‖ΔE‖_{L¹}`.
    pub lhs: f64,
    /// `C · ‖w(f − f̃)‖₂`.
    pub rhs: f64,
    pub c: f64,
}

impl MacroErrorCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }

    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Bounds the `L¹_x` moment errors by the weighted `L²` error.
pub fn macro_error_check(
    a: &dyn DistributionField,
    b: &dyn DistributionField,
    w: &WeightFunction,
    grid: &VelocityGrid,
    space: &SpatialQuadrature,
    t: f64,
) -> Result<MacroErrorCheck> {
    let c = macro_bound_constant(w, space.measure())?;
    let err = weighted_error(a, b, w, grid, space, t)?;
    let tv = TensorVelocities::from_grid(grid);
    let pts = space.at_time(t);
    let (fa, fb) = (a.values(&pts, &tv)?, b.values(&pts, &tv)?);
    let q = grid.len();
    let mut lhs = 0.0;
    for (p, wx) in space.weights.iter().enumerate() {
        let ma = grid.raw_moments(&fa[p * q..(p + 1) * q]);
        let mb = grid.raw_moments(&fb[p * q..(p + 1) * q]);
        let d = ma.sub(&mb);
        lhs += wx * (d.m0.abs() + norm_sq(&d.m1).sqrt() + d.m2.abs());
    }
    Ok(MacroErrorCheck {
        lhs,
        rhs: c * err,
        c,
    })
}

/// Residuals tabulated on `Ω × grid` over a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStreams {
    pub grid: VelocityGrid,
    pub space: SpatialQuadrature,
    pub times: Vec<f64>,
    /// `[n_x × n_v]`.
    pub ini: Vec<f64>,
    /// Per time, `[n_x × n_v]`.
    pub pde: Vec<Vec<f64>>,
    /// Per periodic axis: face quadrature weights and per-time `[n_face × n_v]` jumps.
    pub bc: Vec<BoundaryStream>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryStream {
    pub axis: usize,
    pub face_weights: Vec<f64>,
    pub jumps: Vec<Vec<f64>>,
}

impl ResidualStreams {
    /// Tabulates the residuals of `field` at `times` (which must start at 0).
    pub fn collect(
        field: &dyn DistributionField,
        problem: &ProblemSpec,
        grid: &VelocityGrid,
        space: &SpatialQuadrature,
        times: &[f64],
    ) -> Result<Self> {
        let tv = TensorVelocities::from_grid(grid);
        let nodes = grid.nodes();
        let p0 = space.at_time(0.0);
        let v0 = field.values(&p0, &tv)?;
        let q = grid.len();
        let ini = (0..v0.len())
            .map(|i| v0[i] - problem.f0(&p0[i / q].x, &nodes[i % q]))
            .collect();
        let pde = times
            .iter()
            .map(|&t| {
                pde_residual(
                    field,
                    problem,
                    &space.at_time(t),
                    &tv,
                    MomentRule::Quadrature(grid),
                )
            })
            .collect::<Result<_>>()?;
        let mut bc = Vec::new();
        for a in 0..problem.spatial_dim {
            if problem.boundary[a] != BoundaryKind::Periodic {
                continue;
            }
            if problem.spatial_dim != 1 {
                return Err(BgkError::Unsupported(
                    "boundary streams are tabulated for one spatial axis".into(),
                ));
            }
            let [lo, hi] = problem.domain[a];
            let jumps = times
                .iter()
                .map(|&t| {
                    let fl = field.values(&[StPoint::new(t, [lo, 0.0, 0.0])], &tv)?;
                    let fh = field.values(&[StPoint::new(t, [hi, 0.0, 0.0])], &tv)?;
                    Ok(fh.iter().zip(&fl).map(|(h, l)| h - l).collect())
                })
                .collect::<Result<_>>()?;
            bc.push(BoundaryStream {
                axis: a,
                face_weights: vec![1.0],
                jumps,
            });
        }
        Ok(Self {
            grid: grid.clone(),
            space: space.clone(),
            times: times.to_vec(),
            ini,
            pde,
            bc,
        })
    }
}

fn trapezoid_in_time(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// `‖wRes_ini‖² + ∫‖wRes_pde‖² + Σ_i (∫‖v_i w² Res_bc,i‖²)^{1/2}` over the
/// whole time grid of `streams`.
pub fn stability_rhs(streams: &ResidualStreams, w: &WeightFunction) -> Result<f64> {
    if !w.is_fixed() {
        return Err(BgkError::Unsupported(
            "stability aggregate needs a fixed weight".into(),
        ));
    }
    let grid = &streams.grid;
    let q = grid.len();
    let nodes = grid.nodes();
    let w2: Vec<f64> = nodes.iter().map(|v| w.at(v).powi(2)).collect();
    let norm = |vals: &[f64], phi: &dyn Fn(usize) -> f64, xw: &[f64]| -> f64 {
        xw.iter()
            .enumerate()
            .map(|(p, wx)| {
                let sq: Vec<f64> = (0..q).map(|k| phi(k) * vals[p * q + k].powi(2)).collect();
                wx * grid.integrate_values(&sq)
            })
            .sum()
    };
    let xw = &streams.space.weights;
    let ini = norm(&streams.ini, &|k| w2[k], xw);
    let pde_t: Vec<f64> = streams
        .pde
        .iter()
        .map(|r| norm(r, &|k| w2[k], xw))
        .collect();
    let pde = trapezoid_in_time(&streams.times, &pde_t);
    let mut bc = 0.0;
    for s in &streams.bc {
        let a = s.axis;
        let phi = |k: usize| (nodes[k][a] * w2[k]).powi(2);
        let per_t: Vec<f64> = s
            .jumps
            .iter()
            .map(|j| norm(j, &phi, &s.face_weights))
            .collect();
        bc += trapezoid_in_time(&streams.times, &per_t).sqrt();
    }
    Ok(ini + pde + bc)
}

/// Largest relative mismatch between analytic and central-difference
/// derivatives; per point, `max_v |∂f − δf| / max_v |δf|`.
pub fn derivative_contract_error(
    field: &dyn DistributionField,
    points: &[StPoint],
    vel: &TensorVelocities,
    h: f64,
) -> Result<f64> {
    let block = field.derivatives(points, vel)?;
    let q = vel.len();
    let mut worst = 0.0f64;
    let mut compare = |analytic: &[f64], shift: &dyn Fn(&StPoint, f64) -> StPoint| -> Result<()> {
        let plus: Vec<StPoint> = points.iter().map(|p| shift(p, h)).collect();
        let minus: Vec<StPoint> = points.iter().map(|p| shift(p, -h)).collect();
        let (fp, fm) = (field.values(&plus, vel)?, field.values(&minus, vel)?);
        for p in 0..points.len() {
            let (mut err, mut scale) = (0.0f64, 0.0f64);
            for i in p * q..(p + 1) * q {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                err = err.max((fd - analytic[i]).abs());
                scale = scale.max(fd.abs());
            }
            if scale > 0.0 {
                worst = worst.max(err / scale);
            } else {
                worst = worst.max(err);
            }
        }
        Ok(())
    };
    compare(&block.dt, &|p, s| StPoint::new(p.t + s, p.x))?;
    for (a, dx) in block.dx.iter().enumerate() {
        compare(dx, &|p, s| {
            let mut x = p.x;
            x[a] += s;
            StPoint::new(p.t, x)
        })?;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maxwellian::maxwellian_on_grid;
    use approx::assert_relative_eq;

    fn grid() -> VelocityGrid {
        VelocityGrid::new(10.0, 41).unwrap()
    }

    fn homog_batch(grid: &VelocityGrid, times: &[f64]) -> Collocation {
        Collocation {
            pde: times.iter().map(|&t| StPoint::homogeneous(t)).collect(),
            ini: vec![StPoint::homogeneous(0.0)],
            bc: vec![],
            velocities: TensorVelocities::from_grid(grid),
            batch: 0,
        }
    }

    /// Mean over a uniform time sample times 𝒯 equals ∫ when the integrand is constant.
    #[test]
    fn exact_solution_has_zero_loss() {
        let g = grid();
        let p = HomogeneousProblem::default();
        let spec = ProblemSpec::homogeneous(&p);
        let f = Pointwise(ExactHomogeneous(p));
        let b = homog_batch(&g, &[0.01, 0.05, 0.09]);
        let rep = loss_standard(
            &f,
            &spec,
            &b,
            LossWeights::default(),
            MomentRule::Quadrature(&g),
        )
        .unwrap();
        assert!(rep.total < 1e-20, "{rep:?}");
    }

    #[test]
    fn first_counterexample_loss_is_initial_only() {
        let s = PerturbationSpec::new(0.05).unwrap();
        let g = s.adaptive_grid(0.4).unwrap();
        let p = HomogeneousProblem::default();
        let spec = ProblemSpec::homogeneous(&p);
        let f = Pointwise(Counterexample1(s, p));
        let b = homog_batch(&g, &[0.02, 0.07]);
        let rep = loss_standard(
            &f,
            &spec,
            &b,
            LossWeights::default(),
            MomentRule::Quadrature(&g),
        )
        .unwrap();
        assert!(rep.pde < 1e-20, "pde {}", rep.pde);
        assert_relative_eq!(rep.ini, s.l2norm_sq(), max_relative = 1e-8);
        assert_relative_eq!(rep.total, s.l2norm_sq(), max_relative = 1e-8);
    }

    #[test]
    fn second_counterexample_residual_is_k() {
        let s = PerturbationSpec::new(0.1).unwrap();
        let g = s.adaptive_grid(0.5).unwrap();
        let p = HomogeneousProblem::default();
        let spec = ProblemSpec::homogeneous(&p);
        let f = Pointwise(Counterexample2Field::new(s, p));
        let tv = TensorVelocities::from_grid(&g);
        let pts = [StPoint::homogeneous(0.04), StPoint::homogeneous(0.1)];
        let res = pde_residual(&f, &spec, &pts, &tv, MomentRule::Quadrature(&g)).unwrap();
        let k = s.tabulate(&g);
        let kmax = k.iter().fold(0.0f64, |m, x| m.max(*x));
        for (i, r) in res.iter().enumerate() {
            assert!(
                (r - k[i % g.len()]).abs() < 1e-8 * kmax.max(1.0),
                "{r} vs {}",
                k[i % g.len()]
            );
        }
        let b = homog_batch(&g, &[0.025, 0.075]);
        let rep = loss_standard(
            &f,
            &spec,
            &b,
            LossWeights::default(),
            MomentRule::Quadrature(&g),
        )
        .unwrap();
        assert_relative_eq!(rep.total, 0.1 * s.l2norm_sq(), max_relative = 1e-6);
    }

    struct Equilibrium(MacroState);

    impl PointwiseField for Equilibrium {
        fn spatial_dim(&self) -> usize {
            1
        }
        fn value(&self, _p: &StPoint, v: &Vec3) -> f64 {
            maxwellian_eval(&self.0, v)
        }
        fn time_derivative(&self, _p: &StPoint, _v: &Vec3) -> f64 {
            0.0
        }
    }

    #[test]
    fn global_equilibrium_has_zero_residual_and_bc() {
        let g = grid();
        let st = MacroState::new(1.3, [0.0; 3], 0.9).unwrap();
        let problem = ProblemSpec::smooth_1d(0.1);
        let f = Pointwise(Equilibrium(st));
        let tv = TensorVelocities::from_grid(&g);
        let pts = [
            StPoint::new(0.03, [0.1, 0.0, 0.0]),
            StPoint::new(0.08, [-0.4, 0.0, 0.0]),
        ];
        let res = pde_residual(&f, &problem, &pts, &tv, MomentRule::Quadrature(&g)).unwrap();
        assert!(res.iter().all(|r| r.abs() < 1e-9));
        let batch = Collocation {
            pde: vec![],
            ini: vec![],
            bc: vec![BoundaryPair {
                axis: 0,
                lo: StPoint::new(0.05, [-0.5, 0.0, 0.0]),
                hi: StPoint::new(0.05, [0.5, 0.0, 0.0]),
            }],
            velocities: tv,
            batch: 0,
        };
        let w = WeightFunction::polynomial(0.1, 4.0).unwrap();
        let rep = loss_weighted(
            &f,
            &problem,
            &w,
            &batch,
            LossWeights::default(),
            MomentRule::Quadrature(&g),
        )
        .unwrap();
        assert_eq!(rep.bc, 0.0);
    }

    #[test]
    fn identity_weight_reproduces_standard_loss() {
        let s = PerturbationSpec::new(0.1).unwrap();
        let g = s.adaptive_grid(0.5).unwrap();
        let p = HomogeneousProblem::default();
        let spec = ProblemSpec::homogeneous(&p);
        let f = Pointwise(Counterexample2Field::new(s, p));
        let b = homog_batch(&g, &[0.03, 0.06]);
        let l = LossWeights {
            lambda_bc: 0.5,
            lambda_ini: 2.0,
        };
        let a = loss_standard(&f, &spec, &b, l, MomentRule::Quadrature(&g)).unwrap();
        let c = loss_weighted(
            &f,
            &spec,
            &WeightFunction::Identity,
            &b,
            l,
            MomentRule::Quadrature(&g),
        )
        .unwrap();
        assert_eq!(a, c);
        assert_relative_eq!(
            a.total,
            a.pde + 0.5 * a.bc + 2.0 * a.ini,
            max_relative = 1e-15
        );
    }

    #[test]
    fn weighted_error_examples() {
        let s = PerturbationSpec::new(0.05).unwrap();
        let g = s.adaptive_grid(0.4).unwrap();
        let p = HomogeneousProblem::default();
        let exact = Pointwise(ExactHomogeneous(p.clone()));
        let pert = Pointwise(Counterexample1(s, p));
        let sq = SpatialQuadrature::homogeneous();
        assert_eq!(
            weighted_error(&exact, &exact, &WeightFunction::Identity, &g, &sq, 0.0).unwrap(),
            0.0
        );
        let e = weighted_error(&pert, &exact, &WeightFunction::Identity, &g, &sq, 0.0).unwrap();
        assert_relative_eq!(e, s.l2norm_sq().sqrt(), max_relative = 1e-8);
        let w = WeightFunction::polynomial(0.1, 4.0).unwrap();
        assert!(weighted_error(&pert, &exact, &w, &g, &sq, 0.05).unwrap() >= e);
    }

    #[test]
    fn macro_check_examples() {
        let s = PerturbationSpec::new(0.05).unwrap();
        let g = s.adaptive_grid(0.4).unwrap();
        let p = HomogeneousProblem::default();
        let exact = Pointwise(ExactHomogeneous(p.clone()));
        let pert = Pointwise(Counterexample1(s, p));
        let sq = SpatialQuadrature::homogeneous();
        let w = WeightFunction::polynomial(0.1, 4.0).unwrap();
        let same = macro_error_check(&exact, &exact, &w, &g, &sq, 0.05).unwrap();
        assert_eq!((same.lhs, same.rhs), (0.0, 0.0));
        let chk = macro_error_check(&pert, &exact, &w, &g, &sq, 0.0).unwrap();
        assert!(chk.holds(), "{chk:?}");
        assert!(macro_error_check(&pert, &exact, &WeightFunction::Identity, &g, &sq, 0.0).is_err());
    }

    #[test]
    fn stability_rhs_closed_reductions() {
        let s = PerturbationSpec::new(0.1).unwrap();
        let g = s.adaptive_grid(0.5).unwrap();
        let p = HomogeneousProblem::default();
        let spec = ProblemSpec::homogeneous(&p);
        let w = WeightFunction::polynomial(0.1, 4.0).unwrap();
        let sq = SpatialQuadrature::homogeneous();
        let times: Vec<f64> = (0..=4).map(|i| 0.025 * i as f64).collect();
        let wk2 = g.integrate3(|v| (w.at(v) * s.eval(v)).powi(2)).unwrap();

        let f1 = Pointwise(Counterexample1(s, p.clone()));
        let st = ResidualStreams::collect(&f1, &spec, &g, &sq, &times).unwrap();
        assert_relative_eq!(stability_rhs(&st, &w).unwrap(), wk2, max_relative = 1e-6);

        let f2 = Pointwise(Counterexample2Field::new(s, p));
        let st = ResidualStreams::collect(&f2, &spec, &g, &sq, &times).unwrap();
        assert_relative_eq!(
            stability_rhs(&st, &w).unwrap(),
            0.1 * wk2,
            max_relative = 1e-6
        );
    }

    /// `f = (1 + ½ sin 2π(x − v₁t)) M₁(v)` solves free transport; at huge Kn
    /// the residual is the collision term only, of order `1/Kn`.
    #[test]
    fn free_streaming_profile_has_transport_residual_zero() {
        struct Streaming;
        impl PointwiseField for Streaming {
            fn spatial_dim(&self) -> usize {
                1
            }
            fn value(&self, p: &StPoint, v: &Vec3) -> f64 {
                let s = 2.0 * PI * (p.x[0] - v[0] * p.t);
                (1.0 + 0.5 * s.sin())
                    * maxwellian_eval(&MacroState::new(1.0, [0.0; 3], 1.0).unwrap(), v)
            }
            fn time_derivative(&self, p: &StPoint, v: &Vec3) -> f64 {
                let s = 2.0 * PI * (p.x[0] - v[0] * p.t);
                -v[0]
                    * PI
                    * s.cos()
                    * maxwellian_eval(&MacroState::new(1.0, [0.0; 3], 1.0).unwrap(), v)
            }
            fn space_derivative(&self, p: &StPoint, v: &Vec3, _axis: usize) -> f64 {
                let s = 2.0 * PI * (p.x[0] - v[0] * p.t);
                PI * s.cos() * maxwellian_eval(&MacroState::new(1.0, [0.0; 3], 1.0).unwrap(), v)
            }
        }
        let g = grid();
        let problem = ProblemSpec::smooth_1d(1e12);
        let tv = TensorVelocities::from_grid(&g);
        let pts = [
            StPoint::new(0.03, [0.1, 0.0, 0.0]),
            StPoint::new(0.08, [-0.3, 0.0, 0.0]),
        ];
        let res = pde_residual(
            &Pointwise(Streaming),
            &problem,
            &pts,
            &tv,
            MomentRule::Quadrature(&g),
        )
        .unwrap();
        assert!(
            res.iter().all(|r| r.abs() < 1e-12),
            "{:?}",
            res.iter().fold(0.0f64, |m, r| m.max(r.abs()))
        );
    }

    #[test]
    fn zero_residual_streams() {
        let g = grid();
        let p = HomogeneousProblem::default();
        let spec = ProblemSpec::homogeneous(&p);
        let f = Pointwise(ExactHomogeneous(p));
        let st = ResidualStreams::collect(
            &f,
            &spec,
            &g,
            &SpatialQuadrature::homogeneous(),
            &[0.0, 0.05, 0.1],
        )
        .unwrap();
        assert!(stability_rhs(&st, &WeightFunction::Identity).unwrap() < 1e-20);
    }

    #[test]
    fn realizability_error_carries_location() {
        struct Negative;
        impl PointwiseField for Negative {
            fn spatial_dim(&self) -> usize {
                0
            }
            fn value(&self, _p: &StPoint, v: &Vec3) -> f64 {
                -(-norm_sq(v)).exp()
            }
            fn time_derivative(&self, _p: &StPoint, _v: &Vec3) -> f64 {
                0.0
            }
        }
        let g = grid();
        let err = local_states(
            &Pointwise(Negative),
            &[StPoint::homogeneous(0.02)],
            MomentRule::Quadrature(&g),
        )
        .unwrap_err();
        match err {
            BgkError::Realizability { location, .. } => assert!(location.unwrap().contains("0.02")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn contract_holds_for_analytic_fields() {
        let s = PerturbationSpec::new(0.2).unwrap();
        let g = VelocityGrid::new(8.0, 9).unwrap();
        let tv = TensorVelocities::from_grid(&g);
        let pts: Vec<StPoint> = [0.01, 0.05, 0.09]
            .iter()
            .map(|&t| StPoint::homogeneous(t))
            .collect();
        let f = Pointwise(Counterexample1(s, HomogeneousProblem::default()));
        assert!(derivative_contract_error(&f, &pts, &tv, 1e-4).unwrap() < 1e-5);
    }

    #[test]
    fn initial_profiles() {
        let x = |v: f64| [v, 0.0, 0.0];
        let s = InitialCondition::Smooth1d.state(&x(0.25)).unwrap();
        assert_relative_eq!(s.rho(), 1.5, max_relative = 1e-14);
        let r = InitialCondition::Riemann1d;
        let left = r.state(&x(-0.3)).unwrap();
        let right = r.state(&x(0.3)).unwrap();
        assert!((left.rho() - 1.0).abs() < 1e-12 && (left.temperature() - 1.0).abs() < 1e-12);
        assert!((right.rho() - 0.125).abs() < 1e-12 && (right.temperature() - 0.8).abs() < 1e-12);
        let g = grid();
        let m = g.raw_moments(&maxwellian_on_grid(&s, &g));
        assert!((m.m0 - 1.5).abs() < 1e-9);
        assert!(ProblemSpec::smooth_1d(0.01).validate().is_ok());
        let mut bad = ProblemSpec::smooth_1d(0.01);
        bad.kn = 0.0;
        assert!(bad.validate().is_err());
    }
}
