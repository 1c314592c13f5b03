//! Training loop: per-axis collocation sampling, the loss on the tape,
//! Adam / Lion with cosine decay, and evaluation against a grid reference.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ansatz::{BoundParams, MicroMacroAnsatz};
use crate::autodiff::{Mat, Tape, Var};
use crate::error::{BgkError, Result};
use crate::maxwellian::state_from_raw;
use crate::reference_solver::GridSolution;
use crate::residuals_loss::{
    sample_measures, BoundaryKind, BoundaryPair, Collocation, DistributionField, LossWeights,
    ProblemSpec, StPoint, TensorVelocities,
};
use crate::velocity_grid::VelocityGrid;
use crate::weights::WeightFunction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Lion { beta1: f64, beta2: f64 },
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lion() -> Self {
        Self::Lion {
            beta1: 0.9,
            beta2: 0.99,
        }
    }
}

/// Samples per axis; `x` has one count per spatial axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingCounts {
    pub t: usize,
    pub x: Vec<usize>,
    pub v: [usize; 3],
    #[serde(default)]
    pub mode: SamplingMode,
}

/// How per-axis samples are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Independent uniform draws.
    Uniform,
    /// One uniform draw in each of `n` equal cells (jittered grid).
    #[default]
    Stratified,
}

fn axis_samples<R: Rng>(rng: &mut R, lo: f64, hi: f64, n: usize, mode: SamplingMode) -> Vec<f64> {
    let h = (hi - lo) / n as f64;
    (0..n)
        .map(|i| match mode {
            SamplingMode::Uniform => rng.gen_range(lo..hi),
            SamplingMode::Stratified => lo + (i as f64 + rng.gen::<f64>()) * h,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub optimizer: OptimizerConfig,
    pub learning_rate: f64,
    /// Cosine horizon; defaults to `iterations`.
    pub decay_horizon: Option<usize>,
    pub samples: SamplingCounts,
    pub weight: WeightFunction,
    pub lambda: LossWeights,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults for a problem of the given dimension.
    ///
    /// The initial term is weighted ×10: with few iterations the unit weight
    /// leaves the network stuck near a damped, stationary profile.
    pub fn desk(spatial_dim: usize) -> Self {
        Self {
            iterations: 10_000,
            optimizer: OptimizerConfig::adam(),
            learning_rate: 5e-4,
            decay_horizon: None,
            samples: SamplingCounts {
                t: 12,
                x: vec![16; spatial_dim],
                v: [8; 3],
                mode: SamplingMode::default(),
            },
            weight: WeightFunction::Identity,
            lambda: LossWeights {
                lambda_bc: 1.0,
                lambda_ini: 10.0,
            },
            seed: 0,
        }
    }

    pub fn validate(&self, problem: &ProblemSpec) -> Result<()> {
        let bad = |m: &str| Err(BgkError::Config(format!("train: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.decay_horizon == Some(0) {
            return bad("decay_horizon must be positive");
        }
        if self.samples.x.len() != problem.spatial_dim {
            return bad("one x count per spatial axis");
        }
        let counts = std::iter::once(self.samples.t)
            .chain(self.samples.x.iter().copied())
            .chain(self.samples.v);
        if counts.into_iter().any(|c| c < 2) {
            return bad("sample counts must be at least 2");
        }
        match self.optimizer {
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                    return bad("adam hyperparameters out of range");
                }
            }
            OptimizerConfig::Lion { beta1, beta2 } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
                    return bad("lion hyperparameters out of range");
                }
            }
        }
        self.weight.validate()?;
        self.lambda.validate()
    }

    /// `lr₀ · ½(1 + cos(π·min(i, H)/H))`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let h = self.decay_horizon.unwrap_or(self.iterations).max(1);
        let s = iteration.min(h) as f64 / h as f64;
        self.learning_rate * 0.5 * (1.0 + (PI * s).cos())
    }
}

/// Fresh per-axis uniform samples; deterministic in `(seed, iteration)`.
pub fn sample_collocation(
    problem: &ProblemSpec,
    counts: &SamplingCounts,
    seed: u64,
    iteration: u64,
) -> Collocation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    let d = problem.spatial_dim;
    let tt = problem.terminal_time;
    let mode = counts.mode;
    let ts = axis_samples(&mut rng, 0.0, tt, counts.t, mode);
    let xs: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            let [lo, hi] = problem.domain[a];
            axis_samples(&mut rng, lo, hi, counts.x[a], mode)
        })
        .collect();
    let vmax = problem.velocity_half_width;
    let axes = counts
        .v
        .map(|n| axis_samples(&mut rng, -vmax, vmax, n, mode));
    let weights = counts.v.map(|n| vec![2.0 * vmax / n as f64; n]);

    let spatial = tensor_points(&xs);
    let pde = ts
        .iter()
        .flat_map(|&t| spatial.iter().map(move |&x| StPoint::new(t, x)))
        .collect();
    let ini = spatial.iter().map(|&x| StPoint::new(0.0, x)).collect();
    let mut bc = Vec::new();
    for a in 0..d {
        if problem.boundary[a] != BoundaryKind::Periodic {
            continue;
        }
        let mut face = xs.clone();
        face[a] = vec![0.0];
        let [lo, hi] = problem.domain[a];
        for &t in &ts {
            for x in tensor_points(&face) {
                let (mut xl, mut xh) = (x, x);
                xl[a] = lo;
                xh[a] = hi;
                bc.push(BoundaryPair {
                    axis: a,
                    lo: StPoint::new(t, xl),
                    hi: StPoint::new(t, xh),
                });
            }
        }
    }
    Collocation {
        pde,
        ini,
        bc,
        velocities: TensorVelocities::new(axes, weights),
        batch: iteration,
    }
}

fn tensor_points(xs: &[Vec<f64>]) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]];
    for (a, axis) in xs.iter().enumerate() {
        out = out
            .iter()
            .flat_map(|p| {
                axis.iter().map(move |&x| {
                    let mut q = *p;
                    q[a] = x;
                    q
                })
            })
            .collect();
    }
    out
}

/// A loss recorded on a tape, ready for [`Tape::backward`].
pub struct TapeLoss {
    pub tape: Tape,
    pub bound: BoundParams,
    pub total: Var,
    pub pde: f64,
    pub bc: f64,
    pub ini: f64,
    pub clamped: usize,
}

impl TapeLoss {
    pub fn total_value(&self) -> f64 {
        self.tape.value(self.total).data[0]
    }
}

/// Per-entry coefficient `[·, Q]` of the squared residual.
fn residual_weights(
    w: &WeightFunction,
    vel: &TensorVelocities,
    field: &Mat,
    axis_factor: Option<usize>,
) -> Mat {
    let q = vel.len();
    let nodes = vel.nodes();
    let vw = vel.weights_flat();
    match w {
        WeightFunction::Relative { floor } => Mat::new(
            field.rows,
            q,
            field
                .data
                .iter()
                .enumerate()
                .map(|(i, f)| vw[i % q] / (f.abs() + floor).powi(2))
                .collect(),
        ),
        _ => Mat::row(
            (0..q)
                .map(|k| {
                    let ww = w.at(&nodes[k]);
                    match (w, axis_factor) {
                        (WeightFunction::Polynomial { .. }, Some(a)) => {
                            vw[k] * (nodes[k][a] * ww * ww).powi(2)
                        }
                        _ => vw[k] * ww * ww,
                    }
                })
                .collect(),
        ),
    }
}

/// Standard, weighted or relative loss of the ansatz on `batch`, with the
/// parameters bound as tape leaves.
pub fn tape_loss(
    ansatz: &MicroMacroAnsatz,
    problem: &ProblemSpec,
    w: &WeightFunction,
    batch: &Collocation,
    lambda: LossWeights,
) -> TapeLoss {
    let mut tape = Tape::new();
    let bound = ansatz.bind(&mut tape, true);
    let vel = &batch.velocities;
    let (m_pde, m_ini, m_bc) = sample_measures(problem);
    let d = problem.spatial_dim;
    let mut clamped = 0;
    let mut terms = Vec::new();

    let weighted_mean = |tape: &mut Tape, r: Var, c: Mat, scale: f64| -> Var {
        let c = tape.constant(c);
        let sq = tape.square(r);
        let wsq = tape.mul(sq, c);
        let s = tape.sum_all(wsq);
        tape.scale(s, scale)
    };

    let pde = if batch.pde.is_empty() {
        None
    } else {
        let heads = ansatz.heads(&mut tape, &bound, &batch.pde, true);
        let f = ansatz.field(&mut tape, &bound, &heads, vel);
        let m = ansatz.moments(&mut tape, &bound, &heads);
        let (eq, c) = MicroMacroAnsatz::local_equilibrium(&mut tape, &m, vel);
        clamped += c;
        let mut r = f.derivatives[0];
        let nodes = vel.nodes();
        for a in 0..d {
            let va = tape.constant(Mat::row(nodes.iter().map(|v| v[a]).collect()));
            let tr = tape.mul(va, f.derivatives[1 + a]);
            r = tape.add(r, tr);
        }
        let relax = tape.sub(eq, f.value);
        let relax = tape.scale(relax, 1.0 / problem.kn);
        let r = tape.sub(r, relax);
        let c = residual_weights(w, vel, tape.value(f.value), None);
        Some(weighted_mean(
            &mut tape,
            r,
            c,
            m_pde / batch.pde.len() as f64,
        ))
    };
    if let Some(p) = pde {
        terms.push((p, 1.0));
    }

    let ini = if batch.ini.is_empty() {
        None
    } else {
        let heads = ansatz.heads(&mut tape, &bound, &batch.ini, false);
        let f = ansatz.field(&mut tape, &bound, &heads, vel);
        let nodes = vel.nodes();
        let f0 = Mat::new(
            batch.ini.len(),
            nodes.len(),
            batch
                .ini
                .iter()
                .flat_map(|p| nodes.iter().map(move |v| problem.f0(&p.x, v)))
                .collect(),
        );
        let f0 = tape.constant(f0);
        let r = tape.sub(f.value, f0);
        let c = residual_weights(w, vel, tape.value(f.value), None);
        Some(weighted_mean(
            &mut tape,
            r,
            c,
            m_ini / batch.ini.len() as f64,
        ))
    };
    if let Some(i) = ini {
        terms.push((i, lambda.lambda_ini));
    }

    let mut bc_vars = Vec::new();
    for a in 0..d {
        if problem.boundary[a] != BoundaryKind::Periodic {
            continue;
        }
        let pairs: Vec<&BoundaryPair> = batch.bc.iter().filter(|b| b.axis == a).collect();
        if pairs.is_empty() {
            continue;
        }
        let lo: Vec<StPoint> = pairs.iter().map(|b| b.lo).collect();
        let hi: Vec<StPoint> = pairs.iter().map(|b| b.hi).collect();
        let hl = ansatz.heads(&mut tape, &bound, &lo, false);
        let fl = ansatz.field(&mut tape, &bound, &hl, vel);
        let hh = ansatz.heads(&mut tape, &bound, &hi, false);
        let fh = ansatz.field(&mut tape, &bound, &hh, vel);
        let r = tape.sub(fh.value, fl.value);
        let c = residual_weights(w, vel, tape.value(fl.value), Some(a));
        bc_vars.push(weighted_mean(&mut tape, r, c, m_bc[a] / pairs.len() as f64));
    }
    let bc = bc_vars.iter().copied().reduce(|x, y| tape.add(x, y));
    if let Some(b) = bc {
        terms.push((b, lambda.lambda_bc));
    }

    let value = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data[0]);
    let (pde_v, ini_v, bc_v) = (value(&tape, pde), value(&tape, ini), value(&tape, bc));
    let mut total = tape.scalar(0.0);
    for (v, lam) in terms {
        let s = tape.scale(v, lam);
        total = tape.add(total, s);
    }
    TapeLoss {
        tape,
        bound,
        total,
        pde: pde_v,
        bc: bc_v,
        ini: ini_v,
        clamped,
    }
}

#[derive(Debug, Clone)]
enum OptState {
    Adam { m: Vec<Mat>, v: Vec<Mat>, step: i32 },
    Lion { m: Vec<Mat> },
}

/// First-order optimizer over a list of parameter matrices.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: OptState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = || {
            shapes
                .iter()
                .map(|&(r, c)| Mat::zeros(r, c))
                .collect::<Vec<_>>()
        };
        let state = match config {
            OptimizerConfig::Adam { .. } => OptState::Adam {
                m: zeros(),
                v: zeros(),
                step: 0,
            },
            OptimizerConfig::Lion { .. } => OptState::Lion { m: zeros() },
        };
        Self { config, state }
    }

    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat], lr: f64) {
        match (&mut self.state, self.config) {
            (OptState::Adam { m, v, step }, OptimizerConfig::Adam { beta1, beta2, eps }) => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for (k, p) in params.iter_mut().enumerate() {
                    for i in 0..p.data.len() {
                        let g = grads[k].data[i];
                        let mi = &mut m[k].data[i];
                        let vi = &mut v[k].data[i];
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        p.data[i] -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
            (OptState::Lion { m }, OptimizerConfig::Lion { beta1, beta2 }) => {
                for (k, p) in params.iter_mut().enumerate() {
                    for i in 0..p.data.len() {
                        let g = grads[k].data[i];
                        let mi = &mut m[k].data[i];
                        let c = beta1 * *mi + (1.0 - beta1) * g;
                        p.data[i] -= lr * sign(c);
                        *mi = beta2 * *mi + (1.0 - beta2) * g;
                    }
                }
            }
            _ => unreachable!("state matches config"),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub lr: f64,
    pub pde: f64,
    pub bc: f64,
    pub ini: f64,
    pub total: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("iter,lr,pde,bc,ini,total\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter, r.lr, r.pde, r.bc, r.ini, r.total
        ));
    }
    s
}

/// Runs the optimization loop; the history has one row per iteration.
pub fn train(
    problem: &ProblemSpec,
    ansatz: &MicroMacroAnsatz,
    config: &TrainConfig,
) -> Result<(MicroMacroAnsatz, Vec<HistoryRow>)> {
    train_with(problem, ansatz, config, |_| {})
}

/// As [`train`], calling `observe` after every iteration.
pub fn train_with(
    problem: &ProblemSpec,
    ansatz: &MicroMacroAnsatz,
    config: &TrainConfig,
    mut observe: impl FnMut(&HistoryRow),
) -> Result<(MicroMacroAnsatz, Vec<HistoryRow>)> {
    problem.validate()?;
    config.validate(problem)?;
    if ansatz.architecture().spatial_dim != problem.spatial_dim {
        return Err(BgkError::Config(
            "ansatz and problem dimensions differ".into(),
        ));
    }
    let mut model = ansatz.clone();
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|m| m.shape()).collect();
    let mut opt = Optimizer::new(config.optimizer, &shapes);
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let batch = sample_collocation(problem, &config.samples, config.seed, it as u64);
        let loss = tape_loss(&model, problem, &config.weight, &batch, config.lambda);
        for (name, v) in [
            ("pde", loss.pde),
            ("bc", loss.bc),
            ("ini", loss.ini),
            ("total", loss.total_value()),
        ] {
            if !v.is_finite() {
                return Err(BgkError::TrainingAborted {
                    iteration: it,
                    component: name.into(),
                    batch: batch.batch,
                });
            }
        }
        let grads = loss.tape.backward(loss.total);
        let g = model.param_gradient(&grads, &loss.bound);
        if g.iter().any(|m| m.data.iter().any(|x| !x.is_finite())) {
            return Err(BgkError::TrainingAborted {
                iteration: it,
                component: "gradient".into(),
                batch: batch.batch,
            });
        }
        let lr = config.learning_rate_at(it);
        opt.step(&mut model.params_mut(), &g, lr);
        let row = HistoryRow {
            iter: it,
            lr,
            pde: loss.pde,
            bc: loss.bc,
            ini: loss.ini,
            total: loss.total_value(),
        };
        observe(&row);
        history.push(row);
    }
    Ok((model, history))
}

/// SHA-256 of the JSON encoding of a configuration record.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    hex::encode(Sha256::digest(
        serde_json::to_vec(config).expect("config serializes"),
    ))
}

/// Relative errors against a reference at one stored time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub t: f64,
    pub rel_l2_f: f64,
    pub rel_l1_f: f64,
    pub rel_l1_rho: f64,
    /// Relative where the reference component is non-zero, absolute otherwise.
    pub rel_l1_u: [f64; 3],
    pub rel_l1_temperature: f64,
    pub config_hash: Option<String>,
    pub runtime_seconds: Option<f64>,
    pub final_losses: Option<HistoryRow>,
}

/// Compares predicted values `[nx × Q]` with the reference stamp at `t`.
pub fn evaluate_values(pred: &[f64], reference: &GridSolution, t: f64) -> Result<EvalReport> {
    let want = reference.snapshot(t)?;
    if pred.len() != want.len() {
        return Err(BgkError::GridMismatch(format!(
            "prediction has {} values, reference {}",
            pred.len(),
            want.len()
        )));
    }
    let g = &reference.grid;
    let q = g.len();
    let (mut l2n, mut l2d, mut l1n, mut l1d) = (0.0, 0.0, 0.0, 0.0);
    let (mut rho, mut temp) = ([0.0; 2], [0.0; 2]);
    let mut u = [[0.0; 2]; 3];
    for i in 0..reference.nx() {
        let (p, r) = (&pred[i * q..(i + 1) * q], &want[i * q..(i + 1) * q]);
        let diff: Vec<f64> = p.iter().zip(r).map(|(a, b)| a - b).collect();
        l2n += g.integrate_values(&diff.iter().map(|x| x * x).collect::<Vec<_>>());
        l2d += g.integrate_values(&r.iter().map(|x| x * x).collect::<Vec<_>>());
        l1n += g.integrate_values(&diff.iter().map(|x| x.abs()).collect::<Vec<_>>());
        l1d += g.integrate_values(&r.iter().map(|x| x.abs()).collect::<Vec<_>>());
        let sr = state_from_raw(&g.raw_moments(r))?;
        let sp = state_from_raw(&g.raw_moments(p))?;
        rho[0] += (sp.rho() - sr.rho()).abs();
        rho[1] += sr.rho().abs();
        temp[0] += (sp.temperature() - sr.temperature()).abs();
        temp[1] += sr.temperature().abs();
        for k in 0..3 {
            u[k][0] += (sp.u()[k] - sr.u()[k]).abs();
            u[k][1] += sr.u()[k].abs();
        }
    }
    let nx = reference.nx() as f64;
    let rel = |[n, d]: [f64; 2]| if d > 1e-12 * nx { n / d } else { n / nx };
    Ok(EvalReport {
        t,
        rel_l2_f: (l2n / l2d).sqrt(),
        rel_l1_f: l1n / l1d,
        rel_l1_rho: rel(rho),
        rel_l1_u: u.map(rel),
        rel_l1_temperature: rel(temp),
        config_hash: None,
        runtime_seconds: None,
        final_losses: None,
    })
}

/// Evaluates `field` on the reference nodes at `t`; the evaluation grid
/// must be the reference grid.
pub fn evaluate(
    field: &dyn DistributionField,
    reference: &GridSolution,
    eval_grid: &VelocityGrid,
    t: f64,
) -> Result<EvalReport> {
    if eval_grid != &reference.grid {
        return Err(BgkError::GridMismatch(
            "evaluation grid differs from the reference velocity grid".into(),
        ));
    }
    if field.spatial_dim() != reference.meta.spatial_dim {
        return Err(BgkError::GridMismatch(
            "spatial dimension differs from reference".into(),
        ));
    }
    reference.time_index(t)?;
    let started = Instant::now();
    let tv = TensorVelocities::from_grid(eval_grid);
    let mut pred = Vec::with_capacity(reference.nx() * eval_grid.len());
    for chunk in reference.x.chunks(4) {
        let pts: Vec<StPoint> = chunk
            .iter()
            .map(|&x| StPoint::new(t, [x, 0.0, 0.0]))
            .collect();
        pred.extend(field.values(&pts, &tv)?);
    }
    let mut rep = evaluate_values(&pred, reference, t)?;
    rep.runtime_seconds = Some(started.elapsed().as_secs_f64());
    Ok(rep)
}
