//! Micro-macro neural ansatz
//! `f̃ = M_(ρ̃,ũ,T̃)(v) + e^{-|v-μ|²/τ} Σ_r g_r(t,x) Π_k h_r^{(k)}(v_k)`.
//!
//! Every evaluation records a fresh [`Tape`] with the parameters as leaves
//! (training) or constants (inference). Input derivatives are carried as
//! forward tangents through the nets, so a loss containing `∂_t f̃` is
//! differentiated by one backward pass.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Mat, Tape, Var};
use crate::error::{BgkError, Result};
use crate::residuals_loss::{
    DistributionField, FieldBlock, ProblemSpec, StPoint, TensorVelocities,
};
use crate::velocity_grid::{RawMoments, VelocityGrid};

const LOG_POS_MIN: f64 = -13.815510557964274; // ln 1e-6
const LOG_POS_MAX: f64 = 13.815510557964274;
/// Floor applied to `ρ̂`, `T̂` when building `M[f̃]` on the tape.
pub const MOMENT_FLOOR: f64 = 1e-6;
const CHECKPOINT_FORMAT: &str = "bgk-ansatz";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub spatial_dim: usize,
    pub macro_hidden: Vec<usize>,
    pub g_hidden: Vec<usize>,
    pub h_hidden: Vec<usize>,
    pub rank: usize,
    pub envelope_mu: [f64; 3],
    pub envelope_tau: f64,
    /// Input boxes used to rescale `t` and `x` to `[-1, 1]`.
    pub time_range: [f64; 2],
    pub domain: Vec<[f64; 2]>,
    pub velocity_half_width: f64,
    /// Points per axis of the fixed quadrature behind the moments; odd.
    pub moment_points: usize,
}

impl Architecture {
    pub fn for_problem(problem: &ProblemSpec) -> Self {
        Self {
            spatial_dim: problem.spatial_dim,
            macro_hidden: vec![64; 3],
            g_hidden: vec![32; 2],
            h_hidden: vec![32; 2],
            rank: 16,
            envelope_mu: [0.0; 3],
            envelope_tau: 2.0,
            time_range: [0.0, problem.terminal_time],
            domain: problem.domain.clone(),
            velocity_half_width: problem.velocity_half_width,
            moment_points: 33,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BgkError::Config(format!("architecture: {m}")));
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if [&self.macro_hidden, &self.g_hidden, &self.h_hidden]
            .iter()
            .any(|h| h.contains(&0))
        {
            return bad("layer widths must be at least 1");
        }
        if !(self.envelope_tau.is_finite() && self.envelope_tau > 0.0) {
            return bad("envelope_tau must be positive");
        }
        if self.domain.len() != self.spatial_dim || self.spatial_dim > 3 {
            return bad("domain must have one range per spatial axis");
        }
        if !(self.time_range[1] > self.time_range[0]) || self.domain.iter().any(|[a, b]| !(b > a)) {
            return bad("input ranges must be non-empty");
        }
        if !(self.velocity_half_width > 0.0) {
            return bad("velocity_half_width must be positive");
        }
        if self.moment_points < 3 || self.moment_points % 2 == 0 {
            return bad("moment_points must be odd and at least 3");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("architecture serializes");
        hex::encode(Sha256::digest(json))
    }

    fn input_affine(&self) -> Vec<(f64, f64)> {
        std::iter::once(self.time_range)
            .chain(self.domain.iter().copied())
            .map(|[a, b]| (0.5 * (a + b), 0.5 * (b - a)))
            .collect()
    }
}

/// Fully connected net, tanh on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub widths: Vec<usize>,
    /// `(W [in, out], b [1, out])` per layer.
    pub layers: Vec<(Mat, Mat)>,
}

impl DenseNet {
    /// LeCun-uniform weights `U(±√(3/fan_in))`, zero biases.
    pub fn init<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(BgkError::Config(
                "net widths must be ≥ 1 with ≥ 2 layers".into(),
            ));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (3.0 / w[0] as f64).sqrt();
                let data = (0..w[0] * w[1])
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                (Mat::new(w[0], w[1], data), Mat::zeros(1, w[1]))
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    fn bind(&self, tape: &mut Tape, trainable: bool, out: &mut Vec<Var>) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|(w, b)| {
                let (w, b) = if trainable {
                    (tape.leaf(w.clone()), tape.leaf(b.clone()))
                } else {
                    (tape.constant(w.clone()), tape.constant(b.clone()))
                };
                out.push(w);
                out.push(b);
                (w, b)
            })
            .collect()
    }

    /// Output and forward tangents for `input` `[n, in]` and seeds `[n, in]`.
    fn forward(
        bound: &[(Var, Var)],
        tape: &mut Tape,
        input: Var,
        tangents: &[Var],
    ) -> (Var, Vec<Var>) {
        let mut x = input;
        let mut dx = tangents.to_vec();
        for (l, &(w, b)) in bound.iter().enumerate() {
            let z = tape.matmul(x, w);
            let z = tape.add(z, b);
            let dz: Vec<Var> = dx.iter().map(|&d| tape.matmul(d, w)).collect();
            if l + 1 == bound.len() {
                return (z, dz);
            }
            x = tape.tanh(z);
            let sq = tape.square(x);
            let neg = tape.neg(sq);
            let slope = tape.add_scalar(neg, 1.0);
            dx = dz.iter().map(|&d| tape.mul(slope, d)).collect();
        }
        (x, dx)
    }
}

/// Tape handles for all parameters, in [`MicroMacroAnsatz::params`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    macro_net: Vec<(Var, Var)>,
    g_net: Vec<(Var, Var)>,
    h_nets: [Vec<(Var, Var)>; 3],
}

/// Macro and space-time factor outputs at `P` points, `[P, ·]`.
#[derive(Debug, Clone)]
pub struct Heads {
    pub rho: Var,
    pub u: [Var; 3],
    pub temperature: Var,
    pub g: Var,
    /// One entry per input direction `t, x₁, …, x_d` when requested.
    pub tangents: Vec<HeadTangent>,
    pub points: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadTangent {
    pub rho: Var,
    pub u: [Var; 3],
    pub temperature: Var,
    pub g: Var,
}

/// `f̃` and its input derivatives on `P × Q`.
#[derive(Debug, Clone)]
pub struct TapeField {
    pub value: Var,
    /// `∂_t f̃`, then `∂_{x_a} f̃`, when requested.
    pub derivatives: Vec<Var>,
}

/// Raw moments `[P, 1]` per component.
#[derive(Debug, Clone, Copy)]
pub struct MomentVars {
    pub m0: Var,
    pub m1: [Var; 3],
    pub m2: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroMacroAnsatz {
    arch: Architecture,
    macro_net: DenseNet,
    g_net: DenseNet,
    h_nets: [DenseNet; 3],
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    architecture_hash: String,
    architecture: Architecture,
    params: Vec<Mat>,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

impl MicroMacroAnsatz {
    /// Deterministic in `seed`. The last layer of `g` is scaled by 0.01 so
    /// training starts close to a local Maxwellian.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = arch.spatial_dim;
        let macro_net = DenseNet::init(&widths(1 + d, &arch.macro_hidden, 2 + d), &mut rng)?;
        let mut g_net = DenseNet::init(&widths(1 + d, &arch.g_hidden, arch.rank), &mut rng)?;
        if let Some((w, _)) = g_net.layers.last_mut() {
            w.data.iter_mut().for_each(|x| *x *= 0.01);
        }
        let mut h = || DenseNet::init(&widths(1, &arch.h_hidden, arch.rank), &mut rng);
        let h_nets = [h()?, h()?, h()?];
        Ok(Self {
            arch,
            macro_net,
            g_net,
            h_nets,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    pub fn params(&self) -> Vec<&Mat> {
        self.nets()
            .into_iter()
            .flat_map(|n| n.layers.iter().flat_map(|(w, b)| [w, b]))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let Self {
            macro_net,
            g_net,
            h_nets,
            ..
        } = self;
        let [h1, h2, h3] = h_nets;
        [macro_net, g_net, h1, h2, h3]
            .into_iter()
            .flat_map(|n| n.layers.iter_mut().flat_map(|(w, b)| [w, b]))
            .collect()
    }

    fn nets(&self) -> [&DenseNet; 5] {
        [
            &self.macro_net,
            &self.g_net,
            &self.h_nets[0],
            &self.h_nets[1],
            &self.h_nets[2],
        ]
    }

    pub fn macro_net(&self) -> &DenseNet {
        &self.macro_net
    }

    pub fn macro_net_mut(&mut self) -> &mut DenseNet {
        &mut self.macro_net
    }

    pub fn all_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|m| m.data.iter().all(|x| x.is_finite()))
    }

    /// Zeroes the output layer of the macro net: `ρ̃ = T̃ = 1`, `ũ = 0`.
    pub fn zero_macro_output(&mut self) {
        if let Some((w, b)) = self.macro_net.layers.last_mut() {
            w.data.fill(0.0);
            b.data.fill(0.0);
        }
    }

    /// Zeroes the output layer of `g`, removing the non-equilibrium part.
    pub fn zero_nonequilibrium(&mut self) {
        if let Some((w, b)) = self.g_net.layers.last_mut() {
            w.data.fill(0.0);
            b.data.fill(0.0);
        }
    }

    /// Sets the macro output biases so that a zeroed output layer yields `state`.
    pub fn set_macro_bias(&mut self, rho: f64, u: [f64; 3], temperature: f64) {
        let d = self.arch.spatial_dim;
        if let Some((_, b)) = self.macro_net.layers.last_mut() {
            b.data[0] = rho.ln();
            b.data[1..1 + d].copy_from_slice(&u[..d]);
            b.data[1 + d] = temperature.ln();
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut vars = Vec::new();
        let macro_net = self.macro_net.bind(tape, trainable, &mut vars);
        let g_net = self.g_net.bind(tape, trainable, &mut vars);
        let h_nets = [
            self.h_nets[0].bind(tape, trainable, &mut vars),
            self.h_nets[1].bind(tape, trainable, &mut vars),
            self.h_nets[2].bind(tape, trainable, &mut vars),
        ];
        BoundParams {
            vars,
            macro_net,
            g_net,
            h_nets,
        }
    }

    /// Gradient of a scalar tape output w.r.t. each parameter matrix.
    pub fn param_gradient(&self, grads: &Gradients, bound: &BoundParams) -> Vec<Mat> {
        bound
            .vars
            .iter()
            .zip(self.params())
            .map(|(&v, p)| grads.get_or_zeros(v, p))
            .collect()
    }

    /// Macro and `g` outputs; tangents for `t, x₁, …` when `derivs`.
    pub fn heads(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        points: &[StPoint],
        derivs: bool,
    ) -> Heads {
        let d = self.arch.spatial_dim;
        let affine = self.arch.input_affine();
        let p = points.len();
        let mut data = Vec::with_capacity(p * (1 + d));
        for pt in points {
            let raw = std::iter::once(pt.t).chain(pt.x[..d].iter().copied());
            data.extend(raw.zip(&affine).map(|(y, (c, h))| (y - c) / h));
        }
        let input = tape.constant(Mat::new(p, 1 + d, data));
        let seeds: Vec<Var> = if derivs {
            (0..1 + d)
                .map(|a| {
                    let mut s = Mat::zeros(p, 1 + d);
                    for r in 0..p {
                        s.data[r * (1 + d) + a] = 1.0 / affine[a].1;
                    }
                    tape.constant(s)
                })
                .collect()
        } else {
            vec![]
        };
        let (out, dout) = DenseNet::forward(&bound.macro_net, tape, input, &seeds);
        let (g, dg) = DenseNet::forward(&bound.g_net, tape, input, &seeds);

        let a = tape.slice_cols(out, 0, 1);
        let c = tape.slice_cols(out, 1 + d, 1);
        let zero = tape.constant(Mat::zeros(p, 1));
        let mut u = [zero; 3];
        for (k, uk) in u.iter_mut().enumerate().take(d) {
            *uk = tape.slice_cols(out, 1 + k, 1);
        }
        let positive = |tape: &mut Tape, z: Var| -> (Var, Mat) {
            let mask = Mat::new(
                p,
                1,
                tape.value(z)
                    .data
                    .iter()
                    .map(|&x| f64::from((LOG_POS_MIN..=LOG_POS_MAX).contains(&x)))
                    .collect(),
            );
            let cl = tape.clamp(z, LOG_POS_MIN, LOG_POS_MAX);
            (tape.exp(cl), mask)
        };
        let (rho, mask_a) = positive(tape, a);
        let (temperature, mask_c) = positive(tape, c);
        let (mask_a, mask_c) = (tape.constant(mask_a), tape.constant(mask_c));

        let tangents = dout
            .iter()
            .zip(&dg)
            .map(|(&dz, &dgs)| {
                let da = tape.slice_cols(dz, 0, 1);
                let da = tape.mul(da, mask_a);
                let dc = tape.slice_cols(dz, 1 + d, 1);
                let dc = tape.mul(dc, mask_c);
                let mut du = [zero; 3];
                for (k, duk) in du.iter_mut().enumerate().take(d) {
                    *duk = tape.slice_cols(dz, 1 + k, 1);
                }
                HeadTangent {
                    rho: tape.mul(rho, da),
                    u: du,
                    temperature: tape.mul(temperature, dc),
                    g: dgs,
                }
            })
            .collect();
        Heads {
            rho,
            u,
            temperature,
            g,
            tangents,
            points: p,
        }
    }

    /// `H̃_k = e^{-(v_k-μ_k)²/τ} h^{(k)}(v_k)` on `nodes`, `[n, r]`.
    fn enveloped_factor(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        axis: usize,
        nodes: &[f64],
    ) -> Var {
        let vmax = self.arch.velocity_half_width;
        let input = tape.constant(Mat::col(nodes.iter().map(|v| v / vmax).collect()));
        let (h, _) = DenseNet::forward(&bound.h_nets[axis], tape, input, &[]);
        let (mu, tau) = (self.arch.envelope_mu[axis], self.arch.envelope_tau);
        let env = tape.constant(Mat::col(
            nodes
                .iter()
                .map(|v| (-(v - mu).powi(2) / tau).exp())
                .collect(),
        ));
        tape.mul(h, env)
    }

    /// `f̃` (and input derivatives when `heads` carries tangents) on `P × Q`.
    pub fn field(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        heads: &Heads,
        vel: &TensorVelocities,
    ) -> TapeField {
        let mx = maxwellian_block(tape, heads.rho, heads.u, heads.temperature, vel);
        let factors: Vec<Var> = (0..3)
            .map(|k| self.enveloped_factor(tape, bound, k, &vel.axes[k]))
            .collect();
        let h12 = tape.col_kron(factors[0], factors[1]);
        let hq = tape.col_kron(h12, factors[2]);
        let neq = tape.matmul_t(heads.g, hq);
        let value = tape.add(mx.value, neq);
        let derivatives = heads
            .tangents
            .iter()
            .map(|tan| {
                let dm = mx.tangent(tape, heads, tan, vel);
                let dn = tape.matmul_t(tan.g, hq);
                tape.add(dm, dn)
            })
            .collect();
        TapeField { value, derivatives }
    }

    /// Maxwellian part in closed form plus separable quadrature of the
    /// non-equilibrium part on the fixed moment grid.
    pub fn moments(&self, tape: &mut Tape, bound: &BoundParams, heads: &Heads) -> MomentVars {
        let grid = self.moment_grid();
        let nodes = grid.nodes_1d();
        let wts = grid.weights_1d();
        // S_k^j = Σ_i w_i v_i^j H̃_k(v_i), [1, r].
        let mut s = [[heads.g; 3]; 3];
        for k in 0..3 {
            let hk = self.enveloped_factor(tape, bound, k, nodes);
            for (j, sj) in s.iter_mut().enumerate() {
                let row = Mat::row(
                    nodes
                        .iter()
                        .zip(wts)
                        .map(|(v, w)| w * v.powi(j as i32))
                        .collect(),
                );
                let row = tape.constant(row);
                sj[k] = tape.matmul(row, hk);
            }
        }
        let contract = |tape: &mut Tape, js: [usize; 3]| -> Var {
            let a = tape.mul(s[js[0]][0], s[js[1]][1]);
            let b = tape.mul(a, s[js[2]][2]);
            let gb = tape.mul(heads.g, b);
            tape.sum_cols(gb)
        };
        let n0 = contract(tape, [0, 0, 0]);
        let n1 = [
            contract(tape, [1, 0, 0]),
            contract(tape, [0, 1, 0]),
            contract(tape, [0, 0, 1]),
        ];
        let n2a = contract(tape, [2, 0, 0]);
        let n2b = contract(tape, [0, 2, 0]);
        let n2c = contract(tape, [0, 0, 2]);

        let (rho, u, t) = (heads.rho, heads.u, heads.temperature);
        let m0 = tape.add(rho, n0);
        let m1 = [0, 1, 2].map(|k| {
            let ru = tape.mul(rho, u[k]);
            tape.add(ru, n1[k])
        });
        // ρ(|u|² + 3T)
        let mut e = tape.scale(t, 3.0);
        for uk in u {
            let sq = tape.square(uk);
            e = tape.add(e, sq);
        }
        let m2 = tape.mul(rho, e);
        let m2 = tape.add(m2, n2a);
        let m2 = tape.add(m2, n2b);
        let m2 = tape.add(m2, n2c);
        MomentVars { m0, m1, m2 }
    }

    pub fn moment_grid(&self) -> VelocityGrid {
        VelocityGrid::new(self.arch.velocity_half_width, self.arch.moment_points)
            .expect("validated architecture")
    }

    /// `M[f̃]` on `P × Q` from tape moments; `ρ̂`, `T̂` are floored at
    /// [`MOMENT_FLOOR`]. Returns the number of floored entries.
    pub fn local_equilibrium(
        tape: &mut Tape,
        m: &MomentVars,
        vel: &TensorVelocities,
    ) -> (Var, usize) {
        let rho_raw = m.m0;
        let rho = tape.clamp(rho_raw, MOMENT_FLOOR, f64::MAX);
        let inv = tape.recip(rho);
        let u = m.m1.map(|m1| tape.mul(m1, inv));
        // T = (m2 − |m1|²/ρ)/(3ρ)
        let mut kin = tape.scale(m.m2, 1.0);
        for k in 0..3 {
            let p = tape.mul(m.m1[k], u[k]);
            kin = tape.sub(kin, p);
        }
        let t = tape.mul(kin, inv);
        let t_raw = tape.scale(t, 1.0 / 3.0);
        let t = tape.clamp(t_raw, MOMENT_FLOOR, f64::MAX);
        let clamps = tape
            .value(rho_raw)
            .data
            .iter()
            .filter(|&&x| x < MOMENT_FLOOR)
            .count()
            + tape
                .value(t_raw)
                .data
                .iter()
                .filter(|&&x| x < MOMENT_FLOOR)
                .count();
        (maxwellian_block(tape, rho, u, t, vel).value, clamps)
    }

    /// Per-axis factor values `H̃_k` on `vel` and the macro/`g` outputs at one
    /// point, for separable post-processing.
    pub fn separable_view(&self, point: &StPoint, vel: &TensorVelocities) -> SeparableView {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let heads = self.heads(&mut tape, &bound, &[*point], false);
        let factors = [0, 1, 2].map(|k| {
            let v = self.enveloped_factor(&mut tape, &bound, k, &vel.axes[k]);
            tape.value(v).clone()
        });
        let scalar = |v: Var| tape.value(v).data[0];
        SeparableView {
            rho: scalar(heads.rho),
            u: heads.u.map(scalar),
            temperature: scalar(heads.temperature),
            g: tape.value(heads.g).data.clone(),
            factors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture_hash: self.arch.hash(),
            architecture: self.arch.clone(),
            params: self.params().into_iter().cloned().collect(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    /// Loads a checkpoint; the stored hash must match the stored architecture
    /// and, if given, the expected one.
    pub fn load(path: &Path, expected: Option<&Architecture>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(BgkError::Format(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.architecture.hash() != ck.architecture_hash {
            return Err(BgkError::Format(
                "architecture hash does not match header".into(),
            ));
        }
        if let Some(e) = expected {
            if e.hash() != ck.architecture_hash {
                return Err(BgkError::GridMismatch(
                    "checkpoint architecture differs from the requested one".into(),
                ));
            }
        }
        let mut model = Self::init(ck.architecture, 0)?;
        let slots = model.params_mut();
        if slots.len() != ck.params.len() {
            return Err(BgkError::Format("parameter count mismatch".into()));
        }
        for (slot, p) in slots.into_iter().zip(ck.params) {
            if slot.shape() != p.shape() || p.data.iter().any(|x| !x.is_finite()) {
                return Err(BgkError::Format("bad parameter block".into()));
            }
            *slot = p;
        }
        Ok(model)
    }

    fn eval_block(&self, points: &[StPoint], vel: &TensorVelocities, derivs: bool) -> FieldBlock {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let heads = self.heads(&mut tape, &bound, points, derivs);
        let f = self.field(&mut tape, &bound, &heads, vel);
        let take = |v: Var| tape.value(v).data.clone();
        let mut ds = f.derivatives.iter().map(|&v| take(v));
        FieldBlock {
            values: take(f.value),
            dt: ds.next().unwrap_or_default(),
            dx: ds.collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparableView {
    pub rho: f64,
    pub u: [f64; 3],
    pub temperature: f64,
    pub g: Vec<f64>,
    /// `[n_k, r]` per axis.
    pub factors: [Mat; 3],
}

impl DistributionField for MicroMacroAnsatz {
    fn spatial_dim(&self) -> usize {
        self.arch.spatial_dim
    }

    fn values(&self, points: &[StPoint], vel: &TensorVelocities) -> Result<Vec<f64>> {
        Ok(self.eval_block(points, vel, false).values)
    }

    fn derivatives(&self, points: &[StPoint], vel: &TensorVelocities) -> Result<FieldBlock> {
        Ok(self.eval_block(points, vel, true))
    }

    fn moments(&self, point: &StPoint) -> Option<Result<RawMoments>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let heads = self.heads(&mut tape, &bound, &[*point], false);
        let m = self.moments(&mut tape, &bound, &heads);
        let s = |v: Var| tape.value(v).data[0];
        Some(Ok(RawMoments {
            m0: s(m.m0),
            m1: m.m1.map(s),
            m2: s(m.m2),
        }))
    }
}

/// Maxwellian of `[P, 1]` fields on `P × Q` with per-axis pieces kept for
/// the tangent.
struct MaxwellBlock {
    value: Var,
    inv_t: Var,
    diff: [Var; 3],
    dims: [usize; 3],
}

fn maxwellian_block(
    tape: &mut Tape,
    rho: Var,
    u: [Var; 3],
    temperature: Var,
    vel: &TensorVelocities,
) -> MaxwellBlock {
    let inv_t = tape.recip(temperature);
    let half_inv = tape.scale(inv_t, -0.5);
    let mut diff = [rho; 3];
    let mut e = [rho; 3];
    for k in 0..3 {
        let v = tape.constant(Mat::row(vel.axes[k].clone()));
        diff[k] = tape.sub(v, u[k]);
        let sq = tape.square(diff[k]);
        let arg = tape.mul(sq, half_inv);
        e[k] = tape.exp(arg);
    }
    // ρ (2πT)^{-3/2}
    let lt = tape.ln(temperature);
    let lt = tape.scale(lt, -1.5);
    let pre = tape.exp(lt);
    let pre = tape.mul(pre, rho);
    let pre = tape.scale(pre, (2.0 * PI).powf(-1.5));
    let e12 = tape.row_kron(e[0], e[1]);
    let e123 = tape.row_kron(e12, e[2]);
    let value = tape.mul(pre, e123);
    MaxwellBlock {
        value,
        inv_t,
        diff,
        dims: vel.dims(),
    }
}

impl MaxwellBlock {
    /// `∂M = M (ρ'/ρ − 3T'/(2T) + Σ_k [(v_k−u_k)u_k'/T + (v_k−u_k)²T'/(2T²)])`.
    fn tangent(
        &self,
        tape: &mut Tape,
        h: &Heads,
        tan: &HeadTangent,
        _vel: &TensorVelocities,
    ) -> Var {
        let inv_rho = tape.recip(h.rho);
        let a = tape.mul(tan.rho, inv_rho);
        let tt = tape.mul(tan.temperature, self.inv_t);
        let b = tape.scale(tt, -1.5);
        let mut alpha = tape.add(a, b);
        // T'/(2T²)
        let c2 = tape.mul(tt, self.inv_t);
        let c2 = tape.scale(c2, 0.5);
        let mut total: Option<Var> = None;
        for k in 0..3 {
            let c1 = tape.mul(tan.u[k], self.inv_t);
            let l1 = tape.mul(self.diff[k], c1);
            let sq = tape.square(self.diff[k]);
            let l2 = tape.mul(sq, c2);
            let lk = tape.add(l1, l2);
            let ex = tape.expand_axis(lk, k, self.dims);
            total = Some(match total {
                Some(t) => tape.add(t, ex),
                None => ex,
            });
        }
        let total = total.expect("three axes");
        alpha = tape.add(total, alpha);
        tape.mul(self.value, alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maxwellian::{maxwellian_eval, MacroState};
    use crate::residuals_loss::derivative_contract_error;
    use approx::assert_relative_eq;

    fn small_arch(d: usize) -> Architecture {
        let mut a = Architecture::for_problem(&if d == 0 {
            ProblemSpec::homogeneous(&Default::default())
        } else {
            ProblemSpec::smooth_1d(0.01)
        });
        a.macro_hidden = vec![8, 8];
        a.g_hidden = vec![6];
        a.h_hidden = vec![5];
        a.rank = 3;
        a
    }

    fn vel(n: usize, v: f64) -> TensorVelocities {
        TensorVelocities::from_grid(&VelocityGrid::new(v, n).unwrap())
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let a = MicroMacroAnsatz::init(small_arch(1), 7).unwrap();
        let b = MicroMacroAnsatz::init(small_arch(1), 7).unwrap();
        let c = MicroMacroAnsatz::init(small_arch(1), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut bad = small_arch(1);
        bad.rank = 0;
        assert!(MicroMacroAnsatz::init(bad, 1).is_err());
        let mut bad = small_arch(1);
        bad.envelope_tau = 0.0;
        assert!(MicroMacroAnsatz::init(bad, 1).is_err());
        let expected = {
            let n = |w: &[usize]| w.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>();
            n(&[2, 8, 8, 3]) + n(&[2, 6, 3]) + 3 * n(&[1, 5, 3])
        };
        assert_eq!(a.param_count(), expected);
    }

    #[test]
    fn zeroed_parts_give_unit_maxwellian() {
        let mut a = MicroMacroAnsatz::init(small_arch(1), 3).unwrap();
        a.zero_macro_output();
        a.zero_nonequilibrium();
        let tv = vel(5, 4.0);
        let pts = [
            StPoint::new(0.02, [-0.3, 0.0, 0.0]),
            StPoint::new(0.09, [0.4, 0.0, 0.0]),
        ];
        let f = a.values(&pts, &tv).unwrap();
        let unit = MacroState::new(1.0, [0.0; 3], 1.0).unwrap();
        for (i, x) in f.iter().enumerate() {
            assert_relative_eq!(
                *x,
                maxwellian_eval(&unit, &tv.node(i % tv.len())),
                max_relative = 1e-13
            );
        }
        let blk = a.derivatives(&pts, &tv).unwrap();
        assert!(blk.dt.iter().chain(&blk.dx[0]).all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn pure_maxwellian_moments_are_exact() {
        let mut a = MicroMacroAnsatz::init(small_arch(1), 3).unwrap();
        a.zero_macro_output();
        a.zero_nonequilibrium();
        a.set_macro_bias(1.3, [0.2, 0.0, 0.0], 0.7);
        let m = DistributionField::moments(&a, &StPoint::new(0.05, [0.1, 0.0, 0.0]))
            .unwrap()
            .unwrap();
        let want = MacroState::new(1.3, [0.2, 0.0, 0.0], 0.7)
            .unwrap()
            .raw_moments();
        assert_relative_eq!(m.m0, want.m0, max_relative = 1e-14);
        assert_relative_eq!(m.m1[0], want.m1[0], max_relative = 1e-14);
        assert_relative_eq!(m.m2, want.m2, max_relative = 1e-14);
    }

    #[test]
    fn separable_moments_match_dense_quadrature() {
        let mut arch = small_arch(1);
        arch.moment_points = 41;
        let mut a = MicroMacroAnsatz::init(arch, 11).unwrap();
        // Make the non-equilibrium part visible.
        for p in a.params_mut().into_iter().skip(6) {
            p.data.iter_mut().for_each(|x| *x *= 3.0);
        }
        let grid = a.moment_grid();
        let tv = TensorVelocities::from_grid(&grid);
        let pt = StPoint::new(0.04, [0.2, 0.0, 0.0]);
        let sep = DistributionField::moments(&a, &pt).unwrap().unwrap();
        let dense = grid.raw_moments(&a.values(&[pt], &tv).unwrap());
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * y.abs().max(1e-3);
        assert!(close(sep.m0, dense.m0), "{sep:?} {dense:?}");
        assert!(
            (0..3).all(|k| close(sep.m1[k], dense.m1[k])),
            "{sep:?} {dense:?}"
        );
        assert!(close(sep.m2, dense.m2), "{sep:?} {dense:?}");
    }

    #[test]
    fn envelope_dominates_far_field() {
        let a = MicroMacroAnsatz::init(small_arch(0), 5).unwrap();
        let pt = StPoint::homogeneous(0.08);
        let at = |r: f64| {
            let tv = TensorVelocities::new(
                [vec![r], vec![0.0], vec![0.0]],
                [vec![1.0], vec![1.0], vec![1.0]],
            );
            let view = a.separable_view(&pt, &tv);
            let f = a.values(&[pt], &tv).unwrap()[0];
            let st = MacroState::new(view.rho, view.u, view.temperature).unwrap();
            (f - maxwellian_eval(&st, &[r, 0.0, 0.0])).abs()
        };
        let (near, far) = (at(5.0), at(7.5));
        assert!(near > 0.0 && far < near, "{far} {near}");
    }

    #[test]
    fn linear_net_derivative_is_weight_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::init(&[2, 3], &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut vars = vec![];
        let b = net.bind(&mut tape, false, &mut vars);
        let x = tape.constant(Mat::row(vec![0.3, -0.2]));
        let seed = tape.constant(Mat::row(vec![1.0, 0.0]));
        let (_, d) = DenseNet::forward(&b, &mut tape, x, &[seed]);
        assert_eq!(tape.value(d[0]).data, net.layers[0].0.data[..3].to_vec());
    }

    #[test]
    fn input_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = MicroMacroAnsatz::init(small_arch(1), 9).unwrap();
        let tv = vel(5, 6.0);
        let pts: Vec<StPoint> = (0..20)
            .map(|_| {
                StPoint::new(
                    rng.gen_range(0.01..0.09),
                    [rng.gen_range(-0.45..0.45), 0.0, 0.0],
                )
            })
            .collect();
        let e = derivative_contract_error(&a, &pts, &tv, 1e-4).unwrap();
        assert!(e < 1e-5, "rel err {e}");
    }

    /// Sum of `∂_t f̃ · c` over a block, differentiated w.r.t. parameters.
    fn dt_functional(
        a: &MicroMacroAnsatz,
        pts: &[StPoint],
        tv: &TensorVelocities,
    ) -> (f64, Vec<Mat>) {
        let mut tape = Tape::new();
        let bound = a.bind(&mut tape, true);
        let heads = a.heads(&mut tape, &bound, pts, true);
        let f = a.field(&mut tape, &bound, &heads, tv);
        let m = a.moments(&mut tape, &bound, &heads);
        let (eq, _) = MicroMacroAnsatz::local_equilibrium(&mut tape, &m, tv);
        let r = tape.sub(f.derivatives[0], eq);
        let r = tape.add(r, f.derivatives[1]);
        let sq = tape.square(r);
        let out = tape.sum_all(sq);
        let g = tape.backward(out);
        (tape.value(out).data[0], a.param_gradient(&g, &bound))
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = MicroMacroAnsatz::init(small_arch(1), 13).unwrap();
        let tv = vel(5, 6.0);
        let pts = [
            StPoint::new(0.03, [0.1, 0.0, 0.0]),
            StPoint::new(0.07, [-0.2, 0.0, 0.0]),
        ];
        let (_, grad) = dt_functional(&a, &pts, &tv);
        let n = grad.len();
        for _ in 0..20 {
            let blk = rng.gen_range(0..n);
            let idx = rng.gen_range(0..grad[blk].len());
            let h = 1e-6;
            let mut ap = a.clone();
            ap.params_mut()[blk].data[idx] += h;
            let mut am = a.clone();
            am.params_mut()[blk].data[idx] -= h;
            let fd =
                (dt_functional(&ap, &pts, &tv).0 - dt_functional(&am, &pts, &tv).0) / (2.0 * h);
            let an = grad[blk].data[idx];
            let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-5, "block {blk} idx {idx}: {an} vs {fd}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let a = MicroMacroAnsatz::init(small_arch(1), 21).unwrap();
        a.save(&path).unwrap();
        let b = MicroMacroAnsatz::load(&path, Some(a.architecture())).unwrap();
        assert_eq!(a, b);
        let mut other = small_arch(1);
        other.rank = 4;
        assert!(matches!(
            MicroMacroAnsatz::load(&path, Some(&other)),
            Err(BgkError::GridMismatch(_))
        ));
    }
}
