//! Truncated tensor-product velocity grid with composite trapezoid weights.
//!
//! Every velocity integral in the crate goes through this module. Values
//! tabulated on the 3D grid are stored flat in lexicographic order: the
//! index of node `(i, j, k)` is `(i * n + j) * n + k`, so the last axis is
//! contiguous.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BgkError, Result};

/// A microscopic velocity.
pub type Vec3 = [f64; 3];

/// Squared Euclidean norm.
#[inline]
pub fn norm_sq(v: &Vec3) -> f64 {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

/// How the 3D sums are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Fixed lexicographic order; bit-identical across calls.
    #[default]
    Ordered,
    /// Rayon tree reduction over the first axis. Not bit-exact.
    Parallel,
}

/// Raw velocity moments `(∫f, ∫v f, ∫|v|² f)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RawMoments {
    pub m0: f64,
    pub m1: Vec3,
    pub m2: f64,
}

impl RawMoments {
    pub fn sub(&self, other: &RawMoments) -> RawMoments {
        RawMoments {
            m0: self.m0 - other.m0,
            m1: [
                self.m1[0] - other.m1[0],
                self.m1[1] - other.m1[1],
                self.m1[2] - other.m1[2],
            ],
            m2: self.m2 - other.m2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityGrid {
    half_width: f64,
    points_per_axis: usize,
    nodes_1d: Vec<f64>,
    weights_1d: Vec<f64>,
}

impl VelocityGrid {
    /// Uniform grid on `[-half_width, half_width]` per axis.
    ///
    /// The point count must be odd (so that `v = 0` is a node) and at least 3.
    pub fn new(half_width: f64, points_per_axis: usize) -> Result<Self> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(BgkError::Config(format!(
                "velocity half width must be positive, got {half_width}"
            )));
        }
        if points_per_axis < 3 || points_per_axis % 2 == 0 {
            return Err(BgkError::Config(format!(
                "points per axis must be odd and >= 3, got {points_per_axis}"
            )));
        }
        let n = points_per_axis;
        let h = 2.0 * half_width / (n - 1) as f64;
        let mid = (n / 2) as isize;
        // Nodes built from the symmetric integer offset so that the grid is
        // exactly symmetric and hits 0 and ±V.
        let nodes_1d: Vec<f64> = (0..n)
            .map(|i| {
                let k = i as isize - mid;
                if k == -mid {
                    -half_width
                } else if k == mid {
                    half_width
                } else {
                    k as f64 * h
                }
            })
            .collect();
        let weights_1d: Vec<f64> = (0..n)
            .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
            .collect();
        Ok(Self {
            half_width,
            points_per_axis: n,
            nodes_1d,
            weights_1d,
        })
    }

    /// Smallest odd grid on `[-half_width, half_width]` with spacing at most `max_spacing`.
    pub fn with_max_spacing(half_width: f64, max_spacing: f64) -> Result<Self> {
        if !(max_spacing > 0.0) {
            return Err(BgkError::Config("max spacing must be positive".into()));
        }
        let mut n = (2.0 * half_width / max_spacing).ceil() as usize + 1;
        if n % 2 == 0 {
            n += 1;
        }
        Self::new(half_width, n.max(3))
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.points_per_axis - 1) as f64
    }

    pub fn nodes_1d(&self) -> &[f64] {
        &self.nodes_1d
    }

    pub fn weights_1d(&self) -> &[f64] {
        &self.weights_1d
    }

    /// Number of tensor nodes, `n³`.
    pub fn len(&self) -> usize {
        self.points_per_axis.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Axis indices of a flat tensor index.
    #[inline]
    pub fn unflatten(&self, idx: usize) -> [usize; 3] {
        let n = self.points_per_axis;
        [idx / (n * n), (idx / n) % n, idx % n]
    }

    #[inline]
    pub fn node(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.unflatten(idx);
        [self.nodes_1d[i], self.nodes_1d[j], self.nodes_1d[k]]
    }

    #[inline]
    pub fn weight(&self, idx: usize) -> f64 {
        let [i, j, k] = self.unflatten(idx);
        self.weights_1d[i] * self.weights_1d[j] * self.weights_1d[k]
    }

    /// All tensor nodes in storage order.
    pub fn nodes(&self) -> Vec<Vec3> {
        (0..self.len()).map(|q| self.node(q)).collect()
    }

    /// All tensor weights in storage order.
    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|q| self.weight(q)).collect()
    }

    /// Tabulate `f` on the grid in storage order.
    pub fn tabulate<F: Fn(&Vec3) -> f64>(&self, f: F) -> Vec<f64> {
        let n = self.points_per_axis;
        let mut out = Vec::with_capacity(self.len());
        for &a in &self.nodes_1d {
            for &b in &self.nodes_1d {
                for &c in &self.nodes_1d {
                    out.push(f(&[a, b, c]));
                }
            }
        }
        debug_assert_eq!(out.len(), n * n * n);
        out
    }

    /// `Σ f(v) w₁w₂w₃` over all nodes, in lexicographic order.
    pub fn integrate3<F: Fn(&Vec3) -> f64 + Sync>(&self, f: F) -> Result<f64> {
        self.integrate3_with(f, Reduction::Ordered)
    }

    pub fn integrate3_with<F: Fn(&Vec3) -> f64 + Sync>(
        &self,
        f: F,
        reduction: Reduction,
    ) -> Result<f64> {
        let slab = |i: usize| -> Result<f64> {
            let a = self.nodes_1d[i];
            let wa = self.weights_1d[i];
            let mut acc = 0.0;
            for (&b, &wb) in self.nodes_1d.iter().zip(&self.weights_1d) {
                let mut inner = 0.0;
                for (&c, &wc) in self.nodes_1d.iter().zip(&self.weights_1d) {
                    let v = [a, b, c];
                    let y = f(&v);
                    if !y.is_finite() {
                        return Err(BgkError::NonFinite {
                            value: y,
                            v1: a,
                            v2: b,
                            v3: c,
                        });
                    }
                    inner += y * wc;
                }
                acc += inner * wb;
            }
            Ok(acc * wa)
        };
        match reduction {
            Reduction::Ordered => {
                let mut total = 0.0;
                for i in 0..self.points_per_axis {
                    total += slab(i)?;
                }
                Ok(total)
            }
            Reduction::Parallel => (0..self.points_per_axis)
                .into_par_iter()
                .map(slab)
                .try_reduce(|| 0.0, |a, b| Ok(a + b)),
        }
    }

    /// Quadrature of values tabulated in storage order.
    ///
    /// Same summation order as [`integrate3`](Self::integrate3).
    pub fn integrate_values(&self, values: &[f64]) -> f64 {
        self.weighted_sum(values, |_| 1.0)
    }

    /// `Σ values[q] φ(v_q) w_q` with the lexicographic summation order.
    pub fn weighted_sum<F: Fn(&Vec3) -> f64>(&self, values: &[f64], phi: F) -> f64 {
        assert_eq!(values.len(), self.len(), "values must match the grid");
        let n = self.points_per_axis;
        let mut total = 0.0;
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                let mut inner = 0.0;
                let base = (i * n + j) * n;
                for k in 0..n {
                    let v = [self.nodes_1d[i], self.nodes_1d[j], self.nodes_1d[k]];
                    inner += values[base + k] * phi(&v) * self.weights_1d[k];
                }
                acc += inner * self.weights_1d[j];
            }
            total += acc * self.weights_1d[i];
        }
        total
    }

    /// Raw moments of a tabulated field.
    ///
    /// Signed moments are allowed here: differences of fields are legitimate inputs.
    pub fn raw_moments(&self, values: &[f64]) -> RawMoments {
        assert_eq!(values.len(), self.len(), "values must match the grid");
        let n = self.points_per_axis;
        let (x, w) = (&self.nodes_1d, &self.weights_1d);
        let mut m = RawMoments::default();
        for i in 0..n {
            let mut s = [0.0; 4];
            for j in 0..n {
                let base = (i * n + j) * n;
                let mut t = [0.0; 3];
                for k in 0..n {
                    let fw = values[base + k] * w[k];
                    t[0] += fw;
                    t[1] += fw * x[k];
                    t[2] += fw * x[k] * x[k];
                }
                s[0] += t[0] * w[j];
                s[1] += t[0] * x[j] * w[j];
                s[2] += t[1] * w[j];
                s[3] += (t[0] * x[j] * x[j] + t[2]) * w[j];
            }
            m.m0 += s[0] * w[i];
            m.m1[0] += s[0] * x[i] * w[i];
            m.m1[1] += s[1] * w[i];
            m.m1[2] += s[2] * w[i];
            m.m2 += (s[0] * x[i] * x[i] + s[3]) * w[i];
        }
        m
    }

    /// Factorized quadrature for product-form integrands `f₁(v₁) f₂(v₂) f₃(v₃)`.
    pub fn integrate_separable<F1, F2, F3>(&self, f1: F1, f2: F2, f3: F3) -> f64
    where
        F1: Fn(f64) -> f64,
        F2: Fn(f64) -> f64,
        F3: Fn(f64) -> f64,
    {
        self.integrate_1d(f1) * self.integrate_1d(f2) * self.integrate_1d(f3)
    }

    /// One-axis trapezoid sum.
    pub fn integrate_1d<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes_1d
            .iter()
            .zip(&self.weights_1d)
            .map(|(&x, &w)| f(x) * w)
            .sum()
    }
}
