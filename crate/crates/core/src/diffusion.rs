//! Conditional denoising diffusion over embedding rows.
//!
//! The forward process corrupts `C₀` in closed form,
//! `Cₜ = √ᾱₜ·C₀ + √(1-ᾱₜ)·ε`. A row-wise noise predictor conditioned on the
//! interaction embedding of the same entity is trained with the simplified
//! noise-prediction objective, and ancestral sampling runs the learned reverse
//! chain from pure noise.
//!
//! Timesteps are 1-based throughout: `t ∈ 1..=T`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::encoder::xavier_bound;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear `β` from `beta_start` to `beta_end` over `steps` steps, `σₜ = √βₜ` with `σ₁ = 0`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("diffusion needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start ≤ beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|k| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut log_sum = 0.0;
        let alpha_bar = alpha
            .iter()
            .map(|a| {
                log_sum += libm::log(*a);
                libm::exp(log_sum)
            })
            .collect();
        let sigma = beta
            .iter()
            .enumerate()
            .map(|(k, b)| if k == 0 { 0.0 } else { libm::sqrt(*b) })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(t - 1)
        }
    }

    /// Panics when `t` is outside `1..=T`; see [`DiffusionSchedule::check`].
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn check(&self, t: usize) -> Result<()> {
        self.idx(t).map(|_| ())
    }

    /// `(√ᾱₜ, √(1-ᾱₜ))`
    pub fn signal_noise(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (libm::sqrt(ab), libm::sqrt(1.0 - ab))
    }
}

/// `Cₜ = √ᾱₜ·C₀ + √(1-ᾱₜ)·ε`
pub fn forward_sample(c0: &Matrix, t: usize, eps: &Matrix, sched: &DiffusionSchedule) -> Result<Matrix> {
    sched.check(t)?;
    if c0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "C0 is {:?} but noise is {:?}",
            c0.shape(),
            eps.shape()
        )));
    }
    let (a, b) = sched.signal_noise(t);
    Ok(c0.zip_map(eps, |c, e| a * c + b * e))
}

/// Inverts [`forward_sample`] given a noise estimate.
pub fn estimate_x0(ct: &Matrix, t: usize, eps_hat: &Matrix, sched: &DiffusionSchedule) -> Result<Matrix> {
    sched.check(t)?;
    if ct.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "Ct is {:?} but noise estimate is {:?}",
            ct.shape(),
            eps_hat.shape()
        )));
    }
    let (a, b) = sched.signal_noise(t);
    Ok(ct.zip_map(eps_hat, |c, e| (c - b * e) / a))
}

/// Sinusoidal position encoding of one timestep.
pub fn timestep_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        out[i] = libm::sin(t as f64 * freq);
        out[half + i] = libm::cos(t as f64 * freq);
    }
    out
}

fn timestep_matrix(ts: &[usize], width: usize) -> Matrix {
    let mut m = Matrix::zeros(ts.len(), width);
    for (r, &t) in ts.iter().enumerate() {
        m.row_mut(r).copy_from_slice(&timestep_embedding(t, width));
    }
    m
}

/// Anything that predicts the injected noise for a batch of rows.
pub trait NoisePredictor {
    /// `ct` and `cond` are `n × d`; `ts[r]` is the timestep of row `r`.
    fn predict(&self, ct: &Matrix, ts: &[usize], cond: &Matrix) -> Matrix;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserSpec {
    pub dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
}

/// Row-wise MLP noise predictor with one skip connection.
///
/// `h₁ = silu([Cₜ ‖ S]·W_in + b_in + PE(t)·W_time)`,
/// `h₂ = silu(h₁·W_mid + b_mid) + h₁`, `ε̂ = h₂·W_out + b_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub spec: DenoiserSpec,
    pub w_in: Matrix,
    pub b_in: Matrix,
    pub w_time: Matrix,
    pub w_mid: Matrix,
    pub b_mid: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

pub const DENOISER_TENSORS: [&str; 7] = ["w_in", "b_in", "w_time", "w_mid", "b_mid", "w_out", "b_out"];

/// Tape handles for a bound [`Denoiser`].
#[derive(Clone, Copy, Debug)]
pub struct DenoiserVars {
    pub w_in: Var,
    pub b_in: Var,
    pub w_time: Var,
    pub w_mid: Var,
    pub b_mid: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl DenoiserVars {
    pub fn all(&self) -> [Var; 7] {
        [
            self.w_in, self.b_in, self.w_time, self.w_mid, self.b_mid, self.w_out, self.b_out,
        ]
    }
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(spec: DenoiserSpec, rng: &mut R) -> Result<Self> {
        if spec.dim == 0 || spec.hidden == 0 || spec.time_dim < 2 {
            return Err(Error::InvalidArgument(
                "denoiser needs dim ≥ 1, hidden ≥ 1 and time_dim ≥ 2".into(),
            ));
        }
        let (d, h, p) = (spec.dim, spec.hidden, spec.time_dim);
        Ok(Self {
            spec,
            w_in: Matrix::uniform(2 * d, h, xavier_bound(2 * d, h), rng),
            b_in: Matrix::zeros(1, h),
            w_time: Matrix::uniform(p, h, xavier_bound(p, h), rng),
            w_mid: Matrix::uniform(h, h, xavier_bound(h, h), rng),
            b_mid: Matrix::zeros(1, h),
            w_out: Matrix::uniform(h, d, xavier_bound(h, d), rng),
            b_out: Matrix::zeros(1, d),
        })
    }

    pub fn tensors(&self) -> [&Matrix; 7] {
        [
            &self.w_in,
            &self.b_in,
            &self.w_time,
            &self.w_mid,
            &self.b_mid,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 7] {
        [
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_time,
            &mut self.w_mid,
            &mut self.b_mid,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    /// Places the weights on `g` as trainable leaves (or constants).
    pub fn bind(&self, g: &mut Graph<'_>, trainable: bool) -> DenoiserVars {
        let mut leaf = |m: &Matrix| {
            if trainable {
                g.param(m.clone())
            } else {
                g.constant(m.clone())
            }
        };
        DenoiserVars {
            w_in: leaf(&self.w_in),
            b_in: leaf(&self.b_in),
            w_time: leaf(&self.w_time),
            w_mid: leaf(&self.w_mid),
            b_mid: leaf(&self.b_mid),
            w_out: leaf(&self.w_out),
            b_out: leaf(&self.b_out),
        }
    }

    pub fn forward_var(&self, g: &mut Graph<'_>, vars: &DenoiserVars, ct: Var, cond: Var, ts: &[usize]) -> Var {
        let pe = g.constant(timestep_matrix(ts, self.spec.time_dim));
        let x = g.hstack(ct, cond);
        let h = g.matmul(x, vars.w_in);
        let h = g.add_row_broadcast(h, vars.b_in);
        let te = g.matmul(pe, vars.w_time);
        let h = g.add(h, te);
        let h1 = g.silu(h);
        let m = g.matmul(h1, vars.w_mid);
        let m = g.add_row_broadcast(m, vars.b_mid);
        let m = g.silu(m);
        let h2 = g.add(m, h1);
        let out = g.matmul(h2, vars.w_out);
        g.add_row_broadcast(out, vars.b_out)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, ct: &Matrix, ts: &[usize], cond: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let c = g.constant(ct.clone());
        let s = g.constant(cond.clone());
        let out = self.forward_var(&mut g, &vars, c, s, ts);
        g.value(out).clone()
    }
}

fn check_rows(ct: &Matrix, cond: &Matrix) -> Result<()> {
    if ct.rows() != cond.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} content rows but {} condition rows",
            ct.rows(),
            cond.rows()
        )));
    }
    Ok(())
}

/// `ε_φ(Cₜ, t, S)` at a single timestep for every row.
pub fn predict_noise<P: NoisePredictor + ?Sized>(
    model: &P,
    ct: &Matrix,
    t: usize,
    cond: &Matrix,
    sched: &DiffusionSchedule,
) -> Result<Matrix> {
    sched.check(t)?;
    check_rows(ct, cond)?;
    Ok(model.predict(ct, &vec![t; ct.rows()], cond))
}

/// Monte-Carlo noise-prediction loss with `t ~ U{1..T}` and `ε ~ N(0, I)` drawn per row.
pub fn generation_loss<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    c0: &Matrix,
    cond: &Matrix,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<f64> {
    if c0.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    check_rows(c0, cond)?;
    let ts: Vec<usize> = (0..c0.rows()).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = Matrix::randn(c0.rows(), c0.cols(), rng);
    let mut ct = c0.clone();
    for (r, &t) in ts.iter().enumerate() {
        let (a, b) = sched.signal_noise(t);
        for (v, e) in ct.row_mut(r).iter_mut().zip(eps.row(r)) {
            *v = a * *v + b * e;
        }
    }
    let pred = model.predict(&ct, &ts, cond);
    let n = (eps.rows() * eps.cols()) as f64;
    Ok(pred.sub(&eps).squared_norm() / n)
}

/// Tape outputs of one diffusion training pass.
#[derive(Clone, Copy, Debug)]
pub struct DiffusionTerms {
    /// Mean squared noise-prediction error.
    pub loss: Var,
    /// One-shot estimate `Ĉ₀ = (Cₜ - √(1-ᾱₜ)·ε̂)/√ᾱₜ` at the same timesteps.
    pub x0_hat: Var,
}

/// Corrupts `c0` at per-row random timesteps, predicts the noise and returns
/// the loss together with the differentiable one-shot `x₀` estimate.
pub fn diffuse_and_estimate<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    model: &Denoiser,
    vars: &DenoiserVars,
    c0: Var,
    cond: Var,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> DiffusionTerms {
    let (rows, cols) = g.value(c0).shape();
    let ts: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = Matrix::randn(rows, cols, rng);
    let signal: Vec<f64> = ts.iter().map(|&t| sched.signal_noise(t).0).collect();
    let noise: Vec<f64> = ts.iter().map(|&t| sched.signal_noise(t).1).collect();
    let mut scaled_eps = eps.clone();
    for (r, &b) in noise.iter().enumerate() {
        scaled_eps.row_mut(r).iter_mut().for_each(|v| *v *= b);
    }
    let eps_var = g.constant(eps);
    let scaled_eps = g.constant(scaled_eps);
    let signal_part = g.scale_rows(c0, signal.clone());
    let ct = g.add(signal_part, scaled_eps);
    let pred = model.forward_var(g, vars, ct, cond, &ts);
    let loss = g.mse(eps_var, pred);
    let removed = g.scale_rows(pred, noise);
    let diff = g.sub(ct, removed);
    let x0_hat = g.scale_rows(diff, signal.iter().map(|a| 1.0 / a).collect());
    DiffusionTerms { loss, x0_hat }
}

/// Ancestral sampling from `C_T ~ N(0, I)` down to `C̃₀`.
pub fn reverse_sample<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    cond: &Matrix,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Matrix> {
    let start = Matrix::randn(cond.rows(), cond.cols(), rng);
    reverse_sample_from(model, start, cond, sched, rng)
}

/// Runs the reverse chain from an explicit terminal state `C_T`.
pub fn reverse_sample_from<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    terminal: Matrix,
    cond: &Matrix,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Matrix> {
    check_rows(&terminal, cond)?;
    let mut c = terminal;
    let rows = c.rows();
    for t in (1..=sched.steps()).rev() {
        let eps_hat = model.predict(&c, &vec![t; rows], cond);
        let alpha = sched.alpha(t);
        let coef = (1.0 - alpha) / libm::sqrt(1.0 - sched.alpha_bar(t));
        let inv = 1.0 / libm::sqrt(alpha);
        let sigma = sched.sigma(t);
        let z = if t > 1 && sigma > 0.0 {
            Some(Matrix::randn(c.rows(), c.cols(), rng))
        } else {
            None
        };
        let mut next = c.zip_map(&eps_hat, |x, e| inv * (x - coef * e));
        if let Some(z) = z {
            next.scaled_add_assign(sigma, &z);
        }
        if !next.is_finite() {
            return Err(Error::NonFiniteReverseStep { step: t });
        }
        c = next;
    }
    Ok(c)
}
