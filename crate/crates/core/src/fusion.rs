//! Similarity-gated residual fusion, scoring, BPR and the composite objective.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::dataset::Triplet;
use crate::error::{Error, Result};
use crate::linalg::{cosine, dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Generation weight `ω₁`.
    pub omega1: f64,
    /// Alignment weight `ω₂`.
    pub omega2: f64,
    /// Coefficient on the squared parameter norm.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            omega1: 0.6,
            omega2: 0.6,
            lambda: 0.01,
        }
    }
}

impl LossWeights {
    pub fn new(omega1: f64, omega2: f64, lambda: f64) -> Result<Self> {
        for (name, v) in [("omega1", omega1), ("omega2", omega2), ("lambda", lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be a finite non-negative number")));
            }
        }
        Ok(Self { omega1, omega2, lambda })
    }
}

/// Unweighted loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub bpr: f64,
    pub gen: f64,
    pub con: f64,
    /// Squared parameter norm, before `λ`.
    pub reg: f64,
}

/// `L_BPR + ω₁·L_GEN + ω₂·L_CON + λ·‖Θ‖²`, failing on the first non-finite component.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (component, v) in [("bpr", c.bpr), ("generation", c.gen), ("alignment", c.con), ("regularization", c.reg)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { component });
        }
    }
    Ok(c.bpr + w.omega1 * c.gen + w.omega2 * c.con + w.lambda * c.reg)
}

/// `V̄ ⊙ T̄`
pub fn fuse_content(v: &Matrix, t: &Matrix) -> Result<Matrix> {
    if v.shape() != t.shape() {
        return Err(Error::ShapeMismatch(format!(
            "content tables {:?} and {:?}",
            v.shape(),
            t.shape()
        )));
    }
    Ok(v.hadamard(t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedState {
    /// `S̄ = S + α ⊙ C̄_f`
    pub fused: Matrix,
    /// Gate per row.
    pub gates: Vec<f64>,
}

/// Gate `α = σ(cos(S_row, C_row) / τ)`, zero when either row has zero norm.
pub fn gate(s_row: &[f64], c_row: &[f64], tau: f64) -> f64 {
    let na = crate::linalg::norm(s_row);
    let nb = crate::linalg::norm(c_row);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let x = cosine(s_row, c_row) / tau;
    1.0 / (1.0 + libm::exp(-x))
}

pub fn gated_fuse(s: &Matrix, content: &Matrix, tau: f64) -> Result<FusedState> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("gate temperature must be positive, got {tau}")));
    }
    if s.shape() != content.shape() {
        return Err(Error::ShapeMismatch(format!(
            "interaction table {:?} vs content {:?}",
            s.shape(),
            content.shape()
        )));
    }
    let mut fused = s.clone();
    let mut gates = Vec::with_capacity(s.rows());
    for r in 0..s.rows() {
        let a = gate(s.row(r), content.row(r), tau);
        gates.push(a);
        crate::linalg::axpy(a, content.row(r), fused.row_mut(r));
    }
    Ok(FusedState { fused, gates })
}

/// Tape version of [`gated_fuse`]; `tau` is a `1 × 1` node.
pub fn gated_fuse_var(g: &mut Graph<'_>, s: Var, content: Var, tau: Var) -> Var {
    let cos = g.row_cosine(s, content);
    let logits = g.div_scalar(cos, tau);
    // row_cosine is 0 for degenerate rows; force their gate to 0 as well.
    let mask: Vec<f64> = {
        let (sv, cv) = (g.value(s), g.value(content));
        (0..sv.rows())
            .map(|r| {
                let live = crate::linalg::norm(sv.row(r)) > 0.0 && crate::linalg::norm(cv.row(r)) > 0.0;
                if live { 1.0 } else { 0.0 }
            })
            .collect()
    };
    let alpha = g.sigmoid(logits);
    let alpha = g.scale_rows(alpha, mask);
    let contribution = g.mul_col(content, alpha);
    g.add(s, contribution)
}

/// `S̄_u · S̄_i`
pub fn score(user_row: &[f64], item_row: &[f64]) -> f64 {
    dot(user_row, item_row)
}

/// Mean `-log σ(s(u,i⁺) - s(u,i⁻))`; item indices are rows `n_users + i` of `fused`.
pub fn bpr_loss(triplets: &[Triplet], fused: &Matrix, n_users: usize) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("empty triplet batch".into()));
    }
    let total: f64 = triplets
        .iter()
        .map(|t| {
            let u = fused.row(t.user);
            let margin = score(u, fused.row(n_users + t.pos)) - score(u, fused.row(n_users + t.neg));
            bpr_term(margin)
        })
        .sum();
    Ok(total / triplets.len() as f64)
}

/// `-log σ(margin)`
pub fn bpr_term(margin: f64) -> f64 {
    if margin >= 0.0 {
        libm::log1p(libm::exp(-margin))
    } else {
        -margin + libm::log1p(libm::exp(margin))
    }
}
