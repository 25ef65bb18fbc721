//! Embedding tables and the three parallel LightGCN channels.
//!
//! Users have no content, so the visual and textual channels reuse the user
//! rows of the interaction channel and only differ on item rows, where the
//! raw features are projected to `d` by a bias-free linear map.

use alloc::format;

use crate::autodiff::{Graph, Var};
use crate::dataset::ContentFeatures;
use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, Matrix};

/// Xavier-uniform bound `√(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `n_users × d`
    pub user_emb: Matrix,
    /// `n_items × d`
    pub item_emb: Matrix,
    /// `d_v × d`
    pub w_visual: Matrix,
    /// `d_t × d`
    pub w_textual: Matrix,
}

impl EncoderParams {
    pub fn dim(&self) -> usize {
        self.user_emb.cols()
    }

    pub fn n_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_emb.rows()
    }
}

/// Xavier-uniform tables. Embedding tables use `fan_in = fan_out = d`.
pub fn init_params(
    n_users: usize,
    n_items: usize,
    dim: usize,
    visual_dim: usize,
    textual_dim: usize,
    seed: u64,
) -> Result<EncoderParams> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
    }
    let mut rng = crate::seeded_rng(seed, 0xe1c0);
    let emb = xavier_bound(dim, dim);
    Ok(EncoderParams {
        user_emb: Matrix::uniform(n_users, dim, emb, &mut rng),
        item_emb: Matrix::uniform(n_items, dim, emb, &mut rng),
        w_visual: Matrix::uniform(visual_dim, dim, xavier_bound(visual_dim, dim), &mut rng),
        w_textual: Matrix::uniform(textual_dim, dim, xavier_bound(textual_dim, dim), &mut rng),
    })
}

/// Stacked `(n_users + n_items) × d` inputs of the three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalInputs {
    pub interaction: Matrix,
    pub visual: Matrix,
    pub textual: Matrix,
}

fn check_shapes(params: &EncoderParams, features: &ContentFeatures) -> Result<()> {
    let checks = [
        ("visual rows", features.visual.rows(), params.n_items()),
        ("textual rows", features.textual.rows(), params.n_items()),
        ("visual width", features.visual.cols(), params.w_visual.rows()),
        ("textual width", features.textual.cols(), params.w_textual.rows()),
        ("item table width", params.item_emb.cols(), params.dim()),
        ("visual projection", params.w_visual.cols(), params.dim()),
        ("textual projection", params.w_textual.cols(), params.dim()),
    ];
    for (what, got, want) in checks {
        if got != want {
            return Err(Error::ShapeMismatch(format!("{what}: {got} vs {want}")));
        }
    }
    Ok(())
}

pub fn assemble_modal_inputs(params: &EncoderParams, features: &ContentFeatures) -> Result<ModalInputs> {
    check_shapes(params, features)?;
    let users = &params.user_emb;
    Ok(ModalInputs {
        interaction: users.vstack(&params.item_emb),
        visual: users.vstack(&features.visual.matmul(&params.w_visual)),
        textual: users.vstack(&features.textual.matmul(&params.w_textual)),
    })
}

/// Layer-mean LightGCN readout: `mean(X, ĀX, …, ĀᴸX)`.
pub fn lightgcn_propagate(adj: &CsrMatrix, x: &Matrix, layers: usize) -> Matrix {
    assert_eq!(adj.cols(), x.rows(), "adjacency does not match input rows");
    let mut acc = x.clone();
    let mut cur = x.clone();
    for _ in 0..layers {
        cur = adj.mul_dense(&cur);
        acc.add_assign(&cur);
    }
    acc.scale(1.0 / (layers + 1) as f64)
}

/// [`lightgcn_propagate`] recorded on a tape.
pub fn lightgcn_propagate_var<'a>(g: &mut Graph<'a>, adj: &'a CsrMatrix, x: Var, layers: usize) -> Var {
    let mut acc = x;
    let mut cur = x;
    for _ in 0..layers {
        cur = g.spmm(adj, cur);
        acc = g.add(acc, cur);
    }
    if layers == 0 {
        acc
    } else {
        g.scale(acc, 1.0 / (layers + 1) as f64)
    }
}

/// Channel outputs `(S, V, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelOutputs {
    pub interaction: Matrix,
    pub visual: Matrix,
    pub textual: Matrix,
}

pub fn encode(
    adj: &CsrMatrix,
    params: &EncoderParams,
    features: &ContentFeatures,
    layers: usize,
) -> Result<ChannelOutputs> {
    let inputs = assemble_modal_inputs(params, features)?;
    Ok(ChannelOutputs {
        interaction: lightgcn_propagate(adj, &inputs.interaction, layers),
        visual: lightgcn_propagate(adj, &inputs.visual, layers),
        textual: lightgcn_propagate(adj, &inputs.textual, layers),
    })
}
