//! The full model: parameters, the per-variant training objective and the
//! evaluation-time tables.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::config::{TrainConfig, Variant};
use crate::dataset::{ContentFeatures, Triplet};
use crate::diffusion::{diffuse_and_estimate, reverse_sample, Denoiser, DenoiserSpec, DiffusionSchedule, DENOISER_TENSORS};
use crate::encoder::{encode, init_params, lightgcn_propagate_var, EncoderParams};
use crate::error::{Error, Result};
use crate::fusion::{gated_fuse, gated_fuse_var, total_loss, LossComponents, LossWeights};
use crate::linalg::{CsrMatrix, Matrix};
use crate::tc::{pairwise_loss_var, pairwise_sum_var, random_perms, symmetrized_loss_var};

/// Lower clamp applied to the gate temperature after each update.
pub const MIN_TAU: f64 = 1e-3;

const EVAL_STREAM: u64 = 0xe7a1;
const DENOISER_STREAM: u64 = 0xd1ff;

#[derive(Clone, Debug, PartialEq)]
pub struct GtcModel {
    pub encoder: EncoderParams,
    pub visual_denoiser: Denoiser,
    pub textual_denoiser: Denoiser,
    /// `1 × 1` gate temperature.
    pub tau: Matrix,
}

impl GtcModel {
    pub fn init(cfg: &TrainConfig, n_users: usize, n_items: usize, visual_dim: usize, textual_dim: usize) -> Result<Self> {
        let encoder = init_params(n_users, n_items, cfg.dim, visual_dim, textual_dim, cfg.seed)?;
        let spec = DenoiserSpec {
            dim: cfg.dim,
            hidden: cfg.hidden,
            time_dim: cfg.time_dim,
        };
        let mut rng = crate::seeded_rng(cfg.seed, DENOISER_STREAM);
        let visual_denoiser = Denoiser::new(spec, &mut rng)?;
        let textual_denoiser = Denoiser::new(spec, &mut rng)?;
        if !(cfg.tau_init > 0.0) {
            return Err(Error::InvalidArgument("tau_init must be positive".into()));
        }
        Ok(Self {
            encoder,
            visual_denoiser,
            textual_denoiser,
            tau: Matrix::filled(1, 1, cfg.tau_init),
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau.get(0, 0)
    }

    /// Tensor names in checkpoint order.
    pub fn tensor_names() -> Vec<String> {
        let mut out: Vec<String> = ["user_emb", "item_emb", "w_visual", "w_textual"].iter().map(|s| String::from(*s)).collect();
        for prefix in ["visual", "textual"] {
            out.extend(DENOISER_TENSORS.iter().map(|n| format!("{prefix}.{n}")));
        }
        out.push("tau".into());
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let e = &self.encoder;
        let mut out = alloc::vec![&e.user_emb, &e.item_emb, &e.w_visual, &e.w_textual];
        out.extend(self.visual_denoiser.tensors());
        out.extend(self.textual_denoiser.tensors());
        out.push(&self.tau);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let e = &mut self.encoder;
        let mut out = alloc::vec![&mut e.user_emb, &mut e.item_emb, &mut e.w_visual, &mut e.w_textual];
        out.extend(self.visual_denoiser.tensors_mut());
        out.extend(self.textual_denoiser.tensors_mut());
        out.push(&mut self.tau);
        out
    }

    /// Replaces the named tensor, which must keep its shape.
    pub fn set_tensor(&mut self, name: &str, value: Matrix) -> Result<()> {
        let names = Self::tensor_names();
        let idx = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown tensor `{name}`")))?;
        let mut slots = self.tensors_mut();
        let slot = &mut slots[idx];
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{name}` is {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        **slot = value;
        Ok(())
    }

    /// Rounds every parameter through `f32`, matching the checkpoint payload.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            *t = t.round_to_f32();
        }
    }

    pub fn clamp_tau(&mut self) {
        let t = self.tau.get(0, 0);
        if !(t >= MIN_TAU) {
            self.tau.set(0, 0, MIN_TAU);
        }
    }
}

/// Everything besides parameters that a forward pass needs.
pub struct ModelContext<'a> {
    pub adj: &'a CsrMatrix,
    pub features: &'a ContentFeatures,
    pub schedule: DiffusionSchedule,
    pub variant: Variant,
    pub layers: usize,
    pub weights: LossWeights,
    pub contrast_temp: f64,
    pub tc_batch: usize,
    pub n_users: usize,
}

impl<'a> ModelContext<'a> {
    pub fn new(cfg: &TrainConfig, adj: &'a CsrMatrix, features: &'a ContentFeatures, n_users: usize) -> Result<Self> {
        if adj.rows() != n_users + features.n_items() {
            return Err(Error::ShapeMismatch(format!(
                "adjacency has {} rows, expected {}",
                adj.rows(),
                n_users + features.n_items()
            )));
        }
        Ok(Self {
            adj,
            features,
            schedule: DiffusionSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end)?,
            variant: cfg.variant,
            layers: cfg.layers,
            weights: LossWeights::new(cfg.omega1, cfg.omega2, cfg.lambda)?,
            contrast_temp: cfg.contrast_temp,
            tc_batch: cfg.tc_batch,
            n_users,
        })
    }
}

/// Loss values and parameter gradients of one minibatch.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub components: LossComponents,
    pub total: f64,
    /// Aligned with [`GtcModel::tensors`]; `None` for tensors the variant does not touch.
    pub grads: Vec<Option<Matrix>>,
    /// Rows in the alignment batch.
    pub tc_rows: usize,
}

/// Tape nodes of the objective.
pub struct LossGraph {
    pub params: Vec<Var>,
    pub bpr: Var,
    pub gen: Option<Var>,
    pub con: Option<Var>,
    pub reg: Var,
    pub total: Var,
    pub tc_rows: usize,
}

/// Unique node rows touched by the batch, in first-seen order, and each
/// triplet's `(user, pos, neg)` positions in that list.
fn batch_entities(triplets: &[Triplet], n_users: usize, n_nodes: usize) -> (Vec<usize>, [Vec<usize>; 3]) {
    let mut slot = alloc::vec![usize::MAX; n_nodes];
    let mut nodes = Vec::new();
    let mut local = [Vec::new(), Vec::new(), Vec::new()];
    for t in triplets {
        for (k, node) in [t.user, n_users + t.pos, n_users + t.neg].into_iter().enumerate() {
            if slot[node] == usize::MAX {
                slot[node] = nodes.len();
                nodes.push(node);
            }
            local[k].push(slot[node]);
        }
    }
    (nodes, local)
}

/// Records the training objective for `triplets` on `g`.
pub fn build_loss<'a, R: rand::Rng + ?Sized>(
    g: &mut Graph<'a>,
    model: &GtcModel,
    ctx: &ModelContext<'a>,
    triplets: &[Triplet],
    rng: &mut R,
) -> Result<LossGraph> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("empty triplet batch".into()));
    }
    let variant = ctx.variant;
    let params: Vec<Var> = model.tensors().into_iter().map(|m| g.param(m.clone())).collect();
    let (user_emb, item_emb, w_v, w_t) = (params[0], params[1], params[2], params[3]);
    let vars_of = |offset: usize| crate::diffusion::DenoiserVars {
        w_in: params[offset],
        b_in: params[offset + 1],
        w_time: params[offset + 2],
        w_mid: params[offset + 3],
        b_mid: params[offset + 4],
        w_out: params[offset + 5],
        b_out: params[offset + 6],
    };
    let (vis_vars, txt_vars, tau) = (vars_of(4), vars_of(11), params[18]);

    let n_users = ctx.n_users;
    let n_nodes = ctx.adj.rows();
    let (nodes, local) = batch_entities(triplets, n_users, n_nodes);
    let batch = triplets.len() as f64;

    let inter_in = g.vstack(user_emb, item_emb);
    let s_all = lightgcn_propagate_var(g, ctx.adj, inter_in, ctx.layers);
    let s_b = g.gather_rows(s_all, nodes.clone());

    // Layer-0 rows of the batch triplets.
    let reg_rows: Vec<usize> = triplets.iter().flat_map(|t| [t.user, n_users + t.pos, n_users + t.neg]).collect();
    let item_rows: Vec<usize> = triplets.iter().flat_map(|t| [t.pos, t.neg]).collect();
    let picked = g.gather_rows(inter_in, reg_rows);
    let mut reg = g.sum_squares(picked);

    let channel = |g: &mut Graph<'a>, feats: &Matrix, w: Var, reg: &mut Var| -> Var {
        let f = g.constant(feats.clone());
        let proj = g.matmul(f, w);
        let picked = g.gather_rows(proj, item_rows.clone());
        let sq = g.sum_squares(picked);
        *reg = g.add(*reg, sq);
        let input = g.vstack(user_emb, proj);
        let out = lightgcn_propagate_var(g, ctx.adj, input, ctx.layers);
        g.gather_rows(out, nodes.clone())
    };
    let v_b = variant
        .uses_visual()
        .then(|| channel(g, &ctx.features.visual, w_v, &mut reg));
    let t_b = variant
        .uses_textual()
        .then(|| channel(g, &ctx.features.textual, w_t, &mut reg));
    let reg = g.scale(reg, 1.0 / batch);

    let mut gen = None;
    let mut refine = |g: &mut Graph<'a>, c: Option<Var>, den: &Denoiser, vars, rng: &mut R| -> Option<Var> {
        let c = c?;
        if !variant.uses_diffusion() {
            return Some(c);
        }
        let terms = diffuse_and_estimate(g, den, &vars, c, s_b, &ctx.schedule, rng);
        gen = Some(match gen {
            None => terms.loss,
            Some(prev) => g.add(prev, terms.loss),
        });
        Some(terms.x0_hat)
    };
    let v_bar = refine(g, v_b, &model.visual_denoiser, vis_vars, rng);
    let t_bar = refine(g, t_b, &model.textual_denoiser, txt_vars, rng);

    let fused = match (variant, v_bar, t_bar) {
        (Variant::InterOnly, _, _) => s_b,
        (Variant::Base, Some(v), Some(t)) => {
            let vt = g.hstack(v, t);
            g.hstack(s_b, vt)
        }
        (_, Some(v), Some(t)) => {
            let content = g.hadamard(v, t);
            gated_fuse_var(g, s_b, content, tau)
        }
        (_, Some(c), None) | (_, None, Some(c)) => gated_fuse_var(g, s_b, c, tau),
        (_, None, None) => s_b,
    };

    let uf = g.gather_rows(fused, local[0].clone());
    let pf = g.gather_rows(fused, local[1].clone());
    let nf = g.gather_rows(fused, local[2].clone());
    let sp = g.row_dot(uf, pf);
    let sn = g.row_dot(uf, nf);
    let margin = g.sub(sp, sn);
    let bpr = g.neg_log_sigmoid_mean(margin);

    let m = nodes.len().min(ctx.tc_batch);
    let mut con = None;
    if m >= 2 && variant != Variant::Base && variant != Variant::BaseDn && variant != Variant::InterOnly {
        let head: Vec<usize> = (0..m).collect();
        let norm_rows = |g: &mut Graph<'a>, x: Var| {
            let h = g.gather_rows(x, head.clone());
            g.row_normalize(h)
        };
        let s_n = norm_rows(g, s_b);
        let v_n = v_bar.map(|v| norm_rows(g, v));
        let t_n = t_bar.map(|t| norm_rows(g, t));
        let perms = random_perms(m, rng);
        let temp = ctx.contrast_temp;
        con = Some(match (variant, v_n, t_n) {
            (Variant::WoTc, Some(v), Some(t)) => pairwise_sum_var(g, s_n, v, t, &perms, temp),
            (_, Some(v), Some(t)) => symmetrized_loss_var(g, s_n, v, t, &perms, temp),
            (_, Some(c), None) | (_, None, Some(c)) => pairwise_loss_var(g, s_n, c, &perms[0][0], temp),
            (_, None, None) => unreachable!("variants without content have no alignment loss"),
        });
    }

    let w = ctx.weights;
    let mut total = bpr;
    if let Some(x) = gen {
        let s = g.scale(x, w.omega1);
        total = g.add(total, s);
    }
    if let Some(x) = con {
        let s = g.scale(x, w.omega2);
        total = g.add(total, s);
    }
    let r = g.scale(reg, w.lambda);
    let total = g.add(total, r);
    Ok(LossGraph {
        params,
        bpr,
        gen,
        con,
        reg,
        total,
        tc_rows: if con.is_some() { m } else { 0 },
    })
}

/// Forward and backward pass on one minibatch.
pub fn training_step<R: rand::Rng + ?Sized>(
    model: &GtcModel,
    ctx: &ModelContext<'_>,
    triplets: &[Triplet],
    rng: &mut R,
) -> Result<StepResult> {
    let mut g = Graph::new();
    let lg = build_loss(&mut g, model, ctx, triplets, rng)?;
    let components = LossComponents {
        bpr: g.scalar(lg.bpr),
        gen: lg.gen.map_or(0.0, |v| g.scalar(v)),
        con: lg.con.map_or(0.0, |v| g.scalar(v)),
        reg: g.scalar(lg.reg),
    };
    let total = total_loss(&components, &ctx.weights)?;
    let mut grads = g.backward(lg.total);
    Ok(StepResult {
        components,
        total,
        grads: lg.params.iter().map(|&p| grads.take(p)).collect(),
        tc_rows: lg.tc_rows,
    })
}

/// Full-table representations used for ranking and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalState {
    pub s: Matrix,
    pub v: Matrix,
    pub t: Matrix,
    pub v_bar: Matrix,
    pub t_bar: Matrix,
    /// Rows used for scoring (`n_nodes × d`, or `× 3d` for concatenation).
    pub scoring: Matrix,
    /// `n_nodes × d` fused rows for the diagnostics.
    pub fused: Matrix,
    pub n_users: usize,
}

impl EvalState {
    pub fn user_rows(&self) -> Matrix {
        self.scoring.slice_rows(0, self.n_users)
    }

    pub fn item_rows(&self) -> Matrix {
        self.scoring.slice_rows(self.n_users, self.scoring.rows())
    }

    /// Scores of `user` against every item.
    pub fn item_scores(&self, user: usize) -> Vec<f64> {
        let u = self.scoring.row(user);
        (self.n_users..self.scoring.rows())
            .map(|r| crate::linalg::dot(u, self.scoring.row(r)))
            .collect()
    }
}

/// Encodes all nodes and generates the refined content tables by ancestral
/// sampling with a fixed seed, so repeated calls agree exactly.
pub fn eval_state(model: &GtcModel, ctx: &ModelContext<'_>, seed: u64) -> Result<EvalState> {
    let variant = ctx.variant;
    let ch = encode(ctx.adj, &model.encoder, ctx.features, ctx.layers)?;
    let (n_rows, dim) = ch.interaction.shape();
    let zeros = || Matrix::zeros(n_rows, dim);
    let mut rng = crate::seeded_rng(seed, EVAL_STREAM);
    let mut refine = |c: &Matrix, den: &Denoiser, used: bool| -> Result<Matrix> {
        if !used {
            Ok(zeros())
        } else if variant.uses_diffusion() {
            reverse_sample(den, &ch.interaction, &ctx.schedule, &mut rng)
        } else {
            Ok(c.clone())
        }
    };
    let v_bar = refine(&ch.visual, &model.visual_denoiser, variant.uses_visual())?;
    let t_bar = refine(&ch.textual, &model.textual_denoiser, variant.uses_textual())?;
    let s = ch.interaction;
    let (scoring, fused) = match variant {
        Variant::InterOnly => (s.clone(), s.clone()),
        Variant::Base => (s.hstack(&v_bar).hstack(&t_bar), s.clone()),
        _ => {
            let content = match (variant.uses_visual(), variant.uses_textual()) {
                (true, true) => v_bar.hadamard(&t_bar),
                (true, false) => v_bar.clone(),
                _ => t_bar.clone(),
            };
            let f = gated_fuse(&s, &content, model.tau())?.fused;
            (f.clone(), f)
        }
    };
    let (v, t) = (
        if variant.uses_visual() { ch.visual } else { zeros() },
        if variant.uses_textual() { ch.textual } else { zeros() },
    );
    Ok(EvalState {
        s,
        v,
        t,
        v_bar,
        t_bar,
        scoring,
        fused,
        n_users: ctx.n_users,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::NormalizedAdjacency;

    fn micro_cfg(variant: Variant) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.dim = 4;
        c.steps = 5;
        c.hidden = 6;
        c.time_dim = 4;
        c.layers = 2;
        c.variant = variant;
        c
    }

    fn micro() -> (NormalizedAdjacency, ContentFeatures) {
        let adj = NormalizedAdjacency::from_edges(3, 3, &[(0, 0), (0, 1), (1, 1), (2, 2), (1, 2)]);
        let mut rng = crate::seeded_rng(3, 3);
        let f = ContentFeatures::new(Matrix::randn(3, 5, &mut rng), Matrix::randn(3, 2, &mut rng), 3).unwrap();
        (adj, f)
    }

    #[test]
    fn tensor_names_align_with_tensors() {
        let m = GtcModel::init(&micro_cfg(Variant::Full), 3, 3, 5, 2).unwrap();
        assert_eq!(GtcModel::tensor_names().len(), m.tensors().len());
        assert_eq!(GtcModel::tensor_names()[18], "tau");
        let mut m2 = m.clone();
        m2.set_tensor("tau", Matrix::filled(1, 1, 0.5)).unwrap();
        assert_eq!(m2.tau(), 0.5);
        assert!(m2.set_tensor("tau", Matrix::zeros(2, 1)).is_err());
        assert!(m2.set_tensor("nope", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn every_variant_steps_with_finite_losses() {
        let (adj, f) = micro();
        let tr = [Triplet { user: 0, pos: 0, neg: 2 }, Triplet { user: 1, pos: 2, neg: 0 }];
        for v in Variant::ALL {
            let cfg = micro_cfg(v);
            let m = GtcModel::init(&cfg, 3, 3, 5, 2).unwrap();
            let ctx = ModelContext::new(&cfg, adj.matrix(), &f, 3).unwrap();
            let out = training_step(&m, &ctx, &tr, &mut crate::seeded_rng(0, 0)).unwrap();
            assert!(out.total.is_finite(), "{v}");
            assert_eq!(out.components.gen > 0.0, v.uses_diffusion(), "{v}");
            let has_con = matches!(v, Variant::Full | Variant::BaseTc | Variant::WoTc | Variant::WoVisual | Variant::WoTextual);
            assert_eq!(out.components.con > 0.0, has_con, "{v}");
            // Denoiser gradients only when diffusion is on.
            assert_eq!(out.grads[4].is_some(), v.uses_diffusion() && v.uses_visual(), "{v}");
            let st = eval_state(&m, &ctx, 1).unwrap();
            assert_eq!(st.item_scores(0).len(), 3);
        }
    }

    #[test]
    fn zero_content_reproduces_plain_lightgcn_scores() {
        let (adj, f) = micro();
        let cfg = micro_cfg(Variant::InterOnly);
        let m = GtcModel::init(&cfg, 3, 3, 5, 2).unwrap();
        let ctx = ModelContext::new(&cfg, adj.matrix(), &f, 3).unwrap();
        let st = eval_state(&m, &ctx, 0).unwrap();
        let plain = crate::encoder::lightgcn_propagate(adj.matrix(), &m.encoder.user_emb.vstack(&m.encoder.item_emb), 2);
        assert_eq!(st.scoring, plain);
        let gated = gated_fuse(&plain, &Matrix::zeros(6, 4), m.tau()).unwrap();
        assert_eq!(gated.fused, plain);
    }

    #[test]
    fn eval_state_is_deterministic_per_seed() {
        let (adj, f) = micro();
        let cfg = micro_cfg(Variant::Full);
        let m = GtcModel::init(&cfg, 3, 3, 5, 2).unwrap();
        let ctx = ModelContext::new(&cfg, adj.matrix(), &f, 3).unwrap();
        assert_eq!(eval_state(&m, &ctx, 4).unwrap(), eval_state(&m, &ctx, 4).unwrap());
    }

    #[test]
    fn tau_is_clamped() {
        let mut m = GtcModel::init(&micro_cfg(Variant::Full), 3, 3, 5, 2).unwrap();
        m.tau.set(0, 0, -2.0);
        m.clamp_tau();
        assert_eq!(m.tau(), MIN_TAU);
    }
}
