//! Minibatch training with periodic validation and early stopping.

use alloc::vec::Vec;

use crate::config::{TrainConfig, Variant};
use crate::dataset::{BprSampler, ContentFeatures, InteractionDataset, SplitTag};
use crate::error::{Error, Result};
use crate::eval::{consistency_trace, evaluate_rankings, modality_balance_score, RankingEvaluation};
use crate::model::{eval_state, training_step, EvalState, GtcModel, ModelContext};
use crate::optim::Adam;
use crate::tc::tc_lower_bound;

const SAMPLER_STREAM: u64 = 0x7a1;
const STEP_STREAM: u64 = 0x57e9;

/// Cutoff used for early stopping.
pub const VALIDATION_K: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub val_ndcg: f64,
    pub balance: f64,
    /// Mean `S̄·S`, `S̄·V̄`, `S̄·T̄` over test users.
    pub consistency: [f64; 3],
}

/// Epoch means of the loss components plus any evaluation done that epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub bpr: f64,
    pub gen: f64,
    pub con: f64,
    pub reg: f64,
    pub total: f64,
    /// `log N − L_CON / 3`, only for variants trained with the total-correlation loss.
    pub tc_bound: Option<f64>,
    pub eval: Option<EvalRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best validation checkpoint, rounded through `f32`.
    pub model: GtcModel,
    pub trace: Vec<EpochRecord>,
    /// Epoch of the kept parameters, 0 when none was evaluated.
    pub best_epoch: usize,
    /// Test metrics of [`TrainOutcome::model`] at `cfg.k_list`.
    pub test: RankingEvaluation,
}

pub fn train(cfg: &TrainConfig, dataset: &InteractionDataset, features: &ContentFeatures) -> Result<TrainOutcome> {
    train_with(cfg, dataset, features, &mut |_| {})
}

/// Users with at least one item under `tag`.
pub fn users_with(dataset: &InteractionDataset, tag: SplitTag) -> Vec<usize> {
    dataset
        .user_items(tag)
        .iter()
        .enumerate()
        .filter(|(_, items)| !items.is_empty())
        .map(|(u, _)| u)
        .collect()
}

fn uses_tc_loss(v: Variant) -> bool {
    matches!(v, Variant::Full | Variant::BaseTc)
}

/// Ranking metrics of a prepared state on `tag`, masking train items.
pub fn rank_split(state: &EvalState, dataset: &InteractionDataset, tag: SplitTag, k_list: &[usize]) -> Result<RankingEvaluation> {
    let exclude = dataset.user_items(SplitTag::Train);
    let relevant = dataset.user_items(tag);
    evaluate_rankings(&state.user_rows(), &state.item_rows(), &exclude, &relevant, k_list)
}

/// Test metrics of `model` under `cfg`, as reported at the end of training.
pub fn evaluate_model(
    model: &GtcModel,
    cfg: &TrainConfig,
    dataset: &InteractionDataset,
    features: &ContentFeatures,
    tag: SplitTag,
) -> Result<RankingEvaluation> {
    let adj = dataset.normalized_adjacency()?;
    let ctx = ModelContext::new(cfg, adj.matrix(), features, dataset.n_users())?;
    let state = eval_state(model, &ctx, cfg.seed)?;
    rank_split(&state, dataset, tag, &cfg.k_list)
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    cfg: &TrainConfig,
    dataset: &InteractionDataset,
    features: &ContentFeatures,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.split_labels().is_none() {
        return Err(Error::InvalidArgument("dataset has no train/val/test split".into()));
    }
    let adj = dataset.normalized_adjacency()?;
    let ctx = ModelContext::new(cfg, adj.matrix(), features, dataset.n_users())?;
    let sampler = BprSampler::new(dataset)?;
    let mut model = GtcModel::init(
        cfg,
        dataset.n_users(),
        dataset.n_items(),
        features.visual_dim(),
        features.textual_dim(),
    )?;
    let shapes: Vec<(usize, usize)> = model.tensors().iter().map(|t| t.shape()).collect();
    let mut opt = Adam::new(cfg.lr, &shapes);
    let mut sample_rng = crate::seeded_rng(cfg.seed, SAMPLER_STREAM);
    let mut step_rng = crate::seeded_rng(cfg.seed, STEP_STREAM);
    let test_users = users_with(dataset, SplitTag::Test);
    let has_val = !users_with(dataset, SplitTag::Val).is_empty();
    let n_batches = sampler.n_train().div_ceil(cfg.batch_size);

    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, GtcModel)> = None;
    let mut since_best = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0f64; 5];
        let mut bound_sum = 0.0;
        for _ in 0..n_batches {
            let triplets = sampler.sample(cfg.batch_size, &mut sample_rng)?;
            let step = training_step(&model, &ctx, &triplets, &mut step_rng).map_err(|e| match e {
                Error::NonFiniteLoss { component } => Error::Diverged { epoch, component },
                other => other,
            })?;
            let c = step.components;
            for (s, v) in sums.iter_mut().zip([c.bpr, c.gen, c.con, c.reg, step.total]) {
                *s += v;
            }
            if step.tc_rows >= 2 {
                bound_sum += tc_lower_bound(c.con / 3.0, step.tc_rows);
            }
            let mut params = model.tensors_mut();
            opt.step(&mut params, &step.grads);
            model.clamp_tau();
            if model.tensors().iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged { epoch, component: "parameters" });
            }
        }
        let nb = n_batches as f64;
        let mut record = EpochRecord {
            epoch,
            bpr: sums[0] / nb,
            gen: sums[1] / nb,
            con: sums[2] / nb,
            reg: sums[3] / nb,
            total: sums[4] / nb,
            tc_bound: uses_tc_loss(cfg.variant).then_some(bound_sum / nb),
            eval: None,
        };
        let mut stop = false;
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let state = eval_state(&model, &ctx, cfg.seed).map_err(|e| match e {
                Error::NonFiniteReverseStep { .. } => Error::Diverged { epoch, component: "generation" },
                other => other,
            })?;
            let val_ndcg = rank_split(&state, dataset, SplitTag::Val, &[VALIDATION_K])?.ndcg(VALIDATION_K);
            let channels = [&state.s, &state.v_bar, &state.t_bar];
            record.eval = Some(EvalRecord {
                val_ndcg,
                balance: modality_balance_score(&state.fused, channels, &test_users),
                consistency: consistency_trace(&state.fused, channels, &test_users),
            });
            let improved = !has_val || best.as_ref().is_none_or(|(b, _, _)| val_ndcg > *b);
            if improved {
                best = Some((val_ndcg, epoch, model.clone()));
                since_best = 0;
            } else {
                since_best += cfg.eval_every;
                stop = since_best >= cfg.patience;
            }
        }
        observer(&record);
        trace.push(record);
        if stop {
            break;
        }
    }

    let (best_epoch, mut model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    model.round_to_f32();
    let state = eval_state(&model, &ctx, cfg.seed)?;
    let test = rank_split(&state, dataset, SplitTag::Test, &cfg.k_list)?;
    Ok(TrainOutcome {
        model,
        trace,
        best_epoch,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    fn tiny() -> (TrainConfig, InteractionDataset, ContentFeatures) {
        let spec = SyntheticSpec::new(40, 30, 6, 5, 2, 1);
        let (ds, f, _) = generate_synthetic(&spec).unwrap();
        let ds = ds.split((0.8, 0.1, 0.1), 1).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.dim = 8;
        cfg.steps = 10;
        cfg.hidden = 16;
        cfg.time_dim = 8;
        cfg.batch_size = 256;
        cfg.tc_batch = 32;
        cfg.epochs = 3;
        cfg.k_list = alloc::vec![5, 10];
        (cfg, ds, f)
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let (mut cfg, ds, f) = tiny();
        cfg.epochs = 0;
        let out = train(&cfg, &ds, &f).unwrap();
        assert!(out.trace.is_empty());
        let mut init = GtcModel::init(&cfg, ds.n_users(), ds.n_items(), 6, 5).unwrap();
        init.round_to_f32();
        assert_eq!(out.model, init);
    }

    #[test]
    fn trace_and_determinism() {
        let (cfg, ds, f) = tiny();
        let a = train(&cfg, &ds, &f).unwrap();
        let b = train(&cfg, &ds, &f).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.test, b.test);
        assert_eq!(a.trace.len(), 3);
        assert!(a.trace.iter().all(|r| r.eval.is_some() && r.tc_bound.is_some()));
        let again = evaluate_model(&a.model, &cfg, &ds, &f, SplitTag::Test).unwrap();
        assert_eq!(again, a.test);
    }

    #[test]
    fn unsplit_dataset_is_rejected() {
        let (cfg, _, f) = tiny();
        let (raw, _, _) = generate_synthetic(&SyntheticSpec::new(40, 30, 6, 5, 2, 1)).unwrap();
        assert!(train(&cfg, &raw, &f).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (mut cfg, ds, f) = tiny();
        cfg.lr = 1e300;
        cfg.epochs = 5;
        match train(&cfg, &ds, &f) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.trace.len())),
        }
    }
}
