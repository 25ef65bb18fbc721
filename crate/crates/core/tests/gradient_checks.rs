//! Central finite differences against the tape gradients.

use gtc_core::autodiff::Graph;
use gtc_core::dataset::{ContentFeatures, InteractionDataset, Triplet};
use gtc_core::diffusion::{diffuse_and_estimate, generation_loss, Denoiser, DenoiserSpec, DiffusionSchedule};
use gtc_core::encoder::{lightgcn_propagate, lightgcn_propagate_var};
use gtc_core::model::{training_step, GtcModel, ModelContext};
use gtc_core::tc::{random_perms, symmetrized_loss_var, symmetrized_tc_loss_with, TriModalBatch};
use gtc_core::{seeded_rng, Matrix, TrainConfig, Variant};

const H: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute gap when both are tiny.
fn rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = analytic.sub(numeric).squared_norm().sqrt();
    let scale = analytic.squared_norm().sqrt().max(numeric.squared_norm().sqrt());
    if scale < 1e-9 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_grad(x: &Matrix, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.as_slice().len() {
        let base = probe.as_slice()[k];
        probe.as_mut_slice()[k] = base + H;
        let up = f(&probe);
        probe.as_mut_slice()[k] = base - H;
        let down = f(&probe);
        probe.as_mut_slice()[k] = base;
        out.as_mut_slice()[k] = (up - down) / (2.0 * H);
    }
    out
}

struct Micro {
    cfg: TrainConfig,
    ds: InteractionDataset,
    features: ContentFeatures,
    triplets: Vec<Triplet>,
}

fn micro(variant: Variant) -> Micro {
    let ds = InteractionDataset::from_indexed(3, 3, &[(0, 0), (1, 1), (2, 2), (0, 2)])
        .unwrap()
        .split((1.0, 0.0, 0.0), 0)
        .unwrap();
    let mut rng = seeded_rng(17, 0);
    let features = ContentFeatures::new(Matrix::randn(3, 3, &mut rng), Matrix::randn(3, 2, &mut rng), 3).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.dim = 4;
    cfg.steps = 5;
    cfg.hidden = 5;
    cfg.time_dim = 4;
    cfg.tau_init = 0.7;
    cfg.variant = variant;
    let triplets = vec![
        Triplet { user: 0, pos: 0, neg: 1 },
        Triplet { user: 1, pos: 1, neg: 2 },
        Triplet { user: 2, pos: 2, neg: 0 },
    ];
    Micro { cfg, ds, features, triplets }
}

fn check_model_gradients(variant: Variant) {
    let m = micro(variant);
    let adj = m.ds.normalized_adjacency().unwrap();
    let ctx = ModelContext::new(&m.cfg, adj.matrix(), &m.features, 3).unwrap();
    let mut model = GtcModel::init(&m.cfg, 3, 3, 3, 2).unwrap();
    // Move the non-random initial biases and embeddings off special points.
    let mut rng = seeded_rng(23, 0);
    for t in model.tensors_mut() {
        let noise = Matrix::randn(t.rows(), t.cols(), &mut rng).scale(0.1);
        t.add_assign(&noise);
    }
    model.clamp_tau();
    let loss = |model: &GtcModel| {
        let mut rng = seeded_rng(5, 1);
        training_step(model, &ctx, &m.triplets, &mut rng).unwrap().total
    };
    let step = training_step(&model, &ctx, &m.triplets, &mut seeded_rng(5, 1)).unwrap();
    let names = GtcModel::tensor_names();
    let mut touched = 0;
    for (k, name) in names.iter().enumerate() {
        let Some(analytic) = &step.grads[k] else { continue };
        touched += 1;
        let current = model.tensors()[k].clone();
        let numeric = numeric_grad(&current, |x| {
            let mut probe = model.clone();
            probe.set_tensor(name, x.clone()).unwrap();
            loss(&probe)
        });
        let e = rel_err(analytic, &numeric);
        assert!(e < 1e-3, "{variant}: {name} relative error {e:e}");
    }
    if variant == Variant::Full {
        assert_eq!(touched, names.len(), "full model must reach every tensor");
    }
}

#[test]
fn full_model_every_parameter_group() {
    check_model_gradients(Variant::Full);
}

#[test]
fn other_variants_parameter_groups() {
    for v in [Variant::Base, Variant::BaseDn, Variant::BaseTc, Variant::WoTc, Variant::WoVisual] {
        check_model_gradients(v);
    }
}

#[test]
fn symmetrized_alignment_loss() {
    let mut rng = seeded_rng(31, 0);
    let batch = TriModalBatch::new(
        Matrix::randn(4, 3, &mut rng),
        Matrix::randn(4, 3, &mut rng),
        Matrix::randn(4, 3, &mut rng),
    )
    .unwrap();
    let perms = random_perms(4, &mut rng);
    let temp = 0.5;
    let mut g = Graph::new();
    let (s, v, t) = (g.param(batch.s.clone()), g.param(batch.v.clone()), g.param(batch.t.clone()));
    let (sn, vn, tn) = (g.row_normalize(s), g.row_normalize(v), g.row_normalize(t));
    let loss = symmetrized_loss_var(&mut g, sn, vn, tn, &perms, temp);
    let grads = g.backward(loss);
    let tables = [&batch.s, &batch.v, &batch.t];
    for (k, var) in [s, v, t].into_iter().enumerate() {
        let numeric = numeric_grad(tables[k], |x| {
            let mut b = batch.clone();
            *[&mut b.s, &mut b.v, &mut b.t][k] = x.clone();
            symmetrized_tc_loss_with(&b, &perms, temp).unwrap()
        });
        let e = rel_err(grads.get(var).unwrap(), &numeric);
        assert!(e < 1e-4, "table {k}: relative error {e:e}");
    }
}

#[test]
fn generation_loss_denoiser_weights() {
    let spec = DenoiserSpec { dim: 3, hidden: 6, time_dim: 4 };
    let mut rng = seeded_rng(41, 0);
    let den = Denoiser::new(spec, &mut rng).unwrap();
    let c0 = Matrix::randn(5, 3, &mut rng);
    let cond = Matrix::randn(5, 3, &mut rng);
    let sched = DiffusionSchedule::linear(20, 1e-4, 0.02).unwrap();

    let mut g = Graph::new();
    let vars = den.bind(&mut g, true);
    let (c, s) = (g.constant(c0.clone()), g.constant(cond.clone()));
    let terms = diffuse_and_estimate(&mut g, &den, &vars, c, s, &sched, &mut seeded_rng(3, 3));
    let grads = g.backward(terms.loss);
    for (k, var) in vars.all().into_iter().enumerate() {
        let numeric = numeric_grad(den.tensors()[k], |x| {
            let mut probe = den.clone();
            *probe.tensors_mut()[k] = x.clone();
            generation_loss(&probe, &c0, &cond, &sched, &mut seeded_rng(3, 3)).unwrap()
        });
        let e = rel_err(grads.get(var).unwrap(), &numeric);
        assert!(e < 1e-4, "denoiser tensor {k}: relative error {e:e}");
    }
}

#[test]
fn lightgcn_propagation() {
    let ds = InteractionDataset::from_indexed(3, 4, &[(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (2, 0)])
        .unwrap()
        .split((1.0, 0.0, 0.0), 0)
        .unwrap();
    let adj = ds.normalized_adjacency().unwrap();
    let x = Matrix::randn(7, 2, &mut seeded_rng(5, 0));
    let w = Matrix::randn(7, 2, &mut seeded_rng(6, 0));
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = lightgcn_propagate_var(&mut g, adj.matrix(), xv, 3);
    let wv = g.constant(w.clone());
    let prod = g.hadamard(out, wv);
    let loss = g.sum_squares(prod);
    let grads = g.backward(loss);
    let numeric = numeric_grad(&x, |p| lightgcn_propagate(adj.matrix(), p, 3).hadamard(&w).squared_norm());
    let e = rel_err(grads.get(xv).unwrap(), &numeric);
    assert!(e < 1e-6, "relative error {e:e}");
}
