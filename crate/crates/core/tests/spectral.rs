//! Eigenvalues of the normalized bipartite adjacency, via nalgebra.

use gtc_core::dataset::{generate_synthetic, SyntheticSpec};
use gtc_core::{seeded_rng, InteractionDataset};
use nalgebra::DMatrix;
use rand::Rng;

fn dense(ds: &InteractionDataset) -> DMatrix<f64> {
    let adj = ds.normalized_adjacency().unwrap();
    let n = adj.matrix().rows();
    DMatrix::from_fn(n, n, |r, c| adj.matrix().get(r, c))
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    assert!((m - m.transpose()).abs().max() < 1e-15, "adjacency must be symmetric");
    m.clone().symmetric_eigenvalues().iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

#[test]
fn random_graphs_have_spectral_radius_at_most_one() {
    for seed in 0..20 {
        let mut rng = seeded_rng(seed, 0);
        let (users, items) = (rng.random_range(2..80), rng.random_range(2..100));
        let pairs: Vec<(usize, usize)> = (0..rng.random_range(1..400))
            .map(|_| (rng.random_range(0..users), rng.random_range(0..items)))
            .collect();
        let ds = InteractionDataset::from_indexed(users, items, &pairs)
            .unwrap()
            .split((1.0, 0.0, 0.0), seed)
            .unwrap();
        let rho = spectral_radius(&dense(&ds));
        assert!(rho <= 1.0 + 1e-12, "seed {seed}: spectral radius {rho}");
    }
}

#[test]
fn connected_bipartite_graph_attains_one() {
    // D^{-1/2} A D^{-1/2} has eigenvalue ±1 on every connected bipartite component.
    let pairs: Vec<(usize, usize)> = (0..6).flat_map(|u| [(u, u), (u, (u + 1) % 6)]).collect();
    let ds = InteractionDataset::from_indexed(6, 6, &pairs).unwrap().split((1.0, 0.0, 0.0), 0).unwrap();
    let rho = spectral_radius(&dense(&ds));
    assert!((rho - 1.0).abs() < 1e-10, "{rho}");
}

#[test]
fn synthetic_graph_under_two_hundred_nodes() {
    let mut spec = SyntheticSpec::new(80, 100, 4, 4, 2, 3);
    spec.interactions_per_user = 6;
    let (ds, _, _) = generate_synthetic(&spec).unwrap();
    let ds = ds.split((0.8, 0.1, 0.1), 3).unwrap();
    let rho = spectral_radius(&dense(&ds));
    assert!(rho <= 1.0 + 1e-12, "{rho}");
}
