//! Interaction data: k-core filtering, per-user splits, the normalized
//! bipartite adjacency, BPR triplet sampling and item content features.

mod synthetic;

pub use synthetic::{generate_synthetic, GroundTruth, SyntheticSpec};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitTag::Train),
            "val" => Some(SplitTag::Val),
            "test" => Some(SplitTag::Test),
            _ => None,
        }
    }
}

/// Users, items and deduplicated `(user, item)` interactions with optional split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    n_users: usize,
    n_items: usize,
    interactions: Vec<(usize, usize)>,
    split: Option<Vec<SplitTag>>,
    user_labels: Vec<String>,
    item_labels: Vec<String>,
}

impl InteractionDataset {
    /// Deduplicates raw `(user_id, item_id)` pairs, applies iterative k-core
    /// filtering and reindexes survivors densely in order of first appearance.
    pub fn from_raw_pairs<I, U, T>(pairs: I, k_core: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (U, T)>,
        U: AsRef<str>,
        T: AsRef<str>,
    {
        if k_core == 0 {
            return Err(Error::InvalidArgument("k_core must be at least 1".into()));
        }
        let mut user_ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut item_ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut user_names = Vec::new();
        let mut item_names = Vec::new();
        let mut seen = BTreeSet::new();
        let mut edges = Vec::new();
        for (u, i) in pairs {
            let u = intern(&mut user_ids, &mut user_names, u.as_ref());
            let i = intern(&mut item_ids, &mut item_names, i.as_ref());
            if seen.insert((u, i)) {
                edges.push((u, i));
            }
        }
        if edges.is_empty() {
            return Err(Error::NoInteractions);
        }
        let alive = k_core_filter(user_names.len(), item_names.len(), &edges, k_core);
        let kept: Vec<(usize, usize)> = edges
            .iter()
            .zip(&alive)
            .filter_map(|(&e, &keep)| keep.then_some(e))
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyAfterFiltering { k: k_core });
        }

        let mut user_map = vec![usize::MAX; user_names.len()];
        let mut item_map = vec![usize::MAX; item_names.len()];
        let mut user_labels = Vec::new();
        let mut item_labels = Vec::new();
        let mut interactions = Vec::with_capacity(kept.len());
        for (u, i) in kept {
            if user_map[u] == usize::MAX {
                user_map[u] = user_labels.len();
                user_labels.push(user_names[u].clone());
            }
            if item_map[i] == usize::MAX {
                item_map[i] = item_labels.len();
                item_labels.push(item_names[i].clone());
            }
            interactions.push((user_map[u], item_map[i]));
        }
        Ok(Self {
            n_users: user_labels.len(),
            n_items: item_labels.len(),
            interactions,
            split: None,
            user_labels,
            item_labels,
        })
    }

    /// Dataset over already-dense indices. Duplicates are collapsed; labels are the indices.
    pub fn from_indexed(n_users: usize, n_items: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::NoInteractions);
        }
        let mut seen = BTreeSet::new();
        let mut interactions = Vec::with_capacity(pairs.len());
        for &(u, i) in pairs {
            if u >= n_users || i >= n_items {
                return Err(Error::InvalidArgument(format!(
                    "interaction ({u}, {i}) outside {n_users} users × {n_items} items"
                )));
            }
            if seen.insert((u, i)) {
                interactions.push((u, i));
            }
        }
        Ok(Self {
            n_users,
            n_items,
            interactions,
            split: None,
            user_labels: (0..n_users).map(|u| u.to_string()).collect(),
            item_labels: (0..n_items).map(|i| i.to_string()).collect(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn interactions(&self) -> &[(usize, usize)] {
        &self.interactions
    }

    pub fn split_labels(&self) -> Option<&[SplitTag]> {
        self.split.as_deref()
    }

    pub fn user_labels(&self) -> &[String] {
        &self.user_labels
    }

    pub fn item_labels(&self) -> &[String] {
        &self.item_labels
    }

    /// Attaches explicit split tags, one per interaction.
    pub fn with_split(mut self, tags: Vec<SplitTag>) -> Result<Self> {
        if tags.len() != self.interactions.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} split tags for {} interactions",
                tags.len(),
                self.interactions.len()
            )));
        }
        self.split = Some(tags);
        Ok(self)
    }

    /// Per-user random partition into train/val/test.
    ///
    /// Each interaction draws its tag independently with the given
    /// probabilities; a user left without a train interaction has one of
    /// their interactions retagged as train.
    pub fn split(&self, ratios: (f64, f64, f64), seed: u64) -> Result<Self> {
        let (tr, va, te) = ratios;
        if tr <= 0.0 || va < 0.0 || te < 0.0 || libm::fabs(tr + va + te - 1.0) > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios ({tr}, {va}, {te}) must be non-negative, train positive, summing to 1"
            )));
        }
        let mut rng = crate::seeded_rng(seed, 0x5e11);
        let mut tags = vec![SplitTag::Train; self.interactions.len()];
        for idx in self.by_user() {
            let mut order = idx.clone();
            order.shuffle(&mut rng);
            for &k in &order {
                let x: f64 = rng.random();
                tags[k] = if x < tr {
                    SplitTag::Train
                } else if x < tr + va {
                    SplitTag::Val
                } else {
                    SplitTag::Test
                };
            }
            if !order.is_empty() && !order.iter().any(|&k| tags[k] == SplitTag::Train) {
                tags[order[0]] = SplitTag::Train;
            }
        }
        let mut out = self.clone();
        out.split = Some(tags);
        Ok(out)
    }

    /// Interaction indices grouped by user.
    fn by_user(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_users];
        for (k, &(u, _)) in self.interactions.iter().enumerate() {
            groups[u].push(k);
        }
        groups
    }

    /// `(user, item)` pairs carrying `tag`. Without split labels everything counts as train.
    pub fn pairs_with(&self, tag: SplitTag) -> Vec<(usize, usize)> {
        match &self.split {
            None if tag == SplitTag::Train => self.interactions.clone(),
            None => Vec::new(),
            Some(tags) => self
                .interactions
                .iter()
                .zip(tags)
                .filter_map(|(&p, &t)| (t == tag).then_some(p))
                .collect(),
        }
    }

    /// Sorted item lists per user restricted to `tag`.
    pub fn user_items(&self, tag: SplitTag) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users];
        for (u, i) in self.pairs_with(tag) {
            out[u].push(i);
        }
        out.iter_mut().for_each(|v| v.sort_unstable());
        out
    }

    /// Sorted item lists per user over every interaction regardless of tag.
    pub fn all_user_items(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users];
        for &(u, i) in &self.interactions {
            out[u].push(i);
        }
        out.iter_mut().for_each(|v| v.sort_unstable());
        out
    }

    /// True when every user and item has at least `k` interactions.
    pub fn satisfies_k_core(&self, k: usize) -> bool {
        let mut du = vec![0usize; self.n_users];
        let mut di = vec![0usize; self.n_items];
        for &(u, i) in &self.interactions {
            du[u] += 1;
            di[i] += 1;
        }
        du.iter().chain(&di).all(|&d| d >= k)
    }

    pub fn normalized_adjacency(&self) -> Result<NormalizedAdjacency> {
        NormalizedAdjacency::from_dataset(self)
    }
}

fn intern(ids: &mut BTreeMap<String, usize>, names: &mut Vec<String>, key: &str) -> usize {
    if let Some(&id) = ids.get(key) {
        return id;
    }
    let id = names.len();
    ids.insert(key.to_string(), id);
    names.push(key.to_string());
    id
}

/// Alive-mask of `edges` after iteratively removing users and items with fewer than `k` edges.
fn k_core_filter(n_users: usize, n_items: usize, edges: &[(usize, usize)], k: usize) -> Vec<bool> {
    let mut alive = vec![true; edges.len()];
    loop {
        let mut du = vec![0usize; n_users];
        let mut di = vec![0usize; n_items];
        for (&(u, i), _) in edges.iter().zip(&alive).filter(|(_, &a)| a) {
            du[u] += 1;
            di[i] += 1;
        }
        let mut changed = false;
        for (e, a) in edges.iter().zip(alive.iter_mut()) {
            if *a && (du[e.0] < k || di[e.1] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            return alive;
        }
    }
}

/// Symmetric-normalized bipartite adjacency over `n_users + n_items` nodes.
/// Users occupy rows `0..n_users`, items follow.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    n_users: usize,
    n_items: usize,
    matrix: CsrMatrix,
}

impl NormalizedAdjacency {
    /// Entry `(u, n_users + i)` is `1/√(deg(u)·deg(i))` for every train edge,
    /// mirrored across the diagonal. Isolated nodes get empty rows.
    pub fn from_dataset(ds: &InteractionDataset) -> Result<Self> {
        if ds.split.is_none() {
            return Err(Error::InvalidArgument(
                "dataset has no split labels; split it before building the graph".into(),
            ));
        }
        let train = ds.pairs_with(SplitTag::Train);
        Ok(Self::from_edges(ds.n_users, ds.n_items, &train))
    }

    pub fn from_edges(n_users: usize, n_items: usize, edges: &[(usize, usize)]) -> Self {
        let mut du = vec![0usize; n_users];
        let mut di = vec![0usize; n_items];
        for &(u, i) in edges {
            du[u] += 1;
            di[i] += 1;
        }
        let mut triplets = Vec::with_capacity(edges.len() * 2);
        for &(u, i) in edges {
            let w = 1.0 / libm::sqrt((du[u] * di[i]) as f64);
            triplets.push((u, n_users + i, w));
            triplets.push((n_users + i, u, w));
        }
        let n = n_users + n_items;
        Self {
            n_users,
            n_items,
            matrix: CsrMatrix::from_triplets(n, n, &triplets),
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }
}

impl Deref for NormalizedAdjacency {
    type Target = CsrMatrix;

    fn deref(&self) -> &CsrMatrix {
        &self.matrix
    }
}

/// One BPR training example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Uniform sampler over train edges; negatives are uniform over items the
/// user never interacted with in any split.
#[derive(Clone, Debug)]
pub struct BprSampler {
    n_items: usize,
    train: Vec<(usize, usize)>,
    /// Items per user across every split, sorted.
    seen: Vec<Vec<usize>>,
}

const MAX_EDGE_RETRIES: usize = 64;

impl BprSampler {
    pub fn new(ds: &InteractionDataset) -> Result<Self> {
        let train = ds.pairs_with(SplitTag::Train);
        if train.is_empty() {
            return Err(Error::Sampling("train split is empty".into()));
        }
        Ok(Self {
            n_items: ds.n_items,
            train,
            seen: ds.all_user_items(),
        })
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<Triplet>> {
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            out.push(self.sample_one(rng)?);
        }
        Ok(out)
    }

    fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Triplet> {
        for _ in 0..MAX_EDGE_RETRIES {
            let (user, pos) = self.train[rng.random_range(0..self.train.len())];
            let seen = &self.seen[user];
            if seen.len() >= self.n_items {
                continue;
            }
            loop {
                let neg = rng.random_range(0..self.n_items);
                if seen.binary_search(&neg).is_err() {
                    return Ok(Triplet { user, pos, neg });
                }
            }
        }
        Err(Error::Sampling(format!(
            "no negative item found after {MAX_EDGE_RETRIES} edge draws; users interact with every item"
        )))
    }
}

/// Item-side visual and textual feature matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentFeatures {
    pub visual: Matrix,
    pub textual: Matrix,
}

impl ContentFeatures {
    pub fn new(visual: Matrix, textual: Matrix, n_items: usize) -> Result<Self> {
        validate_feature_matrix("visual", &visual, n_items)?;
        validate_feature_matrix("textual", &textual, n_items)?;
        Ok(Self { visual, textual })
    }

    pub fn n_items(&self) -> usize {
        self.visual.rows()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.cols()
    }

    pub fn textual_dim(&self) -> usize {
        self.textual.cols()
    }

    /// Keeps rows `idx` in that order.
    pub fn select_items(&self, idx: &[usize]) -> Self {
        Self {
            visual: self.visual.gather_rows(idx),
            textual: self.textual.gather_rows(idx),
        }
    }
}

pub fn validate_feature_matrix(what: &'static str, m: &Matrix, n_items: usize) -> Result<()> {
    if m.rows() != n_items {
        return Err(Error::ShapeMismatch(format!(
            "{what} features have {} rows but the dataset has {n_items} items",
            m.rows()
        )));
    }
    if m.cols() == 0 {
        return Err(Error::ShapeMismatch(format!("{what} features have zero columns")));
    }
    for r in 0..m.rows() {
        if let Some(col) = m.row(r).iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what, row: r, col });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use alloc::vec;

    fn raw(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(u, i)| (u.to_string(), i.to_string())).collect()
    }

    #[test]
    fn empty_input_is_no_interactions() {
        let err = InteractionDataset::from_raw_pairs(Vec::<(String, String)>::new(), 5).unwrap_err();
        assert_eq!(err, Error::NoInteractions);
        assert_eq!(err.to_string(), "no interactions");
    }

    #[test]
    fn four_users_one_item() {
        let pairs = raw(&[("a", "x"), ("b", "x"), ("c", "x"), ("d", "x")]);
        let err = InteractionDataset::from_raw_pairs(pairs.clone(), 2).unwrap_err();
        assert_eq!(err, Error::EmptyAfterFiltering { k: 2 });
        assert!(err.to_string().contains("empty result"));
        let ds = InteractionDataset::from_raw_pairs(pairs, 1).unwrap();
        assert_eq!((ds.n_users(), ds.n_items()), (4, 1));
    }

    #[test]
    fn duplicates_collapse_and_ids_reindex_in_order() {
        let pairs = raw(&[("u9", "i5"), ("u9", "i5"), ("u2", "i5"), ("u9", "i1")]);
        let ds = InteractionDataset::from_raw_pairs(pairs, 1).unwrap();
        assert_eq!(ds.interactions(), &[(0, 0), (1, 0), (0, 1)]);
        assert_eq!(ds.user_labels(), &["u9".to_string(), "u2".to_string()]);
        assert_eq!(ds.item_labels(), &["i5".to_string(), "i1".to_string()]);
    }

    #[test]
    fn k_core_cascades_to_fixpoint() {
        // u0 and u1 each rate i0 and i1; u2 rates only i2 and i0.
        // With k = 2 item i2 falls (degree 1), then u2 falls (degree 1 left),
        // leaving the 2 × 2 block intact.
        let pairs = raw(&[
            ("u0", "i0"),
            ("u0", "i1"),
            ("u1", "i0"),
            ("u1", "i1"),
            ("u2", "i2"),
            ("u2", "i0"),
        ]);
        let ds = InteractionDataset::from_raw_pairs(pairs, 2).unwrap();
        assert_eq!((ds.n_users(), ds.n_items()), (2, 2));
        assert!(ds.satisfies_k_core(2));
    }

    fn grid_dataset(n_users: usize, n_items: usize, per_user: usize) -> InteractionDataset {
        let pairs: Vec<(usize, usize)> = (0..n_users)
            .flat_map(|u| (0..per_user).map(move |k| (u, (u * 7 + k * 3) % n_items)))
            .collect();
        InteractionDataset::from_indexed(n_users, n_items, &pairs).unwrap()
    }

    #[test]
    fn split_ratios_and_determinism() {
        let ds = grid_dataset(200, 97, 10);
        let a = ds.split((0.8, 0.1, 0.1), 7).unwrap();
        let b = ds.split((0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(a.split_labels(), b.split_labels());
        let n = ds.interactions().len();
        let train = a.pairs_with(SplitTag::Train).len();
        let frac = train as f64 / n as f64;
        assert!(n >= 1000 && (0.75..=0.85).contains(&frac), "train fraction {frac}");
        for items in a.user_items(SplitTag::Train) {
            assert!(!items.is_empty());
        }
    }

    #[test]
    fn split_all_train() {
        let ds = grid_dataset(20, 11, 4);
        let s = ds.split((1.0, 0.0, 0.0), 1).unwrap();
        assert!(s.split_labels().unwrap().iter().all(|&t| t == SplitTag::Train));
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let ds = grid_dataset(5, 5, 2);
        assert!(ds.split((0.5, 0.1, 0.1), 0).is_err());
        assert!(ds.split((0.0, 0.5, 0.5), 0).is_err());
    }

    #[test]
    fn single_edge_adjacency() {
        let ds = InteractionDataset::from_indexed(1, 1, &[(0, 0)])
            .unwrap()
            .split((1.0, 0.0, 0.0), 0)
            .unwrap();
        let adj = ds.normalized_adjacency().unwrap();
        assert_eq!(adj.get(0, 1), 1.0);
        assert_eq!(adj.get(1, 0), 1.0);
        assert_eq!(adj.nnz(), 2);
    }

    #[test]
    fn star_adjacency_entries_are_half() {
        let ds = InteractionDataset::from_indexed(1, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)])
            .unwrap()
            .split((1.0, 0.0, 0.0), 0)
            .unwrap();
        let adj = ds.normalized_adjacency().unwrap();
        for i in 0..4 {
            assert_eq!(adj.get(0, 1 + i), 0.5);
            assert_eq!(adj.get(1 + i, 0), 0.5);
        }
    }

    #[test]
    fn adjacency_requires_split_and_ignores_held_out_edges() {
        let ds = InteractionDataset::from_indexed(1, 2, &[(0, 0), (0, 1)]).unwrap();
        assert!(ds.normalized_adjacency().is_err());
        let ds = ds.with_split(vec![SplitTag::Train, SplitTag::Test]).unwrap();
        let adj = ds.normalized_adjacency().unwrap();
        assert_eq!(adj.get(0, 1), 1.0);
        assert_eq!(adj.get(0, 2), 0.0);
        assert_eq!(adj.row_sum(2), 0.0);
    }

    #[test]
    fn forced_negative_and_empty_batch() {
        let ds = InteractionDataset::from_indexed(1, 2, &[(0, 0)])
            .unwrap()
            .split((1.0, 0.0, 0.0), 0)
            .unwrap();
        let sampler = BprSampler::new(&ds).unwrap();
        let mut rng = seeded_rng(3, 0);
        for t in sampler.sample(50, &mut rng).unwrap() {
            assert_eq!((t.user, t.pos, t.neg), (0, 0, 1));
        }
        assert!(sampler.sample(0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn saturated_user_errors() {
        let ds = InteractionDataset::from_indexed(1, 2, &[(0, 0), (0, 1)])
            .unwrap()
            .split((1.0, 0.0, 0.0), 0)
            .unwrap();
        let sampler = BprSampler::new(&ds).unwrap();
        let mut rng = seeded_rng(3, 0);
        assert!(matches!(sampler.sample(1, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn negatives_avoid_every_known_interaction() {
        let ds = grid_dataset(30, 12, 6).split((0.6, 0.2, 0.2), 4).unwrap();
        let all = ds.all_user_items();
        let train = ds.user_items(SplitTag::Train);
        let sampler = BprSampler::new(&ds).unwrap();
        let mut rng = seeded_rng(9, 0);
        for t in sampler.sample(5000, &mut rng).unwrap() {
            assert!(all[t.user].binary_search(&t.neg).is_err());
            assert!(train[t.user].binary_search(&t.pos).is_ok());
        }
    }

    #[test]
    fn feature_validation() {
        let ok = Matrix::zeros(3, 2);
        assert!(ContentFeatures::new(ok.clone(), ok.clone(), 3).is_ok());
        assert!(matches!(
            ContentFeatures::new(Matrix::zeros(10, 2), ok.clone(), 12),
            Err(Error::ShapeMismatch(_))
        ));
        let mut bad = Matrix::zeros(3, 2);
        bad.set(2, 1, f64::NAN);
        assert_eq!(
            ContentFeatures::new(ok, bad, 3).unwrap_err(),
            Error::NonFinite {
                what: "textual",
                row: 2,
                col: 1
            }
        );
    }
}
