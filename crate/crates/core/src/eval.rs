//! Ranking metrics, modality diagnostics and the ablation / sweep harness.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::config::{TrainConfig, Variant};
use crate::dataset::{ContentFeatures, InteractionDataset};
use crate::error::{Error, Result};
use crate::linalg::{cosine, dot, Matrix};

/// Items sorted by descending score with `exclude` removed; ties go to the lower index.
pub fn rank_items(scores: &[f64], exclude: &[usize]) -> Vec<usize> {
    let mut masked = alloc::vec![false; scores.len()];
    for &i in exclude {
        if i < masked.len() {
            masked[i] = true;
        }
    }
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| !masked[i]).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub ndcg: f64,
    pub recall: f64,
    pub map: f64,
}

/// NDCG, Recall and MAP at `k`. An empty relevant set yields zeros.
pub fn metrics_at_k(ranking: &[usize], relevant: &[usize], k: usize) -> Result<Metrics> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if relevant.is_empty() {
        return Ok(Metrics::default());
    }
    let is_rel = |i: &usize| relevant.contains(i);
    let (mut dcg, mut hits, mut ap) = (0.0, 0usize, 0.0);
    for (pos, item) in ranking.iter().take(k).enumerate() {
        if is_rel(item) {
            hits += 1;
            dcg += 1.0 / libm::log2(pos as f64 + 2.0);
            ap += hits as f64 / (pos + 1) as f64;
        }
    }
    let ideal = relevant.len().min(k);
    let idcg: f64 = (0..ideal).map(|p| 1.0 / libm::log2(p as f64 + 2.0)).sum();
    Ok(Metrics {
        ndcg: dcg / idcg,
        recall: hits as f64 / relevant.len() as f64,
        map: ap / ideal as f64,
    })
}

/// Mean metrics at one cutoff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsAtK {
    pub k: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingEvaluation {
    pub at_k: Vec<MetricsAtK>,
    /// Users with a non-empty relevant set.
    pub n_users: usize,
}

impl RankingEvaluation {
    pub fn get(&self, k: usize) -> Option<Metrics> {
        self.at_k.iter().find(|m| m.k == k).map(|m| m.metrics)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.get(k).map_or(0.0, |m| m.ndcg)
    }
}

/// Scores every user against every item row and averages metrics over users
/// with a non-empty relevant set. `exclude[u]` is masked from the ranking.
pub fn evaluate_rankings(
    user_rows: &Matrix,
    item_rows: &Matrix,
    exclude: &[Vec<usize>],
    relevant: &[Vec<usize>],
    k_list: &[usize],
) -> Result<RankingEvaluation> {
    if k_list.is_empty() {
        return Err(Error::InvalidArgument("K list is empty".into()));
    }
    let max_k = *k_list.iter().max().unwrap_or(&1);
    let mut sums = alloc::vec![Metrics::default(); k_list.len()];
    let mut n_users = 0usize;
    for u in 0..user_rows.rows() {
        if relevant[u].is_empty() {
            continue;
        }
        n_users += 1;
        let scores: Vec<f64> = (0..item_rows.rows()).map(|i| dot(user_rows.row(u), item_rows.row(i))).collect();
        let mut ranking = rank_items(&scores, &exclude[u]);
        ranking.truncate(max_k);
        for (slot, &k) in sums.iter_mut().zip(k_list) {
            let m = metrics_at_k(&ranking, &relevant[u], k)?;
            slot.ndcg += m.ndcg;
            slot.recall += m.recall;
            slot.map += m.map;
        }
    }
    let denom = n_users.max(1) as f64;
    Ok(RankingEvaluation {
        at_k: k_list
            .iter()
            .zip(sums)
            .map(|(&k, s)| MetricsAtK {
                k,
                metrics: Metrics {
                    ndcg: s.ndcg / denom,
                    recall: s.recall / denom,
                    map: s.map / denom,
                },
            })
            .collect(),
        n_users,
    })
}

/// Mean over `users` of `1 − (max − min)` of the cosines between the fused row
/// and each modality row.
pub fn modality_balance_score(fused: &Matrix, channels: [&Matrix; 3], users: &[usize]) -> f64 {
    if users.is_empty() {
        return 0.0;
    }
    let total: f64 = users
        .iter()
        .map(|&u| {
            let sims = channels.map(|c| cosine(fused.row(u), c.row(u)));
            let hi = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = sims.iter().copied().fold(f64::INFINITY, f64::min);
            1.0 - (hi - lo)
        })
        .sum();
    total / users.len() as f64
}

/// Mean dot products of each user's fused row with its rows in the three modality tables.
pub fn consistency_trace(fused: &Matrix, channels: [&Matrix; 3], users: &[usize]) -> [f64; 3] {
    if users.is_empty() {
        return [0.0; 3];
    }
    let n = users.len() as f64;
    channels.map(|c| users.iter().map(|&u| dot(fused.row(u), c.row(u))).sum::<f64>() / n)
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub label: String,
    pub metric: &'static str,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    /// Name of the first column (`variant`, or the swept key).
    pub label_column: String,
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},metric,K,mean,std,n_seeds\n", self.label_column);
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{:.10},{:.10},{}\n", r.label, r.metric, r.k, r.mean, r.std, r.n_seeds));
        }
        out
    }

    pub fn find(&self, label: &str, metric: &str, k: usize) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.label == label && r.metric == metric && r.k == k)
    }

    /// Distinct labels in first-seen order.
    pub fn labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.label.as_str()) {
                out.push(&r.label);
            }
        }
        out
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

/// Appends mean/std rows per metric and cutoff over `evals` under `label`.
pub fn summarize_runs(label: &str, evals: &[RankingEvaluation], k_list: &[usize], rows: &mut Vec<ResultRow>) {
    let pick: [(&'static str, fn(&Metrics) -> f64); 3] =
        [("ndcg", |m| m.ndcg), ("recall", |m| m.recall), ("map", |m| m.map)];
    for (metric, f) in pick {
        for &k in k_list {
            let xs: Vec<f64> = evals.iter().map(|e| e.get(k).map_or(0.0, |m| f(&m))).collect();
            let (mean, std) = mean_std(&xs);
            rows.push(ResultRow {
                label: label.to_string(),
                metric,
                k,
                mean,
                std,
                n_seeds: xs.len(),
            });
        }
    }
}

/// Trains every variant for every seed in `cfg.seeds` on the same split and
/// tabulates test metrics. `on_run` sees each finished run.
pub fn run_ablation(
    cfg: &TrainConfig,
    dataset: &InteractionDataset,
    features: &ContentFeatures,
    variants: &[Variant],
    on_run: &mut dyn FnMut(Variant, u64, &crate::train::TrainOutcome),
) -> Result<ResultsTable> {
    let mut rows = Vec::new();
    for &variant in variants {
        let mut evals = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let mut c = cfg.clone();
            c.variant = variant;
            c.seed = seed;
            let outcome = crate::train::train(&c, dataset, features)?;
            on_run(variant, seed, &outcome);
            evals.push(outcome.test.clone());
        }
        summarize_runs(variant.tag(), &evals, &cfg.k_list, &mut rows);
    }
    Ok(ResultsTable {
        label_column: "variant".into(),
        rows,
    })
}

/// Trains `cfg.variant` at each value of `cfg.sweep_key` for every seed.
pub fn run_sweep(
    cfg: &TrainConfig,
    dataset: &InteractionDataset,
    features: &ContentFeatures,
    on_run: &mut dyn FnMut(&str, u64, &crate::train::TrainOutcome),
) -> Result<ResultsTable> {
    let mut rows = Vec::new();
    for value in &cfg.sweep_values {
        let mut base = cfg.clone();
        base.set(&cfg.sweep_key, value)?;
        base.validate()?;
        let mut evals = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let mut c = base.clone();
            c.seed = seed;
            let outcome = crate::train::train(&c, dataset, features)?;
            on_run(value, seed, &outcome);
            evals.push(outcome.test.clone());
        }
        summarize_runs(value, &evals, &cfg.k_list, &mut rows);
    }
    Ok(ResultsTable {
        label_column: cfg.sweep_key.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use rand::Rng;

    #[test]
    fn ranking_tie_break_and_masking() {
        assert_eq!(rank_items(&[0.5; 5], &[]), alloc::vec![0, 1, 2, 3, 4]);
        assert_eq!(rank_items(&[0.1, 0.9, 0.3, 0.9], &[]), alloc::vec![1, 3, 2, 0]);
        assert_eq!(rank_items(&[0.1, 0.9, 0.3, 5.0], &[3]), alloc::vec![1, 2, 0]);
    }

    #[test]
    fn ranking_matches_sort_oracle() {
        let mut rng = seeded_rng(5, 0);
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            // Coarse values make ties common.
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
            let mut oracle: Vec<(i64, usize)> = scores.iter().enumerate().map(|(i, &s)| (-(s as i64), i)).collect();
            oracle.sort();
            let expect: Vec<usize> = oracle.into_iter().map(|(_, i)| i).collect();
            assert_eq!(rank_items(&scores, &[]), expect);
        }
    }

    #[test]
    fn metric_examples() {
        let m = metrics_at_k(&[7, 1, 2, 3, 4], &[7], 5).unwrap();
        assert_eq!((m.ndcg, m.recall, m.map), (1.0, 1.0, 1.0));
        let m = metrics_at_k(&[1, 7, 2, 3, 4], &[7], 5).unwrap();
        assert!((m.ndcg - 1.0 / libm::log2(3.0)).abs() < 1e-15);
        assert!((m.ndcg - 0.630_929_753_571_457_4).abs() < 1e-12);
        assert_eq!((m.recall, m.map), (1.0, 0.5));
        let m = metrics_at_k(&[1, 2, 3, 4, 5, 7], &[7], 5).unwrap();
        assert_eq!(m, Metrics::default());
        assert_eq!(metrics_at_k(&[1], &[], 5).unwrap(), Metrics::default());
        assert!(metrics_at_k(&[1], &[1], 0).is_err());
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let mut rng = seeded_rng(6, 0);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..30).map(|_| rng.random()).collect();
            let ranking = rank_items(&scores, &[]);
            let rel: Vec<usize> = (0..30).filter(|_| rng.random_bool(0.2)).collect();
            let mut prev = 0.0;
            for k in 1..=30 {
                let r = metrics_at_k(&ranking, &rel, k).unwrap().recall;
                assert!(r >= prev);
                prev = r;
            }
        }
    }

    #[test]
    fn balance_examples() {
        let fused = Matrix::from_rows(&[&[1.0, 0.0]]);
        let same = Matrix::from_rows(&[&[2.0, 0.0]]);
        assert!((modality_balance_score(&fused, [&same, &same, &same], &[0]) - 1.0).abs() < 1e-15);
        let orth = Matrix::from_rows(&[&[0.0, 1.0]]);
        let anti = Matrix::from_rows(&[&[-1.0, 0.0]]);
        assert!((modality_balance_score(&fused, [&same, &orth, &anti], &[0]) + 1.0).abs() < 1e-15);
        let zero = Matrix::zeros(1, 2);
        // Cosines (1, 0, 0) → 0.
        assert!(modality_balance_score(&fused, [&same, &zero, &zero], &[0]).abs() < 1e-15);
    }

    #[test]
    fn balance_stays_in_range() {
        let mut rng = seeded_rng(7, 0);
        let tables: Vec<Matrix> = (0..4).map(|_| Matrix::randn(20, 5, &mut rng)).collect();
        let users: Vec<usize> = (0..20).collect();
        let b = modality_balance_score(&tables[0], [&tables[1], &tables[2], &tables[3]], &users);
        assert!((-1.0..=1.0).contains(&b));
    }

    #[test]
    fn consistency_examples() {
        let n = 400;
        let d = 16;
        let mut rng = seeded_rng(8, 0);
        let tables: Vec<Matrix> = (0..4).map(|_| Matrix::randn(n, d, &mut rng).scale(1.0 / libm::sqrt(d as f64))).collect();
        let users: Vec<usize> = (0..n).collect();
        let c = consistency_trace(&tables[0], [&tables[1], &tables[2], &tables[3]], &users);
        let bound = 3.0 / libm::sqrt((n * d) as f64);
        assert!(c.iter().all(|x| x.abs() < bound), "{c:?} vs {bound}");
        let unit = Matrix::from_fn(3, 2, |_, c| if c == 0 { 1.0 } else { 0.0 });
        assert_eq!(consistency_trace(&unit, [&unit, &unit, &unit], &[0, 1, 2]), [1.0; 3]);
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn results_csv_header() {
        let t = ResultsTable {
            label_column: "variant".into(),
            rows: alloc::vec![ResultRow {
                label: "base".into(),
                metric: "ndcg",
                k: 10,
                mean: 0.5,
                std: 0.0,
                n_seeds: 1,
            }],
        };
        let csv = t.to_csv();
        assert!(csv.starts_with("variant,metric,K,mean,std,n_seeds\n"));
        assert!(csv.contains("base,ndcg,10,0.5000000000,0.0000000000,1"));
    }
}
