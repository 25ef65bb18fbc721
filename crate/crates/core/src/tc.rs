//! Total correlation: the multilinear contrastive critic, its InfoNCE bound,
//! and exact enumeration for discrete joints.
//!
//! Negatives for an anchor row are built by shuffling the two other
//! modalities independently within the batch, which samples from the product
//! of marginals. Rows are L2-normalized and scores divided by a fixed
//! temperature before the softmax.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Default contrastive temperature.
pub const CONTRAST_TEMPERATURE: f64 = 0.2;

/// `Σ_d x⁽ᵈ⁾ y⁽ᵈ⁾ z⁽ᵈ⁾ / temperature`
pub fn multilinear_score(x: &[f64], y: &[f64], z: &[f64], temperature: f64) -> Result<f64> {
    if x.len() != y.len() || y.len() != z.len() {
        return Err(Error::ShapeMismatch(format!(
            "score operands have lengths {}, {}, {}",
            x.len(),
            y.len(),
            z.len()
        )));
    }
    let s: f64 = x.iter().zip(y).zip(z).map(|((a, b), c)| a * b * c).sum();
    Ok(s / temperature)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Interaction,
    Visual,
    Textual,
}

/// Row-aligned `N × d` embeddings of the same entities in three modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct TriModalBatch {
    pub s: Matrix,
    pub v: Matrix,
    pub t: Matrix,
}

impl TriModalBatch {
    pub fn new(s: Matrix, v: Matrix, t: Matrix) -> Result<Self> {
        if s.shape() != v.shape() || v.shape() != t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "modalities have shapes {:?}, {:?}, {:?}",
                s.shape(),
                v.shape(),
                t.shape()
            )));
        }
        Ok(Self { s, v, t })
    }

    pub fn len(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.rows() == 0
    }
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    let mut seen = alloc::vec![false; n];
    p.len() == n
        && p.iter().all(|&i| {
            let fresh = i < n && !seen[i];
            if fresh {
                seen[i] = true;
            }
            fresh
        })
}

/// Per-anchor InfoNCE on already-normalized rows.
///
/// Positive for row `i`: `h(aᵢ, bᵢ, cᵢ)`. Negatives for row `i`:
/// `h(aᵢ, b_{πb(j)}, c_{πc(j)})` for `j ≠ i`. The positive sits in the
/// softmax denominator. Returns the mean over anchors.
pub fn anchor_loss_var(
    g: &mut Graph<'_>,
    anchor: Var,
    b: Var,
    c: Var,
    perm_b: &[usize],
    perm_c: &[usize],
    temperature: f64,
) -> Var {
    let bc = g.hadamard(b, c);
    let pos = g.row_dot(anchor, bc);
    let pos = g.scale(pos, 1.0 / temperature);
    let bs = g.gather_rows(b, perm_b.to_vec());
    let cs = g.gather_rows(c, perm_c.to_vec());
    let shuffled = g.hadamard(bs, cs);
    let neg = g.matmul_nt(anchor, shuffled);
    let neg = g.scale(neg, 1.0 / temperature);
    g.info_nce(pos, neg)
}

/// Pairwise InfoNCE: positive `⟨aᵢ, bᵢ⟩`, negatives `⟨aᵢ, b_{π(j)}⟩` for `j ≠ i`.
pub fn pairwise_loss_var(g: &mut Graph<'_>, a: Var, b: Var, perm: &[usize], temperature: f64) -> Var {
    let pos = g.row_dot(a, b);
    let pos = g.scale(pos, 1.0 / temperature);
    let bs = g.gather_rows(b, perm.to_vec());
    let neg = g.matmul_nt(a, bs);
    let neg = g.scale(neg, 1.0 / temperature);
    g.info_nce(pos, neg)
}

/// Permutations for the three anchors: `[S, V̄, T̄]`, each holding the
/// shuffles of that anchor's two partner modalities in canonical order.
pub type AnchorPerms = [[Vec<usize>; 2]; 3];

pub fn random_perms<R: Rng + ?Sized>(n: usize, rng: &mut R) -> AnchorPerms {
    let mut draw = || {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        p
    };
    [[draw(), draw()], [draw(), draw()], [draw(), draw()]]
}

/// Sum of the three anchor losses on normalized rows.
pub fn symmetrized_loss_var(
    g: &mut Graph<'_>,
    s: Var,
    v: Var,
    t: Var,
    perms: &AnchorPerms,
    temperature: f64,
) -> Var {
    let ls = anchor_loss_var(g, s, v, t, &perms[0][0], &perms[0][1], temperature);
    let lv = anchor_loss_var(g, v, s, t, &perms[1][0], &perms[1][1], temperature);
    let lt = anchor_loss_var(g, t, s, v, &perms[2][0], &perms[2][1], temperature);
    let sum = g.add(ls, lv);
    g.add(sum, lt)
}

/// Sum of the three pairwise losses `S↔V̄`, `S↔T̄`, `V̄↔T̄` on normalized rows.
pub fn pairwise_sum_var(
    g: &mut Graph<'_>,
    s: Var,
    v: Var,
    t: Var,
    perms: &AnchorPerms,
    temperature: f64,
) -> Var {
    let a = pairwise_loss_var(g, s, v, &perms[0][0], temperature);
    let b = pairwise_loss_var(g, s, t, &perms[1][0], temperature);
    let c = pairwise_loss_var(g, v, t, &perms[2][0], temperature);
    let sum = g.add(a, b);
    g.add(sum, c)
}

fn validate_perms(n: usize, perms: &[&[usize]]) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs at least 2 rows, got {n}"
        )));
    }
    for p in perms {
        if !is_permutation(p, n) {
            return Err(Error::InvalidArgument(format!("not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// InfoNCE for one anchor modality. `perm_first` and `perm_second` shuffle
/// the two partner modalities in canonical order (S, V̄, T̄ minus the anchor).
pub fn anchor_contrastive_loss(
    batch: &TriModalBatch,
    perm_first: &[usize],
    perm_second: &[usize],
    anchor: Modality,
    temperature: f64,
) -> Result<f64> {
    validate_perms(batch.len(), &[perm_first, perm_second])?;
    let mut g = Graph::new();
    let s = normalized_constant(&mut g, &batch.s);
    let v = normalized_constant(&mut g, &batch.v);
    let t = normalized_constant(&mut g, &batch.t);
    let (a, b, c) = match anchor {
        Modality::Interaction => (s, v, t),
        Modality::Visual => (v, s, t),
        Modality::Textual => (t, s, v),
    };
    let loss = anchor_loss_var(&mut g, a, b, c, perm_first, perm_second, temperature);
    Ok(g.scalar(loss))
}

fn normalized_constant(g: &mut Graph<'_>, m: &Matrix) -> Var {
    let c = g.constant(m.clone());
    g.row_normalize(c)
}

fn normalized(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = libm::sqrt(row.iter().map(|x| x * x).sum::<f64>());
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

/// Value of [`anchor_loss_var`] streamed row by row, without a tape.
fn anchor_loss_value(a: &Matrix, b: &Matrix, c: &Matrix, perm_b: &[usize], perm_c: &[usize], temperature: f64) -> f64 {
    let n = a.rows();
    let shuffled = Matrix::from_fn(n, a.cols(), |j, k| b.get(perm_b[j], k) * c.get(perm_c[j], k));
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let mut scores = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let ai = a.row(i);
        let pos = ai.iter().zip(b.row(i)).zip(c.row(i)).map(|((x, y), z)| x * y * z).sum::<f64>() / temperature;
        scores.clear();
        scores.extend((0..n).map(|j| if j == i { pos } else { dot(ai, shuffled.row(j)) / temperature }));
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|&s| libm::exp(s - m)).sum();
        total += m + libm::log(z) - pos;
    }
    total / n as f64
}

/// Symmetrized loss with explicit permutations.
pub fn symmetrized_tc_loss_with(batch: &TriModalBatch, perms: &AnchorPerms, temperature: f64) -> Result<f64> {
    let flat: Vec<&[usize]> = perms.iter().flat_map(|p| p.iter().map(|v| v.as_slice())).collect();
    validate_perms(batch.len(), &flat)?;
    let (s, v, t) = (normalized(&batch.s), normalized(&batch.v), normalized(&batch.t));
    Ok(anchor_loss_value(&s, &v, &t, &perms[0][0], &perms[0][1], temperature)
        + anchor_loss_value(&v, &s, &t, &perms[1][0], &perms[1][1], temperature)
        + anchor_loss_value(&t, &s, &v, &perms[2][0], &perms[2][1], temperature))
}

/// Symmetrized total-correlation loss with freshly drawn permutations.
pub fn symmetrized_tc_loss<R: Rng + ?Sized>(batch: &TriModalBatch, rng: &mut R, temperature: f64) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument("contrastive loss needs at least 2 rows".into()));
    }
    let perms = random_perms(batch.len(), rng);
    symmetrized_tc_loss_with(batch, &perms, temperature)
}

/// `log N − L`, the InfoNCE lower bound given a mean per-anchor loss.
pub fn tc_lower_bound(mean_loss: f64, n: usize) -> f64 {
    libm::log(n as f64) - mean_loss
}

/// Probability mass function over three finite alphabets, row-major `[s][v][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    dims: [usize; 3],
    pmf: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(dims: [usize; 3], pmf: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) || pmf.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::InvalidPmf(format!(
                "{} cells for alphabet sizes {dims:?}",
                pmf.len()
            )));
        }
        if pmf.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidPmf("negative or non-finite mass".into()));
        }
        let total: f64 = pmf.iter().sum();
        if libm::fabs(total - 1.0) > 1e-12 {
            return Err(Error::InvalidPmf(format!("mass sums to {total}")));
        }
        Ok(Self { dims, pmf })
    }

    /// Product of the given marginals.
    pub fn independent(ps: &[f64], pv: &[f64], pt: &[f64]) -> Result<Self> {
        let mut pmf = Vec::with_capacity(ps.len() * pv.len() * pt.len());
        for a in ps {
            for b in pv {
                for c in pt {
                    pmf.push(a * b * c);
                }
            }
        }
        Self::new([ps.len(), pv.len(), pt.len()], pmf)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn p(&self, s: usize, v: usize, t: usize) -> f64 {
        self.pmf[(s * self.dims[1] + v) * self.dims[2] + t]
    }

    fn cells(&self) -> impl Iterator<Item = ([usize; 3], f64)> + '_ {
        let [_, dv, dt] = self.dims;
        self.pmf
            .iter()
            .enumerate()
            .map(move |(k, &p)| ([k / (dv * dt), (k / dt) % dv, k % dt], p))
    }

    /// Marginal of one axis (0 = S, 1 = V, 2 = T).
    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.dims[axis]];
        for (idx, p) in self.cells() {
            out[idx[axis]] += p;
        }
        out
    }

    /// Marginal of two axes as an `dims[a] × dims[b]` table, row-major.
    pub fn pair_marginal(&self, a: usize, b: usize) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.dims[a] * self.dims[b]];
        for (idx, p) in self.cells() {
            out[idx[a] * self.dims[b] + idx[b]] += p;
        }
        out
    }

    pub fn joint_entropy(&self) -> f64 {
        entropy(&self.pmf)
    }

    /// Samples one `(s, v, t)` cell.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [usize; 3] {
        let x: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = [0, 0, 0];
        for (idx, p) in self.cells() {
            if p > 0.0 {
                last = idx;
            }
            acc += p;
            if x < acc {
                return idx;
            }
        }
        last
    }
}

/// Shannon entropy in nats, ignoring zero cells.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * libm::log(x)).sum()
}

/// `KL(p(s,v,t) ‖ p(s)p(v)p(t))` by direct summation, in nats.
pub fn brute_force_tc(joint: &DiscreteJoint) -> f64 {
    let ms = joint.marginal(0);
    let mv = joint.marginal(1);
    let mt = joint.marginal(2);
    joint
        .cells()
        .filter(|(_, p)| *p > 0.0)
        .map(|([s, v, t], p)| p * libm::log(p / (ms[s] * mv[v] * mt[t])))
        .sum()
}

/// `I(X_a; X_b) = H(a) + H(b) − H(a, b)`.
pub fn mutual_information(joint: &DiscreteJoint, a: usize, b: usize) -> f64 {
    entropy(&joint.marginal(a)) + entropy(&joint.marginal(b)) - entropy(&joint.pair_marginal(a, b))
}

/// `I(X_a; X_b | X_c) = H(a,c) + H(b,c) − H(c) − H(a,b,c)`.
pub fn conditional_mutual_information(joint: &DiscreteJoint, a: usize, b: usize, c: usize) -> f64 {
    entropy(&joint.pair_marginal(a, c)) + entropy(&joint.pair_marginal(b, c))
        - entropy(&joint.marginal(c))
        - joint.joint_entropy()
}

/// `(Σ pairwise MI, Σ conditional MI)`; they satisfy `3·TC = 2·pairwise + conditional`.
pub fn tc_decomposition(joint: &DiscreteJoint) -> (f64, f64) {
    let pairwise = mutual_information(joint, 0, 1)
        + mutual_information(joint, 0, 2)
        + mutual_information(joint, 1, 2);
    let conditional = conditional_mutual_information(joint, 0, 1, 2)
        + conditional_mutual_information(joint, 0, 2, 1)
        + conditional_mutual_information(joint, 1, 2, 0);
    (pairwise, conditional)
}
