//! Motif-GCN generator of alternative neighborhoods.
//!
//! User embeddings are smoothed over the row-stochastic motif adjacency
//! without transforms or nonlinearities and averaged over layers. A concrete
//! selector with `k` neurons then turns each user's similarity profile into
//! `k` relaxed one-hot vectors over all users; hardening takes the argmax of
//! each. A small MLP decodes the summed selection back into a profile row
//! that is compared against the user's M8 motif row.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{input, Result};
use crate::numerics::{gumbel_sample, CustomOp, SparseOperator, Tape, Tensor, Var};
use crate::sparse::SparseMatrix;

/// Lower bound applied to selector probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-10;

/// Rows per work unit in the batched selector kernel. Fixed so that partial
/// sums are reduced in the same order on any thread count.
const SELECTOR_CHUNK: usize = 8;

/// Generator parameters: layer-0 user embeddings, selector weights and the
/// profile decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// `m x d`
    pub e0: Array2<f64>,
    /// `k x m`, one row per selector neuron.
    pub h: Array2<f64>,
    /// `m x t`
    pub w1: Array2<f64>,
    /// `1 x t`
    pub b1: Array2<f64>,
    /// `t x m`
    pub w2: Array2<f64>,
    /// `1 x m`
    pub b2: Array2<f64>,
}

impl GeneratorParams {
    /// Gaussian embeddings with standard deviation `init_std`, standard normal
    /// selector weights and Glorot-scaled decoder weights.
    pub fn init<R: Rng>(
        users: usize,
        dim: usize,
        k: usize,
        hidden: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if users == 0 || dim == 0 || k == 0 || hidden == 0 {
            return input("generator dimensions must be positive");
        }
        let emb = Normal::new(0.0, init_std).map_err(|e| crate::Error::Input(e.to_string()))?;
        let unit = Normal::new(0.0, 1.0).unwrap();
        let glorot = Normal::new(0.0, (2.0 / (users + hidden) as f64).sqrt()).unwrap();
        Ok(Self {
            e0: Array2::from_shape_simple_fn((users, dim), || emb.sample(rng)),
            h: Array2::from_shape_simple_fn((k, users), || unit.sample(rng)),
            w1: Array2::from_shape_simple_fn((users, hidden), || glorot.sample(rng)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::from_shape_simple_fn((hidden, users), || glorot.sample(rng)),
            b2: Array2::zeros((1, users)),
        })
    }

    pub fn n_users(&self) -> usize {
        self.e0.nrows()
    }

    pub fn k(&self) -> usize {
        self.h.nrows()
    }

    pub fn tensors(&self) -> [&Array2<f64>; 6] {
        [&self.e0, &self.h, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 6] {
        [
            &mut self.e0,
            &mut self.h,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub const NAMES: [&'static str; 6] = ["gen.e0", "gen.h", "gen.w1", "gen.b1", "gen.w2", "gen.b2"];
}

/// Layer-mean propagation `(1/(L+1)) Σ_l Â^l E⁰`.
pub fn propagate(normalized: &SparseMatrix, e0: ArrayView2<f64>, layers: usize) -> Array2<f64> {
    let mut current = e0.to_owned();
    let mut total = current.clone();
    for _ in 0..layers {
        current = normalized.mul_dense(current.view());
        total += &current;
    }
    total / (layers + 1) as f64
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Selector probabilities `α_i = softmax((E·e_u) ⊙ h_i)` for one user.
///
/// With `mask_self` the user's own column is excluded from the softmax and
/// receives probability zero.
pub fn selector_logits(
    e: ArrayView2<f64>,
    h: ArrayView2<f64>,
    user: usize,
    mask_self: bool,
) -> Array2<f64> {
    let scores = e.dot(&e.row(user));
    selector_probabilities(scores.view(), h, mask_self.then_some(user))
}

fn selector_probabilities(
    scores: ArrayView1<f64>,
    h: ArrayView2<f64>,
    masked: Option<usize>,
) -> Array2<f64> {
    let (k, m) = h.dim();
    let mut alpha = Array2::zeros((k, m));
    for (mut out, hi) in alpha.axis_iter_mut(Axis(0)).zip(h.axis_iter(Axis(0))) {
        let mut z: Vec<f64> = scores.iter().zip(hi).map(|(s, w)| s * w).collect();
        if let Some(u) = masked {
            z[u] = f64::NEG_INFINITY;
        }
        softmax_in_place(&mut z);
        out.assign(&ArrayView1::from(&z));
    }
    alpha
}

/// Relaxed one-hot vectors for one user, one row per selector neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedSelection {
    pub user: usize,
    /// `k x m`, rows on the simplex.
    pub v: Array2<f64>,
    pub tau: f64,
}

impl RelaxedSelection {
    /// Sum of the `k` relaxed rows.
    pub fn summed(&self) -> Array1<f64> {
        self.v.sum_axis(Axis(0))
    }
}

/// Concrete sample `softmax((log α + g) / τ)` per row with the given noise.
pub fn select_with_noise(
    alpha: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    tau: f64,
    user: usize,
) -> Result<RelaxedSelection> {
    if !(tau > 0.0) {
        return input(format!("temperature must be positive, got {tau}"));
    }
    if alpha.dim() != noise.dim() {
        return input("noise shape does not match the selector probabilities");
    }
    let mut v = Array2::zeros(alpha.dim());
    for ((mut out, a), g) in v
        .axis_iter_mut(Axis(0))
        .zip(alpha.axis_iter(Axis(0)))
        .zip(noise.axis_iter(Axis(0)))
    {
        let mut y: Vec<f64> = a
            .iter()
            .zip(g)
            .map(|(&a, &g)| (a.max(LOG_FLOOR).ln() + g) / tau)
            .collect();
        softmax_in_place(&mut y);
        out.assign(&ArrayView1::from(&y));
    }
    Ok(RelaxedSelection { user, v, tau })
}

/// Concrete sample with fresh Gumbel noise drawn from `rng`.
pub fn select_neighborhood<R: Rng>(
    alpha: ArrayView2<f64>,
    tau: f64,
    user: usize,
    rng: &mut R,
) -> Result<RelaxedSelection> {
    let noise = gumbel_sample(alpha.dim(), rng);
    select_with_noise(alpha, noise.view(), tau, user)
}

/// Hard neighbor set: the argmax user of each selector row, merged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlternativeNeighborhood {
    /// `(user, number of neurons that picked it)`, ascending by user.
    pub neighbors: Vec<(usize, usize)>,
}

impl AlternativeNeighborhood {
    pub fn from_users(users: impl IntoIterator<Item = usize>) -> Self {
        let mut ids: Vec<usize> = users.into_iter().collect();
        ids.sort_unstable();
        let mut neighbors: Vec<(usize, usize)> = Vec::new();
        for u in ids {
            match neighbors.last_mut() {
                Some((last, c)) if *last == u => *c += 1,
                _ => neighbors.push((u, 1)),
            }
        }
        Self { neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn users(&self) -> impl Iterator<Item = usize> + '_ {
        self.neighbors.iter().map(|&(u, _)| u)
    }

    /// Pick counts renormalized to sum to one.
    pub fn weights(&self) -> Vec<f64> {
        let total: usize = self.neighbors.iter().map(|&(_, c)| c).sum();
        self.neighbors
            .iter()
            .map(|&(_, c)| c as f64 / total as f64)
            .collect()
    }
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Argmax per selector row, duplicates merged, the user excluded.
pub fn harden(selection: &RelaxedSelection) -> AlternativeNeighborhood {
    let picks = selection
        .v
        .axis_iter(Axis(0))
        .map(argmax)
        .filter(|&j| j != selection.user);
    AlternativeNeighborhood::from_users(picks)
}

/// Deterministic hard neighborhoods for every user: the argmax of each
/// selector row with the user masked out.
pub fn hard_neighborhoods(e: ArrayView2<f64>, h: ArrayView2<f64>) -> Vec<AlternativeNeighborhood> {
    let scores = e.dot(&e.t());
    (0..e.nrows())
        .into_par_iter()
        .map(|u| {
            let alpha = selector_probabilities(scores.row(u), h, Some(u));
            let picks = alpha.axis_iter(Axis(0)).map(argmax).filter(|&j| j != u);
            AlternativeNeighborhood::from_users(picks)
        })
        .collect()
}

/// Concrete samples for a batch of users with Gumbel noise from `seed`.
///
/// Returns the summed selection rows (`B x m`, same layout as
/// [`select_on_tape`] with the same seed) and their hardened neighborhoods.
pub fn sample_batch(
    e: ArrayView2<f64>,
    h: ArrayView2<f64>,
    users: &[usize],
    tau: f64,
    seed: u64,
) -> Result<(Array2<f64>, Vec<AlternativeNeighborhood>)> {
    if !(tau > 0.0) {
        return input(format!("temperature must be positive, got {tau}"));
    }
    let e_users = e.select(Axis(0), users);
    let scores = e_users.dot(&e.t());
    let rows: Vec<(Array1<f64>, AlternativeNeighborhood)> = users
        .par_iter()
        .enumerate()
        .map(|(r, &u)| {
            let alpha = selector_probabilities(scores.row(r), h, Some(u));
            let noise = row_noise(seed, r, alpha.dim());
            let sel = select_with_noise(alpha.view(), noise.view(), tau, u).expect("tau > 0");
            (sel.summed(), harden(&sel))
        })
        .collect();
    let mut mixture = Array2::zeros((users.len(), e.nrows()));
    let mut hoods = Vec::with_capacity(users.len());
    for (r, (sum, hood)) in rows.into_iter().enumerate() {
        mixture.row_mut(r).assign(&sum);
        hoods.push(hood);
    }
    Ok((mixture, hoods))
}

/// Gumbel noise for batch row `row`, reproducible from `(seed, row)`.
fn row_noise(seed: u64, row: usize, shape: (usize, usize)) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    gumbel_sample(shape, &mut rng)
}

/// Where the batched selector gets its Gumbel noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectorNoise {
    None,
    /// Per-row streams of a ChaCha generator with this seed.
    Seeded(u64),
}

/// Fused, differentiable concrete selector over a batch of users.
///
/// Inputs are the similarity scores `S` (`B x m`, row `r` is `E·e_{users[r]}`)
/// and the selector weights `h` (`k x m`). The output row `r` is the sum over
/// neurons of the concrete samples for `users[r]`, with that user masked.
pub struct ConcreteSelectorOp {
    pub users: Vec<usize>,
    pub tau: f64,
    pub noise: SelectorNoise,
    pub mask_self: bool,
}

struct RowWork {
    alpha: Array2<f64>,
    v: Array2<f64>,
}

impl ConcreteSelectorOp {
    fn masked(&self, r: usize) -> Option<usize> {
        self.mask_self.then_some(self.users[r])
    }

    fn row(&self, r: usize, scores: ArrayView1<f64>, h: ArrayView2<f64>) -> RowWork {
        let alpha = selector_probabilities(scores, h, self.masked(r));
        let noise = match self.noise {
            SelectorNoise::None => Array2::zeros(alpha.dim()),
            SelectorNoise::Seeded(seed) => row_noise(seed, r, alpha.dim()),
        };
        let v = select_with_noise(alpha.view(), noise.view(), self.tau, self.users[r])
            .expect("temperature validated at construction")
            .v;
        RowWork { alpha, v }
    }
}

impl CustomOp for ConcreteSelectorOp {
    fn name(&self) -> &'static str {
        "concrete_selector"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (scores, h) = (inputs[0], inputs[1]);
        let mut out = Array2::zeros(scores.dim());
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(r, mut o)| {
                let work = self.row(r, scores.row(r), h.view());
                o.assign(&work.v.sum_axis(Axis(0)));
            });
        out
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (scores, h) = (inputs[0], inputs[1]);
        let (batch, m) = scores.dim();
        let k = h.nrows();
        let tau = self.tau;
        let chunks: Vec<(Array2<f64>, Array2<f64>)> = (0..batch)
            .collect::<Vec<_>>()
            .par_chunks(SELECTOR_CHUNK)
            .map(|rows| {
                let mut ds = Array2::zeros((rows.len(), m));
                let mut dh = Array2::zeros((k, m));
                let mut dz = vec![0.0; m];
                for (local, &r) in rows.iter().enumerate() {
                    let work = self.row(r, scores.row(r), h.view());
                    let masked = self.masked(r);
                    let g = grad.row(r);
                    let s = scores.row(r);
                    for i in 0..k {
                        let v = work.v.row(i);
                        let a = work.alpha.row(i);
                        let vg: f64 = v.iter().zip(g).map(|(v, g)| v * g).sum();
                        // dl_j = v_j (g_j - <v, g>) / τ, and α_j dα_j = dl_j
                        // wherever the log floor is inactive.
                        let mut total = 0.0;
                        for j in 0..m {
                            let dl = v[j] * (g[j] - vg) / tau;
                            let active = Some(j) != masked && a[j] > LOG_FLOOR;
                            dz[j] = if active { dl } else { 0.0 };
                            total += dz[j];
                        }
                        for j in 0..m {
                            if Some(j) == masked {
                                continue;
                            }
                            let d = dz[j] - a[j] * total;
                            ds[[local, j]] += d * h[[i, j]];
                            dh[[i, j]] += d * s[j];
                        }
                    }
                }
                (ds, dh)
            })
            .collect();
        let mut d_scores = Array2::zeros((batch, m));
        let mut d_h = Array2::zeros((k, m));
        for (c, (ds, dh)) in chunks.into_iter().enumerate() {
            let start = c * SELECTOR_CHUNK;
            d_scores
                .slice_mut(ndarray::s![start..start + ds.nrows(), ..])
                .assign(&ds);
            d_h += &dh;
        }
        vec![Some(d_scores), Some(d_h)]
    }
}

/// Generator parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorVars {
    pub e0: Var,
    pub h: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GeneratorVars {
    /// Registers the parameters as trainable (`trainable = true`) or frozen inputs.
    pub fn register(tape: &mut Tape, params: &GeneratorParams, trainable: bool) -> Self {
        let mut add = |t: &Array2<f64>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Self {
            e0: add(&params.e0),
            h: add(&params.h),
            w1: add(&params.w1),
            b1: add(&params.b1),
            w2: add(&params.w2),
            b2: add(&params.b2),
        }
    }

    pub fn vars(&self) -> [Var; 6] {
        [self.e0, self.h, self.w1, self.b1, self.w2, self.b2]
    }
}

/// Tape version of [`propagate`].
pub fn propagate_on_tape(tape: &mut Tape, adjacency: &SparseOperator, e0: Var, layers: usize) -> Var {
    let mut current = e0;
    let mut all = vec![e0];
    for _ in 0..layers {
        current = tape.sparse_matmul(adjacency, current);
        all.push(current);
    }
    tape.mean(&all)
}

/// Summed concrete selections (`B x m`) for `users` from final embeddings `e`.
pub fn select_on_tape(
    tape: &mut Tape,
    e: Var,
    h: Var,
    users: &[usize],
    tau: f64,
    noise: SelectorNoise,
) -> Result<Var> {
    if !(tau > 0.0) {
        return input(format!("temperature must be positive, got {tau}"));
    }
    let rows = tape.gather(e, users.to_vec());
    let scores = tape.matmul_t(rows, e);
    let op = ConcreteSelectorOp {
        users: users.to_vec(),
        tau,
        noise,
        mask_self: true,
    };
    Ok(tape.custom(Arc::new(op), &[scores, h]))
}

/// Two-layer decoder `relu(x W1 + b1) W2 + b2` applied row-wise on a tape.
pub fn decode_on_tape(tape: &mut Tape, summed: Var, vars: &GeneratorVars) -> Var {
    let hidden = tape.matmul(summed, vars.w1);
    let hidden = tape.add_row(hidden, vars.b1);
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, vars.w2);
    tape.add_row(out, vars.b2)
}

/// Decodes one relaxed selection into a reconstructed profile row.
pub fn decode(selection: &RelaxedSelection, params: &GeneratorParams) -> Array1<f64> {
    let x = selection.summed();
    let hidden = (x.dot(&params.w1) + &params.b1.row(0)).mapv(|v| v.max(0.0));
    hidden.dot(&params.w2) + &params.b2.row(0)
}

/// Squared Frobenius norm of `reconstructed - target`.
pub fn reconstruction_loss(reconstructed: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    if reconstructed.dim() != target.dim() {
        return input(format!(
            "reconstruction {:?} does not match target {:?}",
            reconstructed.dim(),
            target.dim()
        ));
    }
    Ok(reconstructed
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Tape version of [`reconstruction_loss`] against constant target rows.
pub fn reconstruction_loss_on_tape(tape: &mut Tape, reconstructed: Var, target: Tensor) -> Var {
    let target = tape.constant(target);
    let residual = tape.sub(reconstructed, target);
    tape.sum_squares(residual)
}

/// Dense target rows of a sparse matrix.
pub fn dense_rows(matrix: &SparseMatrix, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), matrix.n_cols()));
    for (r, &src) in rows.iter().enumerate() {
        let (cols, vals) = matrix.row(src);
        for (&c, &v) in cols.iter().zip(vals) {
            out[[r, c]] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use ndarray::array;

    #[test]
    fn identity_propagation() {
        let e0 = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let id = SparseMatrix::identity(3);
        assert_eq!(propagate(&id, e0.view(), 4), e0);
        let any = SparseMatrix::from_triplets(3, 3, &[(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)]).unwrap();
        assert_eq!(propagate(&any, e0.view(), 0), e0);
    }

    #[test]
    fn chain_matches_hand_iteration() {
        // 0 -> 1 -> 2, node 2 self-loop, all rows stochastic
        let a = SparseMatrix::from_triplets(3, 3, &[(0, 1, 1.0), (1, 2, 1.0), (2, 2, 1.0)]).unwrap();
        let e0 = array![[1.0], [10.0], [100.0]];
        // E1 = [10, 100, 100], E2 = [100, 100, 100]
        let expected = array![[(1.0 + 10.0 + 100.0) / 3.0], [70.0], [100.0]];
        let got = propagate(&a, e0.view(), 2);
        assert!((&got - &expected).iter().all(|d| d.abs() < 1e-12), "{got}");
    }

    #[test]
    fn zero_selector_weights_give_uniform_rows() {
        let e = array![[1.0], [2.0], [3.0], [4.0]];
        let h = Array2::zeros((2, 4));
        let alpha = selector_logits(e.view(), h.view(), 1, false);
        assert!(alpha.iter().all(|&a| (a - 0.25).abs() < 1e-15));
        let single = selector_logits(array![[0.3]].view(), array![[2.0]].view(), 0, false);
        assert_eq!(single, array![[1.0]]);
    }

    #[test]
    fn selector_scalar_oracle() {
        let e = array![[1.0], [2.0], [-1.0]];
        let h = array![[0.5, 1.0, 2.0]];
        // scores for user 1: [2, 4, -2]; logits: [1, 4, -4]
        let alpha = selector_logits(e.view(), h.view(), 1, false);
        let z = [1.0f64.exp(), 4.0f64.exp(), (-4.0f64).exp()];
        let total: f64 = z.iter().sum();
        for j in 0..3 {
            assert!((alpha[[0, j]] - z[j] / total).abs() < 1e-15);
        }
        let masked = selector_logits(e.view(), h.view(), 1, true);
        assert_eq!(masked[[0, 1]], 0.0);
        assert!((masked.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unit_temperature_without_noise_returns_alpha() {
        let alpha = array![[0.2, 0.5, 0.3]];
        let sel = select_with_noise(alpha.view(), Array2::zeros((1, 3)).view(), 1.0, 9).unwrap();
        for (a, b) in sel.v.iter().zip(&alpha) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn low_temperature_closed_form() {
        let alpha = array![[0.1, 0.8, 0.1]];
        let sel = select_with_noise(alpha.view(), Array2::zeros((1, 3)).view(), 0.2, 0).unwrap();
        // α^5 renormalized
        let p: Vec<f64> = alpha.iter().map(|a| a.powi(5)).collect();
        let total: f64 = p.iter().sum();
        for (j, v) in sel.v.iter().enumerate() {
            assert!((v - p[j] / total).abs() < 1e-12);
        }
        assert!((sel.v[[0, 0]] - 3.05e-5).abs() < 1e-7);
        assert!((sel.v[[0, 1]] - 0.99994).abs() < 1e-5);
    }

    #[test]
    fn temperature_must_be_positive() {
        let alpha = array![[0.5, 0.5]];
        let noise = Array2::zeros((1, 2));
        assert!(select_with_noise(alpha.view(), noise.view(), 0.0, 0).is_err());
        assert!(select_with_noise(alpha.view(), noise.view(), -1.0, 0).is_err());
    }

    #[test]
    fn vanishing_temperature_is_one_hot_at_noisy_argmax() {
        let alpha = array![[0.3, 0.4, 0.3]];
        let noise = array![[0.5, 0.0, 0.2]];
        // log α + g: argmax is column 0
        let sel = select_with_noise(alpha.view(), noise.view(), 1e-3, 7).unwrap();
        assert!((sel.v[[0, 0]] - 1.0).abs() < 1e-12);
    }

    fn selection(user: usize, rows: &[usize], m: usize) -> RelaxedSelection {
        let mut v = Array2::from_elem((rows.len(), m), 0.01);
        for (i, &j) in rows.iter().enumerate() {
            v[[i, j]] = 1.0;
        }
        RelaxedSelection { user, v, tau: 1.0 }
    }

    #[test]
    fn harden_rules() {
        let distinct = harden(&selection(0, &[1, 2, 3], 5));
        assert_eq!(distinct.len(), 3);
        let merged = harden(&selection(0, &[2, 2, 4], 5));
        assert_eq!(merged.neighbors, vec![(2, 2), (4, 1)]);
        assert_eq!(merged.weights(), vec![2.0 / 3.0, 1.0 / 3.0]);
        let selfish = harden(&selection(3, &[3, 1], 5));
        assert_eq!(selfish.neighbors, vec![(1, 1)]);
    }

    fn small_params(m: usize, t: usize, k: usize) -> GeneratorParams {
        GeneratorParams::init(m, 2, k, t, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn zero_decoder_outputs_zero() {
        let mut p = small_params(3, 4, 2);
        for t in [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2] {
            t.fill(0.0);
        }
        let sel = selection(0, &[1, 2], 3);
        assert!(decode(&sel, &p).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn decoder_two_layer_oracle() {
        let mut p = small_params(2, 2, 1);
        p.w1 = array![[1.0, -1.0], [0.5, 2.0]];
        p.b1 = array![[0.0, 0.1]];
        p.w2 = array![[2.0, 0.0], [1.0, 1.0]];
        p.b2 = array![[0.5, -0.5]];
        let sel = RelaxedSelection {
            user: 0,
            v: array![[0.25, 0.75]],
            tau: 1.0,
        };
        // hidden = relu([0.25 + 0.375, -0.25 + 1.5 + 0.1]) = [0.625, 1.35]
        // out = [1.25 + 1.35 + 0.5, 1.35 - 0.5]
        let out = decode(&sel, &p);
        assert!((out[0] - 3.1).abs() < 1e-12 && (out[1] - 0.85).abs() < 1e-12, "{out}");
        for k in [1, 3, 7] {
            let sel = selection(0, &vec![1; k], 2);
            assert_eq!(decode(&sel, &p).len(), 2);
        }
    }

    #[test]
    fn reconstruction_loss_cases() {
        let t = array![[1.0, 0.0, 2.0]];
        assert_eq!(reconstruction_loss(t.view(), t.view()).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(Array2::zeros((1, 3)).view(), t.view()).unwrap(), 5.0);
        let r = array![[0.5, 0.0, 1.0]];
        let base = reconstruction_loss(r.view(), t.view()).unwrap();
        let doubled = &t + &((&r - &t) * 2.0);
        assert_eq!(reconstruction_loss(doubled.view(), t.view()).unwrap(), 4.0 * base);
        assert!(reconstruction_loss(Array2::zeros((2, 3)).view(), t.view()).is_err());
    }

    #[test]
    fn fused_selector_matches_per_user_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GeneratorParams::init(6, 3, 4, 5, 0.5, &mut rng).unwrap();
        let users = vec![4, 0, 4];
        let mut tape = Tape::new();
        let e = tape.constant(p.e0.clone());
        let h = tape.constant(p.h.clone());
        let out = select_on_tape(&mut tape, e, h, &users, 0.5, SelectorNoise::Seeded(3)).unwrap();
        for (r, &u) in users.iter().enumerate() {
            let alpha = selector_logits(p.e0.view(), p.h.view(), u, true);
            let noise = row_noise(3, r, alpha.dim());
            let sel = select_with_noise(alpha.view(), noise.view(), 0.5, u).unwrap();
            let expect = sel.summed();
            for j in 0..6 {
                assert!((tape.value(out)[[r, j]] - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_sampling_matches_tape_selector() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = GeneratorParams::init(7, 2, 3, 4, 0.8, &mut rng).unwrap();
        let users = [6, 2];
        let (mix, hoods) = sample_batch(p.e0.view(), p.h.view(), &users, 0.2, 77).unwrap();
        let mut tape = Tape::new();
        let e = tape.constant(p.e0.clone());
        let h = tape.constant(p.h.clone());
        let out = select_on_tape(&mut tape, e, h, &users, 0.2, SelectorNoise::Seeded(77)).unwrap();
        assert_eq!(tape.value(out), &mix);
        for (hood, &u) in hoods.iter().zip(&users) {
            assert!(hood.len() <= 3);
            assert!(hood.users().all(|v| v != u));
        }
    }

    #[test]
    fn reconstruction_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 5;
        let p = GeneratorParams::init(m, 3, 2, 4, 0.5, &mut rng).unwrap();
        let adj = SparseOperator::new(
            SparseMatrix::from_triplets(
                m,
                m,
                &[(0, 1, 0.5), (0, 2, 0.5), (1, 0, 1.0), (2, 3, 1.0), (3, 4, 1.0), (4, 0, 1.0)],
            )
            .unwrap(),
        );
        let mut tape = Tape::new();
        let vars = GeneratorVars::register(&mut tape, &p, true);
        let e = propagate_on_tape(&mut tape, &adj, vars.e0, 2);
        let users = [0, 3];
        let sel = select_on_tape(&mut tape, e, vars.h, &users, 0.7, SelectorNoise::Seeded(1)).unwrap();
        let rec = decode_on_tape(&mut tape, sel, &vars);
        let target = array![[0.0, 1.0, 2.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 3.0]];
        let loss = reconstruction_loss_on_tape(&mut tape, rec, target);
        for v in vars.vars() {
            let err = grad_check(&mut tape, loss, v, 1e-5).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }
}
