//! Attentive ranking GCN.
//!
//! Users and items exchange messages over the symmetric-normalized
//! interaction graph exactly as in LightGCN. When alternative neighborhoods
//! are supplied, every user additionally receives an attention-weighted sum of
//! its neighbors' embeddings at each layer. Final embeddings are the layer
//! mean and a score is the inner product of a user and an item embedding.
//!
//! The same propagation code runs with and without the social term, so the
//! LightGCN baseline is this module with no neighborhoods.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{input, Result};
use crate::generator::AlternativeNeighborhood;
use crate::numerics::{CustomOp, SparseOperator, Tape, Tensor, Var};
use crate::sparse::SparseMatrix;

/// Attention parameters of one propagation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `2d x 1`
    pub q: Array2<f64>,
    /// `d x d`, applied to `e_u + e_v`.
    pub w1: Array2<f64>,
    /// `d x d`, applied to the context item.
    pub w2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    /// `m x d`
    pub user_e0: Array2<f64>,
    /// `n x d`
    pub item_e0: Array2<f64>,
    /// One entry per propagation layer.
    pub attention: Vec<AttentionParams>,
}

impl DiscriminatorParams {
    /// Embeddings from `N(0, init_std²)`; attention weights Glorot-scaled.
    pub fn init<R: Rng>(
        users: usize,
        items: usize,
        dim: usize,
        layers: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if users == 0 || items == 0 || dim == 0 {
            return input("discriminator dimensions must be positive");
        }
        let emb = Normal::new(0.0, init_std).map_err(|e| crate::Error::Input(e.to_string()))?;
        let square = Normal::new(0.0, (1.0 / dim as f64).sqrt()).unwrap();
        let vector = Normal::new(0.0, (1.0 / (2 * dim) as f64).sqrt()).unwrap();
        let user_e0 = Array2::from_shape_simple_fn((users, dim), || emb.sample(rng));
        let item_e0 = Array2::from_shape_simple_fn((items, dim), || emb.sample(rng));
        let attention = (0..layers)
            .map(|_| AttentionParams {
                q: Array2::from_shape_simple_fn((2 * dim, 1), || vector.sample(rng)),
                w1: Array2::from_shape_simple_fn((dim, dim), || square.sample(rng)),
                w2: Array2::from_shape_simple_fn((dim, dim), || square.sample(rng)),
            })
            .collect();
        Ok(Self {
            user_e0,
            item_e0,
            attention,
        })
    }

    pub fn layers(&self) -> usize {
        self.attention.len()
    }

    pub fn dim(&self) -> usize {
        self.user_e0.ncols()
    }

    /// Every tensor in a fixed order: user table, item table, then
    /// `(q, w1, w2)` per layer.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.user_e0, &self.item_e0];
        for a in &self.attention {
            out.extend([&a.q, &a.w1, &a.w2]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.user_e0, &mut self.item_e0];
        for a in &mut self.attention {
            out.extend([&mut a.q, &mut a.w1, &mut a.w2]);
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["disc.user_e0".to_owned(), "disc.item_e0".to_owned()];
        for l in 0..self.layers() {
            out.extend(["q", "w1", "w2"].map(|p| format!("disc.layer{l}.{p}")));
        }
        out
    }
}

/// `1/√(|N(u)|·|N(i)|)` on every positive pair of a binary feedback matrix.
pub fn interaction_norm(y: &SparseMatrix) -> SparseMatrix {
    let user_deg: Vec<f64> = (0..y.n_rows()).map(|u| y.row_nnz(u) as f64).collect();
    let mut item_deg = vec![0.0; y.n_cols()];
    for &i in y.col_indices() {
        item_deg[i] += 1.0;
    }
    y.map_values(|u, i, _| 1.0 / (user_deg[u] * item_deg[i]).sqrt())
}

/// Normalized user-item graph with its transpose.
#[derive(Debug, Clone)]
pub struct InteractionGraph {
    /// `m x n`, users gather from items.
    pub user_from_items: SparseOperator,
    /// `n x m`, items gather from users.
    pub item_from_users: SparseOperator,
    /// `m x n` row-mean of each user's items, for the mean-history context.
    pub history_mean: SparseOperator,
}

impl InteractionGraph {
    pub fn new(y: &SparseMatrix) -> Self {
        let user_from_items = SparseOperator::new(interaction_norm(y));
        let item_from_users = user_from_items.transposed();
        let inv: Vec<f64> = (0..y.n_rows())
            .map(|u| match y.row_nnz(u) {
                0 => 0.0,
                d => 1.0 / d as f64,
            })
            .collect();
        Self {
            user_from_items,
            item_from_users,
            history_mean: SparseOperator::new(y.scale_rows(&inv)),
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_from_items.matrix().n_rows()
    }

    pub fn n_items(&self) -> usize {
        self.user_from_items.matrix().n_cols()
    }
}

/// Padded `m x width` table of neighbor ids.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    width: usize,
    ids: Vec<usize>,
    lens: Vec<usize>,
}

impl NeighborTable {
    pub fn new(neighborhoods: &[AlternativeNeighborhood]) -> Self {
        let width = neighborhoods.iter().map(|n| n.len()).max().unwrap_or(0).max(1);
        let mut ids = vec![0usize; neighborhoods.len() * width];
        let mut lens = Vec::with_capacity(neighborhoods.len());
        for (u, n) in neighborhoods.iter().enumerate() {
            for (j, v) in n.users().enumerate() {
                ids[u * width + j] = v;
            }
            lens.push(n.len());
        }
        Self { width, ids, lens }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_users(&self) -> usize {
        self.lens.len()
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.ids[u * self.width..u * self.width + self.lens[u]]
    }

    pub fn is_empty(&self) -> bool {
        self.lens.iter().all(|&l| l == 0)
    }

    /// Uniform weights `1/|A_u|` in the padded layout.
    pub fn uniform_weights(&self) -> Array2<f64> {
        let mut w = Array2::zeros((self.n_users(), self.width));
        for (u, &len) in self.lens.iter().enumerate() {
            for j in 0..len {
                w[[u, j]] = 1.0 / len as f64;
            }
        }
        w
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Attention logits `q · σ(W1(e_u + e_v) ‖ W2 e_i)` for every `(u, v ∈ A_u)`.
///
/// Inputs: `P = E_u W1ᵀ` (`m x d`), `C = E_ctx W2ᵀ` (`m x d`, one context row
/// per user) and `q` (`2d x 1`). Padding slots are zero.
struct AttentionScoresOp {
    table: Arc<NeighborTable>,
}

impl CustomOp for AttentionScoresOp {
    fn name(&self) -> &'static str {
        "attention_scores"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (p, c, q) = (inputs[0], inputs[1], inputs[2]);
        let d = p.ncols();
        let t = &self.table;
        let mut out = Array2::zeros((t.n_users(), t.width()));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(u, mut row)| {
                let ctx: f64 = (0..d).map(|a| q[[d + a, 0]] * sigmoid(c[[u, a]])).sum();
                for (j, &v) in t.neighbors(u).iter().enumerate() {
                    let pair: f64 = (0..d).map(|a| q[[a, 0]] * sigmoid(p[[u, a]] + p[[v, a]])).sum();
                    row[j] = pair + ctx;
                }
            });
        out
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (p, c, q) = (inputs[0], inputs[1], inputs[2]);
        let d = p.ncols();
        let t = &self.table;
        let mut dp = Array2::zeros(p.dim());
        let mut dc = Array2::zeros(c.dim());
        let mut dq = Array2::zeros(q.dim());
        // Sequential: neighbor rows of dp are scattered into.
        for u in 0..t.n_users() {
            let nbrs = t.neighbors(u);
            if nbrs.is_empty() {
                continue;
            }
            let gsum: f64 = (0..nbrs.len()).map(|j| grad[[u, j]]).sum();
            for a in 0..d {
                let s = sigmoid(c[[u, a]]);
                dq[[d + a, 0]] += gsum * s;
                dc[[u, a]] += gsum * q[[d + a, 0]] * s * (1.0 - s);
            }
            for (j, &v) in nbrs.iter().enumerate() {
                let g = grad[[u, j]];
                if g == 0.0 {
                    continue;
                }
                for a in 0..d {
                    let s = sigmoid(p[[u, a]] + p[[v, a]]);
                    dq[[a, 0]] += g * s;
                    let dz = g * q[[a, 0]] * s * (1.0 - s);
                    dp[[u, a]] += dz;
                    dp[[v, a]] += dz;
                }
            }
        }
        vec![Some(dp), Some(dc), Some(dq)]
    }
}

/// Softmax over each user's occupied slots; padding and empty rows stay zero.
struct MaskedSoftmaxOp {
    table: Arc<NeighborTable>,
}

impl CustomOp for MaskedSoftmaxOp {
    fn name(&self) -> &'static str {
        "masked_softmax"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let x = inputs[0];
        let mut out = Array2::zeros(x.dim());
        for u in 0..self.table.n_users() {
            let len = self.table.neighbors(u).len();
            if len == 0 {
                continue;
            }
            let max = (0..len).map(|j| x[[u, j]]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                out[[u, j]] = (x[[u, j]] - max).exp();
                total += out[[u, j]];
            }
            for j in 0..len {
                out[[u, j]] /= total;
            }
        }
        out
    }

    fn backward(&self, _inputs: &[&Tensor], y: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let dots = (y * grad).sum_axis(Axis(1)).insert_axis(Axis(1));
        vec![Some(y * &(grad - &dots))]
    }
}

/// `out[u] = Σ_j w[u, j] · x[A_u[j]]`.
struct NeighborAggregateOp {
    table: Arc<NeighborTable>,
}

impl CustomOp for NeighborAggregateOp {
    fn name(&self) -> &'static str {
        "neighbor_aggregate"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (w, x) = (inputs[0], inputs[1]);
        let t = &self.table;
        let mut out = Array2::zeros((t.n_users(), x.ncols()));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(u, mut row)| {
                for (j, &v) in t.neighbors(u).iter().enumerate() {
                    row.scaled_add(w[[u, j]], &x.row(v));
                }
            });
        out
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (w, x) = (inputs[0], inputs[1]);
        let t = &self.table;
        let mut dw = Array2::zeros(w.dim());
        let mut dx = Array2::zeros(x.dim());
        for u in 0..t.n_users() {
            let g = grad.row(u);
            for (j, &v) in t.neighbors(u).iter().enumerate() {
                dw[[u, j]] = g.dot(&x.row(v));
                dx.row_mut(v).scaled_add(w[[u, j]], &g);
            }
        }
        vec![Some(dw), Some(dx)]
    }
}

/// Item that conditions each user's attention.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionContext {
    /// One item per user.
    Items(Arc<[usize]>),
    /// The mean layer embedding of the user's training items.
    HistoryMean,
}

impl AttentionContext {
    /// The same item for every user.
    pub fn single_item(item: usize, users: usize) -> Self {
        Self::Items(vec![item; users].into())
    }
}

/// Alternative neighborhoods as consumed by the propagation.
#[derive(Debug, Clone)]
pub struct SocialInput {
    pub table: Arc<NeighborTable>,
    pub context: AttentionContext,
    /// `false` replaces attention by uniform `1/|A_u|` weights.
    pub attention: bool,
}

/// Discriminator parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct DiscriminatorVars {
    pub user_e0: Var,
    pub item_e0: Var,
    /// `(q, w1, w2)` per layer.
    pub attention: Vec<(Var, Var, Var)>,
}

impl DiscriminatorVars {
    pub fn register(tape: &mut Tape, params: &DiscriminatorParams, trainable: bool) -> Self {
        let mut add = |t: &Array2<f64>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let user_e0 = add(&params.user_e0);
        let item_e0 = add(&params.item_e0);
        let attention = params
            .attention
            .iter()
            .map(|a| (add(&a.q), add(&a.w1), add(&a.w2)))
            .collect();
        Self {
            user_e0,
            item_e0,
            attention,
        }
    }

    /// Same order as [`DiscriminatorParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.user_e0, self.item_e0];
        for &(q, w1, w2) in &self.attention {
            out.extend([q, w1, w2]);
        }
        out
    }
}

/// Layer embeddings and the layer-mean final embeddings.
#[derive(Debug, Clone)]
pub struct PropagationVars {
    pub users: Vec<Var>,
    pub items: Vec<Var>,
    /// Attention (or uniform) weights per layer, when the social term is on.
    pub social_weights: Vec<Var>,
    pub user_final: Var,
    pub item_final: Var,
}

/// One propagation step from layer `l` to `l + 1`; returns `(users, items, weights)`.
pub fn propagate_layer(
    tape: &mut Tape,
    graph: &InteractionGraph,
    users: Var,
    items: Var,
    social: Option<&SocialInput>,
    attention: Option<(Var, Var, Var)>,
) -> (Var, Var, Option<Var>) {
    let from_items = tape.sparse_matmul(&graph.user_from_items, items);
    let next_items = tape.sparse_matmul(&graph.item_from_users, users);
    let Some(social) = social.filter(|s| !s.table.is_empty()) else {
        return (from_items, next_items, None);
    };
    let weights = match (social.attention, attention) {
        (true, Some((q, w1, w2))) => {
            let p = tape.matmul_t(users, w1);
            let ctx = match &social.context {
                AttentionContext::Items(ids) => tape.gather(items, Arc::clone(ids)),
                AttentionContext::HistoryMean => tape.sparse_matmul(&graph.history_mean, items),
            };
            let c = tape.matmul_t(ctx, w2);
            let scores = tape.custom(
                Arc::new(AttentionScoresOp {
                    table: Arc::clone(&social.table),
                }),
                &[p, c, q],
            );
            tape.custom(
                Arc::new(MaskedSoftmaxOp {
                    table: Arc::clone(&social.table),
                }),
                &[scores],
            )
        }
        _ => tape.constant(social.table.uniform_weights()),
    };
    let from_friends = tape.custom(
        Arc::new(NeighborAggregateOp {
            table: Arc::clone(&social.table),
        }),
        &[weights, users],
    );
    let next_users = tape.add(from_friends, from_items);
    (next_users, next_items, Some(weights))
}

/// Full `L`-layer propagation with layer-mean combination.
pub fn propagate_on_tape(
    tape: &mut Tape,
    graph: &InteractionGraph,
    vars: &DiscriminatorVars,
    layers: usize,
    social: Option<&SocialInput>,
) -> PropagationVars {
    let mut users = vec![vars.user_e0];
    let mut items = vec![vars.item_e0];
    let mut social_weights = Vec::new();
    for l in 0..layers {
        let (u, i, w) = propagate_layer(
            tape,
            graph,
            users[l],
            items[l],
            social,
            vars.attention.get(l).copied(),
        );
        users.push(u);
        items.push(i);
        social_weights.extend(w);
    }
    let user_final = tape.mean(&users);
    let item_final = tape.mean(&items);
    PropagationVars {
        users,
        items,
        social_weights,
        user_final,
        item_final,
    }
}

/// Final embeddings without gradient bookkeeping.
#[derive(Debug, Clone)]
pub struct PropagationState {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl PropagationState {
    pub fn compute(
        params: &DiscriminatorParams,
        graph: &InteractionGraph,
        social: Option<&SocialInput>,
    ) -> Self {
        let mut tape = Tape::new();
        let vars = DiscriminatorVars::register(&mut tape, params, false);
        let out = propagate_on_tape(&mut tape, graph, &vars, params.layers(), social);
        Self {
            users: tape.value(out.user_final).clone(),
            items: tape.value(out.item_final).clone(),
        }
    }

    pub fn score(&self, user: usize, item: usize) -> f64 {
        score(self.users.view(), self.items.view(), user, item)
    }
}

/// `ŷ(u, i) = e*_u · e*_i`.
pub fn score(users: ArrayView2<f64>, items: ArrayView2<f64>, user: usize, item: usize) -> f64 {
    users.row(user).dot(&items.row(item))
}

/// Attention weights of one user's neighbors at one layer, with `item` as context.
///
/// Returns `None` for an empty neighborhood (no social propagation).
pub fn attention_weights(
    user: usize,
    neighbors: &AlternativeNeighborhood,
    context_item: usize,
    user_layer: ArrayView2<f64>,
    item_layer: ArrayView2<f64>,
    params: &AttentionParams,
) -> Option<Vec<f64>> {
    if neighbors.is_empty() {
        return None;
    }
    let d = user_layer.ncols();
    let ctx = params.w2.dot(&item_layer.row(context_item));
    let ctx_score: f64 = (0..d).map(|a| params.q[[d + a, 0]] * sigmoid(ctx[a])).sum();
    let scores: Vec<f64> = neighbors
        .users()
        .map(|v| {
            let z = params.w1.dot(&(&user_layer.row(user) + &user_layer.row(v)));
            let pair: f64 = (0..d).map(|a| params.q[[a, 0]] * sigmoid(z[a])).sum();
            pair + ctx_score
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Some(exp.into_iter().map(|e| e / total).collect())
}

/// Sum over triples of `-log σ(ŷ_ui - ŷ_uj)`, plus `lambda · reg` when given.
pub fn bpr_loss_on_tape(
    tape: &mut Tape,
    user_final: Var,
    item_final: Var,
    triples: &[(usize, usize, usize)],
    reg: Option<Var>,
    lambda: f64,
) -> Var {
    let u: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let i: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let j: Vec<usize> = triples.iter().map(|t| t.2).collect();
    let eu = tape.gather(user_final, u);
    let ei = tape.gather(item_final, i);
    let ej = tape.gather(item_final, j);
    let pos = tape.row_dot(eu, ei);
    let neg = tape.row_dot(eu, ej);
    let gap = tape.sub(pos, neg);
    let ranking = pairwise_log_loss(tape, gap);
    match reg {
        Some(r) if lambda != 0.0 => {
            let r = tape.scale(r, lambda);
            tape.add(ranking, r)
        }
        _ => ranking,
    }
}

/// `Σ -log σ(gap)`.
pub fn pairwise_log_loss(tape: &mut Tape, gap: Var) -> Var {
    let ls = tape.log_sigmoid(gap);
    let total = tape.sum(ls);
    tape.scale(total, -1.0)
}

/// Sum of squared layer-0 embeddings of the triples' users and items plus the
/// squared attention parameters.
pub fn regularizer_on_tape(
    tape: &mut Tape,
    vars: &DiscriminatorVars,
    triples: &[(usize, usize, usize)],
    include_attention: bool,
) -> Var {
    let u: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let items: Vec<usize> = triples.iter().flat_map(|t| [t.1, t.2]).collect();
    let eu = tape.gather(vars.user_e0, u);
    let ei = tape.gather(vars.item_e0, items);
    let mut total = tape.sum_squares(eu);
    let items_sq = tape.sum_squares(ei);
    total = tape.add(total, items_sq);
    if include_attention {
        for &(q, w1, w2) in &vars.attention {
            for p in [q, w1, w2] {
                let sq = tape.sum_squares(p);
                total = tape.add(total, sq);
            }
        }
    }
    total
}

/// Adversarial pair loss `Σ -log σ(ŷ_{u,i} - ŷ_{u',i})`.
///
/// `mixture` is `B x m`: row `b` holds the summed relaxed selection of the
/// `b`-th user's `k` generator neurons, so the generated neighbor embedding is
/// `mixture[b] · E*_users / k`.
pub fn adversarial_pair_loss_on_tape(
    tape: &mut Tape,
    user_final: Var,
    item_final: Var,
    pairs: &[(usize, usize)],
    mixture: Var,
    k: usize,
) -> Var {
    let u: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let i: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let eu = tape.gather(user_final, u);
    let ei = tape.gather(item_final, i);
    let generated = tape.matmul(mixture, user_final);
    let generated = tape.scale(generated, 1.0 / k as f64);
    let real = tape.row_dot(eu, ei);
    let fake = tape.row_dot(generated, ei);
    let gap = tape.sub(real, fake);
    pairwise_log_loss(tape, gap)
}
