//! Pretraining, adversarial alternation and the unified objective.
//!
//! Pretraining fits the discriminator as a plain interaction GCN and the
//! generator on profile reconstruction. Each adversarial batch then samples
//! fresh alternative neighborhoods, takes a discriminator step on BPR plus
//! `β` times the adversarial pair loss, and a generator step that ascends the
//! same pair loss through the relaxed selection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::InteractionLog;
use crate::discriminator::{
    adversarial_pair_loss_on_tape, bpr_loss_on_tape, propagate_on_tape, regularizer_on_tape,
    AttentionContext, AttentionParams, DiscriminatorParams, DiscriminatorVars, InteractionGraph,
    NeighborTable, PropagationState, SocialInput,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DenseScorer, EmbeddingScorer, EvalMode, Scorer};
use crate::generator::{
    self, decode_on_tape, dense_rows, hard_neighborhoods, reconstruction_loss_on_tape, sample_batch,
    select_on_tape, AlternativeNeighborhood, GeneratorParams, GeneratorVars, SelectorNoise,
};
use crate::motif::{motif_adjacency, Motif, MotifSet};
use crate::numerics::{adam_step, AdamConfig, AdamState, SparseOperator, Tape};
use crate::sparse::SparseMatrix;

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Generator propagates over the explicit relations only.
    pub no_motif: bool,
    /// No profile reconstruction at all.
    pub no_denoise: bool,
    /// Uniform `1/|A_u|` neighbor weights.
    pub no_attention: bool,
    /// `β = 0` and neighborhoods frozen after pretraining.
    pub no_adversarial: bool,
    /// `k` uniformly random neighbors per user, generator suspended.
    pub random_neighbors: bool,
}

/// When the per-iteration reconstruction fine-tune step runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneSchedule {
    Epoch,
    Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub dim: usize,
    pub layers: usize,
    pub k: usize,
    pub tau: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Weight of the squared generator embeddings in generator updates.
    pub generator_lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_epochs_d: usize,
    pub pretrain_epochs_g: usize,
    pub adversarial_epochs: usize,
    /// Epoch budget of the BPR-MF and LightGCN baselines.
    pub baseline_epochs: usize,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub init_std: f64,
    pub decoder_hidden: usize,
    /// Generator steps per discriminator step.
    pub g_steps: usize,
    pub finetune: FinetuneSchedule,
    pub binarize_motifs: bool,
    pub binarize_target: bool,
    /// Reconstruct every user's M8 row, not only the nonempty ones.
    pub reconstruct_all_users: bool,
    pub ablations: Ablations,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            layers: 4,
            k: 40,
            tau: 0.2,
            beta: 0.3,
            lambda: 0.005,
            generator_lambda: 0.005,
            learning_rate: 0.001,
            batch_size: 512,
            pretrain_epochs_d: 30,
            pretrain_epochs_g: 10,
            adversarial_epochs: 20,
            baseline_epochs: 50,
            patience: 5,
            seed: 0,
            init_std: 0.01,
            decoder_hidden: 64,
            g_steps: 1,
            finetune: FinetuneSchedule::Epoch,
            binarize_motifs: false,
            binarize_target: false,
            reconstruct_all_users: false,
            ablations: Ablations::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("decoder_hidden", self.decoder_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be in (0, inf), got {}", self.tau)));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("generator_lambda", self.generator_lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std must be positive, got {}", self.init_std)));
        }
        if self.ablations.random_neighbors && !self.ablations.no_adversarial {
            return Err(Error::Config(
                "random_neighbors requires adversarial training to be off".into(),
            ));
        }
        Ok(())
    }

    /// `β`, or zero when adversarial training is ablated.
    pub fn effective_beta(&self) -> f64 {
        if self.ablations.no_adversarial {
            0.0
        } else {
            self.beta
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Everything derived from one training split.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: InteractionLog,
    pub validation: Option<InteractionLog>,
    /// Explicit relations `S`, `m x m`.
    pub social: SparseMatrix,
    pub graph: InteractionGraph,
    /// Row-normalized motif (or social-only) adjacency of the generator.
    pub generator_adjacency: SparseOperator,
    /// M8 rows the generator reconstructs.
    pub reconstruction_target: SparseMatrix,
    pub reconstruction_users: Vec<usize>,
    /// Attention context of users without a positive in the current batch.
    pub default_context: Arc<[usize]>,
}

impl TrainingData {
    /// Builds motif adjacencies from the training feedback only.
    pub fn prepare(
        train: InteractionLog,
        validation: Option<InteractionLog>,
        social: SparseMatrix,
        config: &TrainingConfig,
    ) -> Result<Self> {
        let m = train.n_users();
        if social.shape() != (m, m) {
            return Err(Error::Input(format!(
                "social matrix is {:?} but there are {m} users",
                social.shape()
            )));
        }
        if train.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let motifs = if config.ablations.no_motif {
            MotifSet::social_only(&social)?
        } else {
            MotifSet::build(&social, &train.y, config.binarize_motifs)?
        };
        let mut target = match motifs.motif(Motif::M8) {
            Some(m8) => m8.clone(),
            None => motif_adjacency(&social, &train.y, Motif::M8)?,
        };
        if config.binarize_target {
            target = target.binarized();
        }
        let reconstruction_users = (0..m)
            .filter(|&u| config.reconstruct_all_users || target.row_nnz(u) > 0)
            .collect();
        let default_context: Arc<[usize]> = (0..m)
            .map(|u| train.items_of(u).first().copied().unwrap_or(0))
            .collect();
        Ok(Self {
            graph: InteractionGraph::new(&train.y),
            generator_adjacency: SparseOperator::new(motifs.normalized),
            reconstruction_target: target,
            reconstruction_users,
            default_context,
            train,
            validation,
            social,
        })
    }

    pub fn n_users(&self) -> usize {
        self.train.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.train.n_items()
    }

    /// Each batch user's first positive, everyone else's default context.
    pub fn batch_context(&self, triples: &[(usize, usize, usize)]) -> Vec<usize> {
        let mut ctx = self.default_context.to_vec();
        let mut seen = vec![false; ctx.len()];
        for &(u, i, _) in triples {
            if !seen[u] {
                seen[u] = true;
                ctx[u] = i;
            }
        }
        ctx
    }
}

/// How attention is conditioned at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    /// Attention recomputed for every candidate item.
    Exact,
    /// The mean embedding of the user's training items as a fixed context.
    Fast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsrfModel {
    pub discriminator: DiscriminatorParams,
    /// `None` when the generator is suspended (random neighbors, baselines).
    pub generator: Option<GeneratorParams>,
    pub neighborhoods: Vec<AlternativeNeighborhood>,
    pub attention: bool,
}

impl EsrfModel {
    /// Fresh parameters: discriminator first, then generator, from one stream.
    pub fn init(data: &TrainingData, config: &TrainingConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let discriminator = DiscriminatorParams::init(
            data.n_users(),
            data.n_items(),
            config.dim,
            config.layers,
            config.init_std,
            &mut rng,
        )?;
        let generator = if config.ablations.random_neighbors {
            None
        } else {
            Some(GeneratorParams::init(
                data.n_users(),
                config.dim,
                config.k,
                config.decoder_hidden,
                config.init_std,
                &mut rng,
            )?)
        };
        Ok(Self {
            discriminator,
            generator,
            neighborhoods: vec![AlternativeNeighborhood::default(); data.n_users()],
            attention: !config.ablations.no_attention,
        })
    }

    pub fn table(&self) -> Arc<NeighborTable> {
        Arc::new(NeighborTable::new(&self.neighborhoods))
    }

    pub fn social_input(&self, context: AttentionContext) -> SocialInput {
        SocialInput {
            table: self.table(),
            context,
            attention: self.attention,
        }
    }

    /// Final embeddings with the given attention context.
    pub fn state(&self, data: &TrainingData, context: AttentionContext) -> PropagationState {
        let social = self.social_input(context);
        PropagationState::compute(&self.discriminator, &data.graph, Some(&social))
    }

    fn context_free(&self) -> bool {
        !self.attention || self.neighborhoods.iter().all(|n| n.is_empty())
    }

    pub fn fast_scorer(&self, data: &TrainingData) -> EmbeddingScorer {
        let s = self.state(data, AttentionContext::HistoryMean);
        EmbeddingScorer {
            users: s.users,
            items: s.items,
        }
    }

    /// Full score table with every candidate item as its own attention context.
    pub fn exact_scorer(&self, data: &TrainingData) -> DenseScorer {
        let (m, n) = (data.n_users(), data.n_items());
        if self.context_free() {
            let s = self.state(data, AttentionContext::HistoryMean);
            return DenseScorer {
                scores: s.users.dot(&s.items.t()),
            };
        }
        let table = self.table();
        let columns: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let social = SocialInput {
                    table: Arc::clone(&table),
                    context: AttentionContext::single_item(i, m),
                    attention: true,
                };
                let s = PropagationState::compute(&self.discriminator, &data.graph, Some(&social));
                s.users.dot(&s.items.row(i)).to_vec()
            })
            .collect();
        let mut scores = Array2::zeros((m, n));
        for (i, col) in columns.into_iter().enumerate() {
            for (u, v) in col.into_iter().enumerate() {
                scores[[u, i]] = v;
            }
        }
        DenseScorer { scores }
    }

    pub fn scorer(&self, data: &TrainingData, mode: InferenceMode) -> Box<dyn Scorer> {
        match mode {
            InferenceMode::Exact => Box::new(self.exact_scorer(data)),
            InferenceMode::Fast => Box::new(self.fast_scorer(data)),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        for (name, t) in self
            .discriminator
            .tensor_names()
            .into_iter()
            .zip(self.discriminator.tensors())
        {
            c.push(name, t);
        }
        if let Some(g) = &self.generator {
            for (name, t) in GeneratorParams::NAMES.iter().zip(g.tensors()) {
                c.push(*name, t);
            }
        }
        c.neighborhoods = Some(self.neighborhoods.clone());
        c
    }

    /// Restores a model written by [`EsrfModel::to_checkpoint`] with the
    /// shapes implied by `config`.
    pub fn from_checkpoint(
        mut c: Checkpoint,
        users: usize,
        items: usize,
        config: &TrainingConfig,
    ) -> Result<Self> {
        let d = config.dim;
        let user_e0 = c.take("disc.user_e0", (users, d))?;
        let item_e0 = c.take("disc.item_e0", (items, d))?;
        let mut attention = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            attention.push(AttentionParams {
                q: c.take(&format!("disc.layer{l}.q"), (2 * d, 1))?,
                w1: c.take(&format!("disc.layer{l}.w1"), (d, d))?,
                w2: c.take(&format!("disc.layer{l}.w2"), (d, d))?,
            });
        }
        let generator = if c.get(GeneratorParams::NAMES[0]).is_some() {
            let t = config.decoder_hidden;
            let shapes = [(users, d), (config.k, users), (users, t), (1, t), (t, users), (1, users)];
            let mut tensors = Vec::with_capacity(6);
            for (name, shape) in GeneratorParams::NAMES.iter().zip(shapes) {
                tensors.push(c.take(name, shape)?);
            }
            let mut it = tensors.into_iter();
            let mut next = || it.next().expect("six tensors");
            Some(GeneratorParams {
                e0: next(),
                h: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
        } else {
            None
        };
        let neighborhoods = c
            .neighborhoods
            .take()
            .unwrap_or_else(|| vec![AlternativeNeighborhood::default(); users]);
        if neighborhoods.len() != users {
            return Err(Error::Input(format!(
                "checkpoint has {} neighborhoods for {users} users",
                neighborhoods.len()
            )));
        }
        Ok(Self {
            discriminator: DiscriminatorParams {
                user_e0,
                item_e0,
                attention,
            },
            generator,
            neighborhoods,
            attention: !config.ablations.no_attention,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    PretrainDiscriminator,
    PretrainGenerator,
    Adversarial,
    Baseline,
}

/// Per-epoch means: `l_r` per triple, `l_s` per reconstructed user, `l_adv`
/// per adversarial pair. Inactive terms are zero. Generator pretraining
/// records `l_s` after the epoch under the root seed's noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub l_r: f64,
    pub l_s: f64,
    pub l_adv: f64,
    pub val_prec10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, phase: Phase, l_r: f64, l_s: f64, l_adv: f64, val_prec10: Option<f64>) {
        let epoch = self.records.len() + 1;
        self.records.push(EpochRecord {
            epoch,
            phase,
            l_r,
            l_s,
            l_adv,
            val_prec10,
        });
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("# seed={}\nepoch\tL_r\tL_s\tL_adv\tval_prec10\n", self.seed);
        for r in &self.records {
            let val = r.val_prec10.map_or("nan".to_owned(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{:.6}\t{val}", r.epoch, r.l_r, r.l_s, r.l_adv);
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// A negative item for `user`, uniform over the items it never interacted
/// with; `None` if it interacted with all of them.
pub fn sample_negative<R: Rng>(log: &InteractionLog, user: usize, rng: &mut R) -> Option<usize> {
    let positives = log.items_of(user);
    let n = log.n_items();
    let free = n - positives.len();
    if free == 0 {
        return None;
    }
    if 2 * positives.len() <= n {
        loop {
            let j = rng.gen_range(0..n);
            if positives.binary_search(&j).is_err() {
                return Some(j);
            }
        }
    }
    let mut r = rng.gen_range(0..free);
    (0..n).find(|j| {
        if positives.binary_search(j).is_ok() {
            return false;
        }
        if r == 0 {
            return true;
        }
        r -= 1;
        false
    })
}

/// One epoch of BPR triples: every positive once in random order, each with
/// a fresh negative. Users that own every item are skipped.
pub fn sample_triples<R: Rng>(log: &InteractionLog, rng: &mut R) -> Vec<(usize, usize, usize)> {
    let mut order = log.positives.clone();
    order.shuffle(rng);
    let mut skipped = 0usize;
    let triples = order
        .into_iter()
        .filter_map(|(u, i)| {
            let j = sample_negative(log, u, rng);
            if j.is_none() {
                skipped += 1;
            }
            j.map(|j| (u, i, j))
        })
        .collect();
    if skipped > 0 {
        log::warn!("skipped {skipped} positives of users who interacted with every item");
    }
    triples
}

/// `k` distinct uniformly random neighbors per user (all others if fewer).
pub fn random_neighborhoods<R: Rng>(users: usize, k: usize, rng: &mut R) -> Vec<AlternativeNeighborhood> {
    (0..users)
        .map(|u| {
            let others = users.saturating_sub(1);
            let picks = index::sample(rng, others, k.min(others))
                .into_iter()
                .map(|j| if j >= u { j + 1 } else { j });
            AlternativeNeighborhood::from_users(picks)
        })
        .collect()
}

fn finite(value: f64, what: &str, epoch: usize, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence(format!(
            "{what} became {value} at epoch {epoch}, batch {batch}"
        )))
    }
}

/// Adversarial term of a discriminator step.
pub struct AdversarialTerm<'a> {
    pub mixture: &'a Array2<f64>,
    pub pairs: &'a [(usize, usize)],
    pub k: usize,
    pub beta: f64,
}

/// Losses of one discriminator step, before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    /// `L_r` including the regularizer.
    pub ranking: f64,
    pub adversarial: f64,
}

/// One Adam step on `L_r (+ β·L_adv)`. `social = None` (or an empty table)
/// is plain interaction propagation.
pub fn discriminator_step(
    params: &mut DiscriminatorParams,
    adam: &mut AdamState,
    graph: &InteractionGraph,
    social: Option<&SocialInput>,
    triples: &[(usize, usize, usize)],
    adversarial: Option<AdversarialTerm<'_>>,
    lambda: f64,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let vars = DiscriminatorVars::register(&mut tape, params, true);
    let prop = propagate_on_tape(&mut tape, graph, &vars, params.layers(), social);
    let attention_on = social.is_some_and(|s| s.attention && !s.table.is_empty());
    let reg = regularizer_on_tape(&mut tape, &vars, triples, attention_on);
    let ranking = bpr_loss_on_tape(
        &mut tape,
        prop.user_final,
        prop.item_final,
        triples,
        Some(reg),
        lambda,
    );
    let mut loss = ranking;
    let mut adv_value = 0.0;
    if let Some(term) = adversarial {
        let mixture = tape.constant(term.mixture.clone());
        let adv = adversarial_pair_loss_on_tape(
            &mut tape,
            prop.user_final,
            prop.item_final,
            term.pairs,
            mixture,
            term.k,
        );
        adv_value = tape.scalar_value(adv);
        let weighted = tape.scale(adv, term.beta);
        loss = tape.add(ranking, weighted);
    }
    let ranking_value = tape.scalar_value(ranking);
    if !tape.scalar_value(loss).is_finite() {
        return Err(Error::Divergence(format!(
            "discriminator loss is {}",
            tape.scalar_value(loss)
        )));
    }
    let grads = tape.backward(loss)?;
    let ids = vars.vars();
    let g: Vec<Option<&Array2<f64>>> = ids.iter().map(|&v| grads.get(v)).collect();
    adam_step(&mut params.tensors_mut(), &g, adam)?;
    Ok(StepLosses {
        ranking: ranking_value,
        adversarial: adv_value,
    })
}

/// Validation Prec@10 with the fast inference context, if there is a
/// validation set with at least one positive.
pub fn validation_precision(
    params: &DiscriminatorParams,
    data: &TrainingData,
    social: Option<&SocialInput>,
) -> Result<Option<f64>> {
    let Some(val) = data.validation.as_ref().filter(|v| !v.is_empty()) else {
        return Ok(None);
    };
    let social = social.map(|s| SocialInput {
        table: Arc::clone(&s.table),
        context: AttentionContext::HistoryMean,
        attention: s.attention,
    });
    let state = PropagationState::compute(params, &data.graph, social.as_ref());
    let scorer = EmbeddingScorer {
        users: state.users,
        items: state.items,
    };
    Ok(Some(evaluate(&scorer, &data.train, val, 10, EvalMode::General)?.precision_at_n))
}

/// Best-on-validation snapshot with patience.
pub(crate) struct EarlyStopping<T> {
    best: Option<(f64, T)>,
    stale: usize,
    patience: usize,
}

impl<T: Clone> EarlyStopping<T> {
    pub(crate) fn new(patience: usize) -> Self {
        Self {
            best: None,
            stale: 0,
            patience,
        }
    }

    /// Records a score; returns `true` when training should stop.
    pub(crate) fn observe(&mut self, score: Option<f64>, current: &T) -> bool {
        let Some(score) = score else {
            return false;
        };
        match &self.best {
            Some((best, _)) if score <= *best => self.stale += 1,
            _ => {
                self.best = Some((score, current.clone()));
                self.stale = 0;
            }
        }
        self.patience > 0 && self.stale >= self.patience
    }

    pub(crate) fn restore(self, current: &mut T) {
        if let Some((_, best)) = self.best {
            *current = best;
        }
    }
}

/// Interaction-only discriminator training: the LightGCN baseline and the
/// discriminator pretraining share this loop. `table` adds a fixed social
/// term, which is a no-op when every neighborhood is empty.
#[allow(clippy::too_many_arguments)]
pub fn fit_discriminator<R: Rng>(
    params: &mut DiscriminatorParams,
    adam: &mut AdamState,
    data: &TrainingData,
    table: Option<(Arc<NeighborTable>, bool)>,
    epochs: usize,
    config: &TrainingConfig,
    rng: &mut R,
    history: &mut TrainingHistory,
    phase: Phase,
) -> Result<()> {
    let mut stopper = EarlyStopping::new(config.patience);
    for _ in 0..epochs {
        let epoch = history.records.len() + 1;
        let triples = sample_triples(&data.train, rng);
        let mut total = 0.0;
        for (b, batch) in triples.chunks(config.batch_size).enumerate() {
            let social = table.as_ref().map(|(t, attention)| SocialInput {
                table: Arc::clone(t),
                context: AttentionContext::Items(data.batch_context(batch).into()),
                attention: *attention,
            });
            let step = discriminator_step(
                params,
                adam,
                &data.graph,
                social.as_ref(),
                batch,
                None,
                config.lambda,
            )
            .map_err(|e| with_position(e, epoch, b))?;
            total += step.ranking;
        }
        let l_r = finite(total / triples.len().max(1) as f64, "L_r", epoch, 0)?;
        let social = table.as_ref().map(|(t, attention)| SocialInput {
            table: Arc::clone(t),
            context: AttentionContext::HistoryMean,
            attention: *attention,
        });
        let val = validation_precision(params, data, social.as_ref())?;
        history.push(phase, l_r, 0.0, 0.0, val);
        if stopper.observe(val, params) {
            break;
        }
    }
    stopper.restore(params);
    Ok(())
}

fn with_position(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Divergence(msg) => Error::Divergence(format!("{msg} (epoch {epoch}, batch {batch})")),
        other => other,
    }
}

/// One reconstruction step over `users`; returns `L_s` summed over them.
pub fn reconstruction_step(
    params: &mut GeneratorParams,
    adam: &mut AdamState,
    data: &TrainingData,
    users: &[usize],
    config: &TrainingConfig,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = GeneratorVars::register(&mut tape, params, true);
    let e = generator::propagate_on_tape(&mut tape, &data.generator_adjacency, vars.e0, config.layers);
    let mixture = select_on_tape(&mut tape, e, vars.h, users, config.tau, SelectorNoise::Seeded(seed))?;
    let rec = decode_on_tape(&mut tape, mixture, &vars);
    let ls = reconstruction_loss_on_tape(&mut tape, rec, dense_rows(&data.reconstruction_target, users));
    let rows = tape.gather(vars.e0, users.to_vec());
    let reg = tape.sum_squares(rows);
    let reg = tape.scale(reg, config.generator_lambda);
    let loss = tape.add(ls, reg);
    let value = tape.scalar_value(ls);
    if !tape.scalar_value(loss).is_finite() {
        return Err(Error::Divergence(format!("L_s is {value}")));
    }
    let grads = tape.backward(loss)?;
    let g: Vec<Option<&Array2<f64>>> = vars.vars().iter().map(|&v| grads.get(v)).collect();
    adam_step(&mut params.tensors_mut(), &g, adam)?;
    Ok(value)
}

/// `L_s` summed over `users` without updating anything.
pub fn reconstruction_loss_value(
    params: &GeneratorParams,
    data: &TrainingData,
    users: &[usize],
    config: &TrainingConfig,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = GeneratorVars::register(&mut tape, params, false);
    let e = generator::propagate_on_tape(&mut tape, &data.generator_adjacency, vars.e0, config.layers);
    let mixture = select_on_tape(&mut tape, e, vars.h, users, config.tau, SelectorNoise::Seeded(seed))?;
    let rec = decode_on_tape(&mut tape, mixture, &vars);
    let ls = reconstruction_loss_on_tape(&mut tape, rec, dense_rows(&data.reconstruction_target, users));
    Ok(tape.scalar_value(ls))
}

/// Adversarial pair loss of the generator's current selection for `users`
/// against a frozen discriminator state, without updating anything.
pub fn adversarial_loss(
    params: &GeneratorParams,
    data: &TrainingData,
    d_state: &PropagationState,
    users: &[usize],
    pairs: &[(usize, usize)],
    config: &TrainingConfig,
    seed: u64,
) -> Result<f64> {
    let e = generator::propagate(data.generator_adjacency.matrix(), params.e0.view(), config.layers);
    let (mixture, _) = sample_batch(e.view(), params.h.view(), users, config.tau, seed)?;
    let mut tape = Tape::new();
    let uf = tape.constant(d_state.users.clone());
    let if_ = tape.constant(d_state.items.clone());
    let mix = tape.constant(mixture);
    let adv = adversarial_pair_loss_on_tape(&mut tape, uf, if_, pairs, mix, params.k());
    Ok(tape.scalar_value(adv))
}

/// One generator step ascending `β·L_adv` through the relaxed selection,
/// with the discriminator embeddings frozen. Returns `L_adv` before the step.
#[allow(clippy::too_many_arguments)]
pub fn generator_adversarial_step(
    params: &mut GeneratorParams,
    adam: &mut AdamState,
    data: &TrainingData,
    d_state: &PropagationState,
    users: &[usize],
    pairs: &[(usize, usize)],
    config: &TrainingConfig,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = GeneratorVars::register(&mut tape, params, true);
    let e = generator::propagate_on_tape(&mut tape, &data.generator_adjacency, vars.e0, config.layers);
    let mixture = select_on_tape(&mut tape, e, vars.h, users, config.tau, SelectorNoise::Seeded(seed))?;
    let uf = tape.constant(d_state.users.clone());
    let if_ = tape.constant(d_state.items.clone());
    let adv = adversarial_pair_loss_on_tape(&mut tape, uf, if_, pairs, mixture, params.k());
    let ascend = tape.scale(adv, -config.effective_beta());
    let rows = tape.gather(vars.e0, users.to_vec());
    let reg = tape.sum_squares(rows);
    let reg = tape.scale(reg, config.generator_lambda);
    let loss = tape.add(ascend, reg);
    let value = tape.scalar_value(adv);
    if !tape.scalar_value(loss).is_finite() {
        return Err(Error::Divergence(format!("adversarial loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    let g: Vec<Option<&Array2<f64>>> = vars.vars().iter().map(|&v| grads.get(v)).collect();
    adam_step(&mut params.tensors_mut(), &g, adam)?;
    Ok(value)
}

/// A prepared adversarial batch: triples, one `(user, positive)` pair per
/// distinct user, the Gumbel seed and the sampled selection.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub triples: Vec<(usize, usize, usize)>,
    pub users: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub seed: u64,
    /// `users.len() x m`, present when neighborhoods are regenerated.
    pub mixture: Option<Array2<f64>>,
    pub social: SocialInput,
}

/// Batch losses of one adversarial step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLosses {
    pub l_r: f64,
    pub l_adv: f64,
}

/// Pretraining and adversarial training of one model on one split.
pub struct Trainer<'a> {
    data: &'a TrainingData,
    config: TrainingConfig,
    pub model: EsrfModel,
    adam_d: AdamState,
    adam_g: Option<AdamState>,
    rng: ChaCha8Rng,
    pub history: TrainingHistory,
    checkpoints: Option<(PathBuf, usize)>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a TrainingData, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let model = EsrfModel::init(data, &config)?;
        Ok(Self::from_model(data, config, model))
    }

    /// Continues from existing parameters (e.g. a checkpoint).
    pub fn from_model(data: &'a TrainingData, config: TrainingConfig, model: EsrfModel) -> Self {
        let adam_d = AdamState::for_params(config.adam(), &model.discriminator.tensors());
        let adam_g = model
            .generator
            .as_ref()
            .map(|g| AdamState::for_params(config.adam(), &g.tensors()));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Self {
            data,
            history: TrainingHistory::new(config.seed),
            config,
            model,
            adam_d,
            adam_g,
            rng,
            checkpoints: None,
        }
    }

    /// Writes `checkpoint_epoch<N>.txt` into `dir` every `every` adversarial epochs.
    pub fn with_checkpoints(mut self, dir: PathBuf, every: usize) -> Self {
        if every > 0 {
            self.checkpoints = Some((dir, every));
        }
        self
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    fn denoise(&self) -> bool {
        !self.config.ablations.no_denoise && !self.data.reconstruction_users.is_empty()
    }

    /// Whether neighborhoods are resampled from the generator every batch.
    fn regenerates(&self) -> bool {
        self.model.generator.is_some() && !self.config.ablations.no_adversarial
    }

    /// Discriminator on `L_r` without social propagation, then the generator
    /// on `L_s`; finally the initial neighborhoods.
    pub fn pretrain(&mut self) -> Result<()> {
        let config = self.config.clone();
        fit_discriminator(
            &mut self.model.discriminator,
            &mut self.adam_d,
            self.data,
            None,
            config.pretrain_epochs_d,
            &config,
            &mut self.rng,
            &mut self.history,
            Phase::PretrainDiscriminator,
        )?;
        if self.denoise() {
            if let (Some(gen), Some(adam)) = (self.model.generator.as_mut(), self.adam_g.as_mut()) {
                let all = self.data.reconstruction_users.clone();
                for _ in 0..config.pretrain_epochs_g {
                    let epoch = self.history.records.len() + 1;
                    let mut users = all.clone();
                    users.shuffle(&mut self.rng);
                    for (b, chunk) in users.chunks(config.batch_size).enumerate() {
                        let mut chunk = chunk.to_vec();
                        chunk.sort_unstable();
                        let seed = self.rng.gen();
                        reconstruction_step(gen, adam, self.data, &chunk, &config, seed)
                            .map_err(|e| with_position(e, epoch, b))?;
                    }
                    // fixed noise so that epochs are comparable
                    let total = reconstruction_loss_value(gen, self.data, &all, &config, config.seed)?;
                    let l_s = finite(total / all.len() as f64, "L_s", epoch, 0)?;
                    self.history.push(Phase::PretrainGenerator, 0.0, l_s, 0.0, None);
                }
            }
        }
        self.model.neighborhoods = match &self.model.generator {
            Some(_) => self.deterministic_neighborhoods(),
            None => random_neighborhoods(self.data.n_users(), config.k, &mut self.rng),
        };
        Ok(())
    }

    fn deterministic_neighborhoods(&self) -> Vec<AlternativeNeighborhood> {
        let gen = self.model.generator.as_ref().expect("generator");
        let e = generator::propagate(self.data.generator_adjacency.matrix(), gen.e0.view(), self.config.layers);
        hard_neighborhoods(e.view(), gen.h.view())
    }

    /// Samples neighborhoods for the batch users (when regenerating) and
    /// builds the batch's social input.
    pub fn prepare_batch(&mut self, triples: &[(usize, usize, usize)], seed: u64) -> Result<AdversarialBatch> {
        let context = self.data.batch_context(triples);
        let mut users: Vec<usize> = triples.iter().map(|t| t.0).collect();
        users.sort_unstable();
        users.dedup();
        let pairs: Vec<(usize, usize)> = users.iter().map(|&u| (u, context[u])).collect();
        let mut mixture = None;
        if self.regenerates() {
            let gen = self.model.generator.as_ref().expect("generator");
            let e = generator::propagate(self.data.generator_adjacency.matrix(), gen.e0.view(), self.config.layers);
            let (mix, hoods) = sample_batch(e.view(), gen.h.view(), &users, self.config.tau, seed)?;
            for (&u, hood) in users.iter().zip(hoods) {
                self.model.neighborhoods[u] = hood;
            }
            mixture = Some(mix);
        }
        let social = self.model.social_input(AttentionContext::Items(context.into()));
        Ok(AdversarialBatch {
            triples: triples.to_vec(),
            users,
            pairs,
            seed,
            mixture,
            social,
        })
    }

    pub fn discriminator_step(&mut self, batch: &AdversarialBatch) -> Result<StepLosses> {
        let beta = self.config.effective_beta();
        let k = self.config.k;
        let term = match &batch.mixture {
            Some(mixture) if beta > 0.0 => Some(AdversarialTerm {
                mixture,
                pairs: &batch.pairs,
                k,
                beta,
            }),
            _ => None,
        };
        discriminator_step(
            &mut self.model.discriminator,
            &mut self.adam_d,
            &self.data.graph,
            Some(&batch.social),
            &batch.triples,
            term,
            self.config.lambda,
        )
    }

    /// Discriminator embeddings for the batch's social input.
    pub fn batch_state(&self, batch: &AdversarialBatch) -> PropagationState {
        PropagationState::compute(&self.model.discriminator, &self.data.graph, Some(&batch.social))
    }

    /// The batch's adversarial pair loss under the current parameters.
    pub fn probe(&self, batch: &AdversarialBatch) -> Result<f64> {
        let gen = self
            .model
            .generator
            .as_ref()
            .ok_or_else(|| Error::Config("no generator to probe".into()))?;
        let state = self.batch_state(batch);
        adversarial_loss(gen, self.data, &state, &batch.users, &batch.pairs, &self.config, batch.seed)
    }

    pub fn generator_step(&mut self, batch: &AdversarialBatch) -> Result<f64> {
        let state = self.batch_state(batch);
        let (Some(gen), Some(adam)) = (self.model.generator.as_mut(), self.adam_g.as_mut()) else {
            return Err(Error::Config("generator is suspended".into()));
        };
        generator_adversarial_step(
            gen,
            adam,
            self.data,
            &state,
            &batch.users,
            &batch.pairs,
            &self.config,
            batch.seed,
        )
    }

    /// One reconstruction step over a random batch of users.
    fn finetune_step(&mut self) -> Result<f64> {
        let n = self.config.batch_size.min(self.data.reconstruction_users.len());
        let mut users: Vec<usize> = self
            .data
            .reconstruction_users
            .choose_multiple(&mut self.rng, n)
            .copied()
            .collect();
        users.sort_unstable();
        let seed = self.rng.gen();
        let (Some(gen), Some(adam)) = (self.model.generator.as_mut(), self.adam_g.as_mut()) else {
            return Ok(0.0);
        };
        let total = reconstruction_step(gen, adam, self.data, &users, &self.config, seed)?;
        Ok(total / n as f64)
    }

    /// One adversarial epoch; appends a history record.
    pub fn adversarial_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.history.records.len() + 1;
        let adversarial = self.regenerates() && self.config.effective_beta() > 0.0;
        let denoise = self.denoise() && self.regenerates();
        let triples = sample_triples(&self.data.train, &mut self.rng);
        let (mut l_r, mut l_adv, mut l_s) = (0.0, 0.0, 0.0);
        let mut pair_count = 0usize;
        let mut finetunes = 0usize;
        let batch_size = self.config.batch_size;
        for (b, chunk) in triples.chunks(batch_size).enumerate() {
            let seed = self.rng.gen();
            let batch = self.prepare_batch(chunk, seed)?;
            let step = self
                .discriminator_step(&batch)
                .map_err(|e| with_position(e, epoch, b))?;
            l_r += step.ranking;
            if adversarial {
                l_adv += step.adversarial;
                pair_count += batch.pairs.len();
                for _ in 0..self.config.g_steps {
                    self.generator_step(&batch)
                        .map_err(|e| with_position(e, epoch, b))?;
                }
            }
            if denoise && self.config.finetune == FinetuneSchedule::Batch {
                l_s += self.finetune_step().map_err(|e| with_position(e, epoch, b))?;
                finetunes += 1;
            }
        }
        if denoise && self.config.finetune == FinetuneSchedule::Epoch {
            l_s += self.finetune_step().map_err(|e| with_position(e, epoch, 0))?;
            finetunes += 1;
        }
        if self.regenerates() {
            self.model.neighborhoods = self.deterministic_neighborhoods();
        }
        let l_r = finite(l_r / triples.len().max(1) as f64, "L_r", epoch, 0)?;
        let l_adv = finite(l_adv / pair_count.max(1) as f64, "L_adv", epoch, 0)?;
        let l_s = finite(l_s / finetunes.max(1) as f64, "L_s", epoch, 0)?;
        let social = self.model.social_input(AttentionContext::HistoryMean);
        let val = validation_precision(&self.model.discriminator, self.data, Some(&social))?;
        self.history.push(Phase::Adversarial, l_r, l_s, l_adv, val);
        if let Some((dir, every)) = &self.checkpoints {
            let done = self
                .history
                .records
                .iter()
                .filter(|r| r.phase == Phase::Adversarial)
                .count();
            if done % every == 0 {
                self.model
                    .to_checkpoint()
                    .save(&dir.join(format!("checkpoint_epoch{epoch}.txt")))?;
            }
        }
        Ok(*self.history.records.last().expect("pushed"))
    }

    /// Pretraining, then adversarial epochs with early stopping on
    /// validation Prec@10; the best model is kept.
    pub fn run(mut self) -> Result<(EsrfModel, TrainingHistory)> {
        self.pretrain()?;
        let mut stopper = EarlyStopping::new(self.config.patience);
        if self.config.adversarial_epochs > 0 {
            let social = self.model.social_input(AttentionContext::HistoryMean);
            let val = validation_precision(&self.model.discriminator, self.data, Some(&social))?;
            stopper.observe(val, &self.model);
        }
        for _ in 0..self.config.adversarial_epochs {
            let record = self.adversarial_epoch()?;
            if stopper.observe(record.val_prec10, &self.model) {
                break;
            }
        }
        stopper.restore(&mut self.model);
        Ok((self.model, self.history))
    }
}

/// Pretrains and adversarially trains a fresh model.
pub fn train(data: &TrainingData, config: &TrainingConfig) -> Result<(EsrfModel, TrainingHistory)> {
    Trainer::new(data, config.clone())?.run()
}
