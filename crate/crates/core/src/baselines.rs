//! Reference models trained with the same sampler, optimizer and `λ`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::discriminator::{pairwise_log_loss, DiscriminatorParams, PropagationState};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EmbeddingScorer, EvalMode};
use crate::numerics::{adam_step, AdamConfig, AdamState, Tape};
use crate::trainer::{
    fit_discriminator, sample_triples, EarlyStopping, EsrfModel, Phase, TrainingConfig, TrainingData,
    TrainingHistory,
};

/// Plain matrix factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct MfModel {
    /// `m x d`
    pub users: Array2<f64>,
    /// `n x d`
    pub items: Array2<f64>,
}

impl MfModel {
    pub fn init<R: Rng>(users: usize, items: usize, dim: usize, init_std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, init_std).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            users: Array2::from_shape_simple_fn((users, dim), || normal.sample(rng)),
            items: Array2::from_shape_simple_fn((items, dim), || normal.sample(rng)),
        })
    }

    pub fn scorer(&self) -> EmbeddingScorer {
        EmbeddingScorer {
            users: self.users.clone(),
            items: self.items.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push("mf.users", &self.users);
        c.push("mf.items", &self.items);
        c
    }

    pub fn from_checkpoint(mut c: Checkpoint, users: usize, items: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            users: c.take("mf.users", (users, dim))?,
            items: c.take("mf.items", (items, dim))?,
        })
    }

    /// One Adam step on BPR plus `λ` times the squared rows involved.
    pub fn step(
        &mut self,
        adam: &mut AdamState,
        triples: &[(usize, usize, usize)],
        lambda: f64,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.param(self.users.clone());
        let q = tape.param(self.items.clone());
        let eu = tape.gather(p, triples.iter().map(|t| t.0).collect::<Vec<_>>());
        let ei = tape.gather(q, triples.iter().map(|t| t.1).collect::<Vec<_>>());
        let ej = tape.gather(q, triples.iter().map(|t| t.2).collect::<Vec<_>>());
        let pos = tape.row_dot(eu, ei);
        let neg = tape.row_dot(eu, ej);
        let gap = tape.sub(pos, neg);
        let ranking = pairwise_log_loss(&mut tape, gap);
        let mut reg = tape.sum_squares(eu);
        for e in [ei, ej] {
            let sq = tape.sum_squares(e);
            reg = tape.add(reg, sq);
        }
        let reg = tape.scale(reg, lambda);
        let loss = tape.add(ranking, reg);
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::Divergence(format!("BPR-MF loss is {value}")));
        }
        let grads = tape.backward(loss)?;
        adam_step(
            &mut [&mut self.users, &mut self.items],
            &[grads.get(p), grads.get(q)],
            adam,
        )?;
        Ok(value)
    }
}

fn adam(config: &TrainingConfig) -> AdamConfig {
    AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    }
}

/// BPR matrix factorization for `baseline_epochs` with early stopping.
pub fn train_bpr_mf(data: &TrainingData, config: &TrainingConfig) -> Result<(MfModel, TrainingHistory)> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = MfModel::init(data.n_users(), data.n_items(), config.dim, config.init_std, &mut init_rng)?;
    let mut state = AdamState::for_params(adam(config), &[&model.users, &model.items]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut history = TrainingHistory::new(config.seed);
    let mut stopper = EarlyStopping::new(config.patience);
    for _ in 0..config.baseline_epochs {
        let epoch = history.records.len() + 1;
        let triples = sample_triples(&data.train, &mut rng);
        let mut total = 0.0;
        for batch in triples.chunks(config.batch_size) {
            total += model
                .step(&mut state, batch, config.lambda)
                .map_err(|e| Error::Divergence(format!("{e} (epoch {epoch})")))?;
        }
        let val = match data.validation.as_ref().filter(|v| !v.is_empty()) {
            Some(v) => Some(evaluate(&model.scorer(), &data.train, v, 10, EvalMode::General)?.precision_at_n),
            None => None,
        };
        history.push(Phase::Baseline, total / triples.len().max(1) as f64, 0.0, 0.0, val);
        if stopper.observe(val, &model) {
            break;
        }
    }
    stopper.restore(&mut model);
    Ok((model, history))
}

/// LightGCN: the discriminator loop with the social term disabled.
pub fn train_lightgcn(data: &TrainingData, config: &TrainingConfig) -> Result<(EsrfModel, TrainingHistory)> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = DiscriminatorParams::init(
        data.n_users(),
        data.n_items(),
        config.dim,
        config.layers,
        config.init_std,
        &mut init_rng,
    )?;
    let mut state = AdamState::for_params(adam(config), &params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut history = TrainingHistory::new(config.seed);
    fit_discriminator(
        &mut params,
        &mut state,
        data,
        None,
        config.baseline_epochs,
        config,
        &mut rng,
        &mut history,
        Phase::Baseline,
    )?;
    Ok((
        EsrfModel {
            discriminator: params,
            generator: None,
            neighborhoods: vec![Default::default(); data.n_users()],
            attention: false,
        },
        history,
    ))
}

/// Final embeddings of a discriminator without social propagation.
pub fn lightgcn_state(params: &DiscriminatorParams, data: &TrainingData) -> PropagationState {
    PropagationState::compute(params, &data.graph, None)
}
