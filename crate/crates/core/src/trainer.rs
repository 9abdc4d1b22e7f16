//! Pairwise ranking training with mini-batch Adam.

use std::collections::HashSet;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::corpus::InteractionCorpus;
use crate::error::{Error, Result};
use crate::evaluator::{self, MetricReport};
use crate::hetgraph::{HeteroGraph, NodeIndex, NodeKind};
use crate::prednet::{Architecture, Dropout, Gradients, PredictiveParams};
use crate::propagate::{self, EmbeddingMatrix};

const SAMPLING_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const INIT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// `(user, interacted item, non-interacted item)`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

/// One triple per training interaction, in shuffled order, each with a
/// fresh uniformly drawn negative. Users who interacted with every item
/// are skipped.
pub fn sample_training_triples<R: Rng>(corpus: &InteractionCorpus, rng: &mut R) -> Result<Vec<Triple>> {
    if corpus.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let num_items = corpus.num_items() as u32;
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    order.shuffle(rng);
    let mut saturated = HashSet::new();
    let mut triples = Vec::with_capacity(order.len());
    for i in order {
        let t = corpus.train[i];
        if corpus.user_items(t.user).len() >= num_items as usize {
            if saturated.insert(t.user) {
                log::warn!("user {} interacted with every item; no negatives to sample", corpus.users.key(t.user));
            }
            continue;
        }
        let neg = loop {
            let j = rng.gen_range(0..num_items);
            if !corpus.interacted(t.user, j) {
                break j;
            }
        };
        triples.push(Triple { user: t.user, pos: t.item, neg });
    }
    Ok(triples)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Σ -ln σ(pos - neg) + λ‖Θ‖²`
pub fn bpr_loss(pos: &[f64], neg: &[f64], params: &PredictiveParams, lambda: f64) -> Result<f64> {
    if pos.len() != neg.len() {
        return Err(Error::Shape(format!("{} positive vs {} negative scores", pos.len(), neg.len())));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score in ranking loss".into()));
    }
    let data: f64 = pos.iter().zip(neg).map(|(p, n)| softplus(-(p - n))).sum();
    Ok(data + lambda * params.squared_norm())
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: PredictiveParams,
    pub v: PredictiveParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &PredictiveParams) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of a flat tensor; `step` is the
/// 1-based step count after incrementing.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
    }
}

/// One Adam step over every tensor of the network.
pub fn adam_step(params: &mut PredictiveParams, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.arch != params.arch {
        return Err(Error::Shape("gradient and parameter architectures differ".into()));
    }
    state.step += 1;
    let (step, b1, b2, eps) = (state.step, state.beta1, state.beta2, state.eps);
    let slots = params.slices_mut().into_iter().zip(grads.slices()).zip(state.m.slices_mut()).zip(state.v.slices_mut());
    for (((p, g), m), v) in slots {
        adam_update(p, g, m, v, step, lr, b1, b2, eps);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after optimizer step".into()));
    }
    Ok(())
}

/// Summed ranking loss of a batch and its gradient, regularisation
/// included. `embeddings` holds every graph row; item `n` sits at row
/// `num_users + n`.
pub fn bpr_batch_gradient(
    params: &PredictiveParams,
    triples: &[Triple],
    embeddings: &EmbeddingMatrix,
    num_users: usize,
    lambda: f64,
    dropout: &mut Dropout,
) -> Result<(f64, Gradients)> {
    let b = triples.len();
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    let mut rows: Vec<usize> = triples
        .iter()
        .flat_map(|t| [t.user as usize, num_users + t.pos as usize, num_users + t.neg as usize])
        .collect();
    rows.sort_unstable();
    rows.dedup();
    if rows.last().is_some_and(|&r| r >= embeddings.nrows()) {
        return Err(Error::Shape("triple refers to a row outside the embeddings".into()));
    }
    let local = |g: usize| rows.binary_search(&g).expect("row collected above");
    let u_idx: Vec<usize> = triples.iter().map(|t| local(t.user as usize)).chain(triples.iter().map(|t| local(t.user as usize))).collect();
    let v_idx: Vec<usize> = triples
        .iter()
        .map(|t| local(num_users + t.pos as usize))
        .chain(triples.iter().map(|t| local(num_users + t.neg as usize)))
        .collect();

    let x = embeddings.select(Axis(0), &rows);
    let (p, proj_cache) = params.project(&x, dropout)?;
    let (scores, score_cache) = params.score(&p.select(Axis(0), &u_idx), &p.select(Axis(0), &v_idx), dropout)?;
    let (pos, neg) = scores.view().split_at(Axis(0), b);
    let loss = bpr_loss(pos.as_slice().unwrap(), neg.as_slice().unwrap(), params, lambda)?;

    let mut d_scores = Array1::zeros(2 * b);
    for i in 0..b {
        let g = sigmoid(-(pos[i] - neg[i]));
        d_scores[i] = -g;
        d_scores[b + i] = g;
    }
    let mut grads = params.zeros_like();
    let (du, dv) = params.score_backward(&score_cache, &d_scores, &mut grads)?;
    let mut dp = Array2::zeros(p.raw_dim());
    for (r, &l) in u_idx.iter().enumerate() {
        dp.row_mut(l).scaled_add(1.0, &du.row(r));
    }
    for (r, &l) in v_idx.iter().enumerate() {
        dp.row_mut(l).scaled_add(1.0, &dv.row(r));
    }
    params.project_backward(&proj_cache, dp, &mut grads);
    if lambda > 0.0 {
        grads.add_scaled(2.0 * lambda, params);
    }
    Ok((loss, grads))
}

/// Projects user and item rows once, then scores candidate lists.
pub struct Scorer<'a> {
    params: &'a PredictiveParams,
    users: Array2<f64>,
    items: Array2<f64>,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &'a PredictiveParams, embeddings: &EmbeddingMatrix, index: NodeIndex) -> Result<Self> {
        let block = |kind: NodeKind| {
            let off = index.offset(kind);
            embeddings.slice(ndarray::s![off..off + index.count(kind), ..]).to_owned()
        };
        let (users, _) = params.project(&block(NodeKind::User), &mut Dropout::off())?;
        let (items, _) = params.project(&block(NodeKind::Item), &mut Dropout::off())?;
        Ok(Scorer { params, users, items })
    }

    pub fn score(&self, user: u32, items: &[u32]) -> Result<Vec<f64>> {
        let idx: Vec<usize> = items.iter().map(|&n| n as usize).collect();
        let v = self.items.select(Axis(0), &idx);
        let u = self.users.select(Axis(0), &vec![user as usize; idx.len()]);
        let (s, _) = self.params.score(&u, &v, &mut Dropout::off())?;
        Ok(s.to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub metrics: Option<MetricReport>,
    pub wall_ms: u64,
}

impl EpochRecord {
    /// `{"epoch", "loss", "hr@k", "ndcg@k", "wall_ms"}` for the trace file.
    pub fn to_json(&self) -> Value {
        let mut obj = serde_json::Map::new();
        obj.insert("epoch".into(), json!(self.epoch));
        obj.insert("loss".into(), json!(self.loss));
        if let Some(m) = &self.metrics {
            for (k, at) in &m.at {
                obj.insert(format!("hr@{k}"), json!(at.hr));
                obj.insert(format!("ndcg@{k}"), json!(at.ndcg));
            }
        }
        obj.insert("wall_ms".into(), json!(self.wall_ms));
        Value::Object(obj)
    }
}

/// Training state over fixed propagated embeddings.
pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    corpus: &'a InteractionCorpus,
    graph: &'a HeteroGraph,
    initial: &'a EmbeddingMatrix,
    combined: &'a EmbeddingMatrix,
    params: PredictiveParams,
    adam: AdamState,
    sampler: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    /// `initial` is `E^(0)`, only read when node dropout is on; `combined`
    /// is the cached output of the propagation.
    pub fn new(
        cfg: &'a RunConfig,
        corpus: &'a InteractionCorpus,
        graph: &'a HeteroGraph,
        initial: &'a EmbeddingMatrix,
        combined: &'a EmbeddingMatrix,
    ) -> Result<Self> {
        let params = PredictiveParams::init(Architecture::from(cfg), cfg.seed ^ INIT_SEED_SALT)?;
        Self::with_params(cfg, corpus, graph, initial, combined, params)
    }

    pub fn with_params(
        cfg: &'a RunConfig,
        corpus: &'a InteractionCorpus,
        graph: &'a HeteroGraph,
        initial: &'a EmbeddingMatrix,
        combined: &'a EmbeddingMatrix,
        params: PredictiveParams,
    ) -> Result<Self> {
        cfg.validate()?;
        let index = graph.node_index();
        if index.users != corpus.num_users() || index.items != corpus.num_items() {
            return Err(Error::Shape("graph and corpus disagree on user/item counts".into()));
        }
        if combined.nrows() != index.total() || combined.ncols() != cfg.input_dim {
            return Err(Error::Shape(format!(
                "embeddings are {:?}, expected ({}, {})",
                combined.dim(),
                index.total(),
                cfg.input_dim
            )));
        }
        let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed);
        sampler.set_stream(SAMPLING_STREAM);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        dropout_rng.set_stream(DROPOUT_STREAM);
        let adam = AdamState::new(&params);
        Ok(Trainer { cfg, corpus, graph, initial, combined, params, adam, sampler, dropout_rng, epoch: 0 })
    }

    pub fn params(&self) -> &PredictiveParams {
        &self.params
    }

    pub fn into_params(self) -> PredictiveParams {
        self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One optimizer step on a batch; returns the batch loss.
    ///
    /// On a non-finite loss, gradient or update the parameters are left at
    /// their last finite values and an error is returned.
    pub fn train_batch(&mut self, triples: &[Triple], embeddings: &EmbeddingMatrix) -> Result<f64> {
        let epoch = self.epoch;
        let diverged = || Error::Diverged { epoch: epoch + 1, batch: 0 };
        let rate = self.cfg.net_dropout;
        let mut dropout = if rate > 0.0 { Dropout::new(rate, &mut self.dropout_rng) } else { Dropout::off() };
        let users = self.graph.node_index().users;
        let (loss, grads) = match bpr_batch_gradient(&self.params, triples, embeddings, users, self.cfg.lambda, &mut dropout) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => return Err(diverged()),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(diverged());
        }
        let backup = self.params.clone();
        if adam_step(&mut self.params, &grads, &mut self.adam, self.cfg.lr).is_err() {
            self.params = backup;
            return Err(diverged());
        }
        Ok(loss)
    }

    /// Samples triples, runs every batch, and evaluates when due.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let triples = sample_training_triples(self.corpus, &mut self.sampler)?;
        let dropped;
        let embeddings = if self.cfg.node_dropout > 0.0 {
            dropped = propagate::run_embedding_network_with_dropout(
                self.graph,
                self.initial,
                &self.cfg.propagation(),
                &mut self.dropout_rng,
            )?;
            &dropped
        } else {
            self.combined
        };
        let mut loss = 0.0;
        for (batch, chunk) in triples.chunks(self.cfg.batch_size).enumerate() {
            loss += self.train_batch(chunk, embeddings).map_err(|e| match e {
                Error::Diverged { epoch, .. } => Error::Diverged { epoch, batch },
                other => other,
            })?;
        }
        self.epoch += 1;
        let due = match self.cfg.eval_every {
            0 => self.epoch == self.cfg.epochs,
            n => self.epoch.is_multiple_of(n) || self.epoch == self.cfg.epochs,
        };
        let metrics = if due && !self.corpus.candidates.is_empty() { Some(self.evaluate()?) } else { None };
        let wall_ms = if self.cfg.deterministic { 0 } else { start.elapsed().as_millis() as u64 };
        Ok(EpochRecord { epoch: self.epoch, loss, metrics, wall_ms })
    }

    pub fn evaluate(&self) -> Result<MetricReport> {
        let scorer = Scorer::new(&self.params, self.combined, self.graph.node_index())?;
        evaluator::evaluate(self.corpus, |m, items| scorer.score(m, items), &self.cfg.k, self.cfg.seed)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PredictiveParams,
    pub trace: Vec<EpochRecord>,
}

/// Runs `cfg.epochs` epochs from a seeded initialisation.
pub fn train(
    corpus: &InteractionCorpus,
    graph: &HeteroGraph,
    initial: &EmbeddingMatrix,
    combined: &EmbeddingMatrix,
    cfg: &RunConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, corpus, graph, initial, combined)?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        trace.push(trainer.run_epoch()?);
    }
    Ok(TrainOutcome { params: trainer.into_params(), trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Matching;
    use crate::corpus::{build_corpus, ReviewRecord};

    fn review(u: &str, i: &str, t: u64) -> ReviewRecord {
        ReviewRecord { user_key: u.into(), item_key: i.into(), rating: 1.0, comment_text: String::new(), timestamp: t }
    }

    #[test]
    fn forced_negative() {
        let corpus = build_corpus(&[review("u", "A", 1), review("w", "B", 1)], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let triples = sample_training_triples(&corpus, &mut rng).unwrap();
        let u = corpus.users.get("u").unwrap();
        let t = triples.iter().find(|t| t.user == u).unwrap();
        assert_eq!((corpus.items.key(t.pos), corpus.items.key(t.neg)), ("A", "B"));
    }

    #[test]
    fn saturated_user_skipped() {
        let corpus = build_corpus(&[review("u", "A", 1), review("w", "A", 1), review("w", "B", 2), review("w", "C", 3)], 0).unwrap();
        // w's train items: A, B; w has also interacted with C (test), so w is saturated
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let triples = sample_training_triples(&corpus, &mut rng).unwrap();
        assert!(triples.iter().all(|t| corpus.users.key(t.user) == "u"));
    }

    #[test]
    fn sampling_is_seeded() {
        let reviews: Vec<_> = (0..30).map(|i| review(&format!("u{}", i % 5), &format!("i{i}"), i)).collect();
        let corpus = build_corpus(&reviews, 0).unwrap();
        let a = sample_training_triples(&corpus, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_training_triples(&corpus, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), corpus.train.len());
    }

    #[test]
    fn loss_units() {
        let arch = Architecture {
            input_dim: 2,
            hidden: 2,
            output_dim: 2,
            rl_depth: 1,
            ml_depth: 1,
            matching: Matching::Inner,
            activation: Default::default(),
            shared_towers: false,
        };
        let p = PredictiveParams::zeros(arch).unwrap();
        assert!((bpr_loss(&[0.3], &[0.3], &p, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bpr_loss(&[1e6], &[0.0], &p, 0.0).unwrap() < 1e-300);
        assert!(bpr_loss(&[f64::NAN], &[0.0], &p, 0.0).is_err());
        let shifted = bpr_loss(&[10.3], &[10.0], &p, 0.0).unwrap();
        assert!((shifted - bpr_loss(&[0.3], &[0.0], &p, 0.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(50.0), 50.0 + (-50.0f64).exp());
        assert!((softplus(-50.0) - (-50.0f64).exp()).abs() < 1e-30);
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }
}
