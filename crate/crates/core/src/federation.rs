//! Server aggregation and client training: FedAvg over trainable vectors,
//! local plain-SGD updates, round orchestration and byte accounting.

use std::time::Instant;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{partition_clients, split_train_eval, ClientShard, PartitionSpec, Record};
use crate::error::{Error, Result};
use crate::lora::{attach_adapters, AdaptedModel, LoraConfig, TrainableVector};
use crate::metrics::{accuracy, confusion, f1_binary, ConfusionMatrix};
use crate::model::{argmax_rows, EncoderModel, ModelConfig, TokenizedText, Vocab};
use crate::rng::{derive_seed, stream, SplitMix64};

/// Bytes per exchanged parameter on the simulated wire.
pub const WIRE_BYTES_PER_PARAM: u64 = 4;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Plain elementwise mean over reporting clients.
    #[default]
    UniformMean,
    /// Mean weighted by each client's training-set size.
    WeightedByN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    /// Number of clients K.
    pub clients: usize,
    /// Global rounds R.
    pub rounds: usize,
    /// Local epochs E per round.
    pub local_epochs: usize,
    /// Learning rate eta.
    pub eta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub aggregation: Aggregation,
    /// Worker threads for client updates; 1 runs clients sequentially.
    pub threads: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 3,
            rounds: 5,
            local_epochs: 2,
            eta: 0.1,
            batch_size: 16,
            seed: 0,
            aggregation: Aggregation::UniformMean,
            threads: 1,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("fed.clients", self.clients),
            ("fed.rounds", self.rounds),
            ("fed.local_epochs", self.local_epochs),
            ("fed.batch_size", self.batch_size),
            ("fed.threads", self.threads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("fed.eta must be finite and non-negative, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Per-round payload sizes `(uplink, downlink)`, both `K · n · 4` bytes.
pub fn comm_cost(cfg: &FedConfig, n_trainable: usize) -> (u64, u64) {
    let bytes = cfg.clients as u64 * n_trainable as u64 * WIRE_BYTES_PER_PARAM;
    (bytes, bytes)
}

/// Elementwise mean of client vectors, optionally weighted by counts.
///
/// Computed as `θ₁ + Σ w_k (θ_k − θ₁) / Σ w_k` so that identical inputs come
/// back unchanged bit for bit.
pub fn fedavg(thetas: &[TrainableVector], weights: Option<&[usize]>) -> Result<TrainableVector> {
    let first = thetas
        .first()
        .ok_or_else(|| Error::Protocol("fedavg over an empty client list".into()))?;
    let n = first.len();
    if let Some(bad) = thetas.iter().position(|t| t.len() != n) {
        return Err(Error::Protocol(format!(
            "client vector {bad} has length {}, expected {n}",
            thetas[bad].len()
        )));
    }
    let w: Vec<f64> = match weights {
        None => vec![1.0; thetas.len()],
        Some(ws) => {
            if ws.len() != thetas.len() {
                return Err(Error::Protocol(format!("{} weights for {} vectors", ws.len(), thetas.len())));
            }
            if ws.contains(&0) {
                return Err(Error::Protocol("fedavg weights must be positive".into()));
            }
            ws.iter().map(|&x| x as f64).collect()
        }
    };
    let total: f64 = w.iter().sum();
    let anchor = first.as_slice();
    let mut acc = vec![0.0; n];
    for (theta, wk) in thetas.iter().zip(&w).skip(1) {
        for ((a, x), x1) in acc.iter_mut().zip(theta.as_slice()).zip(anchor) {
            *a += wk * (x - x1);
        }
    }
    Ok(anchor.iter().zip(acc).map(|(x1, a)| x1 + a / total).collect::<Vec<_>>().into())
}

/// A labelled record set tokenized for the model.
#[derive(Debug, Clone, Default)]
pub struct TokenizedSet {
    pub inputs: Vec<TokenizedText>,
    pub labels: Vec<usize>,
}

impl TokenizedSet {
    pub fn new(records: &[Record], vocab: &Vocab, max_len: usize) -> Self {
        Self {
            inputs: records.iter().map(|r| vocab.tokenize(&r.text, max_len)).collect(),
            labels: records.iter().map(|r| r.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ClientData {
    pub client_id: usize,
    pub train: TokenizedSet,
    pub eval: TokenizedSet,
}

impl ClientData {
    pub fn new(shard: &ClientShard, vocab: &Vocab, max_len: usize) -> Self {
        Self {
            client_id: shard.client_id,
            train: TokenizedSet::new(&shard.train, vocab, max_len),
            eval: TokenizedSet::new(&shard.eval, vocab, max_len),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(model: &AdaptedModel, set: &TokenizedSet) -> Result<EvalMetrics> {
    let mut preds = Vec::with_capacity(set.len());
    for chunk in set.inputs.chunks(EVAL_CHUNK) {
        preds.extend(argmax_rows(&model.forward(chunk)?));
    }
    let m = confusion(&preds, &set.labels)?;
    Ok(EvalMetrics {
        accuracy: accuracy(&m)?,
        f1: f1_binary(&m),
        confusion: m,
    })
}

#[derive(Debug, Clone)]
pub struct ClientResult {
    pub client_id: usize,
    pub theta: TrainableVector,
    /// Mean batch loss over the last local epoch, weighted by batch size.
    pub train_loss: f64,
    pub n_train: usize,
    pub local_eval: Option<EvalMetrics>,
}

/// Local training on one client: copies `template`, loads `snapshot`, runs
/// `E` epochs of minibatch SGD over a shuffled order derived from
/// `(seed, client, round, epoch)`.
pub fn client_update(
    template: &AdaptedModel,
    snapshot: &TrainableVector,
    data: &ClientData,
    cfg: &FedConfig,
    round: usize,
) -> Result<ClientResult> {
    let client_err = |reason: String| Error::Client {
        client_id: data.client_id,
        reason,
    };
    if data.train.is_empty() {
        return Err(client_err("empty training set".into()));
    }
    let mut model = template.clone();
    model.load_trainable(snapshot)?;
    let n = data.train.len();
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.local_epochs {
        let seed = derive_seed(
            cfg.seed,
            &[stream::BATCH_ORDER, data.client_id as u64, round as u64, epoch as u64],
        );
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::new(seed).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<TokenizedText> = idx.iter().map(|&i| data.train.inputs[i].clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let loss = model.train_step(&batch, &labels, cfg.eta)?;
            if !loss.is_finite() {
                return Err(client_err(format!("non-finite loss in epoch {epoch}")));
            }
            loss_sum += loss * idx.len() as f64;
        }
        last_loss = loss_sum / n as f64;
        debug!("client {} round {round} epoch {epoch}: loss {last_loss:.5}", data.client_id);
    }
    let local_eval = if data.eval.is_empty() {
        None
    } else {
        Some(evaluate(&model, &data.eval)?)
    };
    Ok(ClientResult {
        client_id: data.client_id,
        theta: model.extract_trainable(),
        train_loss: last_loss,
        n_train: n,
        local_eval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: usize,
    /// Last-epoch mean train loss per client id; `None` for failed clients.
    pub client_train_loss: Vec<Option<f64>>,
    /// Accuracy on each client's local eval split; `None` when unavailable.
    pub client_eval_accuracy: Vec<Option<f64>>,
    pub failed_clients: Vec<usize>,
    pub eval_accuracy: f64,
    pub eval_f1: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub wall_time_s: f64,
}

impl RoundReport {
    /// Mean of the available client-local eval accuracies.
    pub fn mean_client_accuracy(&self) -> Option<f64> {
        let vals: Vec<f64> = self.client_eval_accuracy.iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub theta: TrainableVector,
    /// Number of completed rounds.
    pub round: usize,
    pub history: Vec<RoundReport>,
}

/// Everything a run needs: the initial global model, per-client data and the
/// server-side eval set.
pub struct Experiment {
    model: AdaptedModel,
    vocab: Vocab,
    clients: Vec<ClientData>,
    global_eval: TokenizedSet,
    fed: FedConfig,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Experiment")
            .field("fed", &self.fed)
            .field("clients", &self.clients.len())
            .field("global_eval", &self.global_eval.len())
            .finish_non_exhaustive()
    }
}

/// Data-side inputs of an experiment.
#[derive(Debug, Clone)]
pub struct DataPlan<'a> {
    pub records: &'a [Record],
    pub partition: &'a PartitionSpec,
    pub eval_frac: f64,
}

impl Experiment {
    /// Carves the global eval set, builds the vocabulary from the remaining
    /// pool, partitions it over `fed.clients` clients and splits each shard.
    /// The partition spec's client count is taken from `fed`.
    pub fn prepare(model_cfg: &ModelConfig, lora_cfg: &LoraConfig, fed: &FedConfig, data: &DataPlan<'_>) -> Result<Self> {
        model_cfg.validate()?;
        lora_cfg.validate(model_cfg)?;
        fed.validate()?;
        let (pool, global_eval) = split_train_eval(
            data.records,
            data.eval_frac,
            derive_seed(fed.seed, &[stream::GLOBAL_EVAL_SPLIT]),
        )?;
        let vocab = Vocab::build(pool.iter().map(|r| r.text.as_str()), model_cfg.vocab_size)?;
        let spec = PartitionSpec {
            clients: fed.clients,
            ..data.partition.clone()
        };
        let shards = partition_clients(&pool, &spec)?;
        let max_len = model_cfg.max_seq_len;
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(k, recs)| {
                let shard = ClientShard::from_records(k, recs, data.eval_frac, fed.seed)?;
                Ok(ClientData::new(&shard, &vocab, max_len))
            })
            .collect::<Result<Vec<_>>>()?;
        let base = EncoderModel::init(model_cfg)?;
        let model = attach_adapters(base, lora_cfg)?;
        let pool = if fed.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(fed.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("fed.threads: {e}")))?,
            )
        } else {
            None
        };
        info!(
            "prepared {} clients (train sizes {:?}), global eval {} records, vocab {}",
            clients.len(),
            clients.iter().map(|c| c.train.len()).collect::<Vec<_>>(),
            global_eval.len(),
            vocab.len()
        );
        Ok(Self {
            global_eval: TokenizedSet::new(&global_eval, &vocab, max_len),
            model,
            vocab,
            clients,
            fed: fed.clone(),
            pool,
        })
    }

    pub fn model(&self) -> &AdaptedModel {
        &self.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn clients(&self) -> &[ClientData] {
        &self.clients
    }

    pub fn global_eval(&self) -> &TokenizedSet {
        &self.global_eval
    }

    pub fn fed_config(&self) -> &FedConfig {
        &self.fed
    }

    pub fn n_trainable(&self) -> usize {
        self.model.trainable_param_count().trainable
    }

    pub fn initial_state(&self) -> GlobalState {
        GlobalState {
            theta: self.model.extract_trainable(),
            round: 0,
            history: Vec::new(),
        }
    }

    /// The global model with `theta` loaded.
    pub fn model_with(&self, theta: &TrainableVector) -> Result<AdaptedModel> {
        let mut m = self.model.clone();
        m.load_trainable(theta)?;
        Ok(m)
    }

    pub fn evaluate_global(&self, theta: &TrainableVector) -> Result<EvalMetrics> {
        evaluate(&self.model_with(theta)?, &self.global_eval)
    }

    /// One round with clients dispatched in id order.
    pub fn run_round(&self, state: &GlobalState) -> Result<GlobalState> {
        let order: Vec<usize> = (0..self.clients.len()).collect();
        self.run_round_in_order(state, &order)
    }

    /// One round with clients dispatched in the given order. Results are
    /// sorted by client id before aggregation, so the order never changes
    /// the outcome.
    pub fn run_round_in_order(&self, state: &GlobalState, order: &[usize]) -> Result<GlobalState> {
        let start = Instant::now();
        let round = state.round;
        let snapshot = &state.theta;
        let work = |&k: &usize| {
            let data = self
                .clients
                .get(k)
                .ok_or_else(|| Error::Protocol(format!("unknown client {k}")))?;
            client_update(&self.model, snapshot, data, &self.fed, round)
        };
        let outcomes: Vec<Result<ClientResult>> = match &self.pool {
            Some(pool) => pool.install(|| order.par_iter().map(work).collect()),
            None => order.iter().map(work).collect(),
        };
        let mut results = Vec::new();
        let mut failed = Vec::new();
        for (k, outcome) in order.iter().zip(outcomes) {
            match outcome {
                Ok(r) => results.push(r),
                Err(Error::Client { client_id, reason }) => {
                    warn!("round {}: client {client_id} skipped: {reason}", round + 1);
                    failed.push(client_id);
                }
                Err(e) => {
                    warn!("round {}: client {k} failed: {e}", round + 1);
                    failed.push(*k);
                }
            }
        }
        if results.is_empty() {
            return Err(Error::Round {
                round: round + 1,
                reason: "every client failed".into(),
            });
        }
        results.sort_by_key(|r| r.client_id);
        failed.sort_unstable();
        let thetas: Vec<TrainableVector> = results.iter().map(|r| r.theta.clone()).collect();
        let theta = match self.fed.aggregation {
            Aggregation::UniformMean => fedavg(&thetas, None)?,
            Aggregation::WeightedByN => {
                let counts: Vec<usize> = results.iter().map(|r| r.n_train).collect();
                fedavg(&thetas, Some(&counts))?
            }
        };
        let (uplink, downlink) = comm_cost(&self.fed, theta.len());
        self.finish_round(state, theta, &results, failed, (uplink, downlink), start)
    }

    fn finish_round(
        &self,
        state: &GlobalState,
        theta: TrainableVector,
        results: &[ClientResult],
        failed_clients: Vec<usize>,
        (uplink_bytes, downlink_bytes): (u64, u64),
        start: Instant,
    ) -> Result<GlobalState> {
        let metrics = self.evaluate_global(&theta)?;
        let n_clients = results
            .iter()
            .map(|r| r.client_id + 1)
            .chain(failed_clients.iter().map(|k| k + 1))
            .max()
            .unwrap_or(0);
        let mut client_train_loss = vec![None; n_clients];
        let mut client_eval_accuracy = vec![None; n_clients];
        for r in results {
            client_train_loss[r.client_id] = Some(r.train_loss);
            client_eval_accuracy[r.client_id] = r.local_eval.map(|m| m.accuracy);
        }
        let report = RoundReport {
            round: state.round + 1,
            client_train_loss,
            client_eval_accuracy,
            failed_clients,
            eval_accuracy: metrics.accuracy,
            eval_f1: metrics.f1,
            uplink_bytes,
            downlink_bytes,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        info!(
            "round {}: eval accuracy {:.4}, F1 {:.4}",
            report.round, report.eval_accuracy, report.eval_f1
        );
        let mut history = state.history.clone();
        history.push(report);
        Ok(GlobalState {
            theta,
            round: state.round + 1,
            history,
        })
    }

    /// `R` rounds of broadcast, local training and aggregation.
    pub fn run_federated(&self) -> Result<GlobalState> {
        let mut state = self.initial_state();
        for _ in 0..self.fed.rounds {
            state = self.run_round(&state)?;
        }
        Ok(state)
    }

    /// Trains on client 0's data only, with no aggregation and no
    /// communication: `R` blocks of `E` epochs using the same batch-order
    /// seeds as the federated client. Intended for experiments prepared
    /// with a single client, where client 0 holds the whole pool.
    pub fn run_centralized(&self) -> Result<GlobalState> {
        if self.clients.len() != 1 {
            warn!(
                "centralized run on an experiment with {} clients uses client 0 only",
                self.clients.len()
            );
        }
        let data = &self.clients[0];
        let mut state = self.initial_state();
        for _ in 0..self.fed.rounds {
            let start = Instant::now();
            let result = client_update(&self.model, &state.theta, data, &self.fed, state.round)?;
            let theta = result.theta.clone();
            state = self.finish_round(&state, theta, &[result], Vec::new(), (0, 0), start)?;
        }
        Ok(state)
    }
}

/// Prepares and runs a federated experiment.
pub fn run_federated(
    fed: &FedConfig,
    model_cfg: &ModelConfig,
    lora_cfg: &LoraConfig,
    data: &DataPlan<'_>,
) -> Result<GlobalState> {
    Experiment::prepare(model_cfg, lora_cfg, fed, data)?.run_federated()
}

/// Prepares a single-client experiment from the same data and seeds and
/// trains it without aggregation.
pub fn run_centralized(
    fed: &FedConfig,
    model_cfg: &ModelConfig,
    lora_cfg: &LoraConfig,
    data: &DataPlan<'_>,
) -> Result<GlobalState> {
    let single = FedConfig {
        clients: 1,
        ..fed.clone()
    };
    Experiment::prepare(model_cfg, lora_cfg, &single, data)?.run_centralized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};
    use crate::data::{synth_corpus, PartitionStrategy};
    use crate::model::Matrix;
    use proptest::prelude::*;

    fn tv(v: &[f64]) -> TrainableVector {
        v.to_vec().into()
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            vocab_size: 128,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            ff_dim: 32,
            max_seq_len: 16,
            n_classes: 2,
            seed: 3,
        }
    }

    fn small_lora() -> LoraConfig {
        LoraConfig {
            rank: 2,
            alpha: 2.0,
            targets: vec![Matrix::Q, Matrix::V],
            seed: 3,
        }
    }

    fn small_fed(clients: usize) -> FedConfig {
        FedConfig {
            clients,
            rounds: 2,
            local_epochs: 1,
            eta: 0.1,
            batch_size: 8,
            seed: 11,
            aggregation: Aggregation::UniformMean,
            threads: 1,
        }
    }

    fn iid() -> PartitionSpec {
        PartitionSpec {
            clients: 1,
            strategy: PartitionStrategy::Iid,
            seed: 5,
        }
    }

    fn prepare(records: &[Record], fed: &FedConfig) -> Experiment {
        let part = iid();
        let plan = DataPlan {
            records,
            partition: &part,
            eval_frac: 0.2,
        };
        Experiment::prepare(&small_model(), &small_lora(), fed, &plan).unwrap()
    }

    #[test]
    fn fedavg_examples() {
        assert_eq!(fedavg(&[tv(&[1.0, 3.0]), tv(&[3.0, 5.0])], None).unwrap(), tv(&[2.0, 4.0]));
        let x = tv(&[0.1, -7.3, 1e-9]);
        assert_eq!(fedavg(&[x.clone()], None).unwrap(), x);
        assert_eq!(fedavg(&[x.clone(), x.clone(), x.clone()], None).unwrap(), x);
        assert_eq!(fedavg(&[x.clone(), x.clone()], Some(&[3, 9])).unwrap(), x);
        assert_eq!(
            fedavg(&[tv(&[0.0]), tv(&[4.0])], Some(&[3, 1])).unwrap(),
            tv(&[1.0])
        );
    }

    #[test]
    fn fedavg_errors() {
        assert!(matches!(fedavg(&[], None), Err(Error::Protocol(_))));
        assert!(matches!(fedavg(&[tv(&[1.0]), tv(&[1.0, 2.0])], None), Err(Error::Protocol(_))));
        assert!(matches!(fedavg(&[tv(&[1.0])], Some(&[0])), Err(Error::Protocol(_))));
        assert!(matches!(fedavg(&[tv(&[1.0])], Some(&[1, 2])), Err(Error::Protocol(_))));
    }

    #[test]
    fn comm_cost_arithmetic() {
        let cfg = FedConfig {
            clients: 3,
            ..FedConfig::default()
        };
        assert_eq!(comm_cost(&cfg, 1024), (12_288, 12_288));
    }

    #[test]
    fn fed_config_rejects_zero_counts() {
        for f in [
            FedConfig { clients: 0, ..FedConfig::default() },
            FedConfig { rounds: 0, ..FedConfig::default() },
            FedConfig { local_epochs: 0, ..FedConfig::default() },
            FedConfig { batch_size: 0, ..FedConfig::default() },
            FedConfig { eta: f64::NAN, ..FedConfig::default() },
        ] {
            assert!(matches!(f.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn table_grid_is_expressible() {
        for (k, e, r) in [(1, 3, 10), (1, 10, 3), (3, 10, 3)] {
            let f = FedConfig {
                clients: k,
                local_epochs: e,
                rounds: r,
                ..FedConfig::default()
            };
            f.validate().unwrap();
        }
    }

    /// Loss (w − 3)²/2 at w = 0 has gradient −3; one step of size 0.1 gives 0.3.
    #[test]
    fn sgd_step_on_quadratic() {
        let mut w = Tensor::scalar(0.0);
        let mut g = Graph::new();
        let wid = g.leaf(w.clone(), true);
        let c = g.constant(Tensor::scalar(-3.0));
        let d = g.add(wid, c).unwrap();
        let sq = g.matmul(d, d).unwrap();
        let loss = g.scale(sq, 0.5);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(wid).unwrap(), &[-3.0]);
        w.accumulate_grad(g.grad(wid).unwrap());
        w.sgd_step(0.1);
        assert!((w.data()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_eta_leaves_snapshot() {
        let records = synth_corpus(60, 1).unwrap();
        let fed = FedConfig {
            eta: 0.0,
            ..small_fed(2)
        };
        let exp = prepare(&records, &fed);
        let snapshot = exp.initial_state().theta;
        let r = client_update(exp.model(), &snapshot, &exp.clients()[0], &fed, 0).unwrap();
        assert_eq!(r.theta, snapshot);
        let next = exp.run_round(&exp.initial_state()).unwrap();
        assert_eq!(next.theta, snapshot);
    }

    #[test]
    fn client_update_is_deterministic_and_isolated() {
        let records = synth_corpus(60, 2).unwrap();
        let fed = small_fed(2);
        let exp = prepare(&records, &fed);
        let snapshot = exp.initial_state().theta;
        let before = snapshot.clone();
        let a = client_update(exp.model(), &snapshot, &exp.clients()[1], &fed, 0).unwrap();
        let b = client_update(exp.model(), &snapshot, &exp.clients()[1], &fed, 0).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_ne!(a.theta, snapshot);
        assert_eq!(snapshot, before);
        assert_eq!(exp.model().extract_trainable(), before);
    }

    #[test]
    fn empty_client_is_skipped() {
        let records = synth_corpus(60, 2).unwrap();
        let fed = small_fed(1);
        let mut exp = prepare(&records, &fed);
        exp.clients.push(ClientData {
            client_id: 1,
            train: TokenizedSet::default(),
            eval: TokenizedSet::default(),
        });
        let state = exp.run_round(&exp.initial_state()).unwrap();
        assert_eq!(state.history[0].failed_clients, vec![1]);
        assert_eq!(state.history[0].client_train_loss.len(), 2);
        assert!(state.history[0].client_train_loss[1].is_none());

        exp.clients.remove(0);
        let initial = exp.initial_state();
        assert!(matches!(exp.run_round(&initial), Err(Error::Round { .. })));
    }

    #[test]
    fn history_and_bytes() {
        let records = synth_corpus(90, 3).unwrap();
        let fed = small_fed(3);
        let exp = prepare(&records, &fed);
        let state = exp.run_federated().unwrap();
        assert_eq!(state.history.len(), fed.rounds);
        assert_eq!(state.round, fed.rounds);
        let (up, down) = comm_cost(&fed, exp.n_trainable());
        for r in &state.history {
            assert_eq!((r.uplink_bytes, r.downlink_bytes), (up, down));
            assert!((0.0..=1.0).contains(&r.eval_accuracy));
            assert!((0.0..=1.0).contains(&r.eval_f1));
        }
    }

    #[test]
    fn client_order_does_not_matter() {
        let records = synth_corpus(90, 4).unwrap();
        let fed = small_fed(3);
        let exp = prepare(&records, &fed);
        let s0 = exp.initial_state();
        let a = exp.run_round_in_order(&s0, &[0, 1, 2]).unwrap();
        let b = exp.run_round_in_order(&s0, &[2, 0, 1]).unwrap();
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn parallel_matches_sequential() {
        let records = synth_corpus(90, 4).unwrap();
        let seq = prepare(&records, &small_fed(3));
        let par = prepare(&records, &FedConfig { threads: 3, ..small_fed(3) });
        assert_eq!(seq.run_federated().unwrap().theta, par.run_federated().unwrap().theta);
    }

    #[test]
    fn single_client_matches_centralized() {
        let records = synth_corpus(80, 6).unwrap();
        let part = iid();
        let plan = DataPlan {
            records: &records,
            partition: &part,
            eval_frac: 0.2,
        };
        for e in [1, 3] {
            let fed = FedConfig {
                rounds: 1,
                local_epochs: e,
                ..small_fed(1)
            };
            let f = run_federated(&fed, &small_model(), &small_lora(), &plan).unwrap();
            let c = run_centralized(&fed, &small_model(), &small_lora(), &plan).unwrap();
            assert!(f.theta.max_abs_diff(&c.theta) < 1e-9);
        }
    }

    #[test]
    fn centralized_loss_decreases() {
        let records = synth_corpus(200, 8).unwrap();
        let fed = FedConfig {
            rounds: 4,
            local_epochs: 1,
            eta: 0.05,
            ..small_fed(1)
        };
        let exp = prepare(&records, &fed);
        let state = exp.run_centralized().unwrap();
        let first = state.history[0].client_train_loss[0].unwrap();
        let last = state.history.last().unwrap().client_train_loss[0].unwrap();
        assert!(last < first, "loss {first} -> {last}");
        assert_eq!(state.history[0].uplink_bytes, 0);
    }

    #[test]
    fn base_stays_frozen_through_rounds() {
        let records = synth_corpus(90, 9).unwrap();
        let exp = prepare(&records, &small_fed(3));
        let base_before = exp.model().base().clone();
        let state = exp.run_federated().unwrap();
        let trained = exp.model_with(&state.theta).unwrap();
        assert_eq!(trained.base(), &base_before);
    }

    fn brute_mean(thetas: &[Vec<f64>]) -> Vec<f64> {
        let k = thetas.len() as f64;
        (0..thetas[0].len())
            .map(|j| thetas.iter().map(|t| t[j]).sum::<f64>() / k)
            .collect()
    }

    proptest! {
        #[test]
        fn fedavg_matches_brute_force(
            (k, thetas) in (1usize..6, 1usize..20).prop_flat_map(|(k, n)| {
                (Just(k), proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, n), k))
            })
        ) {
            let vs: Vec<TrainableVector> = thetas.iter().map(|t| tv(t)).collect();
            let got = fedavg(&vs, None).unwrap();
            let expect = brute_mean(&thetas);
            for (a, b) in got.as_slice().iter().zip(&expect) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert_eq!(got.len(), thetas[0].len());
            prop_assert!(k >= 1);
        }

        #[test]
        fn fedavg_is_linear(thetas in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 5), 1..6), c in -4.0f64..4.0) {
            let vs: Vec<TrainableVector> = thetas.iter().map(|t| tv(t)).collect();
            let scaled: Vec<TrainableVector> = thetas.iter().map(|t| t.iter().map(|x| c * x).collect::<Vec<_>>().into()).collect();
            let lhs = fedavg(&scaled, None).unwrap();
            let rhs = fedavg(&vs, None).unwrap();
            for (a, b) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((a - c * b).abs() < 1e-12);
            }
        }

        #[test]
        fn fedavg_ignores_order(thetas in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 5), 1..6), seed in any::<u64>()) {
            let mut vs: Vec<TrainableVector> = thetas.iter().map(|t| tv(t)).collect();
            let a = fedavg(&vs, None).unwrap();
            SplitMix64::new(seed).shuffle(&mut vs);
            let b = fedavg(&vs, None).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn bytes_follow_formula(k in 1usize..50, n in 0usize..1_000_000) {
            let cfg = FedConfig { clients: k, ..FedConfig::default() };
            let (up, down) = comm_cost(&cfg, n);
            prop_assert_eq!(up, (k * n * 4) as u64);
            prop_assert_eq!(down, up);
        }
    }
}
