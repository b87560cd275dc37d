//! Low-rank adaptation of a frozen encoder.
//!
//! A targeted weight `W0 ∈ R^{d×k}` is never modified; the trainable update
//! is `ΔW = scale · B·A` with `B ∈ R^{d×r}`, `A ∈ R^{r×k}` and
//! `scale = alpha / r`. Because linear maps act on row vectors (`y = x·W`),
//! the adapted projection is computed as `x·W0 + scale·(x·B)·A`.
//!
//! The trainable set is every adapter plus the classifier head. It is
//! flattened in a fixed order: adapters sorted by (layer, matrix) with
//! `Q < K < V < O < FF1 < FF2`, each contributing `A` then `B` row-major,
//! followed by `head_weight` and `head_bias`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::{
    encoder_forward, AdapterNodes, EncoderModel, EncoderNodes, LowRankNodes, Matrix, ModelConfig, Site,
    TokenizedText,
};
use crate::rng::{derive_seed, stream, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Matrix>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            targets: vec![Matrix::Q, Matrix::V],
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora.rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("lora.alpha must be > 0, got {}", self.alpha)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("lora.targets must name at least one matrix".into()));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(Error::Config("lora.targets contains duplicates".into()));
        }
        for &m in &self.targets {
            let (d, k) = matrix_shape(model, m);
            if self.rank >= d.min(k) {
                return Err(Error::Config(format!(
                    "lora.rank {} must be < min(d, k) = {} for {m} ({d}x{k})",
                    self.rank,
                    d.min(k)
                )));
            }
        }
        Ok(())
    }
}

fn matrix_shape(cfg: &ModelConfig, m: Matrix) -> (usize, usize) {
    let d = cfg.d_model;
    match m {
        Matrix::Ff1 => (d, cfg.ff_dim),
        Matrix::Ff2 => (cfg.ff_dim, d),
        _ => (d, d),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    a: Tensor,
    b: Tensor,
    base: Arc<Tensor>,
    scale: f64,
}

impl Adapter {
    pub fn new(base: Arc<Tensor>, a: Tensor, b: Tensor, scale: f64) -> Result<Self> {
        let (d, k) = base.shape();
        let r = a.rows();
        if a.cols() != k || b.shape() != (d, r) {
            return Err(Error::Dimension {
                op: "adapter",
                lhs: b.shape(),
                rhs: a.shape(),
            });
        }
        Ok(Self { a, b, base, scale })
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// r·(d + k)
    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `scale · B·A`, shaped like the base weight.
    pub fn delta(&self) -> Tensor {
        let ba = self.b.matmul(&self.a).expect("adapter shapes checked at construction");
        if self.scale == 1.0 {
            ba
        } else {
            ba.scaled(self.scale)
        }
    }

    /// `W0 + ΔW`. The base weight is left untouched.
    pub fn effective_weight(&self) -> Tensor {
        self.base.add(&self.delta()).expect("delta has base shape")
    }
}

/// Per-component trainable parameter accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub adapters: Vec<(String, usize)>,
    /// Σ r·(d + k) over adapters.
    pub adapter_params: usize,
    /// Σ d·k over the adapted matrices: what full fine-tuning of the same
    /// matrices would train.
    pub dense_equivalent: usize,
    pub head_params: usize,
    pub trainable: usize,
    /// Parameters of the plain encoder, adapters excluded.
    pub base_total: usize,
}

impl ParamBreakdown {
    pub fn trainable_ratio(&self) -> f64 {
        self.trainable as f64 / self.base_total as f64
    }
}

/// Flattened trainable parameters; the payload exchanged between clients
/// and the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrainableVector(Vec<f64>);

impl TrainableVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &TrainableVector) -> f64 {
        assert_eq!(self.len(), other.len(), "length mismatch");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<Vec<f64>> for TrainableVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Frozen encoder plus trainable adapters and classifier head.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    base: Arc<EncoderModel>,
    config: LoraConfig,
    adapters: BTreeMap<Site, Adapter>,
    head_weight: Tensor,
    head_bias: Tensor,
}

/// Wraps `base` with fresh adapters: `A` Xavier-uniform from the config
/// seed, `B = 0`, so the adapted model starts out identical to the base.
pub fn attach_adapters(base: impl Into<Arc<EncoderModel>>, config: &LoraConfig) -> Result<AdaptedModel> {
    let base = base.into();
    config.validate(base.config())?;
    let mut rng = SplitMix64::new(derive_seed(config.seed, &[stream::LORA_INIT]));
    let mut adapters = BTreeMap::new();
    for layer in 0..base.config().n_layers {
        for &matrix in Matrix::ALL.iter().filter(|m| config.targets.contains(m)) {
            let site = Site { layer, matrix };
            let w0 = base.weight(site);
            let (d, k) = w0.shape();
            let a = Tensor::xavier_uniform(config.rank, k, &mut rng);
            let b = Tensor::zeros(d, config.rank);
            adapters.insert(site, Adapter::new(Arc::new(w0.clone()), a, b, config.scale())?);
        }
    }
    Ok(AdaptedModel {
        head_weight: base.head_weight.clone(),
        head_bias: base.head_bias.clone(),
        base,
        config: config.clone(),
        adapters,
    })
}

impl AdaptedModel {
    /// Reassembles an adapted model from stored parts (checkpoint loading).
    pub fn from_parts(
        base: Arc<EncoderModel>,
        config: LoraConfig,
        adapters: BTreeMap<Site, Adapter>,
        head_weight: Tensor,
        head_bias: Tensor,
    ) -> Result<Self> {
        config.validate(base.config())?;
        let fresh = attach_adapters(base.clone(), &config)?;
        if fresh.adapters.keys().ne(adapters.keys()) {
            return Err(Error::Checkpoint("adapter sites do not match the LoRA targets".into()));
        }
        for (site, ad) in &adapters {
            let expect = &fresh.adapters[site];
            if ad.a.shape() != expect.a.shape() || ad.b.shape() != expect.b.shape() {
                return Err(Error::Checkpoint(format!("adapter {site:?} has the wrong shape")));
            }
            if ad.base.as_ref() != expect.base.as_ref() {
                return Err(Error::Checkpoint(format!("adapter {site:?} does not match the base weight")));
            }
        }
        if head_weight.shape() != fresh.head_weight.shape() || head_bias.shape() != fresh.head_bias.shape() {
            return Err(Error::Checkpoint("classifier head has the wrong shape".into()));
        }
        Ok(Self {
            base,
            config,
            adapters,
            head_weight,
            head_bias,
        })
    }

    pub fn base(&self) -> &EncoderModel {
        &self.base
    }

    pub fn base_arc(&self) -> &Arc<EncoderModel> {
        &self.base
    }

    pub fn lora_config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn adapters(&self) -> impl Iterator<Item = (&Site, &Adapter)> {
        self.adapters.iter()
    }

    pub fn adapter(&self, site: Site) -> Option<&Adapter> {
        self.adapters.get(&site)
    }

    pub fn adapter_mut(&mut self, site: Site) -> Option<&mut Adapter> {
        self.adapters.get_mut(&site)
    }

    pub fn head_weight(&self) -> &Tensor {
        &self.head_weight
    }

    pub fn head_bias(&self) -> &Tensor {
        &self.head_bias
    }

    /// Trainable tensors in enumeration order.
    pub fn trainable_tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.adapters.values().flat_map(|ad| [&ad.a, &ad.b]).collect();
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .adapters
            .values_mut()
            .flat_map(|ad| [&mut ad.a, &mut ad.b])
            .collect();
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn trainable_param_count(&self) -> ParamBreakdown {
        let adapters: Vec<(String, usize)> = self
            .adapters
            .iter()
            .map(|(s, ad)| (format!("layers.{}.{}", s.layer, s.matrix), ad.param_count()))
            .collect();
        let adapter_params = adapters.iter().map(|(_, n)| n).sum();
        let dense_equivalent = self.adapters.values().map(|ad| ad.base.len()).sum();
        let head_params = self.head_weight.len() + self.head_bias.len();
        ParamBreakdown {
            adapters,
            adapter_params,
            dense_equivalent,
            head_params,
            trainable: adapter_params + head_params,
            base_total: self.base.param_count(),
        }
    }

    pub fn extract_trainable(&self) -> TrainableVector {
        let mut v = Vec::with_capacity(self.trainable_param_count().trainable);
        for t in self.trainable_tensors() {
            v.extend_from_slice(t.data());
        }
        TrainableVector(v)
    }

    pub fn load_trainable(&mut self, v: &TrainableVector) -> Result<()> {
        let expected: usize = self.trainable_tensors().iter().map(|t| t.len()).sum();
        if v.len() != expected {
            return Err(Error::Protocol(format!(
                "trainable vector has {} entries, model expects {expected}",
                v.len()
            )));
        }
        let mut offset = 0;
        for t in self.trainable_tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&v.0[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Builds the classification loss on `g`, with `trainable` holding one
    /// leaf per trainable tensor in enumeration order. The base encoder is
    /// inserted as frozen constants.
    pub fn graph_loss(
        &self,
        g: &mut Graph,
        trainable: &[NodeId],
        batch: &[TokenizedText],
        labels: &[usize],
    ) -> Result<NodeId> {
        let logits = self.graph_logits(g, trainable, batch)?;
        g.cross_entropy(logits, labels)
    }

    fn graph_logits(&self, g: &mut Graph, trainable: &[NodeId], batch: &[TokenizedText]) -> Result<NodeId> {
        let n_adapters = self.adapters.len();
        if trainable.len() != 2 * n_adapters + 2 {
            return Err(Error::Protocol(format!(
                "expected {} trainable leaves, got {}",
                2 * n_adapters + 2,
                trainable.len()
            )));
        }
        let nodes = EncoderNodes::insert(g, &self.base, false)
            .with_head(trainable[2 * n_adapters], trainable[2 * n_adapters + 1]);
        let adapter_nodes: AdapterNodes = self
            .adapters
            .iter()
            .enumerate()
            .map(|(i, (&site, ad))| {
                (
                    site,
                    LowRankNodes {
                        a: trainable[2 * i],
                        b: trainable[2 * i + 1],
                        scale: ad.scale,
                    },
                )
            })
            .collect();
        encoder_forward(g, self.base.config(), &nodes, &adapter_nodes, batch, None)
    }

    /// Logits through the adapter path.
    pub fn forward(&self, batch: &[TokenizedText]) -> Result<Tensor> {
        let mut g = Graph::new();
        let ids = self.insert_trainable(&mut g, false);
        let logits = self.graph_logits(&mut g, &ids, batch)?;
        Ok(g.value(logits).clone())
    }

    fn insert_trainable(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.trainable_tensors()
            .into_iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for t in self.trainable_tensors_mut() {
            t.zero_grad();
        }
    }

    /// One forward/backward pass; gradients are summed into the trainable
    /// tensors' grad slots. Returns the batch loss.
    pub fn accumulate_gradients(&mut self, batch: &[TokenizedText], labels: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let ids = self.insert_trainable(&mut g, true);
        let loss = self.graph_loss(&mut g, &ids, batch, labels)?;
        g.backward(loss)?;
        let loss_value = g.value(loss).data()[0];
        for (t, id) in self.trainable_tensors_mut().into_iter().zip(ids) {
            if let Some(grad) = g.grad(id) {
                t.accumulate_grad(grad);
            }
        }
        Ok(loss_value)
    }

    /// Gradients currently held in the grad slots, flattened in trainable
    /// order (absent slots read as zero).
    pub fn gradient_vector(&self) -> TrainableVector {
        let mut v = Vec::new();
        for t in self.trainable_tensors() {
            match t.grad() {
                Some(g) => v.extend_from_slice(g),
                None => v.extend(std::iter::repeat(0.0).take(t.len())),
            }
        }
        TrainableVector(v)
    }

    /// `θ ← θ − η·g` on every trainable tensor.
    pub fn sgd_step(&mut self, eta: f64) {
        for t in self.trainable_tensors_mut() {
            t.sgd_step(eta);
        }
    }

    /// Zero grads, forward, backward, SGD update. Returns the batch loss.
    pub fn train_step(&mut self, batch: &[TokenizedText], labels: &[usize], eta: f64) -> Result<f64> {
        self.zero_grad();
        let loss = self.accumulate_gradients(batch, labels)?;
        self.sgd_step(eta);
        Ok(loss)
    }

    /// Folds every adapter into its base weight and installs the trained
    /// head, producing a plain encoder.
    pub fn merge(self) -> EncoderModel {
        let mut merged = EncoderModel::clone(&self.base);
        for (site, ad) in &self.adapters {
            *merged.layers[site.layer].matrix_mut(site.matrix) = ad.effective_weight();
        }
        merged.head_weight = self.head_weight;
        merged.head_bias = self.head_bias;
        merged
    }
}
