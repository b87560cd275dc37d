//! Tiny post-LN transformer encoder with a CLS classification head.
//!
//! Linear maps use the row-vector convention `y = x · W` with `W` stored as
//! `[in × out]`. Parameter order, which fixes checkpoint layout and the
//! flattening used everywhere else:
//!
//! 1. `token_embedding` `[vocab_size × d_model]`
//! 2. `position_embedding` `[max_seq_len × d_model]`
//! 3. per layer, in layer order: `wq`, `wk`, `wv`, `wo` `[d_model × d_model]`,
//!    `ff1` `[d_model × ff_dim]`, `ff2` `[ff_dim × d_model]`,
//!    `ln1_gamma`, `ln1_beta`, `ln2_gamma`, `ln2_beta` `[1 × d_model]`
//! 4. `head_weight` `[d_model × n_classes]`, `head_bias` `[1 × n_classes]`

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::vocab::TokenizedText;
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive pre-softmax score for padded key positions.
pub const MASK_SCORE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            ff_dim: 64,
            max_seq_len: 32,
            n_classes: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab_size", self.vocab_size),
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
            ("model.n_layers", self.n_layers),
            ("model.ff_dim", self.ff_dim),
            ("model.max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("model.n_classes must be >= 2".into()));
        }
        if self.vocab_size < super::vocab::RESERVED {
            return Err(Error::Config("model.vocab_size must cover the 3 reserved ids".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count of the plain encoder.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.ff_dim + 4 * d;
        self.vocab_size * d
            + self.max_seq_len * d
            + self.n_layers * per_layer
            + d * self.n_classes
            + self.n_classes
    }
}

/// Linear maps inside an encoder layer that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Matrix {
    Q,
    K,
    V,
    O,
    #[serde(rename = "FF1")]
    Ff1,
    #[serde(rename = "FF2")]
    Ff2,
}

impl Matrix {
    pub const ALL: [Matrix; 6] = [Matrix::Q, Matrix::K, Matrix::V, Matrix::O, Matrix::Ff1, Matrix::Ff2];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Matrix::Q => "Q",
            Matrix::K => "K",
            Matrix::V => "V",
            Matrix::O => "O",
            Matrix::Ff1 => "FF1",
            Matrix::Ff2 => "FF2",
        };
        f.write_str(s)
    }
}

/// One linear map in one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub layer: usize,
    pub matrix: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ff1: Tensor,
    pub ff2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl LayerWeights {
    pub fn matrix(&self, m: Matrix) -> &Tensor {
        match m {
            Matrix::Q => &self.wq,
            Matrix::K => &self.wk,
            Matrix::V => &self.wv,
            Matrix::O => &self.wo,
            Matrix::Ff1 => &self.ff1,
            Matrix::Ff2 => &self.ff2,
        }
    }

    pub fn matrix_mut(&mut self, m: Matrix) -> &mut Tensor {
        match m {
            Matrix::Q => &mut self.wq,
            Matrix::K => &mut self.wk,
            Matrix::V => &mut self.wv,
            Matrix::O => &mut self.wo,
            Matrix::Ff1 => &mut self.ff1,
            Matrix::Ff2 => &mut self.ff2,
        }
    }

    fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ff1,
            &self.ff2,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ff1,
            &mut self.ff2,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

const LAYER_PARAM_NAMES: [&str; 10] = [
    "wq", "wk", "wv", "wo", "ff1", "ff2", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl EncoderModel {
    /// Xavier-uniform weights drawn in parameter order from one SplitMix64
    /// stream seeded with `config.seed`; layer-norm affines start at
    /// gamma = 1, beta = 0 and the head bias at 0.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(config.seed);
        let d = config.d_model;
        let token_embedding = Tensor::xavier_uniform(config.vocab_size, d, &mut rng);
        let position_embedding = Tensor::xavier_uniform(config.max_seq_len, d, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: Tensor::xavier_uniform(d, d, &mut rng),
                wk: Tensor::xavier_uniform(d, d, &mut rng),
                wv: Tensor::xavier_uniform(d, d, &mut rng),
                wo: Tensor::xavier_uniform(d, d, &mut rng),
                ff1: Tensor::xavier_uniform(d, config.ff_dim, &mut rng),
                ff2: Tensor::xavier_uniform(config.ff_dim, d, &mut rng),
                ln1_gamma: Tensor::filled(1, d, 1.0),
                ln1_beta: Tensor::zeros(1, d),
                ln2_gamma: Tensor::filled(1, d, 1.0),
                ln2_beta: Tensor::zeros(1, d),
            })
            .collect();
        let head_weight = Tensor::xavier_uniform(d, config.n_classes, &mut rng);
        let head_bias = Tensor::zeros(1, config.n_classes);
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All parameters with their names, in the documented order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_PARAM_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("head_weight".to_string(), &self.head_weight));
        out.push(("head_bias".to_string(), &self.head_bias));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn weight(&self, site: Site) -> &Tensor {
        self.layers[site.layer].matrix(site.matrix)
    }

    /// Rebuilds a model from a flat parameter list in the documented order.
    pub fn from_parameters(config: &ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let template = Self::shape_template(config)?;
        let expected: Vec<(usize, usize)> = template.parameters().iter().map(|(_, t)| t.shape()).collect();
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        if let Some((i, (p, e))) = params.iter().zip(&expected).enumerate().find(|(_, (p, e))| p.shape() != **e) {
            return Err(Error::Checkpoint(format!(
                "parameter {i} has shape {:?}, expected {e:?}",
                p.shape()
            )));
        }
        let mut model = template;
        for (slot, p) in model.parameters_mut().into_iter().zip(params) {
            *slot = p;
        }
        Ok(model)
    }

    fn shape_template(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layer = LayerWeights {
            wq: Tensor::zeros(d, d),
            wk: Tensor::zeros(d, d),
            wv: Tensor::zeros(d, d),
            wo: Tensor::zeros(d, d),
            ff1: Tensor::zeros(d, config.ff_dim),
            ff2: Tensor::zeros(config.ff_dim, d),
            ln1_gamma: Tensor::zeros(1, d),
            ln1_beta: Tensor::zeros(1, d),
            ln2_gamma: Tensor::zeros(1, d),
            ln2_beta: Tensor::zeros(1, d),
        };
        Ok(Self {
            config: config.clone(),
            token_embedding: Tensor::zeros(config.vocab_size, d),
            position_embedding: Tensor::zeros(config.max_seq_len, d),
            layers: vec![layer; config.n_layers],
            head_weight: Tensor::zeros(d, config.n_classes),
            head_bias: Tensor::zeros(1, config.n_classes),
        })
    }

    /// Logits `[batch × n_classes]` for a batch of equal-length sequences.
    pub fn forward(&self, batch: &[TokenizedText]) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = EncoderNodes::insert(&mut g, self, false);
        let logits = encoder_forward(&mut g, &self.config, &nodes, &NO_ADAPTERS, batch, None)?;
        Ok(g.value(logits).clone())
    }

    /// Mean cross-entropy of the plain encoder built on `g`, with `params`
    /// holding one node per tensor in [`EncoderModel::parameters`] order.
    pub fn graph_loss(
        config: &ModelConfig,
        g: &mut Graph,
        params: &[NodeId],
        batch: &[TokenizedText],
        labels: &[usize],
    ) -> Result<NodeId> {
        let expected = 4 + 10 * config.n_layers;
        if params.len() != expected {
            return Err(Error::Protocol(format!(
                "expected {expected} parameter nodes, got {}",
                params.len()
            )));
        }
        let nodes = EncoderNodes::from_ids(config, params);
        let logits = encoder_forward(g, config, &nodes, &NO_ADAPTERS, batch, None)?;
        g.cross_entropy(logits, labels)
    }

    /// Attention probabilities, one `[len × len]` matrix per
    /// (layer, sequence, head) in that nesting order.
    pub fn attention_weights(&self, batch: &[TokenizedText]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let nodes = EncoderNodes::insert(&mut g, self, false);
        let mut sink = Vec::new();
        encoder_forward(&mut g, &self.config, &nodes, &NO_ADAPTERS, batch, Some(&mut sink))?;
        Ok(sink.into_iter().map(|id| g.value(id).clone()).collect())
    }
}

/// Graph handles for every encoder parameter.
#[derive(Debug, Clone)]
pub(crate) struct EncoderNodes {
    token_embedding: NodeId,
    position_embedding: NodeId,
    layers: Vec<[NodeId; 10]>,
    head_weight: NodeId,
    head_bias: NodeId,
}

impl EncoderNodes {
    /// Inserts the model's parameters as leaves. With `trainable` false the
    /// whole encoder is frozen.
    pub(crate) fn insert(g: &mut Graph, model: &EncoderModel, trainable: bool) -> Self {
        let ids: Vec<NodeId> = model
            .parameters()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect();
        Self::from_ids(&model.config, &ids)
    }

    /// Maps a flat id list in parameter order onto the encoder structure.
    pub(crate) fn from_ids(config: &ModelConfig, ids: &[NodeId]) -> Self {
        assert_eq!(ids.len(), 4 + 10 * config.n_layers, "parameter id count");
        let layers = (0..config.n_layers)
            .map(|l| {
                let base = 2 + 10 * l;
                std::array::from_fn(|i| ids[base + i])
            })
            .collect();
        let n = ids.len();
        Self {
            token_embedding: ids[0],
            position_embedding: ids[1],
            layers,
            head_weight: ids[n - 2],
            head_bias: ids[n - 1],
        }
    }

    pub(crate) fn with_head(mut self, weight: NodeId, bias: NodeId) -> Self {
        self.head_weight = weight;
        self.head_bias = bias;
        self
    }

    fn matrix(&self, layer: usize, m: Matrix) -> NodeId {
        self.layers[layer][m as usize]
    }
}

/// Low-rank update attached to one site: `x·W0 + scale·(x·B)·A`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LowRankNodes {
    pub b: NodeId,
    pub a: NodeId,
    pub scale: f64,
}

pub(crate) type AdapterNodes = BTreeMap<Site, LowRankNodes>;

static NO_ADAPTERS: AdapterNodes = BTreeMap::new();

fn project(
    g: &mut Graph,
    x: NodeId,
    weight: NodeId,
    adapter: Option<&LowRankNodes>,
) -> Result<NodeId> {
    let base = g.matmul(x, weight)?;
    let Some(ad) = adapter else { return Ok(base) };
    let down = g.matmul(x, ad.b)?;
    let mut delta = g.matmul(down, ad.a)?;
    if ad.scale != 1.0 {
        delta = g.scale(delta, ad.scale);
    }
    g.add(base, delta)
}

pub(crate) fn validate_batch(config: &ModelConfig, batch: &[TokenizedText]) -> Result<usize> {
    let Some(first) = batch.first() else {
        return Err(Error::Data("empty batch".into()));
    };
    let len = first.len();
    if len == 0 {
        return Err(Error::Data("zero-length sequence".into()));
    }
    if len > config.max_seq_len {
        return Err(Error::Data(format!(
            "sequence length {len} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    for (i, s) in batch.iter().enumerate() {
        if s.ids.len() != len || s.mask.len() != len {
            return Err(Error::Data(format!(
                "sequence {i} has length {} (mask {}), expected {len}",
                s.ids.len(),
                s.mask.len()
            )));
        }
        if let Some(&bad) = s.ids.iter().find(|&&id| id >= config.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} in sequence {i} is outside vocab_size {}",
                config.vocab_size
            )));
        }
    }
    Ok(len)
}

/// Builds the encoder forward pass on `g` and returns the logits node.
pub(crate) fn encoder_forward(
    g: &mut Graph,
    config: &ModelConfig,
    nodes: &EncoderNodes,
    adapters: &AdapterNodes,
    batch: &[TokenizedText],
    mut attention_sink: Option<&mut Vec<NodeId>>,
) -> Result<NodeId> {
    let len = validate_batch(config, batch)?;
    let n_seq = batch.len();
    let dh = config.head_dim();
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    let token_ids: Vec<usize> = batch.iter().flat_map(|s| s.ids.iter().copied()).collect();
    let positions: Vec<usize> = (0..n_seq).flat_map(|_| 0..len).collect();
    let tok = g.gather_rows(nodes.token_embedding, &token_ids)?;
    let pos = g.gather_rows(nodes.position_embedding, &positions)?;
    let mut x = g.add(tok, pos)?;

    // Same additive key mask for every query row of a sequence.
    let masks: Vec<NodeId> = batch
        .iter()
        .map(|s| {
            let row: Vec<f64> = s.mask.iter().map(|&m| if m == 0 { MASK_SCORE } else { 0.0 }).collect();
            let data = (0..len).flat_map(|_| row.iter().copied()).collect();
            g.constant(Tensor::new(len, len, data).expect("square mask"))
        })
        .collect();

    for layer in 0..config.n_layers {
        let w = |m: Matrix| nodes.matrix(layer, m);
        let ad = |m: Matrix| adapters.get(&Site { layer, matrix: m });
        let q = project(g, x, w(Matrix::Q), ad(Matrix::Q))?;
        let k = project(g, x, w(Matrix::K), ad(Matrix::K))?;
        let v = project(g, x, w(Matrix::V), ad(Matrix::V))?;

        let mut per_seq = Vec::with_capacity(n_seq);
        for (s, &mask) in masks.iter().enumerate() {
            let rows = s * len..(s + 1) * len;
            let mut heads = Vec::with_capacity(config.n_heads);
            for h in 0..config.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = g.slice(q, rows.clone(), cols.clone())?;
                let kh = g.slice(k, rows.clone(), cols.clone())?;
                let vh = g.slice(v, rows.clone(), cols)?;
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, inv_sqrt_dh);
                let scores = g.add(scores, mask)?;
                let probs = g.softmax_rows(scores);
                if let Some(sink) = attention_sink.as_deref_mut() {
                    sink.push(probs);
                }
                heads.push(g.matmul(probs, vh)?);
            }
            per_seq.push(g.concat_cols(&heads)?);
        }
        let context = g.concat_rows(&per_seq)?;
        let attn = project(g, context, w(Matrix::O), ad(Matrix::O))?;

        let ln = &nodes.layers[layer];
        let res1 = g.add(x, attn)?;
        let h = g.layer_norm(res1, ln[6], ln[7], LAYER_NORM_EPS)?;
        let ff = project(g, h, w(Matrix::Ff1), ad(Matrix::Ff1))?;
        let ff = g.relu(ff);
        let ff = project(g, ff, w(Matrix::Ff2), ad(Matrix::Ff2))?;
        let res2 = g.add(h, ff)?;
        x = g.layer_norm(res2, ln[8], ln[9], LAYER_NORM_EPS)?;
    }

    let cls_rows: Vec<usize> = (0..n_seq).map(|s| s * len).collect();
    let cls = g.gather_rows(x, &cls_rows)?;
    let logits = g.matmul(cls, nodes.head_weight)?;
    g.add_row(logits, nodes.head_bias)
}

/// Index of the largest logit per row; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::vocab::{CLS, PAD};

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            ff_dim: 16,
            max_seq_len: 8,
            n_classes: 2,
            seed: 5,
        }
    }

    fn random_batch(rng: &mut SplitMix64, cfg: &ModelConfig, n: usize, len: usize) -> Vec<TokenizedText> {
        (0..n)
            .map(|_| {
                let real = 1 + rng.below(len);
                let mut ids = vec![CLS];
                ids.extend((1..real).map(|_| 3 + rng.below(cfg.vocab_size - 3)));
                ids.resize(len, PAD);
                let mask = (0..len).map(|i| u8::from(i < real)).collect();
                TokenizedText { ids, mask }
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small_config();
        let a = EncoderModel::init(&cfg).unwrap();
        let b = EncoderModel::init(&cfg).unwrap();
        assert_eq!(a, b);
        let c = EncoderModel::init(&ModelConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_xavier_bounds() {
        let m = EncoderModel::init(&small_config()).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(m.layers[0].wq.data().iter().all(|v| v.abs() <= bound));
        assert!(m.layers[1].ln2_gamma.data().iter().all(|&v| v == 1.0));
        assert!(m.layers[1].ln2_beta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig { n_heads: 3, ..small_config() };
        assert!(matches!(EncoderModel::init(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn param_count_matches_hand_count() {
        // token 256*32 + pos 32*32 + 2 layers * (4*32*32 + 32*64 + 64*32 + 4*32) + head 32*2 + 2
        let cfg = ModelConfig {
            vocab_size: 256,
            ..ModelConfig::default()
        };
        let expected = 8192 + 1024 + 2 * (4096 + 2048 + 2048 + 128) + 64 + 2;
        assert_eq!(expected, 25_922);
        assert_eq!(cfg.param_count(), expected);
        assert_eq!(EncoderModel::init(&cfg).unwrap().param_count(), expected);
    }

    #[test]
    fn identical_rows_give_identical_logits() {
        let cfg = small_config();
        let m = EncoderModel::init(&cfg).unwrap();
        let mut rng = SplitMix64::new(1);
        let one = random_batch(&mut rng, &cfg, 1, 6).pop().unwrap();
        let logits = m.forward(&[one.clone(), one.clone(), one]).unwrap();
        assert_eq!(logits.row(0), logits.row(1));
        assert_eq!(logits.row(1), logits.row(2));
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let cfg = small_config();
        let m = EncoderModel::init(&cfg).unwrap();
        let seq = TokenizedText {
            ids: vec![CLS; 9],
            mask: vec![1; 9],
        };
        assert!(matches!(m.forward(&[seq]), Err(Error::Data(_))));
    }

    #[test]
    fn padding_content_is_invisible() {
        let cfg = small_config();
        let m = EncoderModel::init(&cfg).unwrap();
        let mut rng = SplitMix64::new(9);
        for _ in 0..50 {
            let batch = random_batch(&mut rng, &cfg, 4, 7);
            let mut scrambled = batch.clone();
            for s in &mut scrambled {
                for (id, &mk) in s.ids.iter_mut().zip(&s.mask) {
                    if mk == 0 {
                        *id = rng.below(cfg.vocab_size);
                    }
                }
            }
            assert_eq!(m.forward(&batch).unwrap(), m.forward(&scrambled).unwrap());
        }
    }

    #[test]
    fn logits_are_finite() {
        let cfg = small_config();
        let m = EncoderModel::init(&cfg).unwrap();
        let mut rng = SplitMix64::new(2);
        for _ in 0..1000 {
            let batch = random_batch(&mut rng, &cfg, 1, 8);
            assert!(m.forward(&batch).unwrap().is_finite());
        }
    }

    #[test]
    fn attention_rows_sum_to_one_over_real_keys() {
        let cfg = small_config();
        let m = EncoderModel::init(&cfg).unwrap();
        let mut rng = SplitMix64::new(4);
        let batch = random_batch(&mut rng, &cfg, 3, 8);
        let maps = m.attention_weights(&batch).unwrap();
        assert_eq!(maps.len(), cfg.n_layers * 3 * cfg.n_heads);
        for (i, a) in maps.iter().enumerate() {
            let seq = &batch[(i / cfg.n_heads) % 3];
            for r in 0..a.rows() {
                let s: f64 = a
                    .row(r)
                    .iter()
                    .zip(&seq.mask)
                    .filter(|(_, &mk)| mk == 1)
                    .map(|(v, _)| v)
                    .sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn from_parameters_roundtrip() {
        let cfg = small_config();
        let m = EncoderModel::init(&cfg).unwrap();
        let params = m.parameters().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(EncoderModel::from_parameters(&cfg, params).unwrap(), m);
        assert!(EncoderModel::from_parameters(&cfg, vec![]).is_err());
    }

    #[test]
    fn argmax_ties_to_class_zero() {
        let t = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0], vec![3.0, -1.0]]).unwrap();
        assert_eq!(argmax_rows(&t), [0, 1, 0]);
    }
}
