//! Post-LN Transformer encoder with sinusoidal positions and task heads.

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{AttentionLayout, ParamStore, Parameter, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Filled from the vocabulary when a model is built.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub dropout_residual: f64,
    pub dropout_attention: f64,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 128,
            dropout_residual: 0.2,
            dropout_attention: 0.1,
            max_seq_len: 128,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Hidden size; equal to the embedding size in this encoder.
    pub fn hidden_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.embed_dim == 0 || self.num_layers == 0 || self.num_heads == 0 || self.ff_dim == 0 {
            return bad("encoder sizes must be positive");
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        for p in [self.dropout_residual, self.dropout_attention] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout probabilities must lie in [0, 1)");
            }
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must leave room for the tag token");
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive");
        }
        Ok(())
    }

    /// Trainable parameter count for a given vocabulary and class count.
    pub fn parameter_count(&self, vocab_size: usize, num_classes: usize) -> usize {
        let d = self.embed_dim;
        let f = self.ff_dim;
        let layer = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d);
        vocab_size * d + self.num_layers * layer + d * num_classes + num_classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    #[serde(rename = "labeling", alias = "token_labeling")]
    TokenLabeling,
}

/// Padded batch of id sequences. Position 0 of every sequence holds its tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
}

impl SeqBatch {
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let seq_len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(Vocabulary::PAD_ID, seq_len - s.len()));
            lengths.push(s.len());
        }
        Self { ids, lengths, seq_len }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn key_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.rows());
        for &l in &self.lengths {
            m.extend((0..self.seq_len).map(|j| j < l));
        }
        m
    }

    /// Flat row of each non-tag, non-padding position, in sequence order.
    pub fn content_rows(&self) -> Vec<usize> {
        let mut rows = Vec::new();
        for (b, &l) in self.lengths.iter().enumerate() {
            rows.extend((1..l).map(|t| b * self.seq_len + t));
        }
        rows
    }
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Fixed sinusoidal table, `[seq_len, dim]`.
pub fn positional_encoding<T: Scalar>(seq_len: usize, dim: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); seq_len * dim];
    for pos in 0..seq_len {
        for i in 0..dim {
            let expo = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(expo);
            data[pos * dim + i] = T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![seq_len, dim], data).expect("sized by construction")
}

fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = T::lit(1.0 / (1.0 - p));
            let mask = (0..tape.value(x).len())
                .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
                .collect();
            tape.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

fn uniform_tensor<T: Scalar>(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.uniform_range(-bound, bound))).collect();
    Tensor::new(shape, data).expect("sized by construction")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct LayerParams {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

/// Embedding table plus encoder stack; weights live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    embedding: usize,
    layers: Vec<LayerParams>,
}

/// Stream key used to initialize the embedding row of `id`.
///
/// The generic tag shares its key with the first pseudo-tag, so a one-tag
/// model starts from exactly the weights of its tagless counterpart.
pub fn embedding_init_key(vocab: &Vocabulary, id: usize) -> String {
    if id == vocab.cls_id() {
        "<tag:1>".to_string()
    } else {
        vocab.token(id)
    }
}

impl Encoder {
    /// Registers freshly initialized weights in `store`.
    pub fn init<T: Scalar>(
        mut config: EncoderConfig,
        vocab: &Vocabulary,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let d = config.embed_dim;
        let mut emb = Vec::with_capacity(vocab.len() * d);
        for id in 0..vocab.len() {
            let mut rng = Rng::stream(seed, &format!("init:embedding:{}", embedding_init_key(vocab, id)));
            emb.extend((0..d).map(|_| T::lit(rng.normal())));
        }
        let embedding = store.push(Parameter::new(
            "embedding",
            Tensor::new(vec![vocab.len(), d], emb)?,
            true,
        ));

        let linear = |store: &mut ParamStore<T>, name: String, fan_in: usize, fan_out: usize| {
            let mut rng = Rng::stream(seed, &format!("init:{name}"));
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = store.push(Parameter::new(
                format!("{name}.weight"),
                uniform_tensor(vec![fan_in, fan_out], bound, &mut rng),
                true,
            ));
            let b = store.push(Parameter::new(
                format!("{name}.bias"),
                Tensor::zeros(vec![fan_out]),
                true,
            ));
            (w, b)
        };
        let norm = |store: &mut ParamStore<T>, name: String| {
            let g = store.push(Parameter::new(
                format!("{name}.gamma"),
                Tensor::full(vec![d], T::one()),
                true,
            ));
            let b = store.push(Parameter::new(format!("{name}.beta"), Tensor::zeros(vec![d]), true));
            (g, b)
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("layers.{l}");
            let (wq, bq) = linear(store, format!("{p}.attn.query"), d, d);
            let (wk, bk) = linear(store, format!("{p}.attn.key"), d, d);
            let (wv, bv) = linear(store, format!("{p}.attn.value"), d, d);
            let (wo, bo) = linear(store, format!("{p}.attn.output"), d, d);
            let (ln1_g, ln1_b) = norm(store, format!("{p}.norm1"));
            let (w1, b1) = linear(store, format!("{p}.ff.inner"), d, config.ff_dim);
            let (w2, b2) = linear(store, format!("{p}.ff.outer"), config.ff_dim, d);
            let (ln2_g, ln2_b) = norm(store, format!("{p}.norm2"));
            layers.push(LayerParams {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_g,
                ln1_b,
                w1,
                b1,
                w2,
                b2,
                ln2_g,
                ln2_b,
            });
        }
        Ok(Self {
            config,
            embedding,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embedding_param(&self) -> usize {
        self.embedding
    }

    /// Token lookup plus positional encoding, `[batch*seq, dim]`.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], batch: &SeqBatch) -> Result<Var> {
        if batch.seq_len > self.config.max_seq_len {
            return Err(Error::SequenceLength {
                len: batch.seq_len,
                max: self.config.max_seq_len,
            });
        }
        let e = tape.gather_rows(vars[self.embedding], &batch.ids)?;
        let d = self.config.embed_dim;
        let pe = positional_encoding::<T>(batch.seq_len, d);
        let mut pos = Vec::with_capacity(batch.rows() * d);
        for _ in 0..batch.batch_size() {
            pos.extend_from_slice(pe.data());
        }
        tape.add_const(e, &Tensor::new(vec![batch.rows(), d], pos)?)
    }

    /// Runs the layer stack over embedded input `x` laid out as `batch`.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        batch: &SeqBatch,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if batch.seq_len == 0 || batch.batch_size() == 0 {
            return Err(Error::EmptyInput);
        }
        if batch.seq_len > self.config.max_seq_len {
            return Err(Error::SequenceLength {
                len: batch.seq_len,
                max: self.config.max_seq_len,
            });
        }
        let layout = AttentionLayout {
            batch: batch.batch_size(),
            seq: batch.seq_len,
            heads: self.config.num_heads,
            key_mask: batch.key_mask(),
        };
        let eps = T::lit(self.config.layer_norm_eps);
        let mut h = x;
        for lp in &self.layers {
            let lin = |tape: &mut Tape<T>, x: Var, w: usize, b: usize| -> Result<Var> {
                let y = tape.matmul(x, vars[w])?;
                tape.add_row(y, vars[b])
            };
            let q = lin(tape, h, lp.wq, lp.bq)?;
            let k = lin(tape, h, lp.wk, lp.bk)?;
            let v = lin(tape, h, lp.wv, lp.bv)?;
            let attn_mask = match mode {
                Mode::Train(rng) if self.config.dropout_attention > 0.0 => {
                    let p = self.config.dropout_attention;
                    let keep = T::lit(1.0 / (1.0 - p));
                    let n = layout.batch * layout.heads * layout.seq * layout.seq;
                    Some(
                        (0..n)
                            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
                            .collect(),
                    )
                }
                _ => None,
            };
            let a = tape.attention(q, k, v, &layout, attn_mask)?;
            let o = lin(tape, a, lp.wo, lp.bo)?;
            let o = dropout(tape, o, self.config.dropout_residual, mode)?;
            let r = tape.add(h, o)?;
            h = tape.layer_norm(r, vars[lp.ln1_g], vars[lp.ln1_b], eps)?;

            let f = lin(tape, h, lp.w1, lp.b1)?;
            let f = tape.gelu(f)?;
            let f = lin(tape, f, lp.w2, lp.b2)?;
            let f = dropout(tape, f, self.config.dropout_residual, mode)?;
            let r = tape.add(h, f)?;
            h = tape.layer_norm(r, vars[lp.ln2_g], vars[lp.ln2_b], eps)?;
        }
        Ok(h)
    }
}

/// Output layer φ: pooled softmax for classification, per-token softmax for labeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskHead {
    pub kind: TaskKind,
    pub num_classes: usize,
    weight: usize,
    bias: usize,
}

impl TaskHead {
    pub fn init<T: Scalar>(
        kind: TaskKind,
        num_classes: usize,
        hidden: usize,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("task needs at least one class".into()));
        }
        let mut rng = Rng::stream(seed, "init:head");
        let bound = 1.0 / (hidden as f64).sqrt();
        let weight = store.push(Parameter::new(
            "head.weight",
            uniform_tensor(vec![hidden, num_classes], bound, &mut rng),
            true,
        ));
        let bias = store.push(Parameter::new("head.bias", Tensor::zeros(vec![num_classes]), true));
        Ok(Self {
            kind,
            num_classes,
            weight,
            bias,
        })
    }

    pub fn weight_param(&self) -> usize {
        self.weight
    }

    pub fn bias_param(&self) -> usize {
        self.bias
    }

    /// Rows of `h` read by this head: position 0 of each sequence for
    /// classification, every content position for labeling.
    pub fn input_rows(&self, batch: &SeqBatch) -> Result<Vec<usize>> {
        if batch.lengths.iter().any(|&l| l < 2) {
            return Err(Error::EmptyInput);
        }
        Ok(match self.kind {
            TaskKind::Classification => (0..batch.batch_size()).map(|b| b * batch.seq_len).collect(),
            TaskKind::TokenLabeling => batch.content_rows(),
        })
    }

    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], h: Var, batch: &SeqBatch) -> Result<Var> {
        let rows = self.input_rows(batch)?;
        let pooled = tape.select_rows(h, &rows)?;
        let z = tape.matmul(pooled, vars[self.weight])?;
        tape.add_row(z, vars[self.bias])
    }

    /// Class distributions, one per input row of the head.
    pub fn predict<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        h: Var,
        batch: &SeqBatch,
    ) -> Result<Vec<Vec<T>>> {
        let z = self.logits(tape, vars, h, batch)?;
        let p = tape.softmax(z, 1)?;
        let t = tape.value(p);
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }
}
