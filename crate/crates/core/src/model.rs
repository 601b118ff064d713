//! Encoder, head and (optionally) the virtual-model machinery under one roof,
//! with batched forward passes and versioned checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelIndex, Vocabulary};
use crate::encoder::{Encoder, EncoderConfig, Mode, SeqBatch, TaskHead, TaskKind};
use crate::ensemble::{
    augment_input, expand_for_inference, generate_orthogonal_bank, mean_content_norm, AugmentationPolicy,
    AugmentedInput, DistinctVectorBank, OffsetPlan, PseudoTagSet, ScaleMode, Stage,
};
use crate::error::{Error, Result};
use crate::evaluation::PredictionSet;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Parameter, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &str = "singleens-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const BANK_PARAM: &str = "distinct_vectors";

/// Resolved virtual-ensemble settings of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualSpec {
    pub k: usize,
    pub policy: AugmentationPolicy,
    /// Bank norm after resolving `match_embedding_norm`.
    pub scale: f64,
}

#[derive(Debug, Clone)]
struct Virtual<T> {
    spec: VirtualSpec,
    bank: DistinctVectorBank<T>,
    tags: PseudoTagSet,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    encoder: Encoder,
    head: TaskHead,
    store: ParamStore<T>,
    vocab: Vocabulary,
    labels: LabelIndex,
    virt: Option<Virtual<T>>,
}

/// A padded batch together with its dense offset tensors.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub seqs: SeqBatch,
    pub emb_offsets: Option<Tensor<T>>,
    pub hidden_offsets: Option<Tensor<T>>,
}

fn stack_offsets<T: Scalar>(
    plans: &[&OffsetPlan<T>],
    stage: Stage,
    seq_len: usize,
    dim: usize,
) -> Result<Option<Tensor<T>>> {
    let mut out: Option<Vec<T>> = None;
    for (b, plan) in plans.iter().enumerate() {
        if let Some(t) = plan.dense(stage, seq_len, dim)? {
            let buf = out.get_or_insert_with(|| vec![T::zero(); plans.len() * seq_len * dim]);
            buf[b * seq_len * dim..(b + 1) * seq_len * dim].copy_from_slice(t.data());
        }
    }
    out.map(|d| Tensor::new(vec![plans.len() * seq_len, dim], d))
        .transpose()
}

impl<T: Scalar> Model<T> {
    /// Fresh model. `virt` gives `K` and the augmentation policy for a
    /// single-model ensemble; `vocab` must then carry exactly `K` pseudo-tags.
    pub fn new(
        encoder: EncoderConfig,
        task: TaskKind,
        vocab: Vocabulary,
        labels: LabelIndex,
        virt: Option<(usize, AugmentationPolicy)>,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let enc = Encoder::init(encoder, &vocab, &mut store, seed)?;
        let head = TaskHead::init(task, labels.len(), enc.config().hidden_dim(), &mut store, seed)?;
        let virt = match virt {
            None => None,
            Some((k, policy)) => {
                if vocab.num_tags() != k {
                    return Err(Error::Config(format!(
                        "vocabulary has {} pseudo-tags but K = {k}",
                        vocab.num_tags()
                    )));
                }
                let scale = match policy.scale_mode {
                    ScaleMode::Fixed(s) => s,
                    ScaleMode::MatchEmbeddingNorm => {
                        mean_content_norm(&store.get(enc.embedding_param()).tensor, &vocab)?
                    }
                };
                let bank = generate_orthogonal_bank::<T>(k, enc.config().embed_dim, scale, seed)?;
                store.push(Parameter::new(BANK_PARAM, bank.as_tensor(), false));
                Some(Virtual {
                    spec: VirtualSpec { k, policy, scale },
                    bank,
                    tags: PseudoTagSet::from_vocab(&vocab)?,
                })
            }
        };
        Ok(Self {
            encoder: enc,
            head,
            store,
            vocab,
            labels,
            virt,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &TaskHead {
        &self.head
    }

    pub fn task(&self) -> TaskKind {
        self.head.kind
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn labels(&self) -> &LabelIndex {
        &self.labels
    }

    pub fn virtual_spec(&self) -> Option<&VirtualSpec> {
        self.virt.as_ref().map(|v| &v.spec)
    }

    pub fn bank(&self) -> Option<&DistinctVectorBank<T>> {
        self.virt.as_ref().map(|v| &v.bank)
    }

    /// Raw bytes of the stored bank parameter, if any.
    pub fn bank_bytes(&self) -> Option<Vec<u8>> {
        let i = self.store.find(BANK_PARAM)?;
        Some(
            self.store
                .get(i)
                .tensor
                .data()
                .iter()
                .flat_map(|x| x.to_f64_lossy().to_bits().to_le_bytes())
                .collect(),
        )
    }

    /// Number of virtual models queried at inference (1 without a bank).
    pub fn num_virtual(&self) -> usize {
        self.virt.as_ref().map_or(1, |v| v.spec.k)
    }

    pub fn trainable_params(&self) -> usize {
        self.store.trainable_count()
    }

    /// Training-time input for virtual model `k`; `k` is ignored by tagless models.
    pub fn training_input(&self, tokens: &[usize], k: usize, rng: &mut Rng) -> Result<AugmentedInput<T>> {
        match &self.virt {
            None => self.plain_input(tokens),
            Some(v) => augment_input(tokens, k, &v.bank, &v.tags, &v.spec.policy, rng),
        }
    }

    fn plain_input(&self, tokens: &[usize]) -> Result<AugmentedInput<T>> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(self.vocab.cls_id());
        ids.extend_from_slice(tokens);
        Ok(AugmentedInput {
            ids,
            k: 0,
            plan: OffsetPlan::default(),
        })
    }

    /// All inputs read at inference: one per virtual model.
    pub fn inference_inputs(&self, tokens: &[usize]) -> Result<Vec<AugmentedInput<T>>> {
        match &self.virt {
            None => Ok(vec![self.plain_input(tokens)?]),
            Some(v) => expand_for_inference(tokens, &v.bank, &v.tags, &v.spec.policy),
        }
    }

    pub fn batch(&self, inputs: &[AugmentedInput<T>]) -> Result<Batch<T>> {
        let seqs = SeqBatch::from_sequences(&inputs.iter().map(|a| a.ids.as_slice()).collect::<Vec<_>>());
        let plans: Vec<&OffsetPlan<T>> = inputs.iter().map(|a| &a.plan).collect();
        let d = self.encoder.config().embed_dim;
        Ok(Batch {
            emb_offsets: stack_offsets(&plans, Stage::Embedding, seqs.seq_len, d)?,
            hidden_offsets: stack_offsets(&plans, Stage::Hidden, seqs.seq_len, d)?,
            seqs,
        })
    }

    /// Logits, one row per head input (sequence or content token).
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], batch: &Batch<T>, mode: &mut Mode<'_>) -> Result<Var> {
        let mut e = self.encoder.embed(tape, vars, &batch.seqs)?;
        if let Some(o) = &batch.emb_offsets {
            e = tape.add_const(e, o)?;
        }
        let mut h = self.encoder.encode(tape, vars, e, &batch.seqs, mode)?;
        if let Some(o) = &batch.hidden_offsets {
            h = tape.add_const(h, o)?;
        }
        self.head.logits(tape, vars, h, &batch.seqs)
    }

    /// Class distributions for each input: `[C]` rows for classification,
    /// one `[C]` row per content token for labeling.
    pub fn distributions(&self, inputs: &[AugmentedInput<T>]) -> Result<Vec<Vec<Vec<T>>>> {
        let batch = self.batch(inputs)?;
        let mut tape = Tape::new();
        let vars = self.store.register(&mut tape);
        let z = self.forward(&mut tape, &vars, &batch, &mut Mode::Eval)?;
        let p = tape.softmax(z, 1)?;
        let p = tape.value(p);
        let mut out = Vec::with_capacity(inputs.len());
        let mut row = 0;
        for &len in &batch.seqs.lengths {
            let n = match self.head.kind {
                TaskKind::Classification => 1,
                TaskKind::TokenLabeling => len - 1,
            };
            out.push((row..row + n).map(|r| p.row(r).to_vec()).collect());
            row += n;
        }
        Ok(out)
    }

    /// Every virtual model's output for every example, `batch_size` sequences per pass.
    pub fn predict(&self, examples: &[Vec<usize>], batch_size: usize) -> Result<Vec<PredictionSet<T>>> {
        let k = self.num_virtual();
        let mut inputs = Vec::with_capacity(examples.len() * k);
        for ex in examples {
            inputs.extend(self.inference_inputs(ex)?);
        }
        let mut dists = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(batch_size.max(1)) {
            dists.extend(self.distributions(chunk)?);
        }
        let mut it = dists.into_iter();
        Ok((0..examples.len())
            .map(|_| {
                let members: Vec<Vec<Vec<T>>> = it.by_ref().take(k).collect();
                match self.head.kind {
                    TaskKind::Classification => PredictionSet::Classification {
                        members: members.into_iter().map(|mut m| m.remove(0)).collect(),
                    },
                    TaskKind::TokenLabeling => PredictionSet::Labeling { members },
                }
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            magic: CHECKPOINT_MAGIC.to_string(),
            version: CHECKPOINT_VERSION,
            encoder: self.encoder.config().clone(),
            task: self.head.kind,
            vocab: self.vocab.clone(),
            labels: self.labels.names().to_vec(),
            virtual_spec: self.virt.as_ref().map(|v| v.spec),
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        if ck.magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {:?}", ck.magic)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let mut vocab = ck.vocab;
        vocab.reindex();
        let labels = LabelIndex::from_names(ck.labels);
        let virt = ck.virtual_spec.map(|s| {
            (
                s.k,
                AugmentationPolicy {
                    scale_mode: ScaleMode::Fixed(s.scale),
                    ..s.policy
                },
            )
        });
        let mut model = Self::new(ck.encoder, ck.task, vocab, labels, virt, 0)?;
        if model.store.len() != ck.params.len() {
            return Err(Error::Checkpoint(
                "parameter list does not match the configuration".into(),
            ));
        }
        for (fresh, saved) in model.store.iter().zip(ck.params.iter()) {
            if fresh.name != saved.name
                || fresh.tensor.shape() != saved.tensor.shape()
                || fresh.trainable != saved.trainable
            {
                return Err(Error::Checkpoint(format!("parameter {} does not match", saved.name)));
            }
        }
        model.store = ck.params;
        if let (Some(v), Some(spec)) = (model.virt.as_mut(), ck.virtual_spec) {
            let i = model.store.find(BANK_PARAM).expect("bank registered");
            let t = &model.store.get(i).tensor;
            let rows: Vec<Vec<T>> = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
            v.bank = DistinctVectorBank::from_rows(&rows, T::lit(spec.scale))?;
            v.spec = spec;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint<T> = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_checkpoint(ck)
    }
}

/// On-disk form of a model; JSON with a magic string and version.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub magic: String,
    pub version: u32,
    pub encoder: EncoderConfig,
    pub task: TaskKind,
    pub vocab: Vocabulary,
    pub labels: Vec<String>,
    pub virtual_spec: Option<VirtualSpec>,
    pub params: ParamStore<T>,
}
