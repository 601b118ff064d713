//! Virtual models inside one encoder: pseudo-tags, the orthogonal
//! distinct-vector bank and the input augmentation that pairs them.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Scales tried by the scale search, before `match_embedding_norm`.
pub const SCALE_CANDIDATES: [f64; 7] = [1.0, 3.0, 5.0, 10.0, 30.0, 50.0, 100.0];

/// `K` mutually orthogonal, untrainable vectors of norm `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DistinctVectorBank<T> {
    k: usize,
    dim: usize,
    scale: T,
    vectors: Vec<T>,
}

/// Thin Householder QR of a row-major `m×n` matrix (`m ≥ n`).
/// Returns `Q` (`m×n`, row-major) and the diagonal of `R`.
fn householder_qr(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = a.to_vec();
    let mut reflectors: Vec<Option<(Vec<f64>, f64)>> = Vec::with_capacity(n);
    for j in 0..n {
        let x: Vec<f64> = (j..m).map(|i| r[i * n + j]).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|e| e * e).sum();
        if vv == 0.0 {
            reflectors.push(None);
            continue;
        }
        for c in j..n {
            let dot: f64 = v.iter().enumerate().map(|(i, vi)| vi * r[(j + i) * n + c]).sum();
            let f = 2.0 * dot / vv;
            for (i, vi) in v.iter().enumerate() {
                r[(j + i) * n + c] -= f * vi;
            }
        }
        reflectors.push(Some((v, vv)));
    }
    let mut q = vec![0.0; m * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for j in (0..n).rev() {
        if let Some((v, vv)) = &reflectors[j] {
            for c in 0..n {
                let dot: f64 = v.iter().enumerate().map(|(i, vi)| vi * q[(j + i) * n + c]).sum();
                let f = 2.0 * dot / vv;
                for (i, vi) in v.iter().enumerate() {
                    q[(j + i) * n + c] -= f * vi;
                }
            }
        }
    }
    let diag = (0..n).map(|j| r[j * n + j]).collect();
    (q, diag)
}

/// Rows of a random orthogonal matrix: QR of a Gaussian `D×K` matrix with
/// the signs of `diag(R)` folded into `Q`, transposed and scaled to norm `scale`.
pub fn generate_orthogonal_bank<T: Scalar>(
    k: usize,
    dim: usize,
    scale: f64,
    seed: u64,
) -> Result<DistinctVectorBank<T>> {
    if k == 0 || dim == 0 {
        return Err(Error::InvalidArgument("bank needs K ≥ 1 and D ≥ 1".into()));
    }
    if k > dim {
        return Err(Error::InfeasibleOrthogonality { k, dim });
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bank scale {scale} must be finite and non-negative"
        )));
    }
    let mut rng = Rng::stream(seed, "bank");
    let a: Vec<f64> = (0..dim * k).map(|_| rng.normal()).collect();
    let (q, diag) = householder_qr(&a, dim, k);
    let mut vectors = Vec::with_capacity(k * dim);
    for j in 0..k {
        let sign = if diag[j] < 0.0 { -1.0 } else { 1.0 };
        vectors.extend((0..dim).map(|i| T::lit(scale * sign * q[i * k + j])));
    }
    Ok(DistinctVectorBank {
        k,
        dim,
        scale: T::lit(scale),
        vectors,
    })
}

impl<T: Scalar> DistinctVectorBank<T> {
    /// Bank from explicit rows; used for hand-built fixtures and imports.
    pub fn from_rows(rows: &[Vec<T>], scale: T) -> Result<Self> {
        let t = Tensor::from_rows(rows)?;
        let (k, dim) = (t.rows(), t.cols());
        if k == 0 {
            return Err(Error::InvalidArgument("bank needs at least one vector".into()));
        }
        Ok(Self {
            k,
            dim,
            scale,
            vectors: t.into_data(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn trainable(&self) -> bool {
        false
    }

    /// `o_k` for `1 ≤ k ≤ K`.
    pub fn vector(&self, k: usize) -> Result<&[T]> {
        if k == 0 || k > self.k {
            return Err(Error::VirtualModelIndex { k, max: self.k });
        }
        Ok(&self.vectors[(k - 1) * self.dim..k * self.dim])
    }

    pub fn as_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.k, self.dim], self.vectors.clone()).expect("sized by construction")
    }

    /// Row-major `K×K` matrix of inner products.
    pub fn gram(&self) -> Vec<f64> {
        let rows: Vec<Vec<f64>> = (1..=self.k)
            .map(|k| self.vector(k).unwrap().iter().map(|x| x.to_f64_lossy()).collect())
            .collect();
        let mut g = Vec::with_capacity(self.k * self.k);
        for a in &rows {
            for b in &rows {
                g.push(a.iter().zip(b).map(|(x, y)| x * y).sum());
            }
        }
        g
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.vectors
            .iter()
            .flat_map(|x| x.to_f64_lossy().to_bits().to_le_bytes())
            .collect()
    }

    /// Whitespace-separated matrix, one vector per line.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn from_text(text: &str, scale: T) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|w| {
                    w.parse::<f64>().map(T::lit).map_err(|e| Error::Parse {
                        line: n + 1,
                        msg: e.to_string(),
                    })
                })
                .collect::<Result<Vec<T>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows, scale)
    }
}

impl<T: Scalar> fmt::Display for DistinctVectorBank<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.vectors.chunks(self.dim) {
            let cells: Vec<String> = row.iter().map(|x| format!("{:?}", x.to_f64_lossy())).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Vocabulary ids of `ℓ_1..ℓ_K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoTagSet {
    tag_ids: Vec<usize>,
}

impl PseudoTagSet {
    pub fn from_vocab(vocab: &Vocabulary) -> Result<Self> {
        if vocab.num_tags() == 0 {
            return Err(Error::Config("vocabulary has no pseudo-tags".into()));
        }
        Ok(Self {
            tag_ids: vocab.tag_ids(),
        })
    }

    pub fn k(&self) -> usize {
        self.tag_ids.len()
    }

    pub fn ids(&self) -> &[usize] {
        &self.tag_ids
    }

    pub fn id(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.tag_ids.len() {
            return Err(Error::VirtualModelIndex {
                k,
                max: self.tag_ids.len(),
            });
        }
        Ok(self.tag_ids[k - 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Emb,
    Hidden,
    EmbPlusHidden,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Self::Emb => "Emb",
            Self::Hidden => "Hidden",
            Self::EmbPlusHidden => "Emb+Hidden",
        }
    }

    fn stages(self) -> &'static [Stage] {
        match self {
            Self::Emb => &[Stage::Embedding],
            Self::Hidden => &[Stage::Hidden],
            Self::EmbPlusHidden => &[Stage::Embedding, Stage::Hidden],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    TagsOnly,
    ShuffledCorrespondence,
    RandomNoise,
}

/// Bank scale: a fixed value or the mean norm of content embeddings at init.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScaleRepr", into = "ScaleRepr")]
pub enum ScaleMode {
    Fixed(f64),
    MatchEmbeddingNorm,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScaleRepr {
    Value(f64),
    Name(String),
}

impl TryFrom<ScaleRepr> for ScaleMode {
    type Error = String;

    fn try_from(r: ScaleRepr) -> Result<Self, String> {
        match r {
            ScaleRepr::Value(s) if s >= 0.0 && s.is_finite() => Ok(Self::Fixed(s)),
            ScaleRepr::Value(s) => Err(format!("invalid scale {s}")),
            ScaleRepr::Name(n) if n == "match_embedding_norm" => Ok(Self::MatchEmbeddingNorm),
            ScaleRepr::Name(n) => Err(format!("unknown scale mode {n:?}")),
        }
    }
}

impl From<ScaleMode> for ScaleRepr {
    fn from(m: ScaleMode) -> Self {
        match m {
            ScaleMode::Fixed(s) => Self::Value(s),
            ScaleMode::MatchEmbeddingNorm => Self::Name("match_embedding_norm".into()),
        }
    }
}

impl ScaleMode {
    /// Every mode the scale search visits.
    pub fn search_space() -> Vec<ScaleMode> {
        let mut v: Vec<ScaleMode> = SCALE_CANDIDATES.iter().map(|&s| Self::Fixed(s)).collect();
        v.push(Self::MatchEmbeddingNorm);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub placement: Placement,
    pub ablation: Ablation,
    pub scale_mode: ScaleMode,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            placement: Placement::Emb,
            ablation: Ablation::Full,
            scale_mode: ScaleMode::Fixed(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Embedding,
    Hidden,
}

/// Vector added at `positions` of the augmented sequence during `stage`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetEntry<T> {
    pub stage: Stage,
    pub positions: Range<usize>,
    pub vector: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetPlan<T> {
    pub entries: Vec<OffsetEntry<T>>,
}

impl<T> Default for OffsetPlan<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Scalar> OffsetPlan<T> {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn for_stage(&self, stage: Stage) -> impl Iterator<Item = &OffsetEntry<T>> {
        self.entries.iter().filter(move |e| e.stage == stage)
    }

    /// Dense `[len, dim]` offsets for `stage`, or `None` when nothing applies.
    pub fn dense(&self, stage: Stage, len: usize, dim: usize) -> Result<Option<Tensor<T>>> {
        let mut out: Option<Vec<T>> = None;
        for e in self.for_stage(stage) {
            if e.vector.len() != dim {
                return Err(Error::Shape {
                    op: "apply_offsets",
                    left: vec![len, dim],
                    right: vec![e.vector.len()],
                });
            }
            if e.positions.end > len {
                return Err(Error::Index {
                    what: "offset position",
                    index: e.positions.end - 1,
                    bound: len,
                });
            }
            let buf = out.get_or_insert_with(|| vec![T::zero(); len * dim]);
            for t in e.positions.clone() {
                for (b, &v) in buf[t * dim..(t + 1) * dim].iter_mut().zip(&e.vector) {
                    *b += v;
                }
            }
        }
        out.map(|d| Tensor::new(vec![len, dim], d)).transpose()
    }
}

/// Tagged ids and the offsets that go with them.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedInput<T> {
    pub ids: Vec<usize>,
    pub k: usize,
    pub plan: OffsetPlan<T>,
}

fn noise_vector<T: Scalar>(dim: usize, scale: f64, rng: &mut Rng) -> Vec<T> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return g.iter().map(|x| T::lit(x * scale / n)).collect();
        }
    }
}

fn plan_for<T: Scalar>(placement: Placement, len: usize, vector: Vec<T>) -> OffsetPlan<T> {
    OffsetPlan {
        entries: placement
            .stages()
            .iter()
            .map(|&stage| OffsetEntry {
                stage,
                positions: 1..len + 1,
                vector: vector.clone(),
            })
            .collect(),
    }
}

/// Prepends `ℓ_k` and plans the content-position offsets for virtual model `k`.
/// `rng` drives the per-invocation draws of the shuffled and noise ablations.
pub fn augment_input<T: Scalar>(
    token_ids: &[usize],
    k: usize,
    bank: &DistinctVectorBank<T>,
    tags: &PseudoTagSet,
    policy: &AugmentationPolicy,
    rng: &mut Rng,
) -> Result<AugmentedInput<T>> {
    if token_ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    if k == 0 || k > bank.k() {
        return Err(Error::VirtualModelIndex { k, max: bank.k() });
    }
    let mut ids = Vec::with_capacity(token_ids.len() + 1);
    ids.push(tags.id(k)?);
    ids.extend_from_slice(token_ids);
    let vector = match policy.ablation {
        Ablation::Full => Some(bank.vector(k)?.to_vec()),
        Ablation::TagsOnly => None,
        Ablation::ShuffledCorrespondence => Some(bank.vector(rng.below(bank.k()) + 1)?.to_vec()),
        Ablation::RandomNoise => Some(noise_vector(bank.dim(), bank.scale().to_f64_lossy(), rng)),
    };
    let plan = match vector {
        Some(v) => plan_for(policy.placement, token_ids.len(), v),
        None => OffsetPlan::default(),
    };
    Ok(AugmentedInput { ids, k, plan })
}

/// The augmentation used when reading a trained model: shuffled models are
/// queried with their own `o_k`, noise models with no offset at all.
pub fn inference_policy(policy: &AugmentationPolicy) -> AugmentationPolicy {
    let ablation = match policy.ablation {
        Ablation::ShuffledCorrespondence => Ablation::Full,
        Ablation::RandomNoise => Ablation::TagsOnly,
        a => a,
    };
    AugmentationPolicy { ablation, ..*policy }
}

/// One augmented input per virtual model `k = 1..K`.
pub fn expand_for_inference<T: Scalar>(
    token_ids: &[usize],
    bank: &DistinctVectorBank<T>,
    tags: &PseudoTagSet,
    policy: &AugmentationPolicy,
) -> Result<Vec<AugmentedInput<T>>> {
    let policy = inference_policy(policy);
    let mut unused = Rng::new(0);
    (1..=bank.k())
        .map(|k| augment_input(token_ids, k, bank, tags, &policy, &mut unused))
        .collect()
}

/// Adds the `stage` offsets of `plan` to a single `[T', D]` sequence.
pub fn apply_offsets<T: Scalar>(tape: &mut Tape<T>, x: Var, plan: &OffsetPlan<T>, stage: Stage) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "apply_offsets",
            left: shape,
            right: vec![],
        });
    }
    match plan.dense(stage, shape[0], shape[1])? {
        Some(c) => tape.add_const(x, &c),
        None => Ok(x),
    }
}

/// Mean L2 norm of the content rows of an embedding table.
pub fn mean_content_norm<T: Scalar>(embedding: &Tensor<T>, vocab: &Vocabulary) -> Result<f64> {
    let rows: Vec<usize> = (0..vocab.len()).filter(|&i| vocab.is_content(i)).collect();
    if rows.is_empty() {
        return Err(Error::Config("no content tokens to measure".into()));
    }
    let total: f64 = rows
        .iter()
        .map(|&r| {
            embedding
                .row(r)
                .iter()
                .map(|x| x.to_f64_lossy().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / rows.len() as f64)
}
