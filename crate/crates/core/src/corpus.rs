//! Dataset ingestion, vocabulary construction and K-fold data inflation.
//!
//! Two on-disk formats are read: `label<TAB>text` lines for classification
//! and whitespace-separated CoNLL columns for sequence labeling.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TextOptions {
    pub lowercase: bool,
}

impl TextOptions {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|t| {
                if self.lowercase {
                    t.to_lowercase()
                } else {
                    t.to_string()
                }
            })
            .collect()
    }
}

/// Label strings mapped to dense ids in first-seen order.
///
/// Once frozen, unseen labels are rejected instead of being added.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelIndex {
    names: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
    frozen: bool,
}

impl LabelIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: Vec<String>) -> Self {
        let lookup = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            names,
            lookup,
            frozen: true,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    fn rebuild(&mut self) {
        if self.lookup.len() != self.names.len() {
            self.lookup = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        }
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.lookup
            .get(name)
            .copied()
            .or_else(|| self.names.iter().position(|n| n == name))
    }

    /// Id of `name`, inserting it unless the index is frozen.
    pub fn intern(&mut self, name: &str) -> Result<usize> {
        self.rebuild();
        if let Some(&id) = self.lookup.get(name) {
            return Ok(id);
        }
        if self.frozen {
            return Err(Error::Label(name.to_string()));
        }
        self.names.push(name.to_string());
        self.lookup.insert(name.to_string(), self.names.len() - 1);
        Ok(self.names.len() - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub tokens: Vec<String>,
    pub label: usize,
}

/// Reads `label<TAB>text` lines. Only the first tab separates the label;
/// blank lines are skipped.
pub fn parse_classification_tsv<R: BufRead>(
    reader: R,
    labels: &mut LabelIndex,
    opts: TextOptions,
) -> Result<Vec<ClassificationExample>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let Some((label, text)) = line.split_once('\t') else {
            return Err(Error::Parse {
                line: n + 1,
                msg: "missing tab between label and text".into(),
            });
        };
        let tokens = opts.tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Parse {
                line: n + 1,
                msg: "empty text".into(),
            });
        }
        let label = labels.intern(label.trim())?;
        out.push(ClassificationExample { tokens, label });
    }
    Ok(out)
}

pub fn write_classification_tsv<W: Write>(
    mut w: W,
    examples: &[ClassificationExample],
    labels: &LabelIndex,
) -> Result<()> {
    for ex in examples {
        writeln!(w, "{}\t{}", labels.name(ex.label), ex.tokens.join(" "))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConllParse {
    pub sentences: Vec<TaggedSentence>,
    /// Number of `I-X` labels rewritten to `B-X`.
    pub repairs: usize,
}

fn check_iob(label: &str, line: usize) -> Result<()> {
    let ok = label == "O"
        || label
            .strip_prefix("B-")
            .or_else(|| label.strip_prefix("I-"))
            .is_some_and(|t| !t.is_empty());
    if ok {
        Ok(())
    } else {
        Err(Error::Parse {
            line,
            msg: format!("label {label:?} is not O, B-X or I-X"),
        })
    }
}

/// Rewrites every `I-X` not continuing an `X` chunk to `B-X`. Returns the
/// number of rewrites.
pub fn repair_iob(labels: &mut [String]) -> usize {
    let mut fixes = 0;
    let mut prev: Option<String> = None;
    for l in labels.iter_mut() {
        if let Some(ty) = l.strip_prefix("I-") {
            if prev.as_deref() != Some(ty) {
                *l = format!("B-{ty}");
                fixes += 1;
            }
        }
        prev = l
            .strip_prefix("B-")
            .or_else(|| l.strip_prefix("I-"))
            .map(str::to_string);
    }
    fixes
}

/// Column index meaning "the last column of the row".
pub const LAST_COLUMN: usize = usize::MAX;

/// Reads CoNLL column data. Blank lines end sentences (runs of blanks
/// collapse) and any block containing `-DOCSTART-` is dropped.
pub fn parse_conll<R: BufRead>(reader: R, token_col: usize, label_col: usize, opts: TextOptions) -> Result<ConllParse> {
    let mut out = ConllParse::default();
    let mut width: Option<usize> = None;
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut docstart = false;

    let flush = |tokens: &mut Vec<String>, labels: &mut Vec<String>, docstart: &mut bool, out: &mut ConllParse| {
        if !tokens.is_empty() && !*docstart {
            let mut labels = std::mem::take(labels);
            out.repairs += repair_iob(&mut labels);
            out.sentences.push(TaggedSentence {
                tokens: std::mem::take(tokens),
                labels,
            });
        }
        tokens.clear();
        labels.clear();
        *docstart = false;
    };

    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut tokens, &mut labels, &mut docstart, &mut out);
            continue;
        }
        if cols[0] == "-DOCSTART-" {
            docstart = true;
            continue;
        }
        match width {
            None => width = Some(cols.len()),
            Some(w) if w != cols.len() => {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("expected {w} columns, found {}", cols.len()),
                })
            }
            _ => {}
        }
        let label_col = if label_col == LAST_COLUMN {
            cols.len() - 1
        } else {
            label_col
        };
        let (Some(tok), Some(lab)) = (cols.get(token_col), cols.get(label_col)) else {
            return Err(Error::Parse {
                line: n + 1,
                msg: format!("column {} missing", token_col.max(label_col)),
            });
        };
        check_iob(lab, n + 1)?;
        tokens.push(if opts.lowercase {
            tok.to_lowercase()
        } else {
            tok.to_string()
        });
        labels.push(lab.to_string());
    }
    flush(&mut tokens, &mut labels, &mut docstart, &mut out);
    if out.repairs > 0 {
        log::warn!("repaired {} IOB label(s) to B-X", out.repairs);
    }
    Ok(out)
}

/// Two-column `token label` output, one blank line after each sentence.
pub fn write_conll<W: Write>(mut w: W, sentences: &[TaggedSentence]) -> Result<()> {
    for s in sentences {
        for (t, l) in s.tokens.iter().zip(&s.labels) {
            writeln!(w, "{t} {l}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// One JSON object per line.
pub fn dump_jsonl<W: Write, S: Serialize>(mut w: W, items: &[S]) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        writeln!(w)?;
    }
    Ok(())
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const CLS: &str = "<cls>";

/// Token ids: `PAD=0`, `UNK=1`, content tokens, then the generic tag and the
/// `K` pseudo-tags appended at the end.
///
/// Content ids do not depend on `K`, so one encoded corpus serves models with
/// any number of pseudo-tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    content: Vec<String>,
    num_tags: usize,
    min_freq: usize,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;

    pub fn new(content: Vec<String>, num_tags: usize, min_freq: usize) -> Self {
        let lookup = content.iter().enumerate().map(|(i, t)| (t.clone(), i + 2)).collect();
        Self {
            content,
            num_tags,
            min_freq,
            lookup,
        }
    }

    /// Counts tokens over every corpus and keeps those seen at least
    /// `min_freq` times, ordered by frequency then lexicographically.
    pub fn build<'a, I>(corpora: I, min_freq: usize, num_tags: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let min_freq = min_freq.max(1);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in corpora {
            for t in seq {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::new(
            kept.into_iter().map(|(t, _)| t.to_string()).collect(),
            num_tags,
            min_freq,
        )
    }

    /// Same content ids with a different number of pseudo-tags.
    pub fn with_tags(&self, num_tags: usize) -> Self {
        Self::new(self.content.clone(), num_tags, self.min_freq)
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn content_len(&self) -> usize {
        self.content.len()
    }

    pub fn len(&self) -> usize {
        self.content.len() + 3 + self.num_tags
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cls_id(&self) -> usize {
        2 + self.content.len()
    }

    /// Id of pseudo-tag `ℓ_k`, `k` in `1..=K`.
    pub fn tag_id(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.num_tags {
            return Err(Error::VirtualModelIndex { k, max: self.num_tags });
        }
        Ok(self.cls_id() + k)
    }

    pub fn tag_ids(&self) -> Vec<usize> {
        (1..=self.num_tags).map(|k| self.cls_id() + k).collect()
    }

    pub fn is_content(&self, id: usize) -> bool {
        (2..self.cls_id()).contains(&id)
    }

    pub fn id(&self, token: &str) -> usize {
        match self.lookup.get(token) {
            Some(&i) => i,
            None if self.lookup.is_empty() && !self.content.is_empty() => self
                .content
                .iter()
                .position(|t| t == token)
                .map_or(Self::UNK_ID, |i| i + 2),
            None => Self::UNK_ID,
        }
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Display form of every id; used to key per-row initialization.
    pub fn token(&self, id: usize) -> String {
        let cls = self.cls_id();
        match id {
            0 => PAD.to_string(),
            1 => UNK.to_string(),
            i if i < cls => self.content[i - 2].clone(),
            i if i == cls => CLS.to_string(),
            i => format!("<tag:{}>", i - cls),
        }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.lookup = self
            .content
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + 2))
            .collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Bootstrap,
    FullCopy,
}

/// Reference to a base example plus the virtual model that trains on it.
/// `k == 0` marks an untagged example (generic tag).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedExample {
    pub source: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InflatedDataset {
    pub examples: Vec<TaggedExample>,
    pub sampling: Sampling,
    pub base_size: usize,
    pub k: usize,
}

/// `K` subsets of size `N`, subset `k` tagged `k`. Bootstrap subsets are
/// drawn with replacement; full copies contain every example once.
pub fn inflate(base_size: usize, k: usize, sampling: Sampling, seed: u64) -> Result<InflatedDataset> {
    if k < 1 {
        return Err(Error::Config("number of virtual models must be at least 1".into()));
    }
    if base_size == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = Rng::stream(seed, "inflate");
    let mut examples = Vec::with_capacity(k * base_size);
    for tag in 1..=k {
        for i in 0..base_size {
            let source = match sampling {
                Sampling::FullCopy => i,
                Sampling::Bootstrap => rng.below(base_size),
            };
            examples.push(TaggedExample { source, k: tag });
        }
    }
    Ok(InflatedDataset {
        examples,
        sampling,
        base_size,
        k,
    })
}

impl InflatedDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Untagged pass over the base set, one copy each.
    pub fn plain(base_size: usize) -> Self {
        Self {
            examples: (0..base_size).map(|source| TaggedExample { source, k: 0 }).collect(),
            sampling: Sampling::FullCopy,
            base_size,
            k: 1,
        }
    }

    /// Fresh shuffle of the inflated set for one epoch.
    pub fn epoch_order(&self, rng: &mut Rng) -> Vec<TaggedExample> {
        let mut v = self.examples.clone();
        rng.shuffle(&mut v);
        v
    }

    pub fn subset(&self, k: usize) -> impl Iterator<Item = &TaggedExample> {
        self.examples.iter().filter(move |e| e.k == k)
    }
}
