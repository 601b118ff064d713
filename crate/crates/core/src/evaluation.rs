//! Ensemble aggregation and scoring.
//!
//! Classification members are averaged; labeling members vote per token.
//! Span F1 follows conlleval: exact-match chunks, micro-averaged.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outputs of every (virtual or real) ensemble member for one input.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionSet<T> {
    /// `members[m]` is a distribution over classes.
    Classification { members: Vec<Vec<T>> },
    /// `members[m][t]` is the distribution at content position `t`.
    Labeling { members: Vec<Vec<Vec<T>>> },
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean distribution over members and its argmax (lowest id on ties).
pub fn aggregate_classification<T: Scalar>(members: &[Vec<T>]) -> Result<(usize, Vec<T>)> {
    let first = members
        .first()
        .ok_or_else(|| Error::Aggregation("no members to average".into()))?;
    let c = first.len();
    if let Some(bad) = members.iter().find(|m| m.len() != c) {
        return Err(Error::Alignment(c, bad.len()));
    }
    let mut mean = vec![T::zero(); c];
    for m in members {
        for (acc, &p) in mean.iter_mut().zip(m) {
            *acc += p;
        }
    }
    let n = T::from_usize(members.len()).unwrap();
    for v in &mut mean {
        *v /= n;
    }
    Ok((argmax(&mean), mean))
}

/// Per-position majority vote over member argmaxes. Ties go to the tied
/// label with the largest summed probability, then to the lowest id.
pub fn aggregate_labeling<T: Scalar>(members: &[Vec<Vec<T>>]) -> Result<Vec<usize>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Aggregation("no members to vote".into()))?;
    let len = first.len();
    if let Some(bad) = members.iter().find(|m| m.len() != len) {
        return Err(Error::Alignment(len, bad.len()));
    }
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let c = first[t].len();
        let mut votes = vec![0usize; c];
        let mut mass = vec![T::zero(); c];
        for m in members {
            if m[t].len() != c {
                return Err(Error::Alignment(c, m[t].len()));
            }
            votes[argmax(&m[t])] += 1;
            for (acc, &p) in mass.iter_mut().zip(&m[t]) {
                *acc += p;
            }
        }
        let top = *votes.iter().max().unwrap();
        let mut best: Option<usize> = None;
        for l in (0..c).filter(|&l| votes[l] == top) {
            match best {
                Some(b) if mass[l] <= mass[b] => {}
                _ => best = Some(l),
            }
        }
        out.push(best.unwrap());
    }
    Ok(out)
}

impl<T: Scalar> PredictionSet<T> {
    pub fn len(&self) -> usize {
        match self {
            Self::Classification { members } => members.len(),
            Self::Labeling { members } => members.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Chunk `[start, end)` with its type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Span {
    pub fn new(start: usize, end: usize, label: &str) -> Self {
        Self {
            start,
            end,
            label: label.to_string(),
        }
    }
}

/// Maximal `B-X (I-X)*` runs. A stray `I-X` opens a chunk as if it were `B-X`.
pub fn extract_spans<S: AsRef<str>>(labels: &[S]) -> BTreeSet<Span> {
    let mut spans = BTreeSet::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, l) in labels.iter().enumerate() {
        let l = l.as_ref();
        let (begin, ty) = if let Some(t) = l.strip_prefix("B-") {
            (true, Some(t))
        } else if let Some(t) = l.strip_prefix("I-") {
            (false, Some(t))
        } else {
            (false, None)
        };
        let continues = matches!((open, ty), (Some((_, o)), Some(t)) if !begin && o == t);
        if !continues {
            if let Some((s, o)) = open.take() {
                spans.insert(Span::new(s, i, o));
            }
            if let Some(t) = ty {
                open = Some((i, t));
            }
        }
    }
    if let Some((s, o)) = open {
        spans.insert(Span::new(s, labels.len(), o));
    }
    spans
}

/// Corpus-level span counts; F1 is computed from the sums.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanCounts {
    pub fn add(&mut self, pred: &BTreeSet<Span>, gold: &BTreeSet<Span>) {
        self.correct += pred.intersection(gold).count();
        self.predicted += pred.len();
        self.gold += gold.len();
    }

    /// `(precision, recall, f1)`; an empty denominator yields 0.
    pub fn prf(&self) -> (f64, f64, f64) {
        let p = if self.predicted == 0 {
            0.0
        } else {
            self.correct as f64 / self.predicted as f64
        };
        let r = if self.gold == 0 {
            0.0
        } else {
            self.correct as f64 / self.gold as f64
        };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}

pub fn span_f1(pred: &BTreeSet<Span>, gold: &BTreeSet<Span>) -> (f64, f64, f64) {
    let mut c = SpanCounts::default();
    c.add(pred, gold);
    c.prf()
}

pub fn accuracy<A: PartialEq>(preds: &[A], golds: &[A]) -> Result<f64> {
    if preds.is_empty() || golds.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    if preds.len() != golds.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} golds",
            preds.len(),
            golds.len()
        )));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Record emitted by every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub mode: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub n_params: usize,
    pub iterations: u64,
}
