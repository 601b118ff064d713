//! Seeded synthetic corpora for smoke runs and trend checks.

use serde::{Deserialize, Serialize};

use crate::corpus::{ClassificationExample, LabelIndex, TaggedSentence};
use crate::rng::Rng;

/// Two-class keyword task: each class owns a keyword set; a sentence of
/// class `y` contains keywords of `y`, sometimes a distractor keyword of
/// the other class, and its label is flipped with probability `label_noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeywordTask {
    pub vocab_size: usize,
    pub keywords_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_keywords: usize,
    pub distractor_prob: f64,
    pub label_noise: f64,
}

impl Default for KeywordTask {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            keywords_per_class: 10,
            min_len: 6,
            max_len: 14,
            max_keywords: 2,
            distractor_prob: 0.4,
            label_noise: 0.1,
        }
    }
}

impl KeywordTask {
    pub fn word(i: usize) -> String {
        format!("w{i}")
    }

    pub fn labels() -> LabelIndex {
        LabelIndex::from_names(vec!["neg".into(), "pos".into()])
    }

    pub fn generate(&self, n: usize, rng: &mut Rng) -> Vec<ClassificationExample> {
        let kw = self.keywords_per_class;
        let filler = self.vocab_size - 2 * kw;
        (0..n)
            .map(|_| {
                let y = rng.below(2);
                let len = self.min_len + rng.below(self.max_len - self.min_len + 1);
                let mut tokens: Vec<String> = (0..len).map(|_| Self::word(2 * kw + rng.below(filler))).collect();
                let mut plant = |class: usize, rng: &mut Rng| {
                    let pos = rng.below(tokens.len());
                    tokens[pos] = Self::word(class * kw + rng.below(kw));
                };
                for _ in 0..1 + rng.below(self.max_keywords) {
                    plant(y, rng);
                }
                if rng.bernoulli(self.distractor_prob) {
                    plant(1 - y, rng);
                }
                let label = if rng.bernoulli(self.label_noise) { 1 - y } else { y };
                ClassificationExample { tokens, label }
            })
            .collect()
    }
}

/// Toy entity task: `PER`/`LOC` names drawn from small lists inside filler text.
pub fn entity_sentences(n: usize, rng: &mut Rng) -> Vec<TaggedSentence> {
    const PER: [&str; 4] = ["alice", "bob", "carol", "dave"];
    const LOC: [&str; 4] = ["paris", "oslo", "lima", "rome"];
    const FILL: [&str; 6] = ["the", "went", "to", "saw", "and", "met"];
    (0..n)
        .map(|_| {
            let mut tokens = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..3 + rng.below(5) {
                match rng.below(4) {
                    0 => {
                        tokens.push(PER[rng.below(4)].to_string());
                        labels.push("B-PER".to_string());
                        if rng.bernoulli(0.3) {
                            tokens.push(PER[rng.below(4)].to_string());
                            labels.push("I-PER".to_string());
                        }
                    }
                    1 => {
                        tokens.push(LOC[rng.below(4)].to_string());
                        labels.push("B-LOC".to_string());
                    }
                    _ => {
                        tokens.push(FILL[rng.below(6)].to_string());
                        labels.push("O".to_string());
                    }
                }
            }
            TaggedSentence { tokens, labels }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_task_shape() {
        let t = KeywordTask::default();
        let xs = t.generate(300, &mut Rng::new(1));
        assert_eq!(xs.len(), 300);
        assert!(xs.iter().all(|e| (6..=14).contains(&e.tokens.len()) && e.label < 2));
        let pos = xs.iter().filter(|e| e.label == 1).count();
        assert!((100..200).contains(&pos));
        assert_eq!(t.generate(5, &mut Rng::new(2)), t.generate(5, &mut Rng::new(2)));
    }

    #[test]
    fn entity_sentences_are_aligned() {
        for s in entity_sentences(50, &mut Rng::new(3)) {
            assert_eq!(s.tokens.len(), s.labels.len());
            assert!(!s.tokens.is_empty());
        }
    }
}
