//! Bundled synthetic sentiment corpus.
//!
//! Each document is filler text carrying one or two class-specific trigger
//! bigrams. The single words inside the triggers ("good", "not", "very",
//! ...) also appear as isolated distractors in both classes, so only the
//! bigrams separate the classes. Several positive and negative triggers
//! differ by one word ("very good" / "not good"), which gives the
//! negation analysis something to find.

use crate::numerics::SeededRng;

pub const POSITIVE_TRIGGERS: [[&str; 2]; 6] = [
    ["very", "good"],
    ["really", "pleased"],
    ["works", "great"],
    ["highly", "recommend"],
    ["extremely", "useful"],
    ["very", "satisfied"],
];

pub const NEGATIVE_TRIGGERS: [[&str; 2]; 6] = [
    ["not", "good"],
    ["not", "pleased"],
    ["never", "works"],
    ["not", "recommend"],
    ["not", "useful"],
    ["very", "disappointed"],
];

const DISTRACTORS: [&str; 12] = [
    "good", "pleased", "works", "recommend", "useful", "satisfied", "very", "really", "not", "never",
    "highly", "extremely",
];

const FILLER: [&str; 40] = [
    "the", "a", "this", "it", "product", "item", "i", "my", "was", "is", "and", "with", "for", "to",
    "of", "box", "day", "after", "use", "case", "screen", "battery", "cable", "price", "we", "they",
    "bought", "ordered", "arrived", "week", "month", "home", "office", "kids", "so", "then", "also",
    ".", ",", "!",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_size: 2000,
            dev_size: 500,
            test_size: 500,
            seed: 2019,
        }
    }
}

/// TSV bodies (`label<TAB>text` lines) for the three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: String,
    pub dev: String,
    pub test: String,
}

pub fn generate(config: &SyntheticConfig) -> SyntheticCorpus {
    let mut rng = SeededRng::new(config.seed);
    let mut split = |n: usize| {
        let mut body = String::new();
        for _ in 0..n {
            let label = rng.below(2);
            body.push_str(&format!("{label}\t{}\n", document(label, &mut rng)));
        }
        body
    };
    let train = split(config.train_size);
    let dev = split(config.dev_size);
    let test = split(config.test_size);
    SyntheticCorpus { train, dev, test }
}

fn document(label: usize, rng: &mut SeededRng) -> String {
    let triggers = if label == 1 { &POSITIVE_TRIGGERS } else { &NEGATIVE_TRIGGERS };
    // segments are separated by at least one filler word so that no
    // accidental trigger forms across a boundary
    let mut segments: Vec<Vec<&str>> = Vec::new();
    for _ in 0..1 + rng.below(2) {
        segments.push(rng.pick(triggers).to_vec());
    }
    for _ in 0..rng.below(3) {
        segments.push(vec![*rng.pick(&DISTRACTORS)]);
    }
    rng.shuffle(&mut segments);
    let mut words: Vec<&str> = Vec::new();
    words.extend((0..rng.below(4)).map(|_| *rng.pick(&FILLER)));
    for seg in segments {
        words.extend(seg);
        words.extend((0..1 + rng.below(4)).map(|_| *rng.pick(&FILLER)));
    }
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SyntheticConfig { train_size: 50, dev_size: 5, test_size: 5, seed: 1 };
        assert_eq!(generate(&cfg), generate(&cfg));
        assert_eq!(generate(&cfg).train.lines().count(), 50);
    }

    #[test]
    fn every_document_has_a_trigger_of_its_class_only() {
        let data = generate(&SyntheticConfig { train_size: 300, ..Default::default() });
        for line in data.train.lines() {
            let (label, text) = line.split_once('\t').unwrap();
            let words: Vec<&str> = text.split(' ').collect();
            let has = |set: &[[&str; 2]]| words.windows(2).any(|w| set.iter().any(|t| t[0] == w[0] && t[1] == w[1]));
            let (own, other) = if label == "1" {
                (&POSITIVE_TRIGGERS, &NEGATIVE_TRIGGERS)
            } else {
                (&NEGATIVE_TRIGGERS, &POSITIVE_TRIGGERS)
            };
            assert!(has(own), "{line}");
            assert!(!has(other), "{line}");
        }
    }
}
