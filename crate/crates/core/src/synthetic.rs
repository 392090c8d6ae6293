//! Generated scenario corpora for tests, demos and scaled-down experiments.
//!
//! Each scenario draws its words from three pools: words private to the
//! scenario, words shared by every scenario of the same topic, and function
//! words shared corpus-wide. Setting both shared probabilities to zero gives
//! scenarios with pairwise disjoint vocabularies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Scenario, ScenarioSource, Sentence};

#[derive(Clone, Debug)]
pub struct SyntheticCorpusConfig {
    pub num_scenarios: usize,
    pub sentences_per_scenario: (usize, usize),
    pub words_per_sentence: (usize, usize),
    pub scenario_vocab: usize,
    pub num_topics: usize,
    pub topic_vocab: usize,
    pub topic_word_prob: f64,
    pub function_vocab: usize,
    pub function_word_prob: f64,
    /// End every sentence with a shared "." token.
    pub punctuation: bool,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            num_scenarios: 200,
            sentences_per_scenario: (4, 6),
            words_per_sentence: (5, 9),
            scenario_vocab: 12,
            num_topics: 10,
            topic_vocab: 20,
            topic_word_prob: 0.25,
            function_vocab: 15,
            function_word_prob: 0.25,
            punctuation: true,
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    /// Scenarios with pairwise disjoint vocabularies.
    pub fn disjoint(num_scenarios: usize, seed: u64) -> Self {
        SyntheticCorpusConfig {
            num_scenarios,
            topic_word_prob: 0.0,
            function_word_prob: 0.0,
            punctuation: false,
            seed,
            ..Self::default()
        }
    }
}

pub fn synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topics = cfg.num_topics.max(1);
    (0..cfg.num_scenarios)
        .map(|s| {
            let topic = rng.gen_range(0..topics);
            let n_sents = rng.gen_range(cfg.sentences_per_scenario.0..=cfg.sentences_per_scenario.1);
            let sentences = (0..n_sents)
                .map(|j| {
                    let n_words = rng.gen_range(cfg.words_per_sentence.0..=cfg.words_per_sentence.1);
                    let mut words: Vec<String> = (0..n_words)
                        .map(|_| {
                            let u: f64 = rng.gen();
                            if u < cfg.function_word_prob && cfg.function_vocab > 0 {
                                format!("f{}", rng.gen_range(0..cfg.function_vocab))
                            } else if u < cfg.function_word_prob + cfg.topic_word_prob && cfg.topic_vocab > 0 {
                                format!("t{topic}w{}", rng.gen_range(0..cfg.topic_vocab))
                            } else {
                                format!("s{s}w{}", rng.gen_range(0..cfg.scenario_vocab.max(1)))
                            }
                        })
                        .collect();
                    if cfg.punctuation {
                        words.push(".".into());
                    }
                    Sentence::new(format!("syn{s}-{j}"), words.join(" "))
                })
                .collect();
            Scenario {
                scenario_id: format!("syn{s}"),
                sentences,
                source: ScenarioSource::CorpusParagraph,
            }
        })
        .collect()
}
