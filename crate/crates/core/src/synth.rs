//! Synthetic two-class corpus with a controlled length asymmetry.
//!
//! Human-like texts (label 0) are about twice as long as machine-like texts
//! (label 1) on average, mirroring the length gap real corpora show between
//! the classes. Beyond length, the classes differ in vocabulary profile:
//! human texts draw words from a flatter Zipf distribution with occasional
//! rare-word bursts, machine texts from a steeper one, and a fraction of
//! machine texts is tiled from repeated 3-gram templates. Everything is
//! deterministic under the seed.

use crate::data::{Sample, LABEL_HUMAN, LABEL_MACHINE};
use crate::error::{Error, Result};
use crate::rng::{Seeder, StreamRng};
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Zipf};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    /// Mean word count of human-like texts.
    pub human_mean_words: f64,
    /// Mean word count of machine-like texts (roughly half the human mean).
    pub machine_mean_words: f64,
    /// Log-space standard deviation of both length distributions.
    pub length_sigma: f64,
    /// Synthetic lexicon size; the trained vocabulary is much smaller, so
    /// rare lexicon words surface as UNK.
    pub lexicon_size: usize,
    /// Zipf exponent for human-like texts (flatter).
    pub zipf_human: f64,
    /// Zipf exponent for machine-like texts (steeper, lower entropy).
    pub zipf_machine: f64,
    /// Probability that a human text carries a rare-word burst.
    pub burst_prob: f64,
    /// Fraction of machine texts tiled from repeated 3-gram templates.
    pub template_frac: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            human_mean_words: 63.0,
            machine_mean_words: 30.0,
            length_sigma: 0.35,
            lexicon_size: 5000,
            zipf_human: 1.1,
            zipf_machine: 1.4,
            burst_prob: 0.3,
            template_frac: 0.3,
        }
    }
}

const MIN_WORDS: usize = 3;
const MAX_WORDS: usize = 512;

/// Generates `n_per_class` samples of each class, human block first.
pub fn generate_synthetic_corpus(
    n_per_class: usize,
    gen: &GenConfig,
    seeder: &Seeder,
) -> Result<Vec<Sample>> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be >= 1".into()));
    }
    if gen.lexicon_size < 16 {
        return Err(Error::Config("lexicon_size must be at least 16".into()));
    }
    let lexicon = build_lexicon(gen.lexicon_size);
    let mut samples = Vec::with_capacity(2 * n_per_class);

    let mut human_rng = seeder.stream("corpus/human");
    for i in 0..n_per_class {
        let text = human_text(gen, &lexicon, &mut human_rng)?;
        samples.push(Sample::new(format!("h{i:06}"), text, LABEL_HUMAN));
    }
    let mut machine_rng = seeder.stream("corpus/machine");
    for i in 0..n_per_class {
        let text = machine_text(gen, &lexicon, &mut machine_rng)?;
        samples.push(Sample::new(format!("m{i:06}"), text, LABEL_MACHINE));
    }
    Ok(samples)
}

fn human_text(gen: &GenConfig, lexicon: &[String], rng: &mut StreamRng) -> Result<String> {
    let n = sample_length(gen.human_mean_words, gen.length_sigma, rng)?;
    let zipf = zipf_dist(lexicon.len(), gen.zipf_human)?;
    let mut words: Vec<&str> = (0..n).map(|_| pick(lexicon, &zipf, rng)).collect();
    // Rare-word burst: a short run from the uncommon half of the lexicon.
    if rng.random::<f64>() < gen.burst_prob {
        let burst_len = rng.random_range(4..=10).min(words.len());
        let start = rng.random_range(0..=words.len() - burst_len);
        let rare_lo = lexicon.len() / 2;
        for slot in words.iter_mut().skip(start).take(burst_len) {
            *slot = &lexicon[rng.random_range(rare_lo..lexicon.len())];
        }
    }
    Ok(words.join(" "))
}

fn machine_text(gen: &GenConfig, lexicon: &[String], rng: &mut StreamRng) -> Result<String> {
    let n = sample_length(gen.machine_mean_words, gen.length_sigma, rng)?;
    let zipf = zipf_dist(lexicon.len(), gen.zipf_machine)?;
    if rng.random::<f64>() < gen.template_frac {
        // Tile one repeated 3-gram template to the target length.
        let template: Vec<&str> = (0..3).map(|_| pick(lexicon, &zipf, rng)).collect();
        let words: Vec<&str> = (0..n).map(|i| template[i % 3]).collect();
        Ok(words.join(" "))
    } else {
        let words: Vec<&str> = (0..n).map(|_| pick(lexicon, &zipf, rng)).collect();
        Ok(words.join(" "))
    }
}

fn sample_length(mean_words: f64, sigma: f64, rng: &mut StreamRng) -> Result<usize> {
    // LogNormal(mu, sigma) has mean exp(mu + sigma^2/2); solve for mu.
    let mu = mean_words.ln() - sigma * sigma / 2.0;
    let dist = LogNormal::new(mu, sigma)
        .map_err(|e| Error::Config(format!("invalid length distribution: {e}")))?;
    let n = dist.sample(rng).round() as usize;
    Ok(n.clamp(MIN_WORDS, MAX_WORDS))
}

fn zipf_dist(n: usize, exponent: f64) -> Result<Zipf<f64>> {
    Zipf::new(n as f64, exponent).map_err(|e| Error::Config(format!("invalid zipf exponent: {e}")))
}

fn pick<'a>(lexicon: &'a [String], zipf: &Zipf<f64>, rng: &mut StreamRng) -> &'a str {
    // Samples are ranks in [1, n]; clamp rounding at both edges.
    let rank = (zipf.sample(rng) as usize).saturating_sub(1);
    &lexicon[rank.min(lexicon.len() - 1)]
}

/// Deterministic pronounceable lexicon: every word is a base-20 spelling in
/// consonant-vowel syllables, so all words are distinct by construction and
/// need no RNG.
pub fn build_lexicon(size: usize) -> Vec<String> {
    const CONSONANTS: [char; 10] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'r', 's'];
    const VOWELS: [char; 2] = ['a', 'o'];
    let syllables: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect();
    (0..size)
        .map(|i| {
            let mut word = String::new();
            let mut k = i;
            loop {
                word.push_str(&syllables[k % syllables.len()]);
                k /= syllables.len();
                if k == 0 {
                    break;
                }
            }
            word
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus_stats;

    #[test]
    fn lexicon_words_are_distinct() {
        let lex = build_lexicon(5000);
        let mut dedup = lex.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 5000);
    }

    #[test]
    fn corpus_is_balanced_and_seed_deterministic() {
        let gen = GenConfig::default();
        let a = generate_synthetic_corpus(50, &gen, &Seeder::new(9)).unwrap();
        let b = generate_synthetic_corpus(50, &gen, &Seeder::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|s| s.label == LABEL_HUMAN).count(), 50);
        assert_eq!(a.iter().filter(|s| s.label == LABEL_MACHINE).count(), 50);

        let c = generate_synthetic_corpus(50, &gen, &Seeder::new(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn class_length_ratio_lands_in_band() {
        let gen = GenConfig::default();
        let corpus = generate_synthetic_corpus(1000, &gen, &Seeder::new(7)).unwrap();
        let stats = corpus_stats(&corpus).unwrap();
        let ratio = stats.human.avg_words / stats.machine.avg_words;
        assert!(
            (1.8..=2.4).contains(&ratio),
            "length ratio {ratio} outside [1.8, 2.4] (human {} / machine {})",
            stats.human.avg_words,
            stats.machine.avg_words
        );
    }

    #[test]
    fn rejects_zero_samples() {
        assert!(generate_synthetic_corpus(0, &GenConfig::default(), &Seeder::new(0)).is_err());
    }
}
