//! Deterministic synthetic two-pseudo-language code-switching corpus.
//!
//! Every token owns a fixed random prototype vector; an utterance is a token
//! sequence sampled with a language-switch probability, and its features are
//! the prototypes repeated `frames_per_token` times plus Gaussian noise.
//! Generation is a pure function of (spec, seed): utterance `i` draws from an
//! RNG seeded with `seed ^ i`, so per-utterance work can run in parallel and
//! still reproduce the sequential corpus byte for byte.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::features::{save_features, FeatureSequence};
use crate::dataio::manifest::{Manifest, ManifestRecord};
use crate::dataio::vocab::{Lang, Vocabulary};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub n_utts: usize,
    pub vocab_a_size: usize,
    pub vocab_b_size: usize,
    pub frames_per_token: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub switch_prob: f64,
    /// Inclusive token-count range per utterance.
    pub len_range: (usize, usize),
}

impl Default for SynthSpec {
    fn default() -> Self {
        // frames_per_token = 10 keeps every utterance CTC-feasible after 4x
        // downsampling, including language-wise targets that collapse
        // monolingual runs into repeated placeholder tokens (worst case
        // needs T' >= 2U - 1).
        Self {
            n_utts: 200,
            vocab_a_size: 30,
            vocab_b_size: 30,
            frames_per_token: 10,
            feature_dim: 20,
            noise_std: 0.1,
            switch_prob: 0.3,
            len_range: (3, 8),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_utts == 0
            || self.vocab_a_size == 0
            || self.vocab_b_size == 0
            || self.frames_per_token == 0
        {
            return Err(Error::SynthSpec("all sizes must be positive".into()));
        }
        if self.feature_dim < 1 {
            return Err(Error::SynthSpec("feature_dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return Err(Error::SynthSpec(format!(
                "switch_prob {} outside [0, 1]",
                self.switch_prob
            )));
        }
        if self.len_range.0 == 0 || self.len_range.0 > self.len_range.1 {
            return Err(Error::SynthSpec(format!(
                "empty length range {:?}",
                self.len_range
            )));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let a = (0..self.vocab_a_size).map(|i| format!("cn{i:03}")).collect();
        let b = (0..self.vocab_b_size).map(|i| format!("en{i:03}")).collect();
        Vocabulary::new(a, b).expect("generated tokens are unique")
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-token prototype vectors, standard normal entries, drawn in token-ID
/// order from an RNG derived from the corpus seed.
fn prototypes(spec: &SynthSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed));
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..spec.vocab_a_size + spec.vocab_b_size)
        .map(|_| (0..spec.feature_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

struct SynthUtt {
    tokens: Vec<usize>,
    langs: Vec<Lang>,
    features: FeatureSequence,
}

fn synth_utterance(
    spec: &SynthSpec,
    vocab: &Vocabulary,
    protos: &[Vec<f64>],
    seed: u64,
    index: usize,
) -> SynthUtt {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ index as u64);
    let len = rng.random_range(spec.len_range.0..=spec.len_range.1);
    let mut lang = if rng.random_bool(0.5) { Lang::Cn } else { Lang::En };
    let mut tokens = Vec::with_capacity(len);
    let mut langs = Vec::with_capacity(len);
    for pos in 0..len {
        if pos > 0 && rng.random_bool(spec.switch_prob) {
            lang = match lang {
                Lang::Cn => Lang::En,
                Lang::En => Lang::Cn,
            };
        }
        let range = match lang {
            Lang::Cn => vocab.cn_ids(),
            Lang::En => vocab.en_ids(),
        };
        tokens.push(rng.random_range(range));
        langs.push(lang);
    }
    let normal = Normal::new(0.0, spec.noise_std).unwrap();
    let f = spec.feature_dim;
    let t = len * spec.frames_per_token;
    let mut data = Vec::with_capacity(t * f);
    for &tok in &tokens {
        let proto = &protos[tok - crate::dataio::vocab::RESERVED];
        for _ in 0..spec.frames_per_token {
            for &p in proto {
                data.push(p + if spec.noise_std > 0.0 { normal.sample(&mut rng) } else { 0.0 });
            }
        }
    }
    SynthUtt {
        tokens,
        langs,
        features: FeatureSequence::new(t, f, data).unwrap(),
    }
}

/// Generate the corpus, writing feature files under `outdir/feats/`.
/// Returns the manifest (paths relative to `outdir`) and the vocabulary.
pub fn synth_corpus(spec: &SynthSpec, seed: u64, outdir: &Path) -> Result<(Manifest, Vocabulary)> {
    spec.validate()?;
    let vocab = spec.vocabulary();
    let protos = prototypes(spec, seed);
    let feat_dir = outdir.join("feats");
    fs::create_dir_all(&feat_dir)?;

    let indices: Vec<usize> = (0..spec.n_utts).collect();
    let utts = par::map_ordered(&indices, |&i| synth_utterance(spec, &vocab, &protos, seed, i));

    let mut records = Vec::with_capacity(spec.n_utts);
    for (i, utt) in utts.iter().enumerate() {
        let id = format!("utt{i:05}");
        let rel = Path::new("feats").join(format!("{id}.feat"));
        save_features(&outdir.join(&rel), &utt.features)?;
        records.push(ManifestRecord {
            id,
            feat_path: rel,
            tokens: utt
                .tokens
                .iter()
                .map(|&t| vocab.token(t).unwrap().to_string())
                .collect(),
            langs: utt.langs.clone(),
        });
    }
    Ok((Manifest { records }, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            n_utts: 12,
            vocab_a_size: 5,
            vocab_b_size: 5,
            frames_per_token: 4,
            feature_dim: 6,
            noise_std: 0.1,
            switch_prob: 0.5,
            len_range: (1, 4),
        }
    }

    #[test]
    fn same_spec_and_seed_is_byte_identical() {
        let spec = tiny_spec();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (m1, _) = synth_corpus(&spec, 77, d1.path()).unwrap();
        let (m2, _) = synth_corpus(&spec, 77, d2.path()).unwrap();
        assert_eq!(m1.records.len(), m2.records.len());
        for (a, b) in m1.records.iter().zip(&m2.records) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.langs, b.langs);
            let fa = fs::read(d1.path().join(&a.feat_path)).unwrap();
            let fb = fs::read(d2.path().join(&b.feat_path)).unwrap();
            assert_eq!(fa, fb, "feature bytes differ for {}", a.id);
        }
    }

    #[test]
    fn zero_switch_prob_means_monolingual() {
        let spec = SynthSpec {
            switch_prob: 0.0,
            ..tiny_spec()
        };
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = synth_corpus(&spec, 3, dir.path()).unwrap();
        for r in &m.records {
            assert!(
                r.langs.windows(2).all(|w| w[0] == w[1]),
                "utterance {} switches languages",
                r.id
            );
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = tiny_spec();
        s.switch_prob = 1.5;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.len_range = (3, 2);
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.feature_dim = 0;
        assert!(s.validate().is_err());
    }

    /// Independent re-parse of everything the generator wrote: language tags
    /// must match the vocabulary's classification, features must have
    /// len * frames_per_token rows, and all lengths must lie in range.
    #[test]
    fn reparse_oracle_validates_generated_corpus() {
        let spec = SynthSpec {
            n_utts: 200,
            vocab_a_size: 30,
            vocab_b_size: 30,
            frames_per_token: 4,
            feature_dim: 20,
            noise_std: 0.1,
            switch_prob: 0.3,
            len_range: (2, 6),
        };
        let dir = tempfile::tempdir().unwrap();
        let (manifest, vocab) = synth_corpus(&spec, 2024, dir.path()).unwrap();
        let mpath = dir.path().join("m.tsv");
        manifest.save(&mpath).unwrap();

        // Re-parse from disk only.
        let reparsed = Manifest::load(&mpath).unwrap();
        assert_eq!(reparsed.records.len(), spec.n_utts);
        let mut saw_switch = false;
        for r in &reparsed.records {
            assert!(r.tokens.len() >= spec.len_range.0 && r.tokens.len() <= spec.len_range.1);
            let feats = crate::dataio::features::load_features(&r.feat_path).unwrap();
            assert_eq!(feats.frames(), r.tokens.len() * spec.frames_per_token);
            assert_eq!(feats.dim(), spec.feature_dim);
            for (tok, &lang) in r.tokens.iter().zip(&r.langs) {
                let id = vocab.id(tok).expect("token in vocabulary");
                assert_eq!(vocab.language(id).unwrap(), lang, "tag mismatch for {tok}");
            }
            if r.langs.windows(2).any(|w| w[0] != w[1]) {
                saw_switch = true;
            }
        }
        assert!(saw_switch, "switch_prob 0.3 corpus should contain code-switching");
    }
}
