//! Vocabulary, manifests, feature files, language-tag handling, and the
//! synthetic code-switching corpus generator.

pub mod features;
pub mod manifest;
pub mod synth;
pub mod vocab;

pub use features::{load_features, save_features, FeatureSequence, FEATURE_MAGIC};
pub use manifest::{Manifest, ManifestRecord, Utterance};
pub use synth::{synth_corpus, SynthSpec};
pub use vocab::{
    derive_language_sequence, derive_langwise_ctc_targets, Lang, Vocabulary, BLANK_ID,
    LANG_CN_ID, LANG_EN_ID, PAD_ID, RESERVED, SOS_EOS_ID,
};
