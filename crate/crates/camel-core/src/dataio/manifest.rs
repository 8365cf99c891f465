//! Manifests: one utterance per line, tab-separated
//! (id, feature path, space-separated tokens, space-separated language tags).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataio::features::{load_features, FeatureSequence};
use crate::dataio::vocab::{Lang, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub feat_path: PathBuf,
    pub tokens: Vec<String>,
    pub langs: Vec<Lang>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

/// A fully resolved utterance: features in memory, tokens as vocabulary IDs.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureSequence,
    pub tokens: Vec<usize>,
    pub langs: Vec<Lang>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            let tokens = r.tokens.join(" ");
            let langs: Vec<&str> = r.langs.iter().map(|l| l.tag()).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.id,
                r.feat_path.display(),
                tokens,
                langs.join(" ")
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Parse and validate: unique ids, matching token/tag counts, and every
    /// referenced feature file present (relative paths resolve against the
    /// manifest's directory).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let ferr = |line: usize, detail: String| Error::Format {
            path: path.display().to_string(),
            offset: line as u64,
            detail,
        };
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(ferr(i, format!("expected 4 tab-separated fields, got {}", fields.len())));
            }
            let id = fields[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(ferr(i, format!("duplicate utterance id '{id}'")));
            }
            let feat_path = {
                let p = PathBuf::from(fields[1]);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            if !feat_path.exists() {
                return Err(ferr(i, format!("feature file '{}' missing", feat_path.display())));
            }
            let tokens: Vec<String> = fields[2].split_whitespace().map(str::to_string).collect();
            let langs: Result<Vec<Lang>> = fields[3].split_whitespace().map(Lang::parse).collect();
            let langs = langs?;
            if tokens.len() != langs.len() {
                return Err(ferr(
                    i,
                    format!("{} tokens but {} language tags", tokens.len(), langs.len()),
                ));
            }
            records.push(ManifestRecord {
                id,
                feat_path,
                tokens,
                langs,
            });
        }
        Ok(Self { records })
    }

    /// Resolve every record against a vocabulary, loading feature files.
    pub fn load_utterances(&self, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
        self.records
            .iter()
            .map(|r| {
                let tokens: Result<Vec<usize>> = r
                    .tokens
                    .iter()
                    .map(|t| {
                        vocab.id(t).ok_or_else(|| Error::Config(format!(
                            "token '{t}' in utterance '{}' not in vocabulary",
                            r.id
                        )))
                    })
                    .collect();
                let tokens = tokens?;
                if let Some(&bad) = tokens.iter().find(|&&t| vocab.is_reserved(t)) {
                    return Err(Error::InvalidToken {
                        id: bad,
                        detail: format!("reserved token in utterance '{}'", r.id),
                    });
                }
                Ok(Utterance {
                    id: r.id.clone(),
                    features: load_features(&r.feat_path)?,
                    tokens,
                    langs: r.langs.clone(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::features::save_features;

    #[test]
    fn roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let feat = FeatureSequence::new(2, 3, vec![0.0; 6]).unwrap();
        save_features(&dir.path().join("u0.feat"), &feat).unwrap();
        let m = Manifest {
            records: vec![ManifestRecord {
                id: "u0".into(),
                feat_path: "u0.feat".into(),
                tokens: vec!["cn00".into(), "en01".into()],
                langs: vec![Lang::Cn, Lang::En],
            }],
        };
        let path = dir.path().join("m.tsv");
        m.save(&path).unwrap();
        let loaded = Manifest::load(&path).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.records[0].tokens, vec!["cn00", "en01"]);
        assert_eq!(loaded.records[0].langs, vec![Lang::Cn, Lang::En]);
    }

    #[test]
    fn missing_feature_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "u0\tnope.feat\tcn00\tCN\n").unwrap();
        assert!(matches!(Manifest::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let feat = FeatureSequence::new(1, 1, vec![0.0]).unwrap();
        save_features(&dir.path().join("a.feat"), &feat).unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "u0\ta.feat\tcn00\tCN\nu0\ta.feat\tcn00\tCN\n").unwrap();
        assert!(matches!(Manifest::load(&path), Err(Error::Format { .. })));
    }
}
