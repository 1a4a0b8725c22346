//! Versioned parameter container: names mapped to shape and row-major values,
//! tagged with the vocabulary hash and the config hash of the producing run.

use crate::autodiff::{ParamSet, Tensor};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::models::ModelDims;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "advdial-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Model family, e.g. `generator` or `discriminator`.
    pub kind: String,
    pub dims: ModelDims,
    pub vocab_hash: String,
    pub config_hash: String,
    pub params: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn capture(
        kind: &str,
        dims: ModelDims,
        params: &ParamSet,
        vocab_hash: &str,
        config_hash: &str,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            dims,
            vocab_hash: vocab_hash.into(),
            config_hash: config_hash.into(),
            params: params
                .iter()
                .map(|(_, name, t)| StoredTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Structural checks: header, unique names, value counts matching shapes.
    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format {:?}",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                self.version
            )));
        }
        let mut seen = BTreeSet::new();
        for p in &self.params {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate parameter {}", p.name)));
            }
            if p.shape.iter().product::<usize>() != p.values.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has {} values for shape {:?}",
                    p.name,
                    p.values.len(),
                    p.shape
                )));
            }
            if p.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has non-finite values",
                    p.name
                )));
            }
        }
        Ok(())
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let found = vocab.hash();
        if found != self.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.vocab_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Copies stored values into `params`, whose layout must match exactly.
    pub fn restore_into(&self, kind: &str, params: &mut ParamSet) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        if self.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                params.len(),
                self.params.len()
            )));
        }
        let mut stored = ParamSet::new();
        for p in &self.params {
            stored.add(
                p.name.clone(),
                Tensor::new(p.shape.clone(), p.values.clone())?,
            );
        }
        params.copy_from(&stored)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }
}

/// Fails if the two parameter name spaces share any name.
pub fn assert_disjoint<'a>(
    a: impl IntoIterator<Item = &'a str>,
    b: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let left: BTreeSet<&str> = a.into_iter().collect();
    let shared: Vec<&str> = b.into_iter().filter(|n| left.contains(n)).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::SharedParameters(shared.join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Generator, Init};

    #[test]
    fn round_trip_and_vocab_check() {
        let vocab = Vocab::from_words(["a", "b", "c"]);
        let dims = ModelDims::new(vocab.len());
        let gen = Generator::new(dims, "gen.", Init::uniform(4));
        let ckpt = Checkpoint::capture("generator", dims, &gen.params, &vocab.hash(), "abc");
        let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let mut fresh = Generator::new(dims, "gen.", Init::Zeros);
        back.restore_into("generator", &mut fresh.params).unwrap();
        assert_eq!(fresh.params, gen.params);
        back.check_vocab(&vocab).unwrap();
        let other = Vocab::from_words(["a", "b", "d"]);
        assert!(matches!(
            back.check_vocab(&other),
            Err(Error::VocabMismatch { .. })
        ));
        assert!(back.restore_into("critic", &mut fresh.params).is_err());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::zeros(vec![2, 2]));
        let mut ckpt = Checkpoint::capture("generator", ModelDims::new(4), &params, "v", "c");
        ckpt.params[0].values.pop();
        assert!(Checkpoint::from_json(&ckpt.to_json().unwrap()).is_err());
    }

    #[test]
    fn disjoint_name_spaces() {
        assert!(assert_disjoint(["gen.a", "disc.b"], ["eval.a"]).is_ok());
        assert!(matches!(
            assert_disjoint(["gen.a"], ["gen.a"]),
            Err(Error::SharedParameters(_))
        ));
    }
}
