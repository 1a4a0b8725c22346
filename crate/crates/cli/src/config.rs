//! Run configuration: flat `key = value` lines with dotted section prefixes.
//!
//! Every key has a default, so an empty file is a complete config. The
//! canonical form lists all keys sorted, one per line; its SHA-256 is the
//! config hash embedded in every artifact. The output directory is excluded
//! from the canonical form so a run relocated under another root hashes the
//! same.

use crate::error::{CliError, CliResult};
use advdial::decoding::{DecodeConfig, Strategy};
use advdial::eval::{EvalTrainConfig, EvaluatorKind, EvaluatorSpec, ScenarioKind};
use advdial::models::ModelDims;
use advdial::train::{
    DiscPretrainConfig, MleConfig, RewardMode, RlConfig, TeacherForcing, TrainSchedule,
};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

const OUT_KEY: &str = "out";

const DEFAULTS: &[(&str, &str)] = &[
    ("out", "out"),
    ("seed", "0"),
    ("synth.n", "3000"),
    ("data.corpus", ""),
    ("data.vocab", ""),
    ("data.heldout", "200"),
    ("data.eval", "1000"),
    ("model.embed", "16"),
    ("model.hidden", "32"),
    ("pretrain.epochs", "3"),
    ("pretrain.batch", "16"),
    ("pretrain.lr", "0.5"),
    ("pretrain.lr_decay", "0.7"),
    ("pretrain.decay_after", "6"),
    ("pretrain.clip", "5"),
    ("pretrain.tfidf_cap", "3"),
    ("pretrain.min_len", "5"),
    ("disc.epochs", "6"),
    ("disc.batch", "16"),
    ("disc.lr", "0.003"),
    ("disc.beam_width", "5"),
    ("disc.mmi_weight", "0.5"),
    ("disc.examples", "1000"),
    ("decode.strategy", "beam"),
    ("decode.width", "5"),
    ("decode.sibling_penalty", "1"),
    ("decode.repeat_penalty", "1"),
    ("decode.temperature", "1"),
    ("decode.mmi_weight", "0.5"),
    ("decode.anti_lm_weight", "0.5"),
    ("decode.max_len", "20"),
    ("train.mode", "reinforce"),
    ("train.d_steps", "5"),
    ("train.g_steps", "1"),
    ("train.teacher_forcing", "constant_one"),
    ("train.iterations", "100"),
    ("train.batch", "16"),
    ("train.checkpoint_every", "50"),
    ("rl.lr", "0.5"),
    ("rl.tf_lr", "0.25"),
    ("rl.grad_clip", "5"),
    ("rl.clip_advantage", "false"),
    ("rl.rollouts", "5"),
    ("rl.temperature", "1"),
    ("rl.max_len", "20"),
    ("rl.disc_lr", "0.001"),
    ("rl.critic_lr", "0.001"),
    ("eval.evaluator", "hier_neural"),
    ("eval.scenarios", "all"),
    ("eval.epochs", "30"),
    ("eval.batch", "16"),
    ("eval.lr", "0.002"),
    ("eval.hinge_epochs", "20"),
    ("eval.hinge_lr", "0.05"),
    ("eval.l2", "0.0001"),
    ("eval.init_range", "0.3"),
    ("eval.test_fraction", "0.3"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Parses config text on top of the defaults. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected key = value", i + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(advdial::Error::MissingArtifact(path.to_path_buf()).into());
        }
        let text = std::fs::read_to_string(path).map_err(|e| advdial::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> CliResult<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn typed<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .parse()
            .map_err(|e| CliError::Usage(format!("config key {key}: {e}")))
    }

    /// Canonical text: every key except the output directory, sorted.
    pub fn canonical(&self) -> String {
        self.values
            .iter()
            .filter(|(k, _)| k.as_str() != OUT_KEY)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Checks that every typed view parses and is internally consistent.
    pub fn validate(&self) -> CliResult<()> {
        self.seed()?;
        self.synth_n()?;
        self.split_sizes()?;
        self.dims(4)?;
        self.mle()?;
        self.disc_pretrain()?;
        self.decode()?.validate()?;
        self.schedule()?.validate()?;
        self.reward_mode()?;
        self.rl()?;
        self.checkpoint_every()?;
        self.evaluator()?.validate()?;
        self.scenarios()?;
        self.eval_train(4)?;
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get(OUT_KEY))
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.typed("seed")
    }

    pub fn synth_n(&self) -> CliResult<usize> {
        let n: usize = self.typed("synth.n")?;
        if n == 0 {
            return Err(CliError::Usage("synth.n must be positive".into()));
        }
        Ok(n)
    }

    pub fn corpus_path(&self) -> Option<PathBuf> {
        Some(self.get("data.corpus"))
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
    }

    pub fn vocab_path(&self) -> Option<PathBuf> {
        Some(self.get("data.vocab"))
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
    }

    /// Held-out (perplexity) and evaluation split sizes, taken from the corpus tail.
    pub fn split_sizes(&self) -> CliResult<(usize, usize)> {
        Ok((self.typed("data.heldout")?, self.typed("data.eval")?))
    }

    pub fn dims(&self, vocab: usize) -> CliResult<ModelDims> {
        let dims = ModelDims {
            vocab,
            embed: self.typed("model.embed")?,
            hidden: self.typed("model.hidden")?,
        };
        if dims.embed == 0 || dims.hidden == 0 {
            return Err(CliError::Usage("model dimensions must be positive".into()));
        }
        Ok(dims)
    }

    pub fn mle(&self) -> CliResult<MleConfig> {
        Ok(MleConfig {
            epochs: self.typed("pretrain.epochs")?,
            batch_size: self.typed("pretrain.batch")?,
            lr: self.typed("pretrain.lr")?,
            lr_decay: self.typed("pretrain.lr_decay")?,
            decay_after: self.typed("pretrain.decay_after")?,
            grad_clip: self.typed("pretrain.clip")?,
            tfidf_cap: self.typed("pretrain.tfidf_cap")?,
            min_response_len: self.typed("pretrain.min_len")?,
            seed: self.seed()?,
        })
    }

    pub fn disc_pretrain(&self) -> CliResult<DiscPretrainConfig> {
        Ok(DiscPretrainConfig {
            epochs: self.typed("disc.epochs")?,
            batch_size: self.typed("disc.batch")?,
            lr: self.typed("disc.lr")?,
            beam_width: self.typed("disc.beam_width")?,
            mmi_weight: self.typed("disc.mmi_weight")?,
            seed: self.seed()?,
        })
    }

    /// Training dialogues used for discriminator pretraining; 0 means all.
    pub fn disc_examples(&self) -> CliResult<usize> {
        self.typed("disc.examples")
    }

    pub fn decode(&self) -> CliResult<DecodeConfig> {
        Ok(DecodeConfig {
            strategy: self.typed::<Strategy>("decode.strategy")?,
            width: self.typed("decode.width")?,
            sibling_penalty: self.typed("decode.sibling_penalty")?,
            repeat_penalty: self.typed("decode.repeat_penalty")?,
            temperature: self.typed("decode.temperature")?,
            mmi_weight: self.typed("decode.mmi_weight")?,
            anti_lm_weight: self.typed("decode.anti_lm_weight")?,
            max_len: self.typed("decode.max_len")?,
            seed: self.seed()?,
        })
    }

    pub fn schedule(&self) -> CliResult<TrainSchedule> {
        Ok(TrainSchedule {
            d_steps: self.typed("train.d_steps")?,
            g_steps: self.typed("train.g_steps")?,
            teacher_forcing: self.typed::<TeacherForcing>("train.teacher_forcing")?,
            iterations: self.typed("train.iterations")?,
            batch_size: self.typed("train.batch")?,
            seed: self.seed()?,
        })
    }

    pub fn reward_mode(&self) -> CliResult<RewardMode> {
        self.typed("train.mode")
    }

    /// Iterations between periodic adversarial checkpoints; 0 disables them.
    pub fn checkpoint_every(&self) -> CliResult<usize> {
        self.typed("train.checkpoint_every")
    }

    pub fn rl(&self) -> CliResult<RlConfig> {
        let cfg = RlConfig {
            lr: self.typed("rl.lr")?,
            grad_clip: self.typed("rl.grad_clip")?,
            clip_advantage: self.typed("rl.clip_advantage")?,
            rollouts: self.typed("rl.rollouts")?,
            temperature: self.typed("rl.temperature")?,
            max_len: self.typed("rl.max_len")?,
            tf_lr: self.typed("rl.tf_lr")?,
            disc_lr: self.typed("rl.disc_lr")?,
            critic_lr: self.typed("rl.critic_lr")?,
        };
        if cfg.rollouts == 0 {
            return Err(CliError::Usage("rl.rollouts must be at least 1".into()));
        }
        if cfg.temperature <= 0.0 {
            return Err(CliError::Usage("rl.temperature must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn evaluator(&self) -> CliResult<EvaluatorSpec> {
        Ok(EvaluatorSpec::new(
            self.typed::<EvaluatorKind>("eval.evaluator")?,
        ))
    }

    /// `all` or a comma-separated list of scenario tags.
    pub fn scenarios(&self) -> CliResult<Vec<ScenarioKind>> {
        let raw = self.get("eval.scenarios");
        if raw == "all" {
            return Ok(ScenarioKind::ALL.to_vec());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse::<ScenarioKind>()
                    .map_err(|e| CliError::Usage(format!("eval.scenarios: {e}")))
            })
            .collect()
    }

    pub fn eval_train(&self, vocab: usize) -> CliResult<EvalTrainConfig> {
        let cfg = EvalTrainConfig {
            dims: self.dims(vocab)?,
            epochs: self.typed("eval.epochs")?,
            batch_size: self.typed("eval.batch")?,
            lr: self.typed("eval.lr")?,
            hinge_epochs: self.typed("eval.hinge_epochs")?,
            hinge_lr: self.typed("eval.hinge_lr")?,
            l2: self.typed("eval.l2")?,
            init_range: self.typed("eval.init_range")?,
            test_fraction: self.typed("eval.test_fraction")?,
        };
        if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
            return Err(CliError::Usage(
                "eval.test_fraction must lie in (0, 1)".into(),
            ));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.schedule().unwrap().d_steps, 5);
    }

    #[test]
    fn comments_overrides_and_unknown_keys() {
        let mut cfg = RunConfig::parse("# note\n\nseed = 7\ntrain.iterations=3\n").unwrap();
        assert_eq!(cfg.seed().unwrap(), 7);
        assert_eq!(cfg.schedule().unwrap().iterations, 3);
        cfg.apply_override("rl.lr=0.2").unwrap();
        assert_eq!(cfg.rl().unwrap().lr, 0.2);
        assert!(matches!(
            RunConfig::parse("nope = 1"),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(RunConfig::parse("seed"), Err(CliError::Usage(_))));
        assert!(matches!(
            RunConfig::parse("seed = x"),
            Err(CliError::Usage(_))
        ));
        assert!(cfg.apply_override("seed").is_err());
    }

    #[test]
    fn hash_ignores_layout_and_output_dir() {
        let a = RunConfig::parse("seed = 3\nout = a").unwrap();
        let b = RunConfig::parse("out=b\n\n   seed=3   ").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::parse("seed = 4").unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn canonical_round_trips() {
        let a =
            RunConfig::parse("decode.strategy = sample\neval.scenarios = human-vs-random").unwrap();
        let b = RunConfig::parse(&a.canonical()).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(b.scenarios().unwrap(), vec![ScenarioKind::HumanVsRandom]);
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        for bad in [
            "synth.n = 0",
            "train.d_steps = 0",
            "decode.width = 0",
            "eval.test_fraction = 1",
            "rl.rollouts = 0",
        ] {
            assert_eq!(RunConfig::parse(bad).unwrap_err().exit_code(), 2, "{bad}");
        }
    }
}
