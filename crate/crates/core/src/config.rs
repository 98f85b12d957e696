//! Experiment and sweep configuration, read from TOML.
//!
//! Every section is optional and falls back to the defaults below; unknown
//! keys are rejected. A minimal file:
//!
//! ```toml
//! seed = 3
//!
//! [model]
//! vocab = 512
//!
//! [strategy]
//! kind = "dynamic"
//! k = 32
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::corpus::MIN_VOCAB;
use crate::decode::{DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::train::{AuxGradient, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab: usize,
    pub target_hidden: usize,
    pub draft_hidden: usize,
    pub context: usize,
    /// Weight of the planted successor structure in the target, in [0, 1].
    pub structure: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            vocab: 512,
            target_hidden: 128,
            draft_hidden: 64,
            context: 4,
            structure: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Target-generated tokens used for training and target frequencies.
    pub tokens: usize,
    /// Length of each generated sequence before a fresh prompt is drawn.
    pub segment: usize,
    pub temperature: f32,
    /// Size of the external Zipf corpus used for corpus frequencies.
    pub corpus_tokens: usize,
    pub zipf_alpha: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            tokens: 100_000,
            segment: 256,
            temperature: 1.0,
            corpus_tokens: 100_000,
            zipf_alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub lambda: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// d' as a fraction of the draft hidden size (rounded up, at least 1).
    pub d_prime_ratio: f64,
    pub aux_gradient: AuxGradient,
    pub grad_check: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            lambda: t.lambda,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            d_prime_ratio: 1.0 / 16.0,
            aux_gradient: AuxGradient::Joint,
            grad_check: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Full,
    Static,
    Dynamic,
}

/// Where a static subset's token frequencies come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetSource {
    /// External Zipf corpus.
    Corpus,
    /// Text generated by the target model.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    pub kind: StrategyKind,
    pub k: usize,
    pub subset_size: usize,
    pub subset_source: SubsetSource,
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection {
            kind: StrategyKind::Dynamic,
            k: 32,
            subset_size: 128,
            subset_source: SubsetSource::Target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Greedy,
    Sampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub gamma: usize,
    pub mode: ModeKind,
    pub temperature: f32,
    pub max_new_tokens: usize,
    /// Independent decode runs per evaluation, each from its own prompt.
    pub prompts: usize,
    pub prompt_len: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            gamma: 4,
            mode: ModeKind::Greedy,
            temperature: 1.0,
            max_new_tokens: 64,
            prompts: 8,
            prompt_len: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    DPrimeRatio,
    Lambda,
    SubsetSize,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::DPrimeRatio => "d_prime_ratio",
            SweepAxis::Lambda => "lambda",
            SweepAxis::SubsetSize => "subset_size",
        }
    }

    /// Whether changing this axis requires retraining.
    pub fn affects_training(self) -> bool {
        matches!(self, SweepAxis::DPrimeRatio | SweepAxis::Lambda)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Also report full-vocabulary and both static-subset baselines.
    #[serde(default)]
    pub baselines: bool,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub strategy: StrategySection,
    pub decode: DecodeSection,
    pub output: OutputSection,
    pub bench: BenchConfig,
    pub sweep: Option<SweepSection>,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(msg()))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// d' for a draft of the configured hidden size.
    pub fn d_prime(&self) -> usize {
        d_prime_for(self.model.draft_hidden, self.train.d_prime_ratio)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: self.train.lambda,
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
            batch: self.train.batch,
            steps: self.train.steps,
            seed,
            d_prime: self.d_prime(),
            grad_check: self.train.grad_check,
            aux_gradient: self.train.aux_gradient,
            ..TrainConfig::default()
        }
    }

    pub fn decode_config(&self, seed: u64) -> DecodeConfig {
        DecodeConfig {
            gamma: self.decode.gamma,
            mode: match self.decode.mode {
                ModeKind::Greedy => DecodeMode::Greedy,
                ModeKind::Sampling => DecodeMode::LosslessSampling {
                    temperature: self.decode.temperature,
                },
            },
            max_new_tokens: self.decode.max_new_tokens,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        ensure(m.vocab >= MIN_VOCAB, || format!("model.vocab must be >= {MIN_VOCAB}"))?;
        ensure(m.target_hidden > 0 && m.draft_hidden > 0 && m.context > 0, || {
            "model.target_hidden, model.draft_hidden and model.context must be >= 1".into()
        })?;
        ensure((0.0..=1.0).contains(&m.structure), || {
            format!("model.structure must lie in [0, 1], got {}", m.structure)
        })?;
        let d = &self.data;
        ensure(d.tokens >= m.context.max(2), || {
            format!("data.tokens must be at least {}", m.context.max(2))
        })?;
        ensure(d.segment > 0 && d.corpus_tokens > 0, || {
            "data.segment and data.corpus_tokens must be >= 1".into()
        })?;
        ensure(d.temperature > 0.0 && d.zipf_alpha > 0.0, || {
            "data.temperature and data.zipf_alpha must be positive".into()
        })?;
        ensure(self.train.d_prime_ratio > 0.0 && self.train.d_prime_ratio <= 1.0, || {
            format!("train.d_prime_ratio must lie in (0, 1], got {}", self.train.d_prime_ratio)
        })?;
        self.train_config(self.seed).validate()?;
        let s = &self.strategy;
        ensure(s.k >= 1 && s.k <= m.vocab, || {
            format!("strategy.k must lie in [1, {}], got {}", m.vocab, s.k)
        })?;
        ensure(s.subset_size >= 1 && s.subset_size <= m.vocab, || {
            format!("strategy.subset_size must lie in [1, {}], got {}", m.vocab, s.subset_size)
        })?;
        self.decode_config(self.seed).validate()?;
        ensure(self.decode.prompts > 0 && self.decode.prompt_len > 0, || {
            "decode.prompts and decode.prompt_len must be >= 1".into()
        })?;
        self.bench.validate()?;
        if let Some(sweep) = &self.sweep {
            self.validate_sweep(sweep)?;
        }
        Ok(())
    }

    fn validate_sweep(&self, sweep: &SweepSection) -> Result<()> {
        ensure(!sweep.values.is_empty(), || "sweep.values must not be empty".into())?;
        ensure(!sweep.seeds.is_empty(), || "sweep.seeds must not be empty".into())?;
        let kind = self.strategy.kind;
        let applicable = match sweep.axis {
            SweepAxis::K | SweepAxis::DPrimeRatio | SweepAxis::Lambda => kind == StrategyKind::Dynamic,
            SweepAxis::SubsetSize => kind == StrategyKind::Static,
        };
        ensure(applicable, || {
            format!(
                "sweep axis {} does not apply to the {:?} strategy",
                sweep.axis.name(),
                kind
            )
        })?;
        for &v in &sweep.values {
            let mut point = self.clone();
            point.sweep = None;
            point.apply(sweep.axis, v)?;
            point.validate()?;
        }
        Ok(())
    }

    /// Copy of the config with one axis set to `value`.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Result<Self> {
        let mut c = self.clone();
        c.sweep = None;
        c.apply(axis, value)?;
        Ok(c)
    }

    fn apply(&mut self, axis: SweepAxis, value: f64) -> Result<()> {
        let as_count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::config(format!("sweep value {v} must be a positive integer")))
            }
        };
        match axis {
            SweepAxis::K => self.strategy.k = as_count(value)?,
            SweepAxis::SubsetSize => self.strategy.subset_size = as_count(value)?,
            SweepAxis::DPrimeRatio => self.train.d_prime_ratio = value,
            SweepAxis::Lambda => self.train.lambda = value as f32,
        }
        Ok(())
    }
}

pub fn d_prime_for(hidden: usize, ratio: f64) -> usize {
    ((hidden as f64 * ratio).ceil() as usize).clamp(1, hidden)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.d_prime(), 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("[model]\nvocab = 64\nwidth = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(ExperimentConfig::from_toml("colour = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep = Some(SweepSection {
            axis: SweepAxis::K,
            values: vec![2.0, 8.0, 32.0],
            seeds: vec![1, 2],
            baselines: true,
        });
        cfg.train.aux_gradient = AuxGradient::Detached;
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "[strategy]\nk = 0\n",
            "[strategy]\nk = 513\n",
            "[decode]\ngamma = 0\n",
            "[train]\nlambda = -0.5\n",
            "[model]\nstructure = 1.5\n",
            "[sweep]\naxis = \"k\"\nvalues = []\n",
            "[sweep]\naxis = \"subset_size\"\nvalues = [64.0]\n",
            "[sweep]\naxis = \"k\"\nvalues = [2.5]\n",
            "[bench]\nrepetitions = 0\n",
        ] {
            let r = ExperimentConfig::from_toml(text);
            assert!(matches!(r, Err(Error::Config(_))), "{text}: {r:?}");
        }
    }

    #[test]
    fn axis_application() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.with_axis(SweepAxis::K, 8.0).unwrap().strategy.k, 8);
        assert_eq!(cfg.with_axis(SweepAxis::DPrimeRatio, 0.125).unwrap().d_prime(), 8);
        assert_eq!(d_prime_for(3, 0.5), 2);
        assert_eq!(d_prime_for(3, 0.01), 1);
    }
}
