use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifiers::{detector_train_config, DEFAULT_DETECTOR_HIDDEN};
use crate::corpus::{Lexicon, DEFAULT_MAX_LEN};
use crate::decoder::TdHyper;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_ORDER;
use crate::latent::LceHyper;
use crate::masker::{ExplainConfig, DEFAULT_MU, DEFAULT_N_SAMPLES, MIN_SAMPLES};
use crate::nn::{EncoderConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding `train.tsv`, `dev.tsv`, `test.tsv` and optionally
    /// `vocab.json` and `*.gold`.
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    /// Optional lexicon files for `synth`; the built-in lexicon otherwise.
    pub lexicon_pairs: Option<PathBuf>,
    pub lexicon_templates: Option<PathBuf>,
    pub lexicon_fillers: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
            lexicon_pairs: None,
            lexicon_templates: None,
            lexicon_fillers: None,
        }
    }
}

/// Synthetic corpus sizes (pairs per split) and tokenization limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub max_len: usize,
    /// Only used when no `vocab.json` sits next to the corpus.
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train: 2000, n_dev: 200, n_test: 200, max_len: DEFAULT_MAX_LEN, min_count: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub hidden: usize,
    pub train: TrainConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { hidden: DEFAULT_DETECTOR_HIDDEN, train: detector_train_config() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskerConfig {
    pub mu: f64,
    pub n_samples: usize,
}

impl Default for MaskerConfig {
    fn default() -> Self {
        Self { mu: DEFAULT_MU, n_samples: DEFAULT_N_SAMPLES }
    }
}

impl MaskerConfig {
    pub fn explain(&self) -> ExplainConfig {
        ExplainConfig { n_samples: self.n_samples, ..ExplainConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub lm_order: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { lm_order: DEFAULT_ORDER }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Decode without the latent vector (α = 1).
    pub no_latent: bool,
    /// Also drop the classifier term from decoder training (γ = 0).
    pub no_class_constraint: bool,
}

/// Everything a run needs, one section per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub classifier: TrainConfig,
    pub source_encoder: TrainConfig,
    pub detector: DetectorConfig,
    pub embedder: TrainConfig,
    pub latent: LceHyper,
    pub decoder: TdHyper,
    pub masker: MaskerConfig,
    pub eval: EvalConfig,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            encoder: EncoderConfig { dropout: 0.1, ..EncoderConfig::default() },
            classifier: TrainConfig { epochs: 3, ..TrainConfig::default() },
            source_encoder: TrainConfig { epochs: 1, ..TrainConfig::default() },
            detector: DetectorConfig::default(),
            embedder: TrainConfig { epochs: 15, ..TrainConfig::default() },
            latent: LceHyper::default(),
            decoder: TdHyper::default(),
            masker: MaskerConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

fn check_train(name: &str, t: &TrainConfig) -> Result<()> {
    if !(t.lr > 0.0 && t.lr.is_finite()) {
        return Err(Error::Config(format!("{name}.lr must be positive")));
    }
    if t.batch_size == 0 || t.epochs == 0 {
        return Err(Error::Config(format!("{name}: batch_size and epochs must be positive")));
    }
    if matches!(t.clip_norm, Some(c) if !(c > 0.0)) {
        return Err(Error::Config(format!("{name}.clip_norm must be positive")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file. Relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.data);
        fix(&mut self.paths.checkpoints);
        fix(&mut self.paths.reports);
        for p in [&mut self.paths.lexicon_pairs, &mut self.paths.lexicon_templates, &mut self.paths.lexicon_fillers]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Range checks on every hyper-parameter. Touches no files.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.encoder.validate().map_err(cfg_err)?;
        self.latent.validate().map_err(cfg_err)?;
        self.decoder.validate().map_err(cfg_err)?;
        check_train("classifier", &self.classifier)?;
        check_train("source_encoder", &self.source_encoder)?;
        check_train("detector.train", &self.detector.train)?;
        check_train("embedder", &self.embedder)?;
        check_train("latent.train", &self.latent.train)?;
        check_train("decoder.train", &self.decoder.train)?;
        if self.detector.hidden == 0 {
            return Err(Error::Config("detector.hidden must be positive".into()));
        }
        if !(self.masker.mu >= 0.0) {
            return Err(Error::Config(format!("masker.mu {} must be non-negative", self.masker.mu)));
        }
        if self.masker.n_samples < MIN_SAMPLES {
            return Err(Error::Config(format!("masker.n_samples must be at least {MIN_SAMPLES}")));
        }
        if self.eval.lm_order < 2 {
            return Err(Error::Config("eval.lm_order must be at least 2".into()));
        }
        if self.data.max_len == 0 || self.data.max_len > self.encoder.max_len {
            return Err(Error::Config(format!(
                "data.max_len {} must be in 1..={}",
                self.data.max_len, self.encoder.max_len
            )));
        }
        if self.data.n_train == 0 || self.data.n_dev == 0 || self.data.n_test == 0 {
            return Err(Error::Config("every split needs at least one pair".into()));
        }
        if self.ablation.no_class_constraint && !self.ablation.no_latent {
            return Err(Error::Config("no_class_constraint is only defined together with no_latent".into()));
        }
        let lex = [&self.paths.lexicon_pairs, &self.paths.lexicon_templates];
        if lex.iter().filter(|p| p.is_some()).count() == 1 {
            return Err(Error::Config("lexicon_pairs and lexicon_templates go together".into()));
        }
        Ok(())
    }

    /// Checks that the corpus files a training or evaluation run reads exist.
    pub fn validate_data_paths(&self) -> Result<()> {
        for name in ["train.tsv", "dev.tsv", "test.tsv"] {
            let p = self.paths.data.join(name);
            if !p.is_file() {
                return Err(Error::Config(format!("missing corpus file {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        match (&self.paths.lexicon_pairs, &self.paths.lexicon_templates) {
            (Some(p), Some(t)) => Lexicon::from_files(p, t, self.paths.lexicon_fillers.as_deref()),
            _ => Ok(Lexicon::builtin()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml_str("seed = 3\n[latent]\nlambda = 0.25\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.latent.lambda, 0.25);
        assert_eq!(c.decoder, TdHyper::default());
    }

    #[test]
    fn lambda_out_of_range() {
        let c = RunConfig::from_toml_str("[latent]\nlambda = 1.5\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::from_toml_str("sed = 3\n").is_err());
    }

    #[test]
    fn constraint_flag_needs_latent_flag() {
        let mut c = RunConfig::default();
        c.ablation.no_class_constraint = true;
        assert!(c.validate().is_err());
        c.ablation.no_latent = true;
        c.validate().unwrap();
    }
}
