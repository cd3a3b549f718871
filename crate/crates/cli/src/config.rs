//! Flat `key = value` run configuration with section prefixes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use mtslvr::audio::{ActivationProbs, AugmentationKind, ChannelMode, SpectrogramConfig, WindowKind};
use mtslvr::fewshot::{EvalConfig, LinearConfig};
use mtslvr::model::{BackboneConfig, Variant};
use mtslvr::objectives::{ContrastiveKind, HeadsConfig};
use mtslvr::tensor::AdamConfig;

use crate::error::CliError;

/// Learning rates used when `train.lr = auto`.
const BASELINE_LR: f64 = 1e-4;
const MULTI_TASK_LR: f64 = 5e-5;

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("backbone.preset", "desk"),
    ("backbone.variant", "parallel"),
    ("objective.contrastive", "simclr"),
    ("objective.temperature", "0.5"),
    ("objective.lambda", "1.0"),
    ("objective.projection_dim", "128"),
    ("objective.mlap_hidden", "256"),
    ("train.lr", "auto"),
    ("train.epochs", "10"),
    ("train.batch_size", "32"),
    ("train.max_steps", "none"),
    ("train.crop_s", "1.0"),
    ("augment.p.PS", "0.5"),
    ("augment.p.FD", "0.5"),
    ("augment.p.WN", "0.5"),
    ("augment.p.MN", "0.5"),
    ("augment.p.TM", "0.5"),
    ("augment.p.TS1", "0.5"),
    ("augment.p.TS2", "0.5"),
    ("spectrogram.sample_rate", "16000"),
    ("spectrogram.n_fft", "1024"),
    ("spectrogram.hop", "512"),
    ("spectrogram.n_mels", "128"),
    ("spectrogram.window", "hann"),
    ("spectrogram.channels", "deltas"),
    ("spectrogram.f_min", "0"),
    ("spectrogram.f_max", "none"),
    ("eval.n_way", "5"),
    ("eval.k_shot", "1"),
    ("eval.queries", "5"),
    ("eval.tasks", "10000"),
    ("eval.segment_s", "5.0"),
    ("eval.l2", "1e-4"),
    ("eval.epochs", "100"),
    ("eval.lr", "0.01"),
    ("eval.seed", "0"),
    ("invariance.param_samples", "16"),
    ("invariance.seed", "0"),
];

/// Every key has a default; only known keys may be set.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Overlays `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key comes from the defaults table")
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Rebuilds from echoed entries, rejecting keys this build does not know.
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (k, v) in entries {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Canonical `key = value` text, sorted by key.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.echo().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{v}`")))
    }

    fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.get(key) {
            "none" | "" => Ok(None),
            _ => self.parse(key).map(Some),
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        Ok(Variant::parse(self.get("backbone.variant"))?)
    }

    pub fn backbone(&self) -> Result<BackboneConfig, CliError> {
        let variant = self.variant()?;
        match self.get("backbone.preset") {
            "desk" => Ok(BackboneConfig::desk(variant)),
            "resnet18" => Ok(BackboneConfig::resnet18(variant)),
            other => Err(CliError::Usage(format!("backbone.preset must be desk or resnet18, got `{other}`"))),
        }
    }

    pub fn contrastive(&self) -> Result<ContrastiveKind, CliError> {
        let kind = match self.get("objective.contrastive") {
            "simclr" => ContrastiveKind::SimClr {
                temperature: self.parse("objective.temperature")?,
            },
            "simsiam" => ContrastiveKind::SimSiam,
            other => return Err(CliError::Usage(format!("objective.contrastive must be simclr or simsiam, got `{other}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn heads(&self, feature_dim: usize) -> Result<HeadsConfig, CliError> {
        Ok(HeadsConfig {
            projection_dim: self.parse("objective.projection_dim")?,
            mlap_hidden: self.parse("objective.mlap_hidden")?,
            ..HeadsConfig::new(self.contrastive()?, feature_dim)
        })
    }

    pub fn lambda(&self) -> Result<f64, CliError> {
        self.parse("objective.lambda")
    }

    /// `auto` picks the baseline rate for Simple or `lambda = 0`, the
    /// multi-task rate otherwise.
    pub fn adam(&self) -> Result<AdamConfig, CliError> {
        let lr = match self.get("train.lr") {
            "auto" if self.variant()? == Variant::Simple || self.lambda()? == 0.0 => BASELINE_LR,
            "auto" => MULTI_TASK_LR,
            _ => self.parse("train.lr")?,
        };
        Ok(AdamConfig { lr, ..Default::default() })
    }

    pub fn epochs(&self) -> Result<u64, CliError> {
        self.parse("train.epochs")
    }

    pub fn batch_size(&self) -> Result<usize, CliError> {
        self.parse("train.batch_size")
    }

    pub fn max_steps(&self) -> Result<Option<u64>, CliError> {
        self.optional("train.max_steps")
    }

    fn seconds_to_samples(&self, key: &str) -> Result<usize, CliError> {
        let s: f64 = self.parse(key)?;
        let rate = self.spectrogram()?.sample_rate as f64;
        if !(s > 0.0 && s.is_finite()) {
            return Err(CliError::Usage(format!("config key `{key}` must be > 0, got {s}")));
        }
        Ok((s * rate).round() as usize)
    }

    pub fn crop_len(&self) -> Result<usize, CliError> {
        self.seconds_to_samples("train.crop_s")
    }

    pub fn segment_len(&self) -> Result<usize, CliError> {
        self.seconds_to_samples("eval.segment_s")
    }

    pub fn probs(&self) -> Result<ActivationProbs, CliError> {
        let mut p = [0.0; AugmentationKind::COUNT];
        for kind in AugmentationKind::ALL {
            p[kind.index()] = self.parse(&format!("augment.p.{}", kind.code()))?;
        }
        Ok(ActivationProbs::new(p)?)
    }

    pub fn spectrogram(&self) -> Result<SpectrogramConfig, CliError> {
        let window = match self.get("spectrogram.window") {
            "hann" => WindowKind::Hann,
            "hamming" => WindowKind::Hamming,
            other => return Err(CliError::Usage(format!("spectrogram.window must be hann or hamming, got `{other}`"))),
        };
        let channels = match self.get("spectrogram.channels") {
            "deltas" => ChannelMode::Deltas,
            "repeat" => ChannelMode::Repeat,
            other => return Err(CliError::Usage(format!("spectrogram.channels must be deltas or repeat, got `{other}`"))),
        };
        let cfg = SpectrogramConfig {
            sample_rate: self.parse("spectrogram.sample_rate")?,
            n_fft: self.parse("spectrogram.n_fft")?,
            hop: self.parse("spectrogram.hop")?,
            n_mels: self.parse("spectrogram.n_mels")?,
            window,
            channels,
            f_min: self.parse("spectrogram.f_min")?,
            f_max: self.optional("spectrogram.f_max")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval(&self) -> Result<EvalConfig, CliError> {
        let linear = LinearConfig {
            l2: self.parse("eval.l2")?,
            epochs: self.parse("eval.epochs")?,
            lr: self.parse("eval.lr")?,
        };
        linear.validate()?;
        Ok(EvalConfig {
            n_way: self.parse("eval.n_way")?,
            k_shot: self.parse("eval.k_shot")?,
            queries: self.parse("eval.queries")?,
            tasks: self.parse("eval.tasks")?,
            seed: self.parse("eval.seed")?,
            linear,
        })
    }

    pub fn param_samples(&self) -> Result<usize, CliError> {
        self.parse("invariance.param_samples")
    }

    pub fn invariance_seed(&self) -> Result<u64, CliError> {
        self.parse("invariance.seed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_and_comments() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# run\nbackbone.variant = split  # heads\n\nobjective.lambda=0.25\n").unwrap();
        assert_eq!(cfg.variant().unwrap(), Variant::Split);
        assert_eq!(cfg.lambda().unwrap(), 0.25);
        cfg.apply_override("train.max_steps=7").unwrap();
        assert_eq!(cfg.max_steps().unwrap(), Some(7));
    }

    #[test]
    fn unknown_keys_and_bad_lines_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("backbone.varient = split\n").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("varient"), "{err}");
        assert!(cfg.apply_text("just words\n").is_err());
        assert!(cfg.apply_override("seed").is_err());
    }

    #[test]
    fn auto_learning_rate_follows_task_count() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.adam().unwrap().lr, MULTI_TASK_LR);
        cfg.set("objective.lambda", "0").unwrap();
        assert_eq!(cfg.adam().unwrap().lr, BASELINE_LR);
        cfg.set("objective.lambda", "1").unwrap();
        cfg.set("backbone.variant", "simple").unwrap();
        assert_eq!(cfg.adam().unwrap().lr, BASELINE_LR);
        cfg.set("train.lr", "0.003").unwrap();
        assert_eq!(cfg.adam().unwrap().lr, 0.003);
    }

    #[test]
    fn echo_round_trips_and_hash_tracks_values() {
        let mut cfg = RunConfig::default();
        cfg.set("seed", "9").unwrap();
        let entries = cfg.entries();
        let back = RunConfig::from_entries(entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn every_default_parses() {
        let cfg = RunConfig::default();
        cfg.backbone().unwrap();
        cfg.heads(8).unwrap();
        cfg.probs().unwrap();
        cfg.spectrogram().unwrap();
        cfg.eval().unwrap();
        assert_eq!(cfg.crop_len().unwrap(), 16000);
        assert_eq!(cfg.segment_len().unwrap(), 80000);
        assert_eq!(cfg.param_samples().unwrap(), 16);
        assert_eq!(cfg.max_steps().unwrap(), None);
    }
}
