//! Run configuration: every trainer knob, serializable to and from a strict
//! plain-text `key=value` format (unknown keys are rejected; `#` starts a
//! comment).

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::synth::DatasetSpec;
use crate::view::ViewConfig;

/// Supervision source for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Ground-truth image-level labels.
    Weak,
    /// Spectral pseudo-labels in place of ground truth.
    Unsupervised,
    /// Ground truth with a β fraction replaced by mapped pseudo-labels.
    BetaMix,
}

impl Mode {
    fn as_str(self) -> &'static str {
        match self {
            Mode::Weak => "weak",
            Mode::Unsupervised => "unsupervised",
            Mode::BetaMix => "beta-mix",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(Mode::Weak),
            "unsupervised" => Ok(Mode::Unsupervised),
            "beta-mix" => Ok(Mode::BetaMix),
            other => Err(Error::Config(format!(
                "mode must be weak|unsupervised|beta-mix, got '{other}'"
            ))),
        }
    }
}

/// Per-image pooling of patch predictions for the multi-label BCE.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum McePool {
    Max,
    Mean,
}

impl McePool {
    fn as_str(self) -> &'static str {
        match self {
            McePool::Max => "max",
            McePool::Mean => "mean",
        }
    }
}

impl std::str::FromStr for McePool {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(McePool::Max),
            "mean" => Ok(McePool::Mean),
            other => Err(Error::Config(format!(
                "mce_pool must be max|mean, got '{other}'"
            ))),
        }
    }
}

/// How the batch class-frequency vector entering the rescale is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NuBatchMode {
    /// 0/1 presence indicator (default).
    Indicator,
    /// Presence counts normalized over total batch label occurrences.
    Fractional,
}

impl NuBatchMode {
    fn as_str(self) -> &'static str {
        match self {
            NuBatchMode::Indicator => "indicator",
            NuBatchMode::Fractional => "fractional",
        }
    }
}

impl std::str::FromStr for NuBatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indicator" => Ok(NuBatchMode::Indicator),
            "fractional" => Ok(NuBatchMode::Fractional),
            other => Err(Error::Config(format!(
                "nu_b_mode must be indicator|fractional, got '{other}'"
            ))),
        }
    }
}

/// Full training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after the warm-up epoch.
    pub lr_decay: f64,
    pub warmup_epochs: usize,
    /// Linear ε schedule endpoints across epochs (constant when equal).
    pub eps_start: f64,
    pub eps_end: f64,
    pub temperature: f64,
    pub mode: Mode,
    pub beta: f64,
    /// Ablation: replace transport plans with argmax one-hots.
    pub no_ot: bool,
    /// Ablation: each branch matches its own plan instead of the other's.
    pub self_match: bool,
    /// Run one Sinkhorn per image instead of per batch.
    pub per_image_ot: bool,
    pub nu_b_mode: NuBatchMode,
    pub mce_pool: McePool,
    /// Average the match-loss cross terms per aligned patch instead of
    /// keeping the plan's native unit-mass normalization.
    pub match_per_patch_average: bool,
    /// Re-evaluate the whole dataset at epoch end for the area update;
    /// otherwise densities accumulate from the epoch's global-view passes.
    pub strict_density: bool,
    /// Fixed-order execution and zeroed wall-time columns for bit-identical
    /// logs.
    pub reproducible: bool,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
    pub marginal_tol: f64,
    pub heldout_fraction: f64,
    pub view: ViewConfig,
    pub encoder: EncoderConfig,
    pub dataset: DatasetSpec,
    pub spectral_k_eigen: usize,
    pub spectral_regions: usize,
    pub spectral_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            epochs: 150,
            batch_size: 4,
            gamma: 0.02,
            learning_rate: 1e-2,
            lr_decay: 0.1,
            warmup_epochs: 40,
            eps_start: 0.5,
            eps_end: 1.0,
            temperature: 0.1,
            mode: Mode::Weak,
            beta: 0.0,
            no_ot: false,
            self_match: false,
            per_image_ot: false,
            nu_b_mode: NuBatchMode::Fractional,
            mce_pool: McePool::Max,
            match_per_patch_average: false,
            strict_density: true,
            reproducible: true,
            sinkhorn_tol: 1e-6,
            sinkhorn_max_iter: 500,
            marginal_tol: 1e-6,
            heldout_fraction: 0.2,
            view: ViewConfig::default(),
            encoder: EncoderConfig::default(),
            dataset: DatasetSpec::desk(42, 200),
            spectral_k_eigen: 4,
            spectral_regions: 3,
            spectral_seed: 42,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return cfg_err("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return cfg_err("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return cfg_err(format!("gamma must lie in [0,1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return cfg_err(format!("beta must lie in [0,1], got {}", self.beta));
        }
        if self.learning_rate <= 0.0 || self.lr_decay <= 0.0 {
            return cfg_err("learning_rate and lr_decay must be positive".into());
        }
        if self.eps_start <= 0.0 || self.eps_end <= 0.0 {
            return cfg_err("epsilon schedule must stay positive".into());
        }
        if self.temperature <= 0.0 {
            return cfg_err("temperature must be positive".into());
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return cfg_err("heldout_fraction must lie in [0,1)".into());
        }
        if self.warmup_epochs >= self.epochs {
            return cfg_err(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.dataset.image_size != self.encoder.view_side {
            return cfg_err(format!(
                "dataset image size {} must equal encoder view side {}",
                self.dataset.image_size, self.encoder.view_side
            ));
        }
        if self.encoder.view_side % self.encoder.patch != 0 {
            return cfg_err("patch size must divide the view side".into());
        }
        if self.spectral_k_eigen < 2 || self.spectral_regions == 0 {
            return cfg_err("spectral settings out of range".into());
        }
        Ok(())
    }

    /// ε for a given epoch under the linear schedule.
    pub fn epsilon_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 || self.eps_start == self.eps_end {
            return self.eps_end;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.eps_start + (self.eps_end - self.eps_start) * t
    }

    /// Serializes every key; `parse` on the output reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("gamma", self.gamma.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("eps_start", self.eps_start.to_string());
        kv("eps_end", self.eps_end.to_string());
        kv("temperature", self.temperature.to_string());
        kv("mode", self.mode.as_str().to_string());
        kv("beta", self.beta.to_string());
        kv("no_ot", self.no_ot.to_string());
        kv("self_match", self.self_match.to_string());
        kv("per_image_ot", self.per_image_ot.to_string());
        kv("nu_b_mode", self.nu_b_mode.as_str().to_string());
        kv("mce_pool", self.mce_pool.as_str().to_string());
        kv(
            "match_per_patch_average",
            self.match_per_patch_average.to_string(),
        );
        kv("strict_density", self.strict_density.to_string());
        kv("reproducible", self.reproducible.to_string());
        kv("sinkhorn_tol", self.sinkhorn_tol.to_string());
        kv("sinkhorn_max_iter", self.sinkhorn_max_iter.to_string());
        kv("marginal_tol", self.marginal_tol.to_string());
        kv("heldout_fraction", self.heldout_fraction.to_string());
        kv("view.global_scale_min", self.view.global_scale.0.to_string());
        kv("view.global_scale_max", self.view.global_scale.1.to_string());
        kv("view.local_area_min", self.view.local_area.0.to_string());
        kv("view.local_area_max", self.view.local_area.1.to_string());
        kv("view.jitter", self.view.jitter.to_string());
        kv("enc.patch", self.encoder.patch.to_string());
        kv("enc.embed", self.encoder.embed.to_string());
        kv("enc.hidden", self.encoder.hidden.to_string());
        kv("enc.blocks", self.encoder.blocks.to_string());
        kv("data.seed", self.dataset.seed.to_string());
        kv("data.images", self.dataset.image_count.to_string());
        kv("data.classes", self.dataset.class_count.to_string());
        kv("data.size", self.dataset.image_size.to_string());
        kv("data.shapes_min", self.dataset.shapes_per_image.0.to_string());
        kv("data.shapes_max", self.dataset.shapes_per_image.1.to_string());
        kv("data.noise", self.dataset.noise_sigma.to_string());
        kv(
            "data.weights",
            self.dataset
                .class_weights
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("spectral.k_eigen", self.spectral_k_eigen.to_string());
        kv("spectral.regions", self.spectral_regions.to_string());
        kv("spectral.seed", self.spectral_seed.to_string());
        s
    }

    /// Parses `key=value` lines over the defaults; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        // The dataset spec's derived fields follow the class count.
        cfg.dataset.signatures = crate::synth::default_signatures(cfg.dataset.class_count);
        if cfg.dataset.class_weights.len() != cfg.dataset.class_count - 1 {
            cfg.dataset.class_weights = vec![1.0; cfg.dataset.class_count - 1];
        }
        cfg.encoder.view_side = cfg.dataset.image_size;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one key; shared by the file parser and CLI flag overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse()
                .map_err(|e| Error::Config(format!("{key}: {e}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "eps_start" => self.eps_start = num(key, value)?,
            "eps_end" => self.eps_end = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "beta" => self.beta = num(key, value)?,
            "no_ot" => self.no_ot = num(key, value)?,
            "self_match" => self.self_match = num(key, value)?,
            "per_image_ot" => self.per_image_ot = num(key, value)?,
            "nu_b_mode" => self.nu_b_mode = value.parse()?,
            "mce_pool" => self.mce_pool = value.parse()?,
            "match_per_patch_average" => self.match_per_patch_average = num(key, value)?,
            "strict_density" => self.strict_density = num(key, value)?,
            "reproducible" => self.reproducible = num(key, value)?,
            "sinkhorn_tol" => self.sinkhorn_tol = num(key, value)?,
            "sinkhorn_max_iter" => self.sinkhorn_max_iter = num(key, value)?,
            "marginal_tol" => self.marginal_tol = num(key, value)?,
            "heldout_fraction" => self.heldout_fraction = num(key, value)?,
            "view.global_scale_min" => self.view.global_scale.0 = num(key, value)?,
            "view.global_scale_max" => self.view.global_scale.1 = num(key, value)?,
            "view.local_area_min" => self.view.local_area.0 = num(key, value)?,
            "view.local_area_max" => self.view.local_area.1 = num(key, value)?,
            "view.jitter" => self.view.jitter = num(key, value)?,
            "enc.patch" => self.encoder.patch = num(key, value)?,
            "enc.embed" => self.encoder.embed = num(key, value)?,
            "enc.hidden" => self.encoder.hidden = num(key, value)?,
            "enc.blocks" => self.encoder.blocks = num(key, value)?,
            "data.seed" => self.dataset.seed = num(key, value)?,
            "data.images" => self.dataset.image_count = num(key, value)?,
            "data.classes" => self.dataset.class_count = num(key, value)?,
            "data.size" => self.dataset.image_size = num(key, value)?,
            "data.shapes_min" => self.dataset.shapes_per_image.0 = num(key, value)?,
            "data.shapes_max" => self.dataset.shapes_per_image.1 = num(key, value)?,
            "data.noise" => self.dataset.noise_sigma = num(key, value)?,
            "data.weights" => {
                self.dataset.class_weights = value
                    .split(',')
                    .map(|v| num::<f64>(key, v.trim()))
                    .collect::<Result<_>>()?;
            }
            "spectral.k_eigen" => self.spectral_k_eigen = num(key, value)?,
            "spectral.regions" => self.spectral_regions = num(key, value)?,
            "spectral.seed" => self.spectral_seed = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown key '{other}'")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.gamma = 0.2;
        cfg.mode = Mode::BetaMix;
        cfg.beta = 0.5;
        cfg.dataset.image_count = 50;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("gama=0.5\n").unwrap_err();
        assert!(err.to_string().contains("unknown key 'gama'"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::parse("# a comment\n\ngamma=0.1 # trailing\n").unwrap();
        assert_eq!(cfg.gamma, 0.1);
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(RunConfig::parse("gamma=1.5\n").is_err());
        assert!(RunConfig::parse("beta=-0.2\n").is_err());
        assert!(RunConfig::parse("epochs=0\n").is_err());
        assert!(RunConfig::parse("mode=nope\n").is_err());
    }

    #[test]
    fn epsilon_schedule_endpoints() {
        let mut cfg = RunConfig::default();
        cfg.eps_start = 0.5;
        cfg.eps_end = 1.0;
        cfg.epochs = 11;
        assert_eq!(cfg.epsilon_at(0), 0.5);
        assert_eq!(cfg.epsilon_at(10), 1.0);
        assert!((cfg.epsilon_at(5) - 0.75).abs() < 1e-12);
        cfg.eps_start = 1.0;
        assert_eq!(cfg.epsilon_at(3), 1.0);
    }
}
