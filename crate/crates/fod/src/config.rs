//! Plain key=value run configuration.
//!
//! One knob per line, `#` starts a comment, unknown keys are rejected.
//! Defaults follow the method's published hyperparameters where they exist
//! (3 layers, 8 heads, lambda 0.5/0.5, lr 1e-4, 100 epochs); sizes default
//! to desk scale.

use crate::bank::BankKind;
use crate::error::{Error, Result};
use crate::scoring::Criterion;
use crate::synth::{AnomalyKind, SyntheticSpec, TextureFamily};
use crate::training::{LossWeights, OptMode, TrainSettings};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    // synthetic data
    pub image_size: usize,
    pub texture: TextureFamily,
    pub anomaly_kinds: Vec<AnomalyKind>,
    pub anomaly_fraction: f64,
    pub train_images: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    // model
    pub feature_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    // training
    pub epochs: usize,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub entropy: bool,
    pub opt: OptMode,
    // reference bank
    pub bank: BankKind,
    pub coreset_budget: usize,
    pub nearest_window: usize,
    pub prototypes_per_position: usize,
    pub prototype_iters: usize,
    pub codebook_size: usize,
    pub codebook_epochs: usize,
    // scoring
    pub criterion: Criterion,
    pub smooth_sigma: f64,
    // ablation grid
    pub ablate_banks: Vec<BankKind>,
    pub ablate_criteria: Vec<Criterion>,
    pub ablate_entropy: Vec<bool>,
    pub ablate_opts: Vec<OptMode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            image_size: 64,
            texture: TextureFamily::Grating,
            anomaly_kinds: vec![
                AnomalyKind::LocalPatch,
                AnomalyKind::GlobalFrequencyShift,
                AnomalyKind::QuadrantSwap,
            ],
            anomaly_fraction: 0.04,
            train_images: 32,
            test_normal: 20,
            test_anomalous: 20,
            feature_dim: 32,
            d_model: 64,
            layers: 3,
            heads: 8,
            epochs: 100,
            lr: 1e-4,
            lambda1: 0.5,
            lambda2: 0.5,
            entropy: true,
            opt: OptMode::TwoPhase,
            bank: BankKind::Mean,
            coreset_budget: 64,
            nearest_window: 3,
            prototypes_per_position: 4,
            prototype_iters: 20,
            codebook_size: 64,
            codebook_epochs: 20,
            criterion: Criterion::RecAndDiv,
            smooth_sigma: 0.0,
            ablate_banks: vec![BankKind::Mean, BankKind::Coreset],
            ablate_criteria: vec![Criterion::Rec, Criterion::Div, Criterion::RecAndDiv],
            ablate_entropy: vec![true, false],
            ablate_opts: vec![OptMode::TwoPhase],
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(Error::config(format!("{key}: expected on/off, got '{other}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T>(value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "image_size" => self.image_size = parse_num(key, value)?,
            "texture" => self.texture = TextureFamily::parse(value)?,
            "anomaly_kinds" => self.anomaly_kinds = parse_list(value, AnomalyKind::parse)?,
            "anomaly_fraction" => self.anomaly_fraction = parse_num(key, value)?,
            "train_images" => self.train_images = parse_num(key, value)?,
            "test_normal" => self.test_normal = parse_num(key, value)?,
            "test_anomalous" => self.test_anomalous = parse_num(key, value)?,
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "d_model" => self.d_model = parse_num(key, value)?,
            "layers" => self.layers = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "lambda1" => self.lambda1 = parse_num(key, value)?,
            "lambda2" => self.lambda2 = parse_num(key, value)?,
            "entropy" => self.entropy = parse_bool(key, value)?,
            "opt" => self.opt = OptMode::parse(value)?,
            "bank" => self.bank = BankKind::parse(value)?,
            "coreset_budget" => self.coreset_budget = parse_num(key, value)?,
            "nearest_window" => self.nearest_window = parse_num(key, value)?,
            "prototypes_per_position" => self.prototypes_per_position = parse_num(key, value)?,
            "prototype_iters" => self.prototype_iters = parse_num(key, value)?,
            "codebook_size" => self.codebook_size = parse_num(key, value)?,
            "codebook_epochs" => self.codebook_epochs = parse_num(key, value)?,
            "criterion" => self.criterion = Criterion::parse(value)?,
            "smooth_sigma" => self.smooth_sigma = parse_num(key, value)?,
            "ablate_banks" => self.ablate_banks = parse_list(value, BankKind::parse)?,
            "ablate_criteria" => self.ablate_criteria = parse_list(value, Criterion::parse)?,
            "ablate_entropy" => {
                self.ablate_entropy = parse_list(value, |s| parse_bool("ablate_entropy", s))?
            }
            "ablate_opts" => self.ablate_opts = parse_list(value, OptMode::parse)?,
            other => return Err(Error::config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::config("image_size must be a positive multiple of 16"));
        }
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction < 1.0) {
            return Err(Error::config("anomaly_fraction must be in (0, 1)"));
        }
        if self.train_images == 0 {
            return Err(Error::config("train_images must be >= 1"));
        }
        if self.feature_dim < 3 {
            return Err(Error::config("feature_dim must be >= 3"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config("heads must divide d_model"));
        }
        if self.layers == 0 {
            return Err(Error::config("layers must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("lr must be finite and >= 0"));
        }
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0)
            || !(self.lambda2.is_finite() && self.lambda2 >= 0.0)
        {
            return Err(Error::config("lambda weights must be finite and >= 0"));
        }
        if self.nearest_window == 0 || self.nearest_window % 2 == 0 {
            return Err(Error::config("nearest_window must be odd"));
        }
        if self.anomaly_kinds.is_empty() && self.test_anomalous > 0 {
            return Err(Error::config("anomaly_kinds must not be empty"));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            size: self.image_size,
            texture: self.texture,
            kinds: self.anomaly_kinds.clone(),
            anomaly_fraction: self.anomaly_fraction,
            train_images: self.train_images,
            test_normal: self.test_normal,
            test_anomalous: self.test_anomalous,
            seed: self.seed,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            lr: self.lr,
            seed: self.seed,
            weights: LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
            },
            entropy: self.entropy,
            opt: self.opt,
            loss_scale: 1.0,
        }
    }
}
