//! `key=value` run configuration with `#` comments.
//!
//! Unknown keys, duplicate keys and malformed values are errors. The canonical
//! text (every key, fixed order) is what gets hashed into run manifests.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geomodel::{GridSpec, WorldParams, DRIVER_VARIABLES};
use crate::ingest::{CleanMode, FeatureSchema, DEFAULT_AVERAGES_MIN, DEFAULT_LAGS_MIN, DEFAULT_PERCENTILE};
use crate::losses::{format_tail_terms, parse_tail_terms, LossKind, LossSpec, TailTerm, DEFAULT_TAIL_TERMS};
use crate::models::{Arch, ArchKind, BaselineArch, ConvDecoderArch, DeconvLayer, MultiTaskArch};
use crate::train::{check_combination, AdamConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key '{key}'")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: invalid value for '{key}': {message}")]
    BadValue { line: usize, key: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub arch: ArchKind,
    /// Hidden widths; `None` selects the architecture default.
    pub arch_widths: Option<Vec<usize>>,
    pub arch_dropout: f64,
    pub loss: LossKind,
    pub tail_terms: Vec<TailTerm>,
    pub dist_bins: usize,
    pub dist_rescale: bool,
    pub lambda_cce: f64,
    pub sparse_normalize: bool,
    pub sparse_step: i64,
    pub optim: AdamConfig,
    /// `None` selects the per-architecture default.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub f32_params: bool,
    pub split_sat: u32,
    pub val_fraction: f64,
    pub grid_n_lat: usize,
    pub grid_n_mlt: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub conv_final_kernel: usize,
    pub conv_overlap: usize,
    pub clean_percentile: f64,
    pub clean_threshold: Option<f64>,
    pub variables: Vec<String>,
    pub lags_min: Vec<u32>,
    pub averages_min: Vec<u32>,
    pub world: WorldParams,
    pub obs_cadence: i64,
    pub map_vmin: f64,
    pub map_vmax: f64,
    pub eval_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arch: ArchKind::Baseline,
            arch_widths: None,
            arch_dropout: 0.5,
            loss: LossKind::Mse,
            tail_terms: DEFAULT_TAIL_TERMS.to_vec(),
            dist_bins: 50,
            dist_rescale: true,
            lambda_cce: 1.0,
            sparse_normalize: true,
            sparse_step: 300,
            optim: AdamConfig::default(),
            batch_size: None,
            max_epochs: 200,
            patience: 10,
            f32_params: true,
            split_sat: 1,
            val_fraction: 0.2,
            grid_n_lat: 128,
            grid_n_mlt: 128,
            conv_channels: vec![4, 4],
            conv_kernels: vec![9, 5],
            conv_strides: vec![2, 4],
            conv_final_kernel: 7,
            conv_overlap: 3,
            clean_percentile: DEFAULT_PERCENTILE,
            clean_threshold: None,
            variables: DRIVER_VARIABLES.iter().map(|s| s.to_string()).collect(),
            lags_min: DEFAULT_LAGS_MIN.to_vec(),
            averages_min: DEFAULT_AVERAGES_MIN.to_vec(),
            world: WorldParams::default(),
            obs_cadence: 60,
            map_vmin: 6.0,
            map_vmax: 14.0,
            eval_bins: 50,
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("cannot parse list element '{}'", s.trim())))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn scalar<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse '{v}'"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

impl RunConfig {
    /// Every accepted key in canonical order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "arch",
        "arch.widths",
        "arch.dropout",
        "loss",
        "tail.terms",
        "dist.bins",
        "dist.rescale",
        "multitask.lambda_cce",
        "sparse.normalize",
        "sparse.step",
        "optim.lr",
        "optim.beta1",
        "optim.beta2",
        "optim.eps",
        "train.batch_size",
        "train.max_epochs",
        "train.patience",
        "train.f32_params",
        "split.sat",
        "split.val_fraction",
        "grid.n_lat",
        "grid.n_mlt",
        "conv.channels",
        "conv.kernels",
        "conv.strides",
        "conv.final_kernel",
        "conv.overlap",
        "clean.percentile",
        "clean.threshold",
        "features.variables",
        "features.lags",
        "features.averages",
        "world.n_sats",
        "world.cadence",
        "world.obs_cadence",
        "world.noise_sigma",
        "world.activity_window_s",
        "world.coupling_scale",
        "oval.center_base",
        "oval.center_activity",
        "oval.center_mlt_amplitude",
        "oval.width_base",
        "oval.width_activity",
        "oval.peak_base",
        "oval.peak_activity",
        "oval.polar_background",
        "oval.subauroral_background",
        "oval.kappa",
        "map.vmin",
        "map.vmax",
        "eval.bins",
    ];

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if !Self::KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
            if seen.contains(&key) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            seen.push(key);
            cfg.set(key, value)
                .map_err(|message| ConfigError::BadValue { line, key: key.into(), message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let o = &mut self.world.oval;
        match key {
            "seed" => self.seed = scalar(v)?,
            "arch" => self.arch = v.parse()?,
            "arch.widths" => self.arch_widths = if v == "default" { None } else { Some(list(v)?) },
            "arch.dropout" => self.arch_dropout = scalar(v)?,
            "loss" => self.loss = v.parse()?,
            "tail.terms" => self.tail_terms = parse_tail_terms(v).map_err(|e| e.to_string())?,
            "dist.bins" => self.dist_bins = scalar(v)?,
            "dist.rescale" => self.dist_rescale = flag(v)?,
            "multitask.lambda_cce" => self.lambda_cce = scalar(v)?,
            "sparse.normalize" => self.sparse_normalize = flag(v)?,
            "sparse.step" => self.sparse_step = scalar(v)?,
            "optim.lr" => self.optim.lr = scalar(v)?,
            "optim.beta1" => self.optim.beta1 = scalar(v)?,
            "optim.beta2" => self.optim.beta2 = scalar(v)?,
            "optim.eps" => self.optim.eps = scalar(v)?,
            "train.batch_size" => self.batch_size = if v == "default" { None } else { Some(scalar(v)?) },
            "train.max_epochs" => self.max_epochs = scalar(v)?,
            "train.patience" => self.patience = scalar(v)?,
            "train.f32_params" => self.f32_params = flag(v)?,
            "split.sat" => self.split_sat = scalar(v)?,
            "split.val_fraction" => self.val_fraction = scalar(v)?,
            "grid.n_lat" => self.grid_n_lat = scalar(v)?,
            "grid.n_mlt" => self.grid_n_mlt = scalar(v)?,
            "conv.channels" => self.conv_channels = list(v)?,
            "conv.kernels" => self.conv_kernels = list(v)?,
            "conv.strides" => self.conv_strides = list(v)?,
            "conv.final_kernel" => self.conv_final_kernel = scalar(v)?,
            "conv.overlap" => self.conv_overlap = scalar(v)?,
            "clean.percentile" => self.clean_percentile = scalar(v)?,
            "clean.threshold" => self.clean_threshold = if v == "none" { None } else { Some(scalar(v)?) },
            "features.variables" => self.variables = v.split(',').map(|s| s.trim().to_string()).collect(),
            "features.lags" => self.lags_min = list(v)?,
            "features.averages" => self.averages_min = list(v)?,
            "world.n_sats" => self.world.n_sats = scalar(v)?,
            "world.cadence" => self.world.cadence = scalar(v)?,
            "world.obs_cadence" => self.obs_cadence = scalar(v)?,
            "world.noise_sigma" => self.world.noise_sigma = scalar(v)?,
            "world.activity_window_s" => self.world.activity_window_s = scalar(v)?,
            "world.coupling_scale" => self.world.coupling_scale = scalar(v)?,
            "oval.center_base" => o.center_base = scalar(v)?,
            "oval.center_activity" => o.center_activity = scalar(v)?,
            "oval.center_mlt_amplitude" => o.center_mlt_amplitude = scalar(v)?,
            "oval.width_base" => o.width_base = scalar(v)?,
            "oval.width_activity" => o.width_activity = scalar(v)?,
            "oval.peak_base" => o.peak_base = scalar(v)?,
            "oval.peak_activity" => o.peak_activity = scalar(v)?,
            "oval.polar_background" => o.polar_background = scalar(v)?,
            "oval.subauroral_background" => o.subauroral_background = scalar(v)?,
            "oval.kappa" => o.kappa = scalar(v)?,
            "map.vmin" => self.map_vmin = scalar(v)?,
            "map.vmax" => self.map_vmax = scalar(v)?,
            "eval.bins" => self.eval_bins = scalar(v)?,
            _ => unreachable!("key list checked by caller"),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let o = &self.world.oval;
        match key {
            "seed" => self.seed.to_string(),
            "arch" => self.arch.to_string(),
            "arch.widths" => self.arch_widths.as_deref().map_or("default".into(), join),
            "arch.dropout" => self.arch_dropout.to_string(),
            "loss" => self.loss_spec().name().to_string(),
            "tail.terms" => format_tail_terms(&self.tail_terms),
            "dist.bins" => self.dist_bins.to_string(),
            "dist.rescale" => self.dist_rescale.to_string(),
            "multitask.lambda_cce" => self.lambda_cce.to_string(),
            "sparse.normalize" => self.sparse_normalize.to_string(),
            "sparse.step" => self.sparse_step.to_string(),
            "optim.lr" => self.optim.lr.to_string(),
            "optim.beta1" => self.optim.beta1.to_string(),
            "optim.beta2" => self.optim.beta2.to_string(),
            "optim.eps" => self.optim.eps.to_string(),
            "train.batch_size" => self.batch_size.map_or("default".into(), |b| b.to_string()),
            "train.max_epochs" => self.max_epochs.to_string(),
            "train.patience" => self.patience.to_string(),
            "train.f32_params" => self.f32_params.to_string(),
            "split.sat" => self.split_sat.to_string(),
            "split.val_fraction" => self.val_fraction.to_string(),
            "grid.n_lat" => self.grid_n_lat.to_string(),
            "grid.n_mlt" => self.grid_n_mlt.to_string(),
            "conv.channels" => join(&self.conv_channels),
            "conv.kernels" => join(&self.conv_kernels),
            "conv.strides" => join(&self.conv_strides),
            "conv.final_kernel" => self.conv_final_kernel.to_string(),
            "conv.overlap" => self.conv_overlap.to_string(),
            "clean.percentile" => self.clean_percentile.to_string(),
            "clean.threshold" => self.clean_threshold.map_or("none".into(), |t| t.to_string()),
            "features.variables" => self.variables.join(","),
            "features.lags" => join(&self.lags_min),
            "features.averages" => join(&self.averages_min),
            "world.n_sats" => self.world.n_sats.to_string(),
            "world.cadence" => self.world.cadence.to_string(),
            "world.obs_cadence" => self.obs_cadence.to_string(),
            "world.noise_sigma" => self.world.noise_sigma.to_string(),
            "world.activity_window_s" => self.world.activity_window_s.to_string(),
            "world.coupling_scale" => self.world.coupling_scale.to_string(),
            "oval.center_base" => o.center_base.to_string(),
            "oval.center_activity" => o.center_activity.to_string(),
            "oval.center_mlt_amplitude" => o.center_mlt_amplitude.to_string(),
            "oval.width_base" => o.width_base.to_string(),
            "oval.width_activity" => o.width_activity.to_string(),
            "oval.peak_base" => o.peak_base.to_string(),
            "oval.peak_activity" => o.peak_activity.to_string(),
            "oval.polar_background" => o.polar_background.to_string(),
            "oval.subauroral_background" => o.subauroral_background.to_string(),
            "oval.kappa" => o.kappa.to_string(),
            "map.vmin" => self.map_vmin.to_string(),
            "map.vmax" => self.map_vmax.to_string(),
            "eval.bins" => self.eval_bins.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Every key in canonical order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            writeln!(s, "{key}={}", self.get(key)).expect("writing to a String");
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.world.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.obs_cadence <= 0 || self.sparse_step <= 0 {
            return bad("world.obs_cadence and sparse.step must be positive".into());
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return bad(format!("split.val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if !(0.0..=100.0).contains(&self.clean_percentile) {
            return bad(format!("clean.percentile must lie in [0, 100], got {}", self.clean_percentile));
        }
        if self.dist_bins == 0 || self.eval_bins == 0 {
            return bad("bin counts must be positive".into());
        }
        if !(self.map_vmax > self.map_vmin) {
            return bad("map.vmax must exceed map.vmin".into());
        }
        if !(self.lambda_cce >= 0.0) {
            return bad("multitask.lambda_cce must be >= 0".into());
        }
        if self.conv_channels.len() != self.conv_kernels.len() || self.conv_kernels.len() != self.conv_strides.len() {
            return bad("conv.channels, conv.kernels and conv.strides need equal lengths".into());
        }
        self.grid().map_err(ConfigError::Invalid)?;
        self.schema().map_err(ConfigError::Invalid)?;
        self.train_config(ArchKind::Baseline).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        check_combination(self.arch, &self.loss_spec()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        match self.loss {
            LossKind::Mse => LossSpec::Mse,
            LossKind::Tail => LossSpec::Tail { terms: self.tail_terms.clone() },
            LossKind::Dist => LossSpec::Dist { n_bins: self.dist_bins, rescale: self.dist_rescale },
            LossKind::MultiTask => LossSpec::MultiTask { lambda_cce: self.lambda_cce },
            LossKind::SparseMasked => LossSpec::SparseMasked { normalize: self.sparse_normalize },
        }
    }

    pub fn train_config(&self, kind: ArchKind) -> TrainConfig {
        let mut t = TrainConfig::default_for(kind);
        t.optim = self.optim;
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        t.max_epochs = self.max_epochs;
        t.patience = self.patience;
        t.seed = self.seed;
        t.loss = self.loss_spec();
        t.f32_params = self.f32_params;
        t
    }

    pub fn grid(&self) -> Result<GridSpec, String> {
        GridSpec::new(self.grid_n_lat, self.grid_n_mlt).map_err(|e| e.to_string())
    }

    pub fn clean_mode(&self) -> CleanMode {
        match self.clean_threshold {
            Some(t) => CleanMode::Threshold(t),
            None => CleanMode::Percentile(self.clean_percentile),
        }
    }

    /// Feature schema for point models (spatial block included).
    pub fn schema(&self) -> Result<FeatureSchema, String> {
        FeatureSchema::build(&self.variables, &self.lags_min, &self.averages_min, true).map_err(|e| e.to_string())
    }

    /// Architecture for an input width `d`.
    pub fn build_arch(&self, d: usize) -> Result<Arch, String> {
        let hidden = self.arch_widths.clone();
        let arch = match self.arch {
            ArchKind::Baseline => {
                let mut a = BaselineArch::default_for(d);
                if let Some(h) = hidden {
                    a.widths = std::iter::once(d).chain(h).chain(std::iter::once(1)).collect();
                }
                a.dropout = self.arch_dropout;
                Arch::Baseline(a)
            }
            ArchKind::MultiTask => {
                let mut a = MultiTaskArch::default_for(d);
                if let Some(h) = hidden {
                    a.trunk = std::iter::once(d).chain(h).collect();
                }
                a.dropout = self.arch_dropout;
                Arch::MultiTask(a)
            }
            ArchKind::ConvDecoder => {
                let grid = self.grid()?;
                let stride: usize = self.conv_strides.iter().product();
                if stride == 0 || grid.n_lat % stride != 0 {
                    return Err(format!("grid edge {} is not divisible by the total stride {stride}", grid.n_lat));
                }
                let base = grid.n_lat / stride;
                let hidden = hidden.unwrap_or_else(|| vec![256, 64, 32]);
                Arch::ConvDecoder(ConvDecoderArch {
                    trunk: std::iter::once(d).chain(hidden).chain(std::iter::once(base * base)).collect(),
                    base,
                    deconv: self
                        .conv_channels
                        .iter()
                        .zip(&self.conv_kernels)
                        .zip(&self.conv_strides)
                        .map(|((&channels, &kernel), &stride)| DeconvLayer { channels, kernel, stride })
                        .collect(),
                    final_kernel: self.conv_final_kernel,
                    overlap: self.conv_overlap,
                    dropout: self.arch_dropout,
                    n_lat: grid.n_lat,
                    n_mlt: grid.n_mlt,
                })
            }
        };
        arch.validate().map_err(|e| e.to_string())?;
        Ok(arch)
    }
}
