//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! rejected; missing keys keep their defaults.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::aggregation::{DdtConfig, DEFAULT_MAX_OFFSET};
use crate::cost_volume::{DEFAULT_EPSILON, DEFAULT_LAMBDA};
use crate::error::{DacmError, Result};
use crate::kernels::KernelKind;
use crate::pipeline::PyramidConfig;

pub const MAX_DDT_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone_seed: u64,
    pub kernel: KernelKind,
    /// when false the kernel stays at its initial values and the sampler is skipped
    pub learn_kernel: bool,
    pub shared_lengthscale: bool,
    pub lambda: f64,
    pub epsilon: f64,
    pub heads: usize,
    pub head_dim: usize,
    pub embed_channels: usize,
    pub offset_hidden: usize,
    pub max_offset: f64,
    pub ddt_layers: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub decoder_hidden: usize,
    pub gp_lr: f64,
    pub agg_lr: f64,
    pub gp_steps: usize,
    pub epochs: usize,
    pub image_size: usize,
    pub resolutions: [usize; 3],
    pub channels: [usize; 3],
    pub query_pool: usize,
    pub support_pool: usize,
    pub shots: usize,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub clutter: f64,
    pub oracle: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ddt = DdtConfig::default();
        RunConfig {
            seed: 0,
            backbone_seed: 0,
            kernel: KernelKind::RbfArd,
            learn_kernel: true,
            shared_lengthscale: false,
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            heads: ddt.heads,
            head_dim: ddt.head_dim,
            embed_channels: ddt.embed_channels,
            offset_hidden: ddt.offset_hidden,
            max_offset: DEFAULT_MAX_OFFSET,
            ddt_layers: 2,
            conv_channels: 4,
            conv_kernel: 3,
            decoder_hidden: 8,
            gp_lr: 1e-2,
            agg_lr: 1e-3,
            gp_steps: 100,
            epochs: 50,
            image_size: 32,
            resolutions: [16, 8, 4],
            channels: [8, 16, 32],
            query_pool: 8,
            support_pool: 4,
            shots: 1,
            train_episodes: 200,
            eval_episodes: 100,
            clutter: 0.5,
            oracle: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DacmError::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(DacmError::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(DacmError::Config(format!("{key} needs three comma-separated values")));
    }
    Ok([parse(key, parts[0])?, parse(key, parts[1])?, parse(key, parts[2])?])
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DacmError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(DacmError::Config(format!("duplicate key {key}")));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "backbone_seed" => self.backbone_seed = parse(key, value)?,
            "kernel" => self.kernel = value.parse()?,
            "learn_kernel" => self.learn_kernel = parse_bool(key, value)?,
            "shared_lengthscale" => self.shared_lengthscale = parse_bool(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "head_dim" => self.head_dim = parse(key, value)?,
            "embed_channels" => self.embed_channels = parse(key, value)?,
            "offset_hidden" => self.offset_hidden = parse(key, value)?,
            "max_offset" => self.max_offset = parse(key, value)?,
            "ddt_layers" => self.ddt_layers = parse(key, value)?,
            "conv_channels" => self.conv_channels = parse(key, value)?,
            "conv_kernel" => self.conv_kernel = parse(key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse(key, value)?,
            "gp_lr" => self.gp_lr = parse(key, value)?,
            "agg_lr" => self.agg_lr = parse(key, value)?,
            "gp_steps" => self.gp_steps = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "resolutions" => self.resolutions = parse_triple(key, value)?,
            "channels" => self.channels = parse_triple(key, value)?,
            "query_pool" => self.query_pool = parse(key, value)?,
            "support_pool" => self.support_pool = parse(key, value)?,
            "shots" => self.shots = parse(key, value)?,
            "train_episodes" => self.train_episodes = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "clutter" => self.clutter = parse(key, value)?,
            "oracle" => self.oracle = parse_bool(key, value)?,
            _ => return Err(DacmError::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DacmError::Config(m.to_string()));
        if self.ddt_layers > MAX_DDT_LAYERS {
            return bad("ddt_layers must be at most 3");
        }
        if self.heads == 0 || self.head_dim == 0 || self.embed_channels == 0 || self.offset_hidden == 0 {
            return bad("attention sizes must be positive");
        }
        if self.conv_channels == 0 || self.decoder_hidden == 0 {
            return bad("channel counts must be positive");
        }
        if self.conv_kernel % 2 == 0 {
            return bad("conv_kernel must be odd");
        }
        if !(self.lambda >= 0.0) || !(self.epsilon > 0.0) {
            return bad("lambda must be >= 0 and epsilon > 0");
        }
        if !(self.gp_lr >= 0.0) || !(self.agg_lr >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        if !(self.max_offset >= 0.0) || !(self.clutter >= 0.0) {
            return bad("max_offset and clutter must be >= 0");
        }
        if self.shots == 0 || self.query_pool == 0 || self.support_pool == 0 {
            return bad("shots and pool sizes must be positive");
        }
        self.pyramid().validate()
    }

    pub fn pyramid(&self) -> PyramidConfig {
        PyramidConfig {
            image_size: self.image_size,
            resolutions: self.resolutions,
            channels: self.channels,
        }
    }

    pub fn ddt(&self) -> DdtConfig {
        DdtConfig {
            embed_channels: self.embed_channels,
            heads: self.heads,
            head_dim: self.head_dim,
            offset_hidden: self.offset_hidden,
            max_offset: self.max_offset,
        }
    }

    /// Every key in a fixed order; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let triple = |t: [usize; 3]| format!("{},{},{}", t[0], t[1], t[2]);
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("backbone_seed", self.backbone_seed.to_string());
        put("kernel", self.kernel.to_string());
        put("learn_kernel", self.learn_kernel.to_string());
        put("shared_lengthscale", self.shared_lengthscale.to_string());
        put("lambda", format!("{:?}", self.lambda));
        put("epsilon", format!("{:?}", self.epsilon));
        put("heads", self.heads.to_string());
        put("head_dim", self.head_dim.to_string());
        put("embed_channels", self.embed_channels.to_string());
        put("offset_hidden", self.offset_hidden.to_string());
        put("max_offset", format!("{:?}", self.max_offset));
        put("ddt_layers", self.ddt_layers.to_string());
        put("conv_channels", self.conv_channels.to_string());
        put("conv_kernel", self.conv_kernel.to_string());
        put("decoder_hidden", self.decoder_hidden.to_string());
        put("gp_lr", format!("{:?}", self.gp_lr));
        put("agg_lr", format!("{:?}", self.agg_lr));
        put("gp_steps", self.gp_steps.to_string());
        put("epochs", self.epochs.to_string());
        put("image_size", self.image_size.to_string());
        put("resolutions", triple(self.resolutions));
        put("channels", triple(self.channels));
        put("query_pool", self.query_pool.to_string());
        put("support_pool", self.support_pool.to_string());
        put("shots", self.shots.to_string());
        put("train_episodes", self.train_episodes.to_string());
        put("eval_episodes", self.eval_episodes.to_string());
        put("clutter", format!("{:?}", self.clutter));
        put("oracle", self.oracle.to_string());
        s
    }
}
