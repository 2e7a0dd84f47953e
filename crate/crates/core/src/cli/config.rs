//! `key = value` run configuration shared by every subcommand.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. Command-line flags are applied after the file through the same
//! setters, so they always win.

use std::path::Path;
use std::str::FromStr;

use tcna::branch::BranchConfig;
use tcna::data::{Modality, Preset, SynthSpec};
use tcna::fusion::Strategy;
use tcna::train::{FusionSettings, SgdConfig};
use tcna::{DType, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: DType,
    pub snippets: usize,
    pub modality: Modality,
    pub strategy: Strategy,

    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_power: f64,

    pub channels: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub input_dropout: f64,
    pub block_dropout: f64,
    pub head_dropout: f64,

    pub fusion_epochs: usize,
    pub fusion_lr: f64,
    pub fusion_embed_dim: usize,
    pub fusion_head_dropout: f64,

    pub synth: SynthSpec,

    pub bench_dim: usize,
    pub bench_channels: usize,
    pub bench_batch: usize,
    pub bench_reps: usize,
    pub bench_warmup: usize,
    pub bench_classes: [usize; 3],

    pub obslen: Vec<usize>,
    pub gradcheck_configs: usize,
}

impl Default for RunConfig {
    /// Desk-scale settings that train the synthetic presets in minutes.
    fn default() -> Self {
        Self {
            seed: 0,
            dtype: DType::F32,
            snippets: 21,
            modality: Modality::Rgb,
            strategy: Strategy::MutualPairwise,
            epochs: 20,
            lr: 0.05,
            batch: 32,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_power: 0.99,
            channels: 64,
            kernel: 3,
            dilations: vec![1, 2, 3, 4],
            input_dropout: 0.3,
            block_dropout: 0.3,
            head_dropout: 0.7,
            fusion_epochs: 10,
            fusion_lr: 0.01,
            fusion_embed_dim: 64,
            fusion_head_dropout: 0.8,
            synth: SynthSpec::default(),
            bench_dim: 1024,
            bench_channels: 1024,
            bench_batch: 1,
            bench_reps: 30,
            bench_warmup: 5,
            bench_classes: [2513, 125, 352],
            obslen: vec![3, 7, 13, 21],
            gradcheck_configs: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let items = value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<Vec<usize>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("`{key}` needs at least one value")));
    }
    Ok(items)
}

impl RunConfig {
    /// Full-scale training hyperparameters (1024 channels, 80 epochs).
    pub fn full() -> Self {
        Self {
            epochs: 80,
            lr: 5e-4,
            batch: 64,
            channels: 1024,
            block_dropout: 0.5,
            fusion_epochs: 80,
            fusion_lr: 5e-4,
            fusion_embed_dim: 1024,
            ..Self::default()
        }
    }

    /// `default`, `full`, or the path of a config file.
    pub fn load(source: &str) -> Result<Self> {
        match source {
            "default" => Ok(Self::default()),
            "full" => Ok(Self::full()),
            path => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {path}"), e))?;
                Self::parse_text(&text, Path::new(path))
            }
        }
    }

    pub fn parse_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        // The preset decides the synthetic defaults, so it is applied first
        // and the remaining synthetic keys refine it.
        let mut entries = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected `key = value`", origin.display(), no + 1))
            })?;
            entries.push((no + 1, key.trim().to_string(), value.trim().to_string()));
        }
        entries.sort_by_key(|(_, k, _)| k != "preset");
        for (no, key, value) in entries {
            cfg.set(&key, &value)
                .map_err(|e| Error::Config(format!("{}:{no}: {}", origin.display(), strip(e))))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "dtype" => {
                self.dtype = match value {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("dtype must be f32 or f64, got `{value}`"))),
                }
            }
            "snippets" => self.snippets = parse(key, value)?,
            "modality" => self.modality = value.parse()?,
            "strategy" => self.strategy = value.parse()?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "lr_power" => self.lr_power = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "kernel" => self.kernel = parse(key, value)?,
            "dilations" => self.dilations = parse_list(key, value)?,
            "input_dropout" => self.input_dropout = parse(key, value)?,
            "block_dropout" => self.block_dropout = parse(key, value)?,
            "head_dropout" => self.head_dropout = parse(key, value)?,
            "fusion_epochs" => self.fusion_epochs = parse(key, value)?,
            "fusion_lr" => self.fusion_lr = parse(key, value)?,
            "fusion_embed_dim" => self.fusion_embed_dim = parse(key, value)?,
            "fusion_head_dropout" => self.fusion_head_dropout = parse(key, value)?,
            "preset" => *s = SynthSpec::preset(value.parse::<Preset>()?),
            "num_verbs" => s.num_verbs = parse(key, value)?,
            "num_nouns" => s.num_nouns = parse(key, value)?,
            "num_actions" => s.num_actions = parse(key, value)?,
            "dim_rgb" => s.dims[0] = parse(key, value)?,
            "dim_flow" => s.dims[1] = parse(key, value)?,
            "dim_obj" => s.dims[2] = parse(key, value)?,
            "synth_snippets" => s.snippets = parse(key, value)?,
            "sigma" => s.sigma = parse(key, value)?,
            "signal" => s.signal = parse(key, value)?,
            "early_snippets" => s.early_snippets = parse(key, value)?,
            "early_gain" => s.early_gain = parse(key, value)?,
            "train_per_class" => s.train_per_class = parse(key, value)?,
            "val_per_class" => s.val_per_class = parse(key, value)?,
            "bench_dim" => self.bench_dim = parse(key, value)?,
            "bench_channels" => self.bench_channels = parse(key, value)?,
            "bench_batch" => self.bench_batch = parse(key, value)?,
            "bench_reps" => self.bench_reps = parse(key, value)?,
            "bench_warmup" => self.bench_warmup = parse(key, value)?,
            "bench_actions" => self.bench_classes[0] = parse(key, value)?,
            "bench_verbs" => self.bench_classes[1] = parse(key, value)?,
            "bench_nouns" => self.bench_classes[2] = parse(key, value)?,
            "obslen" => self.obslen = parse_list(key, value)?,
            "gradcheck_configs" => self.gradcheck_configs = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr0: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch,
            power: self.lr_power,
            seed: self.seed,
        }
    }

    pub fn fusion_sgd(&self) -> SgdConfig {
        SgdConfig {
            lr0: self.fusion_lr,
            epochs: self.fusion_epochs,
            ..self.sgd()
        }
    }

    pub fn fusion_settings(&self, strategy: Strategy) -> FusionSettings {
        FusionSettings {
            strategy,
            embed_dim: self.fusion_embed_dim,
            head_dropout: self.fusion_head_dropout,
        }
    }

    /// Branch hyperparameters for `input_dim`-wide features and the given
    /// class counts `[actions, verbs, nouns]`.
    pub fn branch(&self, input_dim: usize, classes: [usize; 3]) -> BranchConfig {
        BranchConfig {
            input_dim,
            channels: self.channels,
            kernel: self.kernel,
            dilations: self.dilations.clone(),
            input_dropout: self.input_dropout,
            block_dropout: self.block_dropout,
            head_dropout: self.head_dropout,
            num_actions: classes[0],
            num_verbs: classes[1],
            num_nouns: classes[2],
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
