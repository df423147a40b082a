//! Run configuration: flat `key = value` lines grouped under `[section]`
//! headers. Unknown sections and keys are rejected; `to_text` renders every
//! resolved value so the result can be embedded in artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::aesemb::LabelPair;
use crate::diffusion::{DiffusionSchedule, SamplerConfig};
use crate::error::{config_err, Result};
use crate::lora::LoraConfig;
use crate::synthdata::DatasetConfig;
use crate::textenc::TextConfig;
use crate::train::TrainConfig;
use crate::unet::UNetConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub heads: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let u = UNetConfig::default();
        Self {
            image_size: u.image_size,
            base_channels: u.base_channels,
            channel_mults: u.channel_mults,
            attention_resolutions: u.attention_resolutions,
            heads: u.heads,
            time_embed_dim: u.time_embed_dim,
            groups: u.groups,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub samples: usize,
    pub positive_rate: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 5000,
            positive_rate: 0.5,
            seed: 0xda7a,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Images per assignment in each attribute-shift comparison.
    pub samples: usize,
    pub alignment_samples: usize,
    /// Images per set for the Fréchet distance.
    pub fid_samples: usize,
    pub lambdas: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            alignment_samples: 48,
            fid_samples: 64,
            lambdas: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            seed: 0xe7a1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathConfig {
    /// Vocabulary file; empty means the built-in vocabulary.
    pub vocab: String,
    pub aesemb: String,
    pub dataset: String,
    pub base_checkpoint: String,
    pub checkpoint: String,
    pub plugin: String,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            vocab: String::new(),
            aesemb: "aesemb.bin".into(),
            dataset: "dataset".into(),
            base_checkpoint: "base.vmck".into(),
            checkpoint: "vmix.vmck".into(),
            plugin: "vmix.plugin".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub text: TextConfig,
    pub labels: Vec<LabelPair>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub vmix_enabled: bool,
    pub vmix_seed: u64,
    pub lora_enabled: bool,
    pub lora: LoraConfig,
    pub lora_seed: u64,
    /// Pretraining of the denoiser itself.
    pub base_train: TrainConfig,
    /// Adapter training on the frozen base.
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            text: TextConfig::default(),
            labels: crate::aesemb::default_label_pairs(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerConfig::default(),
            vmix_enabled: true,
            vmix_seed: 0x7a11,
            lora_enabled: true,
            lora: LoraConfig::default(),
            lora_seed: 0x10a,
            base_train: TrainConfig {
                seed: 0xba5e,
                ..TrainConfig::default()
            },
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

enum Field<'a> {
    Usize(&'a mut usize),
    U64(&'a mut u64),
    F64(&'a mut f64),
    Bool(&'a mut bool),
    Str(&'a mut String),
    Usizes(&'a mut Vec<usize>),
    F64s(&'a mut Vec<f64>),
    Strs(&'a mut Vec<String>),
    Labels(&'a mut Vec<LabelPair>),
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .or_else(|_| config_err(format!("{key}: cannot parse {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    match v.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).or_else(|_| config_err(format!("{key}: bad hex {v:?}"))),
        None => parse_num(key, v),
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

impl Field<'_> {
    fn set(self, key: &str, v: &str) -> Result<()> {
        match self {
            Field::Usize(x) => *x = parse_num(key, v)?,
            Field::U64(x) => *x = parse_u64(key, v)?,
            Field::F64(x) => *x = parse_num(key, v)?,
            Field::Bool(x) => {
                *x = match v {
                    "true" | "yes" | "1" => true,
                    "false" | "no" | "0" => false,
                    _ => return config_err(format!("{key}: expected a boolean, got {v:?}")),
                }
            }
            Field::Str(x) => *x = v.to_string(),
            Field::Usizes(x) => *x = split_list(v).map(|s| parse_num(key, s)).collect::<Result<_>>()?,
            Field::F64s(x) => *x = split_list(v).map(|s| parse_num(key, s)).collect::<Result<_>>()?,
            Field::Strs(x) => *x = split_list(v).map(str::to_string).collect(),
            Field::Labels(x) => {
                *x = split_list(v)
                    .map(|item| {
                        let parts: Vec<&str> = item.split(':').map(str::trim).collect();
                        match parts[..] {
                            [dim, pos, neg] if !dim.is_empty() && !pos.is_empty() && !neg.is_empty() => {
                                Ok(LabelPair::new(dim, pos, neg))
                            }
                            _ => config_err(format!("{key}: expected dimension:positive:negative, got {item:?}")),
                        }
                    })
                    .collect::<Result<_>>()?
            }
        }
        Ok(())
    }

    fn render(&self) -> String {
        fn join<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
        }
        match self {
            Field::Usize(x) => x.to_string(),
            Field::U64(x) => format!("{:#x}", x),
            Field::F64(x) => format!("{:?}", x),
            Field::Bool(x) => x.to_string(),
            Field::Str(x) => x.to_string(),
            Field::Usizes(x) => join(x),
            Field::F64s(x) => x.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", "),
            Field::Strs(x) => join(x),
            Field::Labels(x) => x
                .iter()
                .map(|p| format!("{}:{}:{}", p.dimension_name, p.positive, p.negative_identifier))
                .collect::<Vec<_>>()
                .join(", "),
        }
    }
}

fn train_fields<'a>(section: &'static str, t: &'a mut TrainConfig, out: &mut Vec<(&'static str, &'static str, Field<'a>)>) {
    out.extend([
        (section, "steps", Field::Usize(&mut t.steps)),
        (section, "batch_size", Field::Usize(&mut t.batch_size)),
        (section, "lr", Field::F64(&mut t.lr)),
        (section, "warmup", Field::Usize(&mut t.warmup)),
        (section, "cosine", Field::Bool(&mut t.cosine)),
        (section, "beta1", Field::F64(&mut t.beta1)),
        (section, "beta2", Field::F64(&mut t.beta2)),
        (section, "adam_eps", Field::F64(&mut t.adam_eps)),
        (section, "weight_decay", Field::F64(&mut t.weight_decay)),
        (section, "grad_clip", Field::F64(&mut t.grad_clip)),
        (section, "p_drop", Field::F64(&mut t.p_drop)),
        (section, "lambda", Field::F64(&mut t.lambda)),
        (section, "log_every", Field::Usize(&mut t.log_every)),
        (section, "checkpoint_every", Field::Usize(&mut t.checkpoint_every)),
        (section, "seed", Field::U64(&mut t.seed)),
    ]);
}

impl RunConfig {
    fn fields(&mut self) -> Vec<(&'static str, &'static str, Field<'_>)> {
        let mut f = vec![
            ("text", "context_len", Field::Usize(&mut self.text.context_len)),
            ("text", "dim", Field::Usize(&mut self.text.dim)),
            ("text", "layers", Field::Usize(&mut self.text.layers)),
            ("text", "heads", Field::Usize(&mut self.text.heads)),
            ("text", "seed", Field::U64(&mut self.text.seed)),
            ("text", "rare_tokens", Field::Usize(&mut self.text.rare_tokens)),
            ("aesemb", "labels", Field::Labels(&mut self.labels)),
            ("model", "image_size", Field::Usize(&mut self.model.image_size)),
            ("model", "base_channels", Field::Usize(&mut self.model.base_channels)),
            ("model", "channel_mults", Field::Usizes(&mut self.model.channel_mults)),
            ("model", "attention_resolutions", Field::Usizes(&mut self.model.attention_resolutions)),
            ("model", "heads", Field::Usize(&mut self.model.heads)),
            ("model", "time_embed_dim", Field::Usize(&mut self.model.time_embed_dim)),
            ("model", "groups", Field::Usize(&mut self.model.groups)),
            ("model", "seed", Field::U64(&mut self.model.seed)),
            ("diffusion", "timesteps", Field::Usize(&mut self.schedule.timesteps)),
            ("diffusion", "beta_start", Field::F64(&mut self.schedule.beta_start)),
            ("diffusion", "beta_end", Field::F64(&mut self.schedule.beta_end)),
            ("sampler", "steps", Field::Usize(&mut self.sampler.steps)),
            ("sampler", "cfg_scale", Field::F64(&mut self.sampler.cfg_scale)),
            ("sampler", "lambda", Field::F64(&mut self.sampler.lambda)),
            ("sampler", "eta", Field::F64(&mut self.sampler.eta)),
            ("vmix", "enabled", Field::Bool(&mut self.vmix_enabled)),
            ("vmix", "seed", Field::U64(&mut self.vmix_seed)),
            ("lora", "enabled", Field::Bool(&mut self.lora_enabled)),
            ("lora", "rank", Field::Usize(&mut self.lora.rank)),
            ("lora", "alpha", Field::F64(&mut self.lora.alpha)),
            ("lora", "selector", Field::Strs(&mut self.lora.selector)),
            ("lora", "seed", Field::U64(&mut self.lora_seed)),
        ];
        train_fields("base", &mut self.base_train, &mut f);
        train_fields("train", &mut self.train, &mut f);
        f.extend([
            ("data", "samples", Field::Usize(&mut self.data.samples)),
            ("data", "positive_rate", Field::F64(&mut self.data.positive_rate)),
            ("data", "seed", Field::U64(&mut self.data.seed)),
            ("eval", "samples", Field::Usize(&mut self.eval.samples)),
            ("eval", "alignment_samples", Field::Usize(&mut self.eval.alignment_samples)),
            ("eval", "fid_samples", Field::Usize(&mut self.eval.fid_samples)),
            ("eval", "lambdas", Field::F64s(&mut self.eval.lambdas)),
            ("eval", "seed", Field::U64(&mut self.eval.seed)),
            ("paths", "vocab", Field::Str(&mut self.paths.vocab)),
            ("paths", "aesemb", Field::Str(&mut self.paths.aesemb)),
            ("paths", "dataset", Field::Str(&mut self.paths.dataset)),
            ("paths", "base_checkpoint", Field::Str(&mut self.paths.base_checkpoint)),
            ("paths", "checkpoint", Field::Str(&mut self.paths.checkpoint)),
            ("paths", "plugin", Field::Str(&mut self.paths.plugin)),
        ]);
        f
    }

    /// Applies `section.key = value`.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let field = self
            .fields()
            .into_iter()
            .find(|(s, k, _)| *s == section && *k == key)
            .map(|(_, _, f)| f);
        match field {
            Some(f) => f.set(&format!("{section}.{key}"), value),
            None => config_err(format!("unknown key {section}.{key}")),
        }
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| crate::Error::Config(format!("override {spec:?} is not key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| crate::Error::Config(format!("override key {path:?} needs a section")))?;
        self.set(section, key, value.trim())
    }

    /// Defaults overlaid with `text`, validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config_err(format!("line {}: expected key = value", lineno + 1));
            };
            let Some(s) = &section else {
                return config_err(format!("line {}: key outside any section", lineno + 1));
            };
            cfg.set(s, k.trim(), v.trim())
                .map_err(|e| crate::Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        let mut current = "";
        for (s, k, f) in copy.fields() {
            if s != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{s}]");
                current = s;
            }
            let _ = writeln!(out, "{k} = {}", f.render());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.unet_config().validate()?;
        self.schedule()?;
        self.sampler.validate(&self.schedule()?)?;
        self.base_train.validate()?;
        self.train.validate()?;
        if self.text.context_len < 2 {
            return config_err("text.context_len must leave room for [CLS] and [EOS]");
        }
        if self.lora_enabled && self.lora.rank == 0 {
            return config_err("lora.rank must be positive");
        }
        if self.eval.fid_samples < 2 || self.eval.samples == 0 {
            return config_err("eval sample counts must be positive");
        }
        Ok(())
    }

    pub fn unet_config(&self) -> UNetConfig {
        let m = &self.model;
        UNetConfig {
            image_size: m.image_size,
            in_channels: 3,
            base_channels: m.base_channels,
            channel_mults: m.channel_mults.clone(),
            attention_resolutions: m.attention_resolutions.clone(),
            heads: m.heads,
            time_embed_dim: m.time_embed_dim,
            groups: m.groups,
            context_len: self.text.context_len,
            context_dim: self.text.dim,
            label_pairs: self.labels.len(),
            timesteps: self.schedule.timesteps,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        let s = &self.schedule;
        DiffusionSchedule::linear(s.timesteps, s.beta_start, s.beta_end)
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            size: self.model.image_size,
            positive_rate: self.data.positive_rate,
            dims: self.labels.len(),
        }
    }

    pub fn vocab_path(&self) -> Option<PathBuf> {
        (!self.paths.vocab.is_empty()).then(|| PathBuf::from(&self.paths.vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert!(text.contains("[sampler]\nsteps = 25\ncfg_scale = 7.5\nlambda = 1.0"));
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse(
            "# tiny\n[model]\nimage_size = 16\nchannel_mults = 1, 2\n[aesemb]\nlabels = color:vibrant color:[V1], focus:sharp focus:[V2]\n[text]\nseed = 0x10\n",
        )
        .unwrap();
        assert_eq!(cfg.model.image_size, 16);
        assert_eq!(cfg.text.seed, 16);
        assert_eq!(cfg.labels.len(), 2);
        assert_eq!(cfg.unet_config().label_pairs, 2);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let mut c = RunConfig::default();
        c.apply_override("train.lr=0.5").unwrap();
        assert_eq!(c.train.lr, 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "[model]\nimage_sise = 16\n",
            "[nosuch]\nx = 1\n",
            "steps = 3\n",
            "[model]\nimage_size\n",
            "[model]\nimage_size = big\n",
            "[sampler]\nsteps = 2000\n",
            "[vmix]\nenabled = maybe\n",
            "[aesemb]\nlabels = color:vibrant\n",
            "[model]\nimage_size = 30\n",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad:?} accepted");
        }
        assert!(RunConfig::load(Path::new("/nonexistent/run.ini")).is_err());
    }
}
