//! Training configuration and the flat `key = value` config file grammar.
//!
//! ```text
//! # comment
//! [model]
//! d = 16
//! components = ssa,rcpg,dgso
//! [train]
//! epochs_stage1 = 20
//! train.seed = 3        # dotted keys work in any section
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};

use crate::data::synthetic::{GeneratorConfig, TextMode};
use crate::error::{KgcmError, Result};
use crate::model::ssa::Pooling;
use crate::text::EncoderKind;

/// Which optional model components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ComponentSet {
    pub ssa: bool,
    pub rcpg: bool,
    pub dgso: bool,
    pub acmfw: bool,
    pub lpo: bool,
}

impl ComponentSet {
    pub const NAMES: [&'static str; 5] = ["ssa", "rcpg", "dgso", "acmfw", "lpo"];

    pub fn all() -> Self {
        Self::cumulative(5)
    }

    pub fn none() -> Self {
        Self::cumulative(0)
    }

    /// The first `k` components in ablation order.
    pub fn cumulative(k: usize) -> Self {
        Self {
            ssa: k >= 1,
            rcpg: k >= 2,
            dgso: k >= 3,
            acmfw: k >= 4,
            lpo: k >= 5,
        }
    }

    fn flags(&self) -> [bool; 5] {
        [self.ssa, self.rcpg, self.dgso, self.acmfw, self.lpo]
    }

    pub fn is_none(&self) -> bool {
        self.flags().iter().all(|f| !f)
    }

    /// Whether the first training stage has anything to learn.
    pub fn has_stage1(&self) -> bool {
        self.dgso || self.lpo
    }
}

impl std::fmt::Display for ComponentSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_none() {
            return f.write_str("none");
        }
        let names: Vec<&str> = Self::NAMES
            .iter()
            .zip(self.flags())
            .filter_map(|(n, on)| on.then_some(*n))
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for ComponentSet {
    type Err = KgcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => return Ok(Self::all()),
            "none" | "" => return Ok(Self::none()),
            _ => {}
        }
        let mut set = Self::none();
        for part in s.split(',').map(str::trim) {
            match part {
                "ssa" => set.ssa = true,
                "rcpg" => set.rcpg = true,
                "dgso" => set.dgso = true,
                "acmfw" => set.acmfw = true,
                "lpo" => set.lpo = true,
                other => {
                    return Err(KgcmError::Config(format!(
                        "unknown component `{other}` (expected one of {})",
                        Self::NAMES.join(", ")
                    )))
                }
            }
        }
        Ok(set)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    /// Node history length.
    pub n: usize,
    /// Query/key projection width in the graph stage; defaults to `n`.
    pub n_proj: Option<usize>,
    pub layers: usize,
    pub window: usize,
    pub horizon: usize,
    pub blocks: usize,
    pub heads: usize,
    pub slots_per_day: usize,
    pub pooling: Pooling,
    pub components: ComponentSet,
    pub lr: f64,
    pub lambda_prompt: f64,
    pub ema_lambda: f64,
    pub clip_norm: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub encoder: EncoderKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n: 8,
            n_proj: None,
            layers: 2,
            window: 48,
            horizon: 12,
            blocks: 2,
            heads: 1,
            slots_per_day: 48,
            pooling: Pooling::Last,
            components: ComponentSet::all(),
            lr: 1e-3,
            lambda_prompt: 0.1,
            ema_lambda: 0.9,
            clip_norm: 5.0,
            epochs_stage1: 100,
            epochs_stage2: 200,
            batch_size: 32,
            seed: 0,
            encoder: EncoderKind::Hashed,
        }
    }
}

impl TrainConfig {
    pub fn n_proj(&self) -> usize {
        self.n_proj.unwrap_or(self.n)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d", self.d),
            ("model.n", self.n),
            ("model.n_proj", self.n_proj()),
            ("model.layers", self.layers),
            ("model.window", self.window),
            ("model.horizon", self.horizon),
            ("model.blocks", self.blocks),
            ("model.heads", self.heads),
            ("model.slots_per_day", self.slots_per_day),
            ("train.batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(KgcmError::Config(format!("{name} must be positive")));
            }
        }
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return Err(KgcmError::Config(format!(
                "at least one epoch per stage required (got {}, {})",
                self.epochs_stage1, self.epochs_stage2
            )));
        }
        if self.d < 2 {
            return Err(KgcmError::Config("model.d must be at least 2".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(KgcmError::Config(format!(
                "model.d = {} is not divisible by model.heads = {}",
                self.d, self.heads
            )));
        }
        if self.components.dgso && self.n < 2 {
            return Err(KgcmError::Config(
                "model.n must be at least 2 when dgso is enabled".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(KgcmError::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda_prompt >= 0.0 && self.lambda_prompt.is_finite()) {
            return Err(KgcmError::Config(format!(
                "train.lambda_prompt must be >= 0, got {}",
                self.lambda_prompt
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_lambda) {
            return Err(KgcmError::Config(format!(
                "train.ema_lambda must lie in [0, 1], got {}",
                self.ema_lambda
            )));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(KgcmError::Config(format!(
                "train.clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }

    /// Renders the config in the file grammar; `parse_config_str` reads it
    /// back to an equal value.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "n = {}", self.n);
        if let Some(p) = self.n_proj {
            let _ = writeln!(s, "n_proj = {p}");
        }
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "horizon = {}", self.horizon);
        let _ = writeln!(s, "blocks = {}", self.blocks);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "slots_per_day = {}", self.slots_per_day);
        let _ = writeln!(
            s,
            "pooling = {}",
            match self.pooling {
                Pooling::Last => "last",
                Pooling::Mean => "mean",
            }
        );
        let _ = writeln!(s, "components = {}", self.components);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "lr = {:e}", self.lr);
        let _ = writeln!(s, "lambda_prompt = {:e}", self.lambda_prompt);
        let _ = writeln!(s, "ema_lambda = {:e}", self.ema_lambda);
        let _ = writeln!(s, "clip_norm = {:e}", self.clip_norm);
        let _ = writeln!(s, "epochs_stage1 = {}", self.epochs_stage1);
        let _ = writeln!(s, "epochs_stage2 = {}", self.epochs_stage2);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "[text]");
        match &self.encoder {
            EncoderKind::Hashed => {
                let _ = writeln!(s, "encoder = hashed");
            }
            EncoderKind::File(p) => {
                let _ = writeln!(s, "encoder = file");
                let _ = writeln!(s, "embedding_file = \"{}\"", p.display());
            }
        }
        s
    }
}

/// Everything a config file can set.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub mape_floor: f64,
    /// Whether a seed was given explicitly in the file.
    pub train_seed_set: bool,
    pub data_seed_set: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
            mape_floor: 1.0,
            train_seed_set: false,
            data_seed_set: false,
        }
    }
}

impl Config {
    /// Applies the seed precedence `flag > config > KGCM_SEED > 0` to both
    /// the training and the generator seed.
    pub fn resolve_seeds(&mut self, flag: Option<u64>) -> Result<()> {
        let env = match std::env::var("KGCM_SEED") {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| {
                KgcmError::Config(format!("KGCM_SEED must be an unsigned integer, got `{v}`"))
            })?),
            Err(_) => None,
        };
        let pick = |set: bool, current: u64| flag.or(set.then_some(current)).or(env).unwrap_or(0);
        self.train.seed = pick(self.train_seed_set, self.train.seed);
        self.generator.seed = pick(self.data_seed_set, self.generator.seed);
        Ok(())
    }
}

pub fn parse_config(path: &Path) -> Result<Config> {
    let content = std::fs::read_to_string(path).map_err(|e| KgcmError::io(path, e))?;
    parse_config_str(&content).map_err(|e| match e {
        KgcmError::Config(msg) => KgcmError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse::<T>().map_err(|_| {
        KgcmError::Config(format!(
            "line {line}: `{key}` expects a {}, got `{value}`",
            std::any::type_name::<T>().rsplit("::").next().unwrap_or("value")
        ))
    })
}

pub fn parse_config_str(content: &str) -> Result<Config> {
    let mut cfg = Config::default();
    let mut section = String::new();
    let mut encoder_name: Option<String> = None;
    let mut embedding_file: Option<PathBuf> = None;
    for (i, raw) in content.lines().enumerate() {
        let line_no = i + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !["model", "train", "data", "text", "metrics"].contains(&name) {
                return Err(KgcmError::Config(format!("line {line_no}: unknown section `[{name}]`")));
            }
            section = name.to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(KgcmError::Config(format!(
                "line {line_no}: expected `key = value`, got `{line}`"
            )));
        };
        let key = key.trim();
        let value = unquote(value.trim());
        let full = if key.contains('.') {
            key.to_string()
        } else if section.is_empty() {
            return Err(KgcmError::Config(format!(
                "line {line_no}: key `{key}` outside of any section"
            )));
        } else {
            format!("{section}.{key}")
        };
        let t = &mut cfg.train;
        let g = &mut cfg.generator;
        let v = value;
        let l = line_no;
        match full.as_str() {
            "model.d" => t.d = parse_value(&full, v, l)?,
            "model.n" => t.n = parse_value(&full, v, l)?,
            "model.n_proj" => t.n_proj = Some(parse_value(&full, v, l)?),
            "model.layers" => t.layers = parse_value(&full, v, l)?,
            "model.window" => t.window = parse_value(&full, v, l)?,
            "model.horizon" => t.horizon = parse_value(&full, v, l)?,
            "model.blocks" => t.blocks = parse_value(&full, v, l)?,
            "model.heads" => t.heads = parse_value(&full, v, l)?,
            "model.slots_per_day" => t.slots_per_day = parse_value(&full, v, l)?,
            "model.pooling" => {
                t.pooling = match v {
                    "last" => Pooling::Last,
                    "mean" => Pooling::Mean,
                    _ => {
                        return Err(KgcmError::Config(format!(
                            "line {l}: `model.pooling` must be last or mean, got `{v}`"
                        )))
                    }
                }
            }
            "model.components" => t.components = v.parse()?,
            "train.lr" => t.lr = parse_value(&full, v, l)?,
            "train.lambda_prompt" => t.lambda_prompt = parse_value(&full, v, l)?,
            "train.ema_lambda" => t.ema_lambda = parse_value(&full, v, l)?,
            "train.clip_norm" => t.clip_norm = parse_value(&full, v, l)?,
            "train.epochs_stage1" => t.epochs_stage1 = parse_value(&full, v, l)?,
            "train.epochs_stage2" => t.epochs_stage2 = parse_value(&full, v, l)?,
            "train.batch_size" => t.batch_size = parse_value(&full, v, l)?,
            "train.seed" => {
                t.seed = parse_value(&full, v, l)?;
                cfg.train_seed_set = true;
            }
            "data.regions" => g.regions = parse_value(&full, v, l)?,
            "data.days" => g.days = parse_value(&full, v, l)?,
            "data.slots_per_day" => g.slots_per_day = parse_value(&full, v, l)?,
            "data.base_demand" => g.base_demand = parse_value(&full, v, l)?,
            "data.daily_amp" => g.daily_amp = parse_value(&full, v, l)?,
            "data.weekly_amp" => g.weekly_amp = parse_value(&full, v, l)?,
            "data.noise_sigma" => g.noise_sigma = parse_value(&full, v, l)?,
            "data.event_rate" => g.event_rate = parse_value(&full, v, l)?,
            "data.event_amp_lo" => g.event_amp_range.0 = parse_value(&full, v, l)?,
            "data.event_amp_hi" => g.event_amp_range.1 = parse_value(&full, v, l)?,
            "data.shared_event_fraction" => g.shared_event_fraction = parse_value(&full, v, l)?,
            "data.start" => {
                g.start = DateTime::parse_from_rfc3339(v)
                    .map_err(|_| {
                        KgcmError::Config(format!("line {l}: `data.start` must be an RFC 3339 timestamp, got `{v}`"))
                    })?
                    .with_timezone(&Utc)
            }
            "data.seed" => {
                g.seed = parse_value(&full, v, l)?;
                cfg.data_seed_set = true;
            }
            "text.mode" | "data.text_mode" => {
                g.text_mode = match v {
                    "full" => TextMode::Full,
                    "shuffled" => TextMode::Shuffled,
                    "empty" => TextMode::Empty,
                    _ => {
                        return Err(KgcmError::Config(format!(
                            "line {l}: text mode must be full, shuffled or empty, got `{v}`"
                        )))
                    }
                }
            }
            "text.encoder" => encoder_name = Some(v.to_string()),
            "text.embedding_file" => embedding_file = Some(PathBuf::from(v)),
            "metrics.mape_floor" => cfg.mape_floor = parse_value(&full, v, l)?,
            _ => {
                return Err(KgcmError::Config(format!("line {l}: unknown key `{full}`")));
            }
        }
    }
    cfg.train.encoder = match (encoder_name.as_deref(), embedding_file) {
        (None | Some("hashed"), None) => EncoderKind::Hashed,
        (None | Some("file"), Some(p)) => EncoderKind::File(p),
        (Some("file"), None) => {
            return Err(KgcmError::Config(
                "text.encoder = file requires text.embedding_file".into(),
            ))
        }
        (Some("hashed"), Some(_)) => {
            return Err(KgcmError::Config(
                "text.embedding_file given but text.encoder = hashed".into(),
            ))
        }
        (Some(other), _) => {
            return Err(KgcmError::Config(format!(
                "text.encoder must be hashed or file, got `{other}`"
            )))
        }
    };
    cfg.train.validate()?;
    cfg.generator.validate()?;
    if cfg.mape_floor.is_nan() || cfg.mape_floor <= 0.0 {
        return Err(KgcmError::Config(format!(
            "metrics.mape_floor must be positive, got {}",
            cfg.mape_floor
        )));
    }
    Ok(cfg)
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn overrides_and_dotted_keys() {
        let cfg = parse_config_str("[model]\nd = 16 # dim\nmodel.window = 24\n").unwrap();
        assert_eq!(cfg.train.d, 16);
        assert_eq!(cfg.train.window, 24);
        let cfg = parse_config_str("model.d = 16\n").unwrap();
        assert_eq!(cfg.train.d, 16);
    }

    #[test]
    fn rejections() {
        let e = parse_config_str("train.ema_lambda = 1.5").unwrap_err();
        assert!(e.to_string().contains("ema_lambda"), "{e}");
        let e = parse_config_str("[model]\nwidth = 3").unwrap_err();
        assert!(e.to_string().contains("model.width"), "{e}");
        let e = parse_config_str("[model]\nd = sixteen").unwrap_err();
        assert!(e.to_string().contains("model.d"), "{e}");
        let e = parse_config_str("[train]\nepochs_stage1 = 0\nepochs_stage2 = 0").unwrap_err();
        assert!(e.to_string().contains("at least one epoch"), "{e}");
    }

    #[test]
    fn config_text_round_trip() {
        let mut t = TrainConfig {
            d: 12,
            n_proj: Some(3),
            lr: 3.7e-4,
            components: "ssa,dgso".parse().unwrap(),
            encoder: EncoderKind::File("emb #1.csv".into()),
            pooling: Pooling::Mean,
            seed: u64::MAX,
            ..TrainConfig::default()
        };
        let back = parse_config_str(&t.to_config_text()).unwrap().train;
        assert_eq!(back, t);
        t.encoder = EncoderKind::Hashed;
        t.components = ComponentSet::none();
        assert_eq!(parse_config_str(&t.to_config_text()).unwrap().train, t);
    }

    #[test]
    fn component_parsing() {
        assert_eq!("all".parse::<ComponentSet>().unwrap(), ComponentSet::all());
        assert_eq!(ComponentSet::cumulative(2).to_string(), "ssa,rcpg");
        assert!("ssa,bogus".parse::<ComponentSet>().is_err());
    }
}
