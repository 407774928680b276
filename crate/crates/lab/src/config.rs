//! `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Radii and attack step sizes are written as pixel fractions `n/255`. Lists
//! are comma-separated. Every key is optional; [`RunConfig::default`] lists
//! the defaults, and [`RunConfig::render`] writes a complete file back.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;
use tima_core::attacks::{AttackConfig, TextSource};
use tima_core::data::SyntheticSpec;
use tima_core::harness::TrainConfig;
use tima_core::losses::MarginSign;
use tima_core::model::{EncoderConfig, DEFAULT_TEMPERATURE};

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {kind}")]
pub struct ConfigError {
    /// 1-based; 0 for checks spanning several keys.
    pub line: usize,
    pub kind: ConfigErrorKind,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigErrorKind {
    #[error("expected `key = value`, found {0:?}")]
    Syntax(String),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} given twice")]
    DuplicateKey(String),
    #[error("{key}: expected {expected}, found {found:?}")]
    TypeError {
        key: String,
        expected: &'static str,
        found: String,
    },
    #[error("{key}: {message}")]
    RangeError { key: String, message: String },
}

/// A radius or step expressed as `numerator/255`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PixelFraction(pub u32);

impl PixelFraction {
    pub fn value(self) -> f64 {
        f64::from(self.0) / 255.0
    }
}

impl fmt::Display for PixelFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/255", self.0)
    }
}

impl FromStr for PixelFraction {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        let s = s.trim();
        if s == "0" {
            return Ok(Self(0));
        }
        let (num, den) = s.split_once('/').ok_or(())?;
        if den.trim() != "255" {
            return Err(());
        }
        num.trim().parse().map(Self).map_err(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Root of every file a run writes.
    pub out: PathBuf,
    pub data: SyntheticSpec,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub temperature: f64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub train_epsilon: PixelFraction,
    pub train_step: PixelFraction,
    pub eval_epsilons: Vec<PixelFraction>,
    pub eval_step: PixelFraction,
    pub eval_steps: usize,
    pub eval_restarts: usize,
    pub eval_text: TextSource,
    pub probe_shift: f64,
    pub sweep_margins: Vec<f64>,
    pub sweep_etas: Vec<f64>,
    pub sweep_epsilons: Vec<PixelFraction>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let finetune = TrainConfig::finetune();
        Self {
            seed: 0,
            out: PathBuf::from("tima-out"),
            data: SyntheticSpec::default(),
            hidden_dims: EncoderConfig::default().hidden_dims,
            embed_dim: EncoderConfig::default().embed_dim,
            temperature: DEFAULT_TEMPERATURE,
            pretrain: TrainConfig::pretrain(),
            finetune,
            train_epsilon: PixelFraction(1),
            train_step: PixelFraction(1),
            eval_epsilons: [0, 1, 4, 8].map(PixelFraction).to_vec(),
            eval_step: PixelFraction(1),
            eval_steps: 10,
            eval_restarts: 0,
            eval_text: TextSource::Student,
            probe_shift: 0.02,
            sweep_margins: vec![0.1],
            sweep_etas: vec![0.95],
            sweep_epsilons: vec![PixelFraction(1)],
        }
    }
}

impl RunConfig {
    /// One seed drives data, weights, shuffling and attacks.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.data.pixels(),
            hidden_dims: self.hidden_dims.clone(),
            embed_dim: self.embed_dim,
            num_classes: self.data.num_classes(),
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig {
            seed: self.seed,
            ..self.finetune.clone()
        };
        cfg.loss_weights.temperature = self.temperature;
        cfg.train_attack = AttackConfig {
            epsilon: self.train_epsilon.value(),
            step_size: self.train_step.value(),
            seed: self.seed,
            ..cfg.train_attack
        };
        cfg
    }

    /// Evaluation attack with the radius left at zero.
    pub fn eval_attack(&self) -> AttackConfig {
        AttackConfig {
            epsilon: 0.0,
            step_size: self.eval_step.value(),
            steps: self.eval_steps,
            restarts: self.eval_restarts,
            seed: self.seed,
            text_source: self.eval_text,
        }
    }

    pub fn probe_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    /// Every key with its current value, in schema order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        self.staged_entries()
            .into_iter()
            .map(|(_, k, v)| (k, v))
            .collect()
    }

    /// Keys that shape the artifacts of `stages`, as `key = value` lines.
    /// Cached artifacts are reused only while this text is unchanged.
    pub fn stamp(&self, stages: &[Stage]) -> String {
        self.staged_entries()
            .into_iter()
            .filter(|(s, _, _)| stages.contains(s))
            .map(|(_, k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// The settings echoed into reports: everything except the output location.
    pub fn echo(&self) -> Vec<(&'static str, String)> {
        self.staged_entries()
            .into_iter()
            .filter(|(s, _, _)| *s != Stage::Output)
            .map(|(_, k, v)| (k, v))
            .collect()
    }

    fn staged_entries(&self) -> Vec<(Stage, &'static str, String)> {
        use Stage::*;
        let f = &self.finetune;
        let w = &f.loss_weights;
        vec![
            (Data, "seed", self.seed.to_string()),
            (Output, "out", self.out.display().to_string()),
            (Data, "superclasses", self.data.num_superclasses.to_string()),
            (
                Data,
                "subclasses",
                self.data.subclasses_per_superclass.to_string(),
            ),
            (Data, "image_side", self.data.image_side.to_string()),
            (Data, "shift", self.data.within_super_shift.to_string()),
            (Data, "noise", self.data.noise_sigma.to_string()),
            (Data, "train_count", self.data.train_count.to_string()),
            (Data, "test_count", self.data.test_count.to_string()),
            (Model, "hidden", join(&self.hidden_dims)),
            (Model, "embed_dim", self.embed_dim.to_string()),
            (Model, "tau", self.temperature.to_string()),
            (
                Pretrain,
                "pretrain_lr",
                self.pretrain.learning_rate.to_string(),
            ),
            (
                Pretrain,
                "pretrain_epochs",
                self.pretrain.epochs.to_string(),
            ),
            (
                Pretrain,
                "pretrain_tau",
                self.pretrain.loss_weights.temperature.to_string(),
            ),
            (Finetune, "lr", f.learning_rate.to_string()),
            (Pretrain, "momentum", f.momentum.to_string()),
            (Finetune, "epochs", f.epochs.to_string()),
            (Pretrain, "batch_size", f.batch_size.to_string()),
            (Finetune, "variant", f.variant.to_string()),
            (Finetune, "freeze_text", f.freeze_text.to_string()),
            (Finetune, "m", w.margin.to_string()),
            (Finetune, "eta", w.eta.to_string()),
            (Finetune, "lambda", w.lambda.to_string()),
            (Finetune, "lambda_t", w.lambda_text.to_string()),
            (Finetune, "lambda_v", w.lambda_image.to_string()),
            (
                Finetune,
                "margin_sign",
                margin_sign_name(w.margin_sign).into(),
            ),
            (Finetune, "train_eps", self.train_epsilon.to_string()),
            (Finetune, "train_step", self.train_step.to_string()),
            (Finetune, "train_steps", f.train_attack.steps.to_string()),
            (
                Finetune,
                "train_restarts",
                f.train_attack.restarts.to_string(),
            ),
            (
                Finetune,
                "attack_text",
                text_source_name(f.train_attack.text_source).into(),
            ),
            (Eval, "eval_eps", join(&self.eval_epsilons)),
            (Eval, "eval_step", self.eval_step.to_string()),
            (Eval, "eval_steps", self.eval_steps.to_string()),
            (Eval, "eval_restarts", self.eval_restarts.to_string()),
            (Eval, "eval_text", text_source_name(self.eval_text).into()),
            (Eval, "probe_shift", self.probe_shift.to_string()),
            (Sweep, "sweep_m", join(&self.sweep_margins)),
            (Sweep, "sweep_eta", join(&self.sweep_etas)),
            (Sweep, "sweep_eps", join(&self.sweep_epsilons)),
        ]
    }

    /// A complete config file that parses back to `self`.
    pub fn render(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Which pipeline stage a key feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Output,
    Data,
    Model,
    Pretrain,
    Finetune,
    Eval,
    Sweep,
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

fn margin_sign_name(s: MarginSign) -> &'static str {
    match s {
        MarginSign::Literal => "literal",
        MarginSign::NegateNegatives => "negate-negatives",
    }
}

fn text_source_name(s: TextSource) -> &'static str {
    match s {
        TextSource::Student => "student",
        TextSource::Teacher => "teacher",
    }
}

struct Field<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Field<'_> {
    fn err(&self, kind: ConfigErrorKind) -> ConfigError {
        ConfigError {
            line: self.line,
            kind,
        }
    }

    fn type_error(&self, expected: &'static str) -> ConfigError {
        self.err(ConfigErrorKind::TypeError {
            key: self.key.into(),
            expected,
            found: self.value.into(),
        })
    }

    fn range(&self, message: impl Into<String>) -> ConfigError {
        self.err(ConfigErrorKind::RangeError {
            key: self.key.into(),
            message: message.into(),
        })
    }

    fn parse<T: FromStr>(&self, expected: &'static str) -> Result<T, ConfigError> {
        self.value.parse().map_err(|_| self.type_error(expected))
    }

    fn float(&self) -> Result<f64, ConfigError> {
        let v: f64 = self.parse("a number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.range("must be finite"))
        }
    }

    fn non_negative(&self) -> Result<f64, ConfigError> {
        let v = self.float()?;
        if v >= 0.0 {
            Ok(v)
        } else {
            Err(self.range(format!("must be >= 0, got {v}")))
        }
    }

    fn positive(&self) -> Result<f64, ConfigError> {
        let v = self.float()?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.range(format!("must be > 0, got {v}")))
        }
    }

    fn open_unit(&self, v: f64) -> Result<f64, ConfigError> {
        if v > 0.0 && v < 1.0 {
            Ok(v)
        } else {
            Err(self.range(format!("must lie in (0, 1), got {v}")))
        }
    }

    fn count(&self, min: usize) -> Result<usize, ConfigError> {
        let v: usize = self.parse("a non-negative integer")?;
        if v >= min {
            Ok(v)
        } else {
            Err(self.range(format!("must be at least {min}, got {v}")))
        }
    }

    fn bool(&self) -> Result<bool, ConfigError> {
        self.parse("true or false")
    }

    fn fraction(&self, text: &str) -> Result<PixelFraction, ConfigError> {
        text.parse()
            .map_err(|_| self.type_error("a pixel fraction n/255"))
    }

    fn list<T>(
        &self,
        mut item: impl FnMut(&Self, &str) -> Result<T, ConfigError>,
    ) -> Result<Vec<T>, ConfigError> {
        if self.value.is_empty() {
            return Ok(Vec::new());
        }
        self.value
            .split(',')
            .map(|s| item(self, s.trim()))
            .collect()
    }

    fn nonempty_list<T>(
        &self,
        item: impl FnMut(&Self, &str) -> Result<T, ConfigError>,
    ) -> Result<Vec<T>, ConfigError> {
        let out = self.list(item)?;
        if out.is_empty() {
            return Err(self.range("needs at least one value"));
        }
        Ok(out)
    }

    fn source(&self) -> Result<TextSource, ConfigError> {
        match self.value {
            "student" => Ok(TextSource::Student),
            "teacher" => Ok(TextSource::Teacher),
            _ => Err(self.type_error("student or teacher")),
        }
    }
}

/// Parses `text`, filling unspecified keys with defaults.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError {
                line,
                kind: ConfigErrorKind::Syntax(content.into()),
            });
        };
        let field = Field {
            line,
            key: key.trim(),
            value: value.trim(),
        };
        if field.key.is_empty() {
            return Err(field.err(ConfigErrorKind::Syntax(content.into())));
        }
        if seen.contains(&field.key) {
            return Err(field.err(ConfigErrorKind::DuplicateKey(field.key.into())));
        }
        apply(&mut cfg, &field)?;
        seen.push(field.key);
    }
    check(&cfg)?;
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, f: &Field<'_>) -> Result<(), ConfigError> {
    let ft = &mut cfg.finetune;
    match f.key {
        "seed" => cfg.seed = f.parse("a non-negative integer")?,
        "out" => {
            if f.value.is_empty() {
                return Err(f.range("must name a directory"));
            }
            cfg.out = PathBuf::from(f.value);
        }
        "superclasses" => cfg.data.num_superclasses = f.count(1)?,
        "subclasses" => cfg.data.subclasses_per_superclass = f.count(1)?,
        "image_side" => cfg.data.image_side = f.count(1)?,
        "shift" => cfg.data.within_super_shift = f.non_negative()?,
        "noise" => cfg.data.noise_sigma = f.non_negative()?,
        "train_count" => cfg.data.train_count = f.count(1)?,
        "test_count" => cfg.data.test_count = f.count(1)?,
        "hidden" => {
            cfg.hidden_dims = f.list(|f, s| {
                let v: usize = s
                    .parse()
                    .map_err(|_| f.type_error("a list of positive integers"))?;
                if v == 0 {
                    return Err(f.range("layer widths must be positive"));
                }
                Ok(v)
            })?
        }
        "embed_dim" => cfg.embed_dim = f.count(2)?,
        "tau" => cfg.temperature = f.positive()?,
        "pretrain_lr" => cfg.pretrain.learning_rate = f.positive()?,
        "pretrain_epochs" => cfg.pretrain.epochs = f.count(1)?,
        "pretrain_tau" => cfg.pretrain.loss_weights.temperature = f.positive()?,
        "lr" => ft.learning_rate = f.positive()?,
        "momentum" => {
            let v = f.float()?;
            if !(0.0..1.0).contains(&v) {
                return Err(f.range(format!("must lie in [0, 1), got {v}")));
            }
            ft.momentum = v;
            cfg.pretrain.momentum = v;
        }
        "epochs" => ft.epochs = f.count(1)?,
        "batch_size" => {
            ft.batch_size = f.count(1)?;
            cfg.pretrain.batch_size = ft.batch_size;
        }
        "variant" => ft.variant = f.parse("one of tima, tecoa, iat_only, tai_only, mhe_only")?,
        "freeze_text" => ft.freeze_text = f.bool()?,
        "m" => ft.loss_weights.margin = f.non_negative()?,
        "eta" => ft.loss_weights.eta = f.open_unit(f.float()?)?,
        "lambda" => ft.loss_weights.lambda = f.non_negative()?,
        "lambda_t" => ft.loss_weights.lambda_text = f.non_negative()?,
        "lambda_v" => ft.loss_weights.lambda_image = f.non_negative()?,
        "margin_sign" => {
            ft.loss_weights.margin_sign = match f.value {
                "literal" => MarginSign::Literal,
                "negate-negatives" => MarginSign::NegateNegatives,
                _ => return Err(f.type_error("literal or negate-negatives")),
            }
        }
        "train_eps" => cfg.train_epsilon = f.fraction(f.value)?,
        "train_step" => cfg.train_step = f.fraction(f.value)?,
        "train_steps" => ft.train_attack.steps = f.count(0)?,
        "train_restarts" => ft.train_attack.restarts = f.count(0)?,
        "attack_text" => ft.train_attack.text_source = f.source()?,
        "eval_eps" => {
            let radii = f.list(|f, s| f.fraction(s))?;
            if radii
                .iter()
                .enumerate()
                .any(|(i, r)| radii[..i].contains(r))
            {
                return Err(f.range("radii must be distinct"));
            }
            cfg.eval_epsilons = radii;
        }
        "eval_step" => cfg.eval_step = f.fraction(f.value)?,
        "eval_steps" => cfg.eval_steps = f.count(0)?,
        "eval_restarts" => cfg.eval_restarts = f.count(0)?,
        "eval_text" => cfg.eval_text = f.source()?,
        "probe_shift" => cfg.probe_shift = f.non_negative()?,
        "sweep_m" => {
            cfg.sweep_margins = f.nonempty_list(|f, s| {
                let v: f64 = s.parse().map_err(|_| f.type_error("a list of numbers"))?;
                if v >= 0.0 && v.is_finite() {
                    Ok(v)
                } else {
                    Err(f.range(format!("margins must be >= 0, got {v}")))
                }
            })?
        }
        "sweep_eta" => {
            cfg.sweep_etas = f.nonempty_list(|f, s| {
                let v: f64 = s.parse().map_err(|_| f.type_error("a list of numbers"))?;
                f.open_unit(v)
            })?
        }
        "sweep_eps" => cfg.sweep_epsilons = f.nonempty_list(|f, s| f.fraction(s))?,
        _ => return Err(f.err(ConfigErrorKind::UnknownKey(f.key.into()))),
    }
    Ok(())
}

/// Checks that involve several keys; reported against line 0.
fn check(cfg: &RunConfig) -> Result<(), ConfigError> {
    let whole = |key: &str, message: String| ConfigError {
        line: 0,
        kind: ConfigErrorKind::RangeError {
            key: key.into(),
            message,
        },
    };
    cfg.spec()
        .validate()
        .map_err(|e| whole("data", e.to_string()))?;
    cfg.encoder()
        .validate()
        .map_err(|e| whole("model", e.to_string()))?;
    cfg.pretrain_config()
        .validate()
        .map_err(|e| whole("pretrain", e.to_string()))?;
    cfg.finetune_config()
        .validate()
        .map_err(|e| whole("finetune", e.to_string()))?;
    if cfg.eval_steps > 0 && cfg.eval_step.0 == 0 {
        return Err(whole(
            "eval_step",
            "must be positive when eval_steps > 0".into(),
        ));
    }
    Ok(())
}
