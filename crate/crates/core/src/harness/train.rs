use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{batch_seed, pgd_attack, text_for, AttackConfig, TextSource};
use crate::data::Dataset;
use crate::losses::{contrastive_ce, cosine_sim_matrix, tima_loss_on, LossComponents, LossWeights};
use crate::model::{Binding, BoundParams, DualEncoder, TeacherSnapshot};
use crate::tensor::{Gradients, Tape, Tensor};
use crate::{Error, Result};

/// Which parts of the combined objective a fine-tuning run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variant {
    /// Everything.
    #[default]
    Tima,
    /// Plain adversarial contrastive fine-tuning against frozen text.
    Tecoa,
    /// Unmargined cross-entropy plus the text-side terms.
    IatOnly,
    /// Margined cross-entropy plus text-aware distillation; text frozen.
    TaiOnly,
    /// Unmargined cross-entropy plus the energy term only.
    MheOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Tima,
        Variant::Tecoa,
        Variant::IatOnly,
        Variant::TaiOnly,
        Variant::MheOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tima => "tima",
            Variant::Tecoa => "tecoa",
            Variant::IatOnly => "iat_only",
            Variant::TaiOnly => "tai_only",
            Variant::MheOnly => "mhe_only",
        }
    }

    /// Effective weights, text freezing and attack text for `cfg`.
    pub fn recipe(self, cfg: &TrainConfig) -> Recipe {
        let mut weights = cfg.loss_weights.clone();
        let mut freeze_text = cfg.freeze_text;
        let mut attack_text = cfg.train_attack.text_source;
        match self {
            Variant::Tima => {}
            Variant::Tecoa => {
                weights.margin = 0.0;
                weights.lambda = 0.0;
                weights.lambda_image = 0.0;
                freeze_text = true;
                attack_text = TextSource::Teacher;
            }
            Variant::IatOnly => {
                weights.margin = 0.0;
                weights.lambda_image = 0.0;
            }
            Variant::TaiOnly => {
                weights.lambda = 0.0;
                freeze_text = true;
            }
            Variant::MheOnly => {
                weights.margin = 0.0;
                weights.lambda_text = 0.0;
                weights.lambda_image = 0.0;
            }
        }
        Recipe {
            weights,
            freeze_text,
            attack_text,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidVariant(String::from(s)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub weights: LossWeights,
    pub freeze_text: bool,
    pub attack_text: TextSource,
}

/// Softer than the deployed 0.01 so pretraining learns graded class
/// similarities instead of saturating on the first few batches.
pub const PRETRAIN_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub variant: Variant,
    pub freeze_text: bool,
    pub loss_weights: LossWeights,
    pub train_attack: AttackConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Adversarial fine-tuning: lr 3e-4, momentum 0.9, 30 epochs, batch 128.
    ///
    /// At 1e-4 for 10 epochs the toy student barely moves; above ~1e-3 the
    /// margin term diverges intermittently at τ = 0.01.
    pub fn finetune() -> Self {
        Self {
            learning_rate: 3e-4,
            momentum: 0.9,
            epochs: 30,
            batch_size: 128,
            variant: Variant::Tima,
            freeze_text: false,
            loss_weights: LossWeights::default(),
            train_attack: AttackConfig::training(),
            seed: 0,
        }
    }

    /// Clean pretraining: lr 1e-2, 20 epochs, contrastive temperature
    /// [`PRETRAIN_TEMPERATURE`], otherwise as [`Self::finetune`].
    pub fn pretrain() -> Self {
        let mut cfg = Self {
            learning_rate: 1e-2,
            epochs: 20,
            ..Self::finetune()
        };
        cfg.loss_weights.temperature = PRETRAIN_TEMPERATURE;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        self.loss_weights.validate()?;
        self.train_attack.validate()
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64, param_count: usize) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: alloc::vec![None; param_count],
        }
    }

    /// Updates every parameter that was bound as trainable.
    pub fn step(
        &mut self,
        model: &mut DualEncoder,
        tape: &Tape,
        params: &BoundParams,
        grads: &Gradients,
    ) {
        for (i, &var) in params.vars().iter().enumerate() {
            if !tape.is_leaf(var) {
                continue;
            }
            let Some(g) = grads.get(var) else { continue };
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (vel, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vel = self.momentum * *vel + gv;
            }
            let p = &mut model.params_mut()[i];
            for (pv, &vel) in p.data_mut().iter_mut().zip(v.data()) {
                *pv -= self.learning_rate * vel;
            }
        }
    }
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: DualEncoder,
    pub epoch_losses: Vec<f64>,
}

/// Clean contrastive training of both towers with SGD momentum.
pub fn pretrain_clean(
    model: &DualEncoder,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = model.clone();
    let mut opt = SgdMomentum::new(cfg.learning_rate, cfg.momentum, model.params().len());
    let text_binding = if cfg.freeze_text {
        Binding::Frozen
    } else {
        Binding::Trainable
    };
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let (mut sum, mut count) = (0.0, 0usize);
        for indices in order.chunks(cfg.batch_size) {
            let (images, labels) = train.batch(indices)?;
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, Binding::Trainable, text_binding);
            let x = tape.constant(images);
            let z = model.image_on(&mut tape, &params, x)?;
            let t = model.classes_on(&mut tape, &params)?;
            let sims = cosine_sim_matrix(&mut tape, z, t)?;
            let loss = contrastive_ce(&mut tape, sims, &labels, cfg.loss_weights.temperature)?;
            sum += tape.value(loss).data()[0] * labels.len() as f64;
            count += labels.len();
            let grads = tape.backward(loss)?;
            opt.step(&mut model, &tape, &params, &grads);
        }
        epoch_losses.push(sum / count as f64);
    }
    Ok(PretrainOutcome {
        model,
        epoch_losses,
    })
}

/// State handed to a [`finetune_observed`] observer before each update.
pub struct BatchView<'a> {
    pub epoch: usize,
    pub batch: usize,
    /// Student weights the batch loss was evaluated at.
    pub student: &'a DualEncoder,
    pub clean: &'a Tensor,
    pub adversarial: &'a Tensor,
    pub labels: &'a [usize],
    pub weights: &'a LossWeights,
    pub components: &'a LossComponents,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: DualEncoder,
    /// Sample-weighted mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub batch_losses: Vec<LossComponents>,
}

pub fn finetune(
    model: &DualEncoder,
    teacher: &TeacherSnapshot,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    finetune_observed(model, teacher, train, cfg, |_| {})
}

/// Adversarial fine-tuning: per batch, attack with `cfg.train_attack`,
/// evaluate the variant's objective on the adversarial batch, and take one
/// SGD-momentum step.
pub fn finetune_observed<F>(
    model: &DualEncoder,
    teacher: &TeacherSnapshot,
    train: &Dataset,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<FinetuneOutcome>
where
    F: FnMut(&BatchView<'_>),
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let recipe = cfg.variant.recipe(cfg);
    let text_binding = if recipe.freeze_text {
        Binding::Frozen
    } else {
        Binding::Trainable
    };
    let mut student = model.clone();
    let mut opt = SgdMomentum::new(cfg.learning_rate, cfg.momentum, student.params().len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch_losses = Vec::new();
    let mut global_batch = 0usize;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let (mut sum, mut count) = (0.0, 0usize);
        for (batch, indices) in order.chunks(cfg.batch_size).enumerate() {
            let (clean, labels) = train.batch(indices)?;
            let attack = AttackConfig {
                seed: batch_seed(cfg.train_attack.seed, global_batch),
                text_source: recipe.attack_text,
                ..cfg.train_attack.clone()
            };
            let text = text_for(&student, teacher, attack.text_source)?;
            let adversarial = pgd_attack(&student, &text, &clean, &labels, &attack)?;

            let mut tape = Tape::new();
            let params = student.bind(&mut tape, Binding::Trainable, text_binding);
            let (loss, components) = tima_loss_on(
                &mut tape,
                &student,
                &params,
                teacher,
                &clean,
                &adversarial,
                &labels,
                &recipe.weights,
            )?;
            observer(&BatchView {
                epoch,
                batch,
                student: &student,
                clean: &clean,
                adversarial: &adversarial,
                labels: &labels,
                weights: &recipe.weights,
                components: &components,
            });
            let grads = tape.backward(loss)?;
            opt.step(&mut student, &tape, &params, &grads);

            sum += components.total * labels.len() as f64;
            count += labels.len();
            batch_losses.push(components);
            global_batch += 1;
        }
        epoch_losses.push(sum / count as f64);
    }
    Ok(FinetuneOutcome {
        model: student,
        epoch_losses,
        batch_losses,
    })
}
