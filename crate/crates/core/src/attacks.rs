//! l∞ projected gradient descent on the contrastive cross-entropy.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::losses::cosine_sim_matrix;
use crate::model::{DualEncoder, ImageEncoder, TeacherSnapshot};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// One pixel quantum.
pub const PIXEL_STEP: f64 = 1.0 / 255.0;

/// Batch size used when attacking or scoring a whole dataset.
pub const EVAL_BATCH: usize = 250;

/// Which class embeddings parameterize the attack objective (and, for
/// evaluation, the classifier).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TextSource {
    #[default]
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// l∞ radius, pixel units.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    /// Extra runs from uniform random starts; 0 means only the clean start.
    pub restarts: usize,
    pub seed: u64,
    pub text_source: TextSource,
}

impl AttackConfig {
    /// The fine-tuning attack: ε = 1/255, two steps of 1/255.
    pub fn training() -> Self {
        Self {
            epsilon: PIXEL_STEP,
            step_size: PIXEL_STEP,
            steps: 2,
            restarts: 0,
            seed: 0,
            text_source: TextSource::Student,
        }
    }

    /// PGD-10 with step 1/255 at radius `epsilon`.
    pub fn evaluation(epsilon: f64) -> Self {
        Self {
            epsilon,
            steps: 10,
            ..Self::training()
        }
    }

    /// PGD-10 with five random restarts.
    pub fn strong(epsilon: f64) -> Self {
        Self {
            restarts: 5,
            ..Self::evaluation(epsilon)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps > 0 && (self.step_size <= 0.0 || !self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Per-sample cross-entropy of `softmax(s(z, t)/τ)` at the labels and its
/// gradient with respect to the pixels.
fn loss_and_input_grad<E: ImageEncoder + ?Sized>(
    encoder: &E,
    text: &Tensor,
    images: &Tensor,
    labels: &[usize],
) -> Result<(Vec<f64>, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.leaf(images.clone());
    let z = encoder.embed_on(&mut tape, x)?;
    let t = tape.constant(text.clone());
    let sims = cosine_sim_matrix(&mut tape, z, t)?;
    let log_probs = tape.row_log_softmax(sims, encoder.temperature())?;
    let picked = tape.pick_per_row(log_probs, labels)?;
    let total = tape.sum(picked)?;
    let loss = tape.neg(total)?;
    let per_sample = tape.value(picked).data().iter().map(|v| -v).collect();
    let grads = tape.backward(loss)?;
    let grad = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(images.shape()));
    Ok((per_sample, grad))
}

/// Per-sample contrastive cross-entropy.
pub fn cross_entropy_per_sample<E: ImageEncoder + ?Sized>(
    encoder: &E,
    text: &Tensor,
    images: &Tensor,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let z = encoder.embed_on(&mut tape, x)?;
    let t = tape.constant(text.clone());
    let sims = cosine_sim_matrix(&mut tape, z, t)?;
    let log_probs = tape.row_log_softmax(sims, encoder.temperature())?;
    let picked = tape.pick_per_row(log_probs, labels)?;
    Ok(tape.value(picked).data().iter().map(|v| -v).collect())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x ← clip₀₁(Π_ε(x + step·sign(∇ₓ CE)))`, `steps` times, starting at
/// `start` and projecting around `origin`.
#[allow(clippy::too_many_arguments)]
pub fn pgd_steps<E: ImageEncoder + ?Sized>(
    encoder: &E,
    text: &Tensor,
    origin: &Tensor,
    start: &Tensor,
    labels: &[usize],
    epsilon: f64,
    step_size: f64,
    steps: usize,
) -> Result<Tensor> {
    if origin.shape() != start.shape() {
        return Err(Error::ShapeMismatch {
            op: "pgd_steps",
            detail: format!("{:?} vs {:?}", origin.shape(), start.shape()),
        });
    }
    let mut current = start.clone();
    for _ in 0..steps {
        let (_, grad) = loss_and_input_grad(encoder, text, &current, labels)?;
        for ((x, &g), &o) in current
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(origin.data())
        {
            let stepped = *x + step_size * sign(g);
            *x = stepped.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0);
        }
    }
    Ok(current)
}

/// Untargeted l∞ PGD. Restart 0 starts at the clean images, later restarts at
/// a seeded uniform point of the ball; for every sample the candidate with
/// the highest final cross-entropy wins (earliest restart on ties).
pub fn pgd_attack<E: ImageEncoder + ?Sized>(
    encoder: &E,
    text: &Tensor,
    images: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let (n, _) = images.expect_matrix("pgd_attack")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "pgd_attack",
            detail: format!("{} labels for {n} images", labels.len()),
        });
    }
    if cfg.epsilon == 0.0 || (cfg.steps == 0 && cfg.restarts == 0) {
        return Ok(images.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Tensor, Vec<f64>)> = None;
    for restart in 0..=cfg.restarts {
        let mut start = images.clone();
        if restart > 0 {
            for (x, &o) in start.data_mut().iter_mut().zip(images.data()) {
                let noise = rng.random_range(-cfg.epsilon..=cfg.epsilon);
                *x = (o + noise).clamp(0.0, 1.0);
            }
        }
        let candidate = pgd_steps(
            encoder,
            text,
            images,
            &start,
            labels,
            cfg.epsilon,
            cfg.step_size,
            cfg.steps,
        )?;
        let losses = cross_entropy_per_sample(encoder, text, &candidate, labels)?;
        best = Some(match best {
            None => (candidate, losses),
            Some((mut kept, mut kept_losses)) => {
                let width = kept.cols();
                for i in 0..n {
                    if losses[i] > kept_losses[i] {
                        kept_losses[i] = losses[i];
                        kept.data_mut()[i * width..(i + 1) * width]
                            .copy_from_slice(candidate.row(i));
                    }
                }
                (kept, kept_losses)
            }
        });
    }
    Ok(best.map(|(x, _)| x).unwrap_or_else(|| images.clone()))
}

/// `argmax_k s(z_i, t_k)`; ties go to the lowest class index.
pub fn classify(image_embeddings: &Tensor, text: &Tensor) -> Result<Vec<usize>> {
    let sims = image_embeddings.matmul(&text.transpose()?)?;
    Ok((0..sims.rows())
        .map(|i| {
            let row = sims.row(i);
            let mut arg = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = k;
                }
            }
            arg
        })
        .collect())
}

/// Class embeddings selected by `source`.
pub fn text_for(
    model: &DualEncoder,
    teacher: &TeacherSnapshot,
    source: TextSource,
) -> Result<Tensor> {
    match source {
        TextSource::Student => model.encode_classes(),
        TextSource::Teacher => Ok(teacher.text().clone()),
    }
}

/// Seed for batch `index` of a dataset-wide attack.
pub(crate) fn batch_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Predictions for every sample of `data` after attacking it with `cfg`.
pub fn attacked_predictions(
    model: &DualEncoder,
    teacher: &TeacherSnapshot,
    data: &Dataset,
    cfg: &AttackConfig,
) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let text = text_for(model, teacher, cfg.text_source)?;
    let mut predictions = Vec::with_capacity(data.len());
    for (b, indices) in data.chunks(EVAL_BATCH).enumerate() {
        let (images, labels) = data.batch(&indices)?;
        let batch_cfg = AttackConfig {
            seed: batch_seed(cfg.seed, b),
            ..cfg.clone()
        };
        let adversarial = pgd_attack(model, &text, &images, &labels, &batch_cfg)?;
        predictions.extend(classify(&model.encode_images(&adversarial)?, &text)?);
    }
    Ok(predictions)
}

/// Fraction of samples still classified correctly after the attack.
pub fn robust_accuracy(
    model: &DualEncoder,
    teacher: &TeacherSnapshot,
    data: &Dataset,
    cfg: &AttackConfig,
) -> Result<f64> {
    let predictions = attacked_predictions(model, teacher, data, cfg)?;
    let correct = predictions
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}
