//! Loss terms for text-image mutual awareness fine-tuning.
//!
//! Text side: hyperspherical energy on the class embeddings ([`mhe_loss`])
//! and image-aware distillation ([`iakd_loss`]). Image side: cross-entropy
//! with the text-distance adaptive margin ([`adaptive_margin`],
//! [`tam_loss`]) and text-aware distillation ([`takd_loss`]).
//! [`tima_loss_on`] combines them as
//! `TAM + λ_V·TAKD + λ·(MHE + λ_T·IAKD)`.
//!
//! Every distribution is handled in log space through
//! [`Tape::row_log_softmax`]; at τ = 0.01 direct exponentiation underflows.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::{BoundParams, DualEncoder, TeacherSnapshot};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Exponent of the pairwise distance in the energy term. Fixed.
pub const MHE_EXPONENT: f64 = 2.0;

/// Tolerance on row norms accepted by [`cosine_sim_matrix`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// How triggered negative classes enter the margin matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MarginSign {
    /// `M` is subtracted from every triggered logit, ground truth included.
    #[default]
    Literal,
    /// Triggered negatives get `+m·s` added to their logit instead; the
    /// ground truth is still reduced.
    NegateNegatives,
}

/// Scalar hyperparameters of the combined objective. The energy exponent is
/// fixed at [`MHE_EXPONENT`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Contrastive temperature τ.
    pub temperature: f64,
    /// Margin value m.
    pub margin: f64,
    /// Confusion threshold η, strictly between 0 and 1.
    pub eta: f64,
    /// λ, weight of the text-side terms.
    pub lambda: f64,
    /// λ_T, weight of image-aware distillation within the text side.
    pub lambda_text: f64,
    /// λ_V, weight of text-aware distillation.
    pub lambda_image: f64,
    pub margin_sign: MarginSign,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            temperature: crate::model::DEFAULT_TEMPERATURE,
            margin: 0.1,
            eta: 0.95,
            lambda: 1.0,
            lambda_text: 1.0,
            lambda_image: 1.0,
            margin_sign: MarginSign::Literal,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidEta(self.eta));
        }
        for (name, v) in [
            ("margin", self.margin),
            ("lambda", self.lambda),
            ("lambda_text", self.lambda_text),
            ("lambda_image", self.lambda_image),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn check_unit_rows(t: &Tensor) -> Result<()> {
    t.expect_matrix("cosine_sim_matrix")?;
    for (row, norm) in t.row_norms().into_iter().enumerate() {
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE || norm.is_nan() {
            return Err(Error::NotNormalized { row, norm });
        }
    }
    Ok(())
}

/// `S[i][j] = ⟨a_i, b_j⟩` for unit rows.
pub fn cosine_sim_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_unit_rows(tape.value(a))?;
    check_unit_rows(tape.value(b))?;
    let bt = tape.transpose(b)?;
    tape.matmul(a, bt)
}

/// Value-only [`cosine_sim_matrix`].
pub fn cosine_similarities(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_unit_rows(a)?;
    check_unit_rows(b)?;
    a.matmul(&b.transpose()?)
}

/// Copies `v`'s value onto the tape as a constant.
fn detach(tape: &mut Tape, v: Var) -> Var {
    let value = tape.value(v).clone();
    tape.constant(value)
}

/// Mean over ordered pairs `j ≠ k` of `1 / (1 + ‖t_j − t_k‖²)`.
pub fn mhe_loss(tape: &mut Tape, text: Var) -> Result<Var> {
    let (classes, _) = tape.value(text).expect_matrix("mhe_loss")?;
    if classes < 2 {
        return Err(Error::TooFewClasses(classes));
    }
    let sq = tape.pairwise_sq_dist(text)?;
    let shifted = tape.add_scalar(sq, 1.0)?;
    let ones = tape.constant(Tensor::filled(&[classes, classes], 1.0));
    let energy = tape.div(ones, shifted)?;
    let mut mask = Tensor::filled(&[classes, classes], 1.0);
    for j in 0..classes {
        mask.data_mut()[j * classes + j] = 0.0;
    }
    let mask = tape.constant(mask);
    let off_diagonal = tape.mul(energy, mask)?;
    let total = tape.sum(off_diagonal)?;
    tape.scale(total, 1.0 / (classes * (classes - 1)) as f64)
}

/// Mean over rows of `KL(softmax(P/τ) ‖ softmax(Q/τ))`, entirely in log
/// space. Pass `logits_p` as a constant to route gradients into `Q` only.
pub fn kl_rows(tape: &mut Tape, logits_p: Var, logits_q: Var, temperature: f64) -> Result<Var> {
    let (p, q) = (tape.value(logits_p), tape.value(logits_q));
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_rows",
            detail: format!("{:?} vs {:?}", p.shape(), q.shape()),
        });
    }
    let rows = p.rows();
    let log_p = tape.row_log_softmax(logits_p, temperature)?;
    let log_q = tape.row_log_softmax(logits_q, temperature)?;
    let prob_p = tape.exp(log_p)?;
    let log_ratio = tape.sub(log_p, log_q)?;
    let weighted = tape.mul(prob_p, log_ratio)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, 1.0 / rows as f64)
}

/// Distills the student class embeddings through frozen teacher images:
/// `KL(softmax(s(ẑ, t̂)/τ) ‖ softmax(s(ẑ, t)/τ))`. Teacher inputs are
/// detached.
pub fn iakd_loss(
    tape: &mut Tape,
    teacher_images: Var,
    teacher_text: Var,
    student_text: Var,
    temperature: f64,
) -> Result<Var> {
    let z = detach(tape, teacher_images);
    let t_hat = detach(tape, teacher_text);
    let teacher_logits = cosine_sim_matrix(tape, z, t_hat)?;
    let student_logits = cosine_sim_matrix(tape, z, student_text)?;
    kl_rows(tape, teacher_logits, student_logits, temperature)
}

/// Text-distance adaptive margin from frozen teacher similarities.
///
/// `M[i][k] = m · s(t̂_{y_i}, t̂_k)` when `s(ẑ_i, t̂_k) ≥ η · s(ẑ_i, t̂_{y_i})`,
/// otherwise zero. With [`MarginSign::NegateNegatives`] the triggered
/// off-label entries are negated.
pub fn adaptive_margin(
    image_text: &Tensor,
    text_text: &Tensor,
    labels: &[usize],
    margin: f64,
    eta: f64,
    sign: MarginSign,
) -> Result<Tensor> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidEta(eta));
    }
    if margin < 0.0 || !margin.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "margin must be >= 0, got {margin}"
        )));
    }
    let (n, classes) = image_text.expect_matrix("adaptive_margin")?;
    let (tr, tc) = text_text.expect_matrix("adaptive_margin")?;
    if tr != classes || tc != classes || labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "adaptive_margin",
            detail: format!(
                "image-text {n}x{classes}, text-text {tr}x{tc}, {} labels",
                labels.len()
            ),
        });
    }
    let mut out = vec![0.0; n * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let threshold = eta * image_text.get(i, y);
        for k in 0..classes {
            if image_text.get(i, k) >= threshold {
                let value = margin * text_text.get(y, k);
                out[i * classes + k] = match sign {
                    MarginSign::NegateNegatives if k != y => -value,
                    _ => value,
                };
            }
        }
    }
    Tensor::matrix(n, classes, out)
}

/// Mean cross-entropy of `softmax(logits/τ)` at the labels.
pub fn contrastive_ce(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    temperature: f64,
) -> Result<Var> {
    let log_probs = tape.row_log_softmax(logits, temperature)?;
    let picked = tape.pick_per_row(log_probs, labels)?;
    let mean = tape.mean(picked)?;
    tape.neg(mean)
}

/// Cross-entropy on margin-adjusted logits `softmax((S − M)/τ)`. The margin
/// is a constant.
pub fn tam_loss(
    tape: &mut Tape,
    adversarial_sims: Var,
    margin: &Tensor,
    labels: &[usize],
    temperature: f64,
) -> Result<Var> {
    let s = tape.value(adversarial_sims);
    if s.shape() != margin.shape() {
        return Err(Error::ShapeMismatch {
            op: "tam_loss",
            detail: format!("{:?} vs margin {:?}", s.shape(), margin.shape()),
        });
    }
    let m = tape.constant(margin.clone());
    let logits = tape.sub(adversarial_sims, m)?;
    contrastive_ce(tape, logits, labels, temperature)
}

/// Distills adversarial student images toward the clean teacher
/// distribution over frozen class embeddings:
/// `KL(softmax(s(ẑ, t̂)/τ) ‖ softmax(s(z⁽ᵃ⁾, t̂)/τ))`.
pub fn takd_loss(
    tape: &mut Tape,
    teacher_images: Var,
    teacher_text: Var,
    student_adv_images: Var,
    temperature: f64,
) -> Result<Var> {
    let z = detach(tape, teacher_images);
    let t_hat = detach(tape, teacher_text);
    let teacher_logits = cosine_sim_matrix(tape, z, t_hat)?;
    let student_logits = cosine_sim_matrix(tape, student_adv_images, t_hat)?;
    kl_rows(tape, teacher_logits, student_logits, temperature)
}

/// Values of each term of the combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub tam: f64,
    pub takd: f64,
    pub mhe: f64,
    pub iakd: f64,
    pub total: f64,
}

impl LossComponents {
    /// `tam + λ_V·takd + λ·(mhe + λ_T·iakd)`, in the same evaluation order
    /// as the tape.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        (self.tam + w.lambda_image * self.takd) + w.lambda * (self.mhe + w.lambda_text * self.iakd)
    }
}

/// Builds the full objective for one batch on `tape`.
///
/// Gradients reach the image tower only through TAM and TAKD (both use the
/// frozen `t̂`), and the text tower only through MHE and IAKD (both use the
/// frozen `ẑ`).
#[allow(clippy::too_many_arguments)]
pub fn tima_loss_on(
    tape: &mut Tape,
    student: &DualEncoder,
    params: &BoundParams,
    teacher: &TeacherSnapshot,
    clean: &Tensor,
    adversarial: &Tensor,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<(Var, LossComponents)> {
    weights.validate()?;
    if clean.shape() != adversarial.shape() {
        return Err(Error::ShapeMismatch {
            op: "tima_loss",
            detail: format!(
                "clean {:?} vs adversarial {:?}",
                clean.shape(),
                adversarial.shape()
            ),
        });
    }
    let tau = weights.temperature;
    let teacher_z = teacher.encode_images(clean)?;
    let teacher_t = teacher.text();
    let image_text = cosine_similarities(&teacher_z, teacher_t)?;
    let text_text = cosine_similarities(teacher_t, teacher_t)?;
    let margin = adaptive_margin(
        &image_text,
        &text_text,
        labels,
        weights.margin,
        weights.eta,
        weights.margin_sign,
    )?;

    let z_hat = tape.constant(teacher_z);
    let t_hat = tape.constant(teacher_t.clone());
    let x_adv = tape.constant(adversarial.clone());
    let z_adv = student.image_on(tape, params, x_adv)?;
    let adv_sims = cosine_sim_matrix(tape, z_adv, t_hat)?;
    let tam = tam_loss(tape, adv_sims, &margin, labels, tau)?;
    let takd = takd_loss(tape, z_hat, t_hat, z_adv, tau)?;

    let text = student.classes_on(tape, params)?;
    let mhe = mhe_loss(tape, text)?;
    let iakd = iakd_loss(tape, z_hat, t_hat, text, tau)?;

    let image_side = {
        let scaled = tape.scale(takd, weights.lambda_image)?;
        tape.add(tam, scaled)?
    };
    let text_side = {
        let scaled = tape.scale(iakd, weights.lambda_text)?;
        let sum = tape.add(mhe, scaled)?;
        tape.scale(sum, weights.lambda)?
    };
    let total = tape.add(image_side, text_side)?;

    let scalar = |v: Var| tape.value(v).data()[0];
    let components = LossComponents {
        tam: scalar(tam),
        takd: scalar(takd),
        mhe: scalar(mhe),
        iakd: scalar(iakd),
        total: scalar(total),
    };
    Ok((total, components))
}

/// Value-only evaluation of the combined objective.
pub fn tima_loss(
    student: &DualEncoder,
    teacher: &TeacherSnapshot,
    clean: &Tensor,
    adversarial: &Tensor,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<LossComponents> {
    let mut tape = Tape::new();
    let frozen = crate::model::Binding::Frozen;
    let params = student.bind(&mut tape, frozen, frozen);
    let (_, components) = tima_loss_on(
        &mut tape,
        student,
        &params,
        teacher,
        clean,
        adversarial,
        labels,
        weights,
    )?;
    Ok(components)
}

/// Labels of a batch expanded to rows of a one-hot matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data: Vec<f64> = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}
