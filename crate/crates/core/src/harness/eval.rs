use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::attacks::{
    attacked_predictions, batch_seed, classify, pgd_attack, text_for, AttackConfig, EVAL_BATCH,
};
use crate::data::Dataset;
use crate::losses::cosine_similarities;
use crate::math;
use crate::model::{DualEncoder, ImageEncoder, TeacherSnapshot};
use crate::tensor::Tensor;
use crate::{Error, Result};

fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    correct as f64 / labels.len() as f64
}

fn clean_predictions(model: &DualEncoder, text: &Tensor, data: &Dataset) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut predictions = Vec::with_capacity(data.len());
    for indices in data.chunks(EVAL_BATCH) {
        let (images, _) = data.batch(&indices)?;
        predictions.extend(classify(&model.encode_images(&images)?, text)?);
    }
    Ok(predictions)
}

/// Clean accuracy with the model's own class embeddings.
pub fn eval_clean(model: &DualEncoder, test: &Dataset) -> Result<f64> {
    let text = model.encode_classes()?;
    Ok(accuracy(
        &clean_predictions(model, &text, test)?,
        test.labels(),
    ))
}

/// `(min, mean)` Euclidean distance over unordered pairs of rows.
pub fn interclass_stats(text: &Tensor) -> Result<(f64, f64)> {
    let (classes, _) = text.expect_matrix("interclass_stats")?;
    if classes < 2 {
        return Err(Error::TooFewClasses(classes));
    }
    let (mut min, mut sum, mut pairs) = (f64::INFINITY, 0.0, 0usize);
    for j in 0..classes {
        for k in j + 1..classes {
            let sq: f64 = text
                .row(j)
                .iter()
                .zip(text.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let d = math::sqrt(sq);
            min = min.min(d);
            sum += d;
            pairs += 1;
        }
    }
    Ok((min, sum / pairs as f64))
}

/// Mean cosine similarity of class pairs sharing a superclass minus the mean
/// over pairs from different superclasses.
pub fn block_structure_gap(text: &Tensor, superclass_of: &[usize]) -> Result<f64> {
    let sims = cosine_similarities(text, text)?;
    if sims.rows() != superclass_of.len() {
        return Err(Error::ShapeMismatch {
            op: "block_structure_gap",
            detail: format!(
                "{} classes, {} superclass entries",
                sims.rows(),
                superclass_of.len()
            ),
        });
    }
    let (mut within, mut within_n, mut across, mut across_n) = (0.0, 0usize, 0.0, 0usize);
    for j in 0..sims.rows() {
        for k in j + 1..sims.rows() {
            if superclass_of[j] == superclass_of[k] {
                within += sims.get(j, k);
                within_n += 1;
            } else {
                across += sims.get(j, k);
                across_n += 1;
            }
        }
    }
    if within_n == 0 || across_n == 0 {
        return Err(Error::InvalidConfig(
            "block structure needs pairs both within and across superclasses".into(),
        ));
    }
    Ok(within / within_n as f64 - across / across_n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperclassConfusion {
    pub superclass: usize,
    pub samples: usize,
    pub correct: usize,
    /// Misclassified into another class of the same superclass.
    pub within_superclass_errors: usize,
    pub cross_superclass_errors: usize,
}

pub fn superclass_confusion(
    predictions: &[usize],
    labels: &[usize],
    superclass_of: &[usize],
    num_superclasses: usize,
) -> Vec<SuperclassConfusion> {
    let mut out: Vec<SuperclassConfusion> = (0..num_superclasses)
        .map(|superclass| SuperclassConfusion {
            superclass,
            samples: 0,
            correct: 0,
            within_superclass_errors: 0,
            cross_superclass_errors: 0,
        })
        .collect();
    for (&p, &y) in predictions.iter().zip(labels) {
        let entry = &mut out[superclass_of[y]];
        entry.samples += 1;
        if p == y {
            entry.correct += 1;
        } else if superclass_of[p] == superclass_of[y] {
            entry.within_superclass_errors += 1;
        } else {
            entry.cross_superclass_errors += 1;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub clean_accuracy: f64,
    /// `(ε, accuracy)` in the order requested.
    pub robust_accuracy: Vec<(f64, f64)>,
    pub text_min_distance: f64,
    pub text_mean_distance: f64,
    pub teacher_text_min_distance: f64,
    pub teacher_text_mean_distance: f64,
    pub text_block_gap: f64,
    pub teacher_text_block_gap: f64,
    pub superclass_confusion: Vec<SuperclassConfusion>,
}

/// Clean accuracy, robust accuracy at each ε (other attack settings from
/// `template`), and text-embedding geometry for student and teacher.
pub fn evaluate(
    model: &DualEncoder,
    teacher: &TeacherSnapshot,
    test: &Dataset,
    epsilons: &[f64],
    template: &AttackConfig,
) -> Result<EvalMetrics> {
    let text = model.encode_classes()?;
    let predictions = clean_predictions(model, &text, test)?;
    let clean_accuracy = accuracy(&predictions, test.labels());
    let mut robust_accuracy = Vec::with_capacity(epsilons.len());
    for &epsilon in epsilons {
        let cfg = AttackConfig {
            epsilon,
            ..template.clone()
        };
        let attacked = attacked_predictions(model, teacher, test, &cfg)?;
        robust_accuracy.push((epsilon, accuracy(&attacked, test.labels())));
    }
    let (text_min_distance, text_mean_distance) = interclass_stats(&text)?;
    let (teacher_text_min_distance, teacher_text_mean_distance) = interclass_stats(teacher.text())?;
    let has_blocks = test.num_superclasses() > 1 && test.num_superclasses() < test.num_classes();
    let (text_block_gap, teacher_text_block_gap) = if has_blocks {
        (
            block_structure_gap(&text, test.superclass_of())?,
            block_structure_gap(teacher.text(), test.superclass_of())?,
        )
    } else {
        (0.0, 0.0)
    };
    Ok(EvalMetrics {
        clean_accuracy,
        robust_accuracy,
        text_min_distance,
        text_mean_distance,
        teacher_text_min_distance,
        teacher_text_mean_distance,
        text_block_gap,
        teacher_text_block_gap,
        superclass_confusion: superclass_confusion(
            &predictions,
            test.labels(),
            test.superclass_of(),
            test.num_superclasses(),
        ),
    })
}

/// Cosine-similarity diagnostics for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixSet {
    /// Class embeddings against each other.
    pub text_text: Tensor,
    /// Per-class mean clean image embedding (renormalized) against the class
    /// embeddings; row = image class.
    pub image_text: Tensor,
    /// Per-class mean adversarial image embeddings against each other, one
    /// matrix per ε.
    pub adversarial: Vec<(f64, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrices {
    pub student: MatrixSet,
    pub teacher: MatrixSet,
}

fn class_means(embeddings: &[Tensor], labels: &[usize], classes: usize) -> Result<Tensor> {
    let dim = embeddings.first().map_or(0, Tensor::cols);
    let mut sums = vec![0.0; classes * dim];
    let mut rows = embeddings
        .iter()
        .flat_map(|t| (0..t.rows()).map(move |i| t.row(i)));
    for &y in labels {
        let row = rows.next().ok_or(Error::EmptyDataset)?;
        for (s, v) in sums[y * dim..(y + 1) * dim].iter_mut().zip(row) {
            *s += v;
        }
    }
    let means = Tensor::matrix(classes, dim, sums)?;
    let mut tape = crate::tensor::Tape::new();
    let v = tape.constant(means);
    let normalized = tape.l2_normalize_rows(v)?;
    Ok(tape.value(normalized).clone())
}

fn matrix_set<E: ImageEncoder>(
    encoder: &E,
    text: &Tensor,
    test: &Dataset,
    epsilons: &[f64],
    template: &AttackConfig,
    encode: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<MatrixSet> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = test.num_classes();
    let mut clean = Vec::new();
    for indices in test.chunks(EVAL_BATCH) {
        let (images, _) = test.batch(&indices)?;
        clean.push(encode(&images)?);
    }
    let clean_means = class_means(&clean, test.labels(), classes)?;
    let mut adversarial = Vec::with_capacity(epsilons.len());
    for &epsilon in epsilons {
        let mut embedded = Vec::new();
        for (b, indices) in test.chunks(EVAL_BATCH).enumerate() {
            let (images, labels) = test.batch(&indices)?;
            let cfg = AttackConfig {
                epsilon,
                seed: batch_seed(template.seed, b),
                ..template.clone()
            };
            let attacked = pgd_attack(encoder, text, &images, &labels, &cfg)?;
            embedded.push(encode(&attacked)?);
        }
        let means = class_means(&embedded, test.labels(), classes)?;
        adversarial.push((epsilon, cosine_similarities(&means, &means)?));
    }
    Ok(MatrixSet {
        text_text: cosine_similarities(text, text)?,
        image_text: cosine_similarities(&clean_means, text)?,
        adversarial,
    })
}

/// Student and teacher similarity matrices. The student is attacked with the
/// class embeddings chosen by `template.text_source`; the teacher always
/// with its own.
pub fn similarity_matrices(
    model: &DualEncoder,
    teacher: &TeacherSnapshot,
    test: &Dataset,
    epsilons: &[f64],
    template: &AttackConfig,
) -> Result<SimilarityMatrices> {
    let student_attack_text = text_for(model, teacher, template.text_source)?;
    let mut student = matrix_set(model, &student_attack_text, test, epsilons, template, |x| {
        model.encode_images(x)
    })?;
    // the student's own classes define its text-text and image-text views
    let own_text = model.encode_classes()?;
    student.text_text = cosine_similarities(&own_text, &own_text)?;
    if student_attack_text != own_text {
        let mut clean = Vec::new();
        for indices in test.chunks(EVAL_BATCH) {
            let (images, _) = test.batch(&indices)?;
            clean.push(model.encode_images(&images)?);
        }
        let means = class_means(&clean, test.labels(), test.num_classes())?;
        student.image_text = cosine_similarities(&means, &own_text)?;
    }
    let teacher_set = matrix_set(teacher, teacher.text(), test, epsilons, template, |x| {
        teacher.encode_images(x)
    })?;
    Ok(SimilarityMatrices {
        student,
        teacher: teacher_set,
    })
}
