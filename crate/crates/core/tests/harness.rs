mod common;

use tima_core::attacks::{AttackConfig, TextSource, PIXEL_STEP};
use tima_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use tima_core::harness::{
    eval_clean, evaluate, finetune, finetune_observed, interclass_stats, pretrain_clean,
    similarity_matrices, TrainConfig, Variant,
};
use tima_core::losses::{contrastive_ce, cosine_similarities};
use tima_core::model::{snapshot_teacher, DualEncoder, EncoderConfig};
use tima_core::tensor::{Tape, Tensor};

fn one_batch(seed: u64, variant: Variant) -> TrainConfig {
    TrainConfig {
        seed,
        variant,
        epochs: 1,
        ..TrainConfig::finetune()
    }
}

#[test]
fn default_pretraining_is_accurate_monotone_early_and_deterministic() {
    let spec = SyntheticSpec::default();
    let (train, test) = generate_synthetic(&spec).unwrap();
    let model = DualEncoder::new(EncoderConfig::default()).unwrap();
    let cfg = TrainConfig::pretrain();
    let out = pretrain_clean(&model, &train, &cfg).unwrap();
    assert_eq!(out.epoch_losses.len(), 20);
    let first = &out.epoch_losses[..3];
    assert!(first.windows(2).all(|w| w[1] <= w[0]), "{first:?}");
    let acc = eval_clean(&out.model, &test).unwrap();
    assert!(acc >= 0.9, "clean accuracy {acc}");
    let again = pretrain_clean(&model, &train, &cfg).unwrap();
    assert_eq!(again.model.params(), out.model.params());
}

#[test]
fn tecoa_keeps_the_class_embeddings() {
    let f = common::pretrained(0);
    let out = finetune(
        &f.model,
        &f.teacher,
        &f.train,
        &one_batch(0, Variant::Tecoa),
    )
    .unwrap();
    let k = f.model.image_param_count();
    assert_eq!(out.model.params()[k..], f.model.params()[k..]);
    assert_ne!(out.model.params()[..k], f.model.params()[..k]);
}

#[test]
fn tima_moves_both_towers_after_one_batch() {
    let f = common::pretrained(1);
    let cfg = TrainConfig {
        batch_size: f.train.len(),
        ..one_batch(1, Variant::Tima)
    };
    let out = finetune(&f.model, &f.teacher, &f.train, &cfg).unwrap();
    assert_eq!(out.batch_losses.len(), 1);
    let k = f.model.image_param_count();
    assert_ne!(out.model.params()[..k], f.model.params()[..k]);
    assert_ne!(out.model.params()[k..], f.model.params()[k..]);
}

#[test]
fn no_variant_touches_the_teacher() {
    let f = common::pretrained(2);
    let before = f.teacher.fingerprint();
    for v in Variant::ALL {
        finetune(&f.model, &f.teacher, &f.train, &one_batch(2, v)).unwrap();
        assert_eq!(f.teacher.fingerprint(), before, "{v}");
    }
}

#[test]
fn tecoa_batches_are_plain_adversarial_cross_entropy() {
    let f = common::pretrained(3);
    let mut batches = 0;
    finetune_observed(
        &f.model,
        &f.teacher,
        &f.train,
        &one_batch(3, Variant::Tecoa),
        |b| {
            let z = b.student.encode_images(b.adversarial).unwrap();
            let sims = cosine_similarities(&z, f.teacher.text()).unwrap();
            let mut tape = Tape::new();
            let s = tape.constant(sims);
            let ce = contrastive_ce(&mut tape, s, b.labels, b.weights.temperature).unwrap();
            assert!((b.components.total - tape.value(ce).data()[0]).abs() <= 1e-12);
            batches += 1;
        },
    )
    .unwrap();
    assert!(batches > 1);
}

#[test]
fn finetuning_is_deterministic() {
    let f = common::pretrained(4);
    let cfg = one_batch(4, Variant::Tima);
    let a = finetune(&f.model, &f.teacher, &f.train, &cfg).unwrap();
    let b = finetune(&f.model, &f.teacher, &f.train, &cfg).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.epoch_losses, b.epoch_losses);
}

#[test]
fn image_collapsed_onto_the_first_class_scores_one() {
    let model = DualEncoder::new(common::small_config(0)).unwrap();
    let t0 = model.encode_classes().unwrap().row(0).to_vec();
    let mut params = model.params().to_vec();
    let k = model.image_param_count();
    params[k - 2] = Tensor::zeros(params[k - 2].shape());
    params[k - 1] = Tensor::vector(t0).unwrap();
    let collapsed =
        DualEncoder::from_parts(model.config().clone(), model.temperature(), params).unwrap();
    let n = 20;
    let data = Dataset::new(
        8,
        4,
        vec![0, 0, 1, 1, 2, 2, 3, 3],
        vec![0; n],
        vec![0.5; n * 64],
    )
    .unwrap();
    assert_eq!(eval_clean(&collapsed, &data).unwrap(), 1.0);
}

#[test]
fn interclass_distances_on_hand_cases() {
    let h = 3f64.sqrt() / 2.0;
    let tri = Tensor::from_rows(&[[1.0, 0.0], [-0.5, h], [-0.5, -h]]).unwrap();
    let (min, mean) = interclass_stats(&tri).unwrap();
    assert!((min - 1.7321).abs() < 1e-4 && (mean - 1.7321).abs() < 1e-4);
}

#[test]
fn evaluation_reports_each_radius_and_the_teacher() {
    let f = common::pretrained(0);
    let eps = [0.0, PIXEL_STEP, 4.0 * PIXEL_STEP];
    let m = evaluate(
        &f.model,
        &f.teacher,
        &f.test,
        &eps,
        &AttackConfig::evaluation(0.0),
    )
    .unwrap();
    assert_eq!(
        m.robust_accuracy.iter().map(|r| r.0).collect::<Vec<_>>(),
        eps
    );
    assert_eq!(m.robust_accuracy[0].1, m.clean_accuracy);
    // Unchanged student: its geometry is the teacher's.
    assert_eq!(m.text_min_distance, m.teacher_text_min_distance);
    assert!((0.0..=2.0).contains(&m.text_min_distance));
    let total: usize = m.superclass_confusion.iter().map(|c| c.samples).sum();
    assert_eq!(total, f.test.len());
}

#[test]
fn similarity_matrices_have_the_expected_shape() {
    let f = common::pretrained(1);
    let tuned = finetune(&f.model, &f.teacher, &f.train, &one_batch(1, Variant::Tima))
        .unwrap()
        .model;
    let eps = [PIXEL_STEP, 4.0 * PIXEL_STEP];
    let cfg = AttackConfig {
        text_source: TextSource::Student,
        ..AttackConfig::evaluation(0.0)
    };
    let m = similarity_matrices(&tuned, &f.teacher, &f.test, &eps, &cfg).unwrap();
    for set in [&m.student, &m.teacher] {
        let mut square = vec![&set.text_text, &set.image_text];
        square.extend(set.adversarial.iter().map(|(_, t)| t));
        for t in square {
            assert_eq!(t.shape(), &[8, 8]);
        }
        let mut symmetric = vec![&set.text_text];
        symmetric.extend(set.adversarial.iter().map(|(_, t)| t));
        for t in symmetric {
            for i in 0..8 {
                for j in 0..8 {
                    assert_eq!(t.get(i, j), t.get(j, i));
                }
            }
        }
        for i in 0..8 {
            assert!((set.text_text.get(i, i) - 1.0).abs() <= 1e-9);
        }
    }
    // The teacher side depends only on the pretrained weights.
    let other = finetune(
        &f.model,
        &f.teacher,
        &f.train,
        &one_batch(7, Variant::Tecoa),
    )
    .unwrap()
    .model;
    let n = similarity_matrices(&other, &f.teacher, &f.test, &eps, &cfg).unwrap();
    assert_eq!(m.teacher, n.teacher);
    assert_eq!(
        snapshot_teacher(&f.model).unwrap().fingerprint(),
        f.teacher.fingerprint()
    );
}
