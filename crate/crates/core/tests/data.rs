use tima_core::data::{
    class_prototypes, generate_shifted_probe, generate_synthetic, quantize, SyntheticSpec,
};
use tima_core::tensor::Tensor;
use tima_core::Error;

/// Pearson correlation of two prototype rows.
fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

fn within_and_across(protos: &Tensor, superclass_of: &[usize]) -> (f64, f64) {
    let (mut w, mut wn, mut a, mut an) = (0.0, 0, 0.0, 0);
    for j in 0..protos.rows() {
        for k in j + 1..protos.rows() {
            let c = correlation(protos.row(j), protos.row(k));
            if superclass_of[j] == superclass_of[k] {
                w += c;
                wn += 1;
            } else {
                a += c;
                an += 1;
            }
        }
    }
    (w / wn as f64, a / an as f64)
}

#[test]
fn prototypes_correlate_within_superclasses() {
    // The shipped default and the wider 0.15 shift both keep siblings closer.
    for shift in [SyntheticSpec::default().within_super_shift, 0.15] {
        for seed in 0..3 {
            let spec = SyntheticSpec {
                within_super_shift: shift,
                seed,
                ..SyntheticSpec::default()
            };
            let (within, across) =
                within_and_across(&class_prototypes(&spec).unwrap(), &spec.superclass_map());
            assert!(
                within > across,
                "shift {shift} seed {seed}: {within} <= {across}"
            );
        }
    }
}

#[test]
fn generation_is_deterministic_and_in_range() {
    let spec = SyntheticSpec::default();
    let (a_train, a_test) = generate_synthetic(&spec).unwrap();
    let (b_train, b_test) = generate_synthetic(&spec).unwrap();
    assert_eq!(a_train, b_train);
    assert_eq!(a_test, b_test);
    assert_eq!((a_train.len(), a_test.len()), (2000, 500));
    assert!(a_train.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(a_train.pixels().iter().all(|&p| quantize(p) == p));
    assert_ne!(a_train.pixels()[..256], a_test.pixels()[..256]);

    let other = generate_synthetic(&SyntheticSpec { seed: 1, ..spec })
        .unwrap()
        .0;
    assert_ne!(a_train.pixels(), other.pixels());
}

#[test]
fn classes_are_balanced_and_mapped() {
    let spec = SyntheticSpec {
        train_count: 1003,
        ..SyntheticSpec::default()
    };
    let (train, _) = generate_synthetic(&spec).unwrap();
    let mut counts = vec![0usize; train.num_classes()];
    for &y in train.labels() {
        counts[y] += 1;
    }
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 1, "{counts:?}");
    assert_eq!(train.superclass_of(), &[0, 0, 1, 1, 2, 2, 3, 3]);
}

#[test]
fn invalid_specs_are_rejected() {
    for bad in [
        SyntheticSpec {
            train_count: 0,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            noise_sigma: -0.1,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            within_super_shift: f64::NAN,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            num_superclasses: 0,
            ..SyntheticSpec::default()
        },
    ] {
        assert!(
            matches!(generate_synthetic(&bad), Err(Error::InvalidSpec(_))),
            "{bad:?}"
        );
    }
}

#[test]
fn shifted_probe_keeps_labels_and_moves_pixels() {
    let spec = SyntheticSpec::default();
    let (_, test) = generate_synthetic(&spec).unwrap();
    let probe = generate_shifted_probe(&spec, 99, 0.05).unwrap();
    assert_eq!(probe.len(), test.len());
    assert_eq!(probe.labels(), test.labels());
    assert_ne!(probe.pixels(), test.pixels());
    assert_eq!(probe, generate_shifted_probe(&spec, 99, 0.05).unwrap());
}
