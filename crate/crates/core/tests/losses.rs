use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tima_core::losses::{
    adaptive_margin, contrastive_ce, cosine_similarities, kl_rows, mhe_loss, tam_loss, tima_loss,
    LossWeights, MarginSign,
};
use tima_core::model::{snapshot_teacher, DualEncoder, EncoderConfig};
use tima_core::tensor::{Tape, Tensor};

fn normalize(rows: &[Vec<f64>]) -> Tensor {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    Tensor::from_rows(&unit).unwrap()
}

fn mhe_value(t: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(t.clone());
    let out = mhe_loss(&mut tape, v).unwrap();
    tape.value(out).data()[0]
}

/// Direct double loop, independent of the tape.
fn mhe_oracle(t: &Tensor) -> f64 {
    let c = t.rows();
    let mut total = 0.0;
    for j in 0..c {
        for k in 0..c {
            if j != k {
                let d2: f64 = t
                    .row(j)
                    .iter()
                    .zip(t.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                total += 1.0 / (1.0 + d2);
            }
        }
    }
    total / (c * (c - 1)) as f64
}

fn unit_rows(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, cols), rows).prop_filter_map(
        "degenerate row",
        |r| {
            if r.iter()
                .all(|row| row.iter().map(|v| v * v).sum::<f64>() > 1e-3)
            {
                Some(normalize(&r))
            } else {
                None
            }
        },
    )
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        logits in prop::collection::vec(-1e4f64..1e4, 12),
        tau in prop::sample::select(vec![0.01, 0.1, 1.0, 7.0]),
    ) {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::matrix(3, 4, logits).unwrap());
        let lp = tape.row_log_softmax(s, tau).unwrap();
        let out = tape.value(lp);
        for i in 0..3 {
            let sum: f64 = out.row(i).iter().map(|v| v.exp()).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row {} sums to {}", i, sum);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(
        p in prop::collection::vec(-5.0f64..5.0, 8),
        q in prop::collection::vec(-5.0f64..5.0, 8),
        tau in prop::sample::select(vec![0.01, 0.1, 1.0]),
    ) {
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::matrix(2, 4, p).unwrap());
        let qv = tape.constant(Tensor::matrix(2, 4, q).unwrap());
        let kl = kl_rows(&mut tape, pv, qv, tau).unwrap();
        let same = kl_rows(&mut tape, pv, pv, tau).unwrap();
        prop_assert!(tape.value(kl).data()[0] >= -1e-12);
        prop_assert_eq!(tape.value(same).data()[0], 0.0);
    }

    #[test]
    fn mhe_matches_pairwise_oracle(t in unit_rows(5, 3)) {
        let v = mhe_value(&t);
        prop_assert!((v - mhe_oracle(&t)).abs() < 1e-12);
        prop_assert!((0.2 - 1e-12..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn margin_entries_lie_in_zero_to_m(
        z in unit_rows(4, 3),
        t in unit_rows(3, 3),
        m in 0.0f64..0.5,
        eta in 0.05f64..0.95,
        labels in prop::collection::vec(0usize..3, 4),
    ) {
        // Nonnegative similarities: fold every coordinate into the positive orthant.
        let abs = |x: &Tensor| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.abs()).collect()).unwrap();
        let (z, t) = (abs(&z), abs(&t));
        let it = cosine_similarities(&z, &t).unwrap();
        let tt = cosine_similarities(&t, &t).unwrap();
        let margin = adaptive_margin(&it, &tt, &labels, m, eta, MarginSign::Literal).unwrap();
        for &v in margin.data() {
            prop_assert!(v >= 0.0 && v <= m + 1e-12);
        }
        let zero = adaptive_margin(&it, &tt, &labels, 0.0, eta, MarginSign::Literal).unwrap();
        prop_assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tam_is_monotone_in_the_target_margin(
        sims in prop::collection::vec(-1.0f64..1.0, 6),
        label in 0usize..3,
        lo in 0.0f64..0.3,
        bump in 0.0f64..0.3,
        tau in prop::sample::select(vec![0.01, 0.1, 1.0]),
    ) {
        let s = Tensor::matrix(2, 3, sims).unwrap();
        let labels = [label, (label + 1) % 3];
        let value = |target: f64| {
            let mut margin = Tensor::zeros(&[2, 3]);
            let mut data = margin.data().to_vec();
            data[label] = target;
            margin = Tensor::matrix(2, 3, data).unwrap();
            let mut tape = Tape::new();
            let sv = tape.constant(s.clone());
            let out = tam_loss(&mut tape, sv, &margin, &labels, tau).unwrap();
            tape.value(out).data()[0]
        };
        prop_assert!(value(lo + bump) >= value(lo));
    }

    #[test]
    fn tam_without_margin_is_contrastive_ce(
        sims in prop::collection::vec(-1.0f64..1.0, 8),
        labels in prop::collection::vec(0usize..4, 2),
    ) {
        let s = Tensor::matrix(2, 4, sims).unwrap();
        let mut tape = Tape::new();
        let sv = tape.constant(s);
        let tam = tam_loss(&mut tape, sv, &Tensor::zeros(&[2, 4]), &labels, 0.01).unwrap();
        let ce = contrastive_ce(&mut tape, sv, &labels, 0.01).unwrap();
        prop_assert_eq!(tape.value(tam).data()[0], tape.value(ce).data()[0]);
    }
}

#[test]
fn mhe_decreases_when_one_embedding_moves_away() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for _ in 0..50 {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let t = normalize(&rows);
        // Push row 0 away from the mean of the others; every distance grows
        // when the step stays on the far side of each.
        let others: Vec<f64> = (0..3)
            .map(|j| (1..4).map(|r| t.get(r, j)).sum::<f64>())
            .collect();
        let moved: Vec<f64> = (0..3).map(|j| t.get(0, j) - 0.05 * others[j]).collect();
        let mut next = rows.clone();
        next[0] = moved;
        let next = normalize(&next);
        let grew = (1..4).all(|r| {
            let d = |x: &Tensor| {
                x.row(0)
                    .iter()
                    .zip(x.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            };
            d(&next) > d(&t)
        });
        if grew {
            assert!(mhe_value(&next) < mhe_value(&t));
            checked += 1;
        }
    }
    assert!(checked >= 10, "only {checked} configurations exercised");
}

/// Projected gradient descent on free unit vectors: the minimum of the
/// pairwise energy is the regular simplex with inner products `−1/(N−1)`.
fn simplex_inner_products(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut x = Tensor::from_rows(&rows).unwrap();
    for _ in 0..3000 {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let unit = tape.l2_normalize_rows(v).unwrap();
        let loss = mhe_loss(&mut tape, unit).unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(v).unwrap();
        let stepped: Vec<f64> = x
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a - 0.5 * b)
            .collect();
        x = normalize(&stepped.chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>());
    }
    let s = cosine_similarities(&x, &x).unwrap();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            out.push(s.get(i, j));
        }
    }
    out
}

#[test]
fn mhe_descent_reaches_the_simplex() {
    for (n, d) in [(3usize, 2usize), (4, 3)] {
        let target = -1.0 / (n as f64 - 1.0);
        for seed in 0..10 {
            for ip in simplex_inner_products(n, d, seed) {
                assert!(
                    (ip - target).abs() <= 1e-2,
                    "N={n} d={d} seed {seed}: {ip} vs {target}"
                );
            }
        }
    }
}

#[test]
fn tecoa_reduction_over_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = EncoderConfig {
        input_dim: 8,
        hidden_dims: vec![6],
        embed_dim: 4,
        num_classes: 5,
        seed: 1,
    };
    let teacher = snapshot_teacher(&DualEncoder::new(cfg.clone()).unwrap()).unwrap();
    let student = DualEncoder::new(EncoderConfig { seed: 2, ..cfg }).unwrap();
    let weights = LossWeights {
        margin: 0.0,
        lambda: 0.0,
        lambda_image: 0.0,
        ..LossWeights::default()
    };
    for _ in 0..100 {
        let n = rng.random_range(1..6);
        let clean = Tensor::matrix(
            n,
            8,
            (0..n * 8).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let adv = Tensor::matrix(
            n,
            8,
            (0..n * 8).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let total = tima_loss(&student, &teacher, &clean, &adv, &labels, &weights)
            .unwrap()
            .total;

        let z = student.encode_images(&adv).unwrap();
        let sims = cosine_similarities(&z, teacher.text()).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(sims);
        let ce = contrastive_ce(&mut tape, s, &labels, weights.temperature).unwrap();
        assert!((total - tape.value(ce).data()[0]).abs() <= 1e-12);
    }
}
