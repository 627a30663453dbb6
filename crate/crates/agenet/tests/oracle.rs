//! Brute-force oracle equivalence for the numeric kernels, plus property
//! tests for the dataset split and softmax invariants. Every oracle here is
//! written independently of the implementation (plain nested loops).

mod common;

use common::rand_tensor;
use proptest::prelude::*;

use agenet::data::{split_dataset, Gender, SampleRecord};
use agenet::eval::{aabd, confusion_matrix, probability_histogram};
use agenet::model::{ensemble_predict, Prediction};
use agenet::tensor::ops;

// ---------------------------------------------------------------------------
// conv2d vs a quadruple-loop oracle
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64], n: usize, cin: usize, h: usize, w: usize,
    wt: &[f64], cout: usize, k: usize,
    b: &[f64], stride: usize, pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[((ni * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn conv2d_matches_oracle_on_shape_sweep() {
    let mut cases = 0;
    for h in 1..=8usize {
        for w in 1..=8usize {
            for k in 1..=3usize {
                for stride in [1, 2] {
                    for pad in [0, 1] {
                        if h + 2 * pad < k || w + 2 * pad < k {
                            continue;
                        }
                        let (n, cin, cout) = (2, 2, 3);
                        let seed = (((h * 8 + w) * 3 + k) * 2 + stride) as u64;
                        let x = rand_tensor::<f64>(&[n, cin, h, w], seed, -1.0, 1.0);
                        let wt = rand_tensor::<f64>(&[cout, cin, k, k], seed + 1, -1.0, 1.0);
                        let b = rand_tensor::<f64>(&[cout], seed + 2, -1.0, 1.0);
                        let got = ops::conv2d(&x, &wt, &b, stride, pad).unwrap();
                        let (want, oh, ow) =
                            conv_oracle(&x.data(), n, cin, h, w, &wt.data(), cout, k, &b.data(), stride, pad);
                        assert_eq!(got.dims(), &[n, cout, oh, ow]);
                        for (g, e) in got.data().iter().zip(&want) {
                            assert!((g - e).abs() < 1e-10, "h{h} w{w} k{k} s{stride} p{pad}");
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    assert!(cases > 500, "sweep too small: {cases} cases");
}

#[test]
fn dense_matches_triple_loop() {
    for seed in 0..20u64 {
        let (n, f, g) = (3, 5, 4);
        let x = rand_tensor::<f64>(&[n, f], seed, -1.0, 1.0);
        let w = rand_tensor::<f64>(&[f, g], seed + 1, -1.0, 1.0);
        let b = rand_tensor::<f64>(&[g], seed + 2, -1.0, 1.0);
        let got = ops::dense(&x, &w, &b).unwrap();
        for i in 0..n {
            for j in 0..g {
                let mut acc = b.data()[j];
                for kk in 0..f {
                    acc += x.data()[i * f + kk] * w.data()[kk * g + j];
                }
                assert!((got.data()[i * g + j] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_matches_direct_formula() {
    for seed in 0..20u64 {
        let x = rand_tensor::<f64>(&[4, 6], seed, -3.0, 3.0);
        let got = ops::softmax(&x, 1).unwrap();
        for i in 0..4 {
            let row = &x.data()[i * 6..(i + 1) * 6];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..6 {
                assert!((got.data()[i * 6 + j] - row[j].exp() / z).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cross_entropy_matches_log_softmax_oracle() {
    for seed in 0..20u64 {
        let x = rand_tensor::<f64>(&[3, 5], seed, -3.0, 3.0);
        let labels = [seed as usize % 5, (seed as usize + 2) % 5, (seed as usize + 4) % 5];
        let got = ops::cross_entropy(&x, &labels).unwrap().data()[0];
        let mut want = 0.0;
        for (i, &lab) in labels.iter().enumerate() {
            let row = &x.data()[i * 5..(i + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[lab].exp() / z).ln();
        }
        want /= labels.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// metric oracles
// ---------------------------------------------------------------------------

#[test]
fn aabd_matches_integer_oracle() {
    let pred = [0usize, 3, 10, 5, 5, 2];
    let truth = [1usize, 3, 0, 7, 5, 4];
    let want: f64 = pred
        .iter()
        .zip(&truth)
        .map(|(&p, &t)| (p as i64 - t as i64).unsigned_abs() as f64)
        .sum::<f64>()
        / pred.len() as f64;
    assert_eq!(aabd(&pred, &truth).unwrap(), want);
}

#[test]
fn confusion_matrix_matches_counting_oracle() {
    let pred = [0usize, 1, 2, 2, 1, 0, 2, 1];
    let truth = [0usize, 1, 1, 2, 0, 2, 2, 1];
    let got = confusion_matrix(&pred, &truth, 3).unwrap();
    let mut want = vec![vec![0u64; 3]; 3];
    for (&p, &t) in pred.iter().zip(&truth) {
        want[t][p] += 1;
    }
    assert_eq!(got, want);
    let total: u64 = got.iter().flatten().sum();
    assert_eq!(total as usize, pred.len());
}

#[test]
fn ensemble_average_matches_elementwise_mean() {
    let mk = |g: [f64; 2], a0: f64| Prediction {
        gender_probs: g.to_vec(),
        age_probs: vec![a0, 1.0 - a0],
    };
    let m1 = vec![mk([0.9, 0.1], 0.3), mk([0.2, 0.8], 0.6)];
    let m2 = vec![mk([0.5, 0.5], 0.7), mk([0.4, 0.6], 0.2)];
    let m3 = vec![mk([0.1, 0.9], 0.5), mk([0.6, 0.4], 0.4)];
    let got = ensemble_predict(&[m1.clone(), m2.clone(), m3.clone()]).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let want =
                (m1[i].gender_probs[j] + m2[i].gender_probs[j] + m3[i].gender_probs[j]) / 3.0;
            assert!((got[i].gender_probs[j] - want).abs() < 1e-15);
            let want = (m1[i].age_probs[j] + m2[i].age_probs[j] + m3[i].age_probs[j]) / 3.0;
            assert!((got[i].age_probs[j] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn histogram_matches_counting_oracle() {
    let probs = [0.0, 0.049, 0.05, 0.5, 0.999, 1.0];
    let got = probability_histogram(&probs, 20);
    assert_eq!(got.iter().sum::<u64>() as usize, probs.len());
    assert_eq!(got[0], 2); // 0.0 and 0.049
    assert_eq!(got[1], 1); // 0.05
    assert_eq!(got[10], 1); // 0.5
    assert_eq!(got[19], 2); // last bin is right-inclusive: 0.999 and 1.0
}

// ---------------------------------------------------------------------------
// structural properties
// ---------------------------------------------------------------------------

#[test]
fn maxpool_backward_conserves_gradient_mass() {
    for seed in 0..20u64 {
        let x = rand_tensor::<f64>(&[2, 3, 6, 6], seed, -1.0, 1.0);
        x.set_requires_grad(true);
        let y = ops::maxpool2d(&x, 2, 2).unwrap();
        let windows = y.numel() as f64;
        ops::sum(&y).backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g.iter().sum::<f64>(), windows);
        assert!(g.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn upsample_preserves_constants_exactly() {
    for &c in &[0.0, 1.0, -2.5, 0.3333333333333333] {
        let x = agenet::tensor::Tensor::<f64>::full(&[1, 2, 3, 3], c);
        let y = ops::upsample_bilinear(&x, 9, 7).unwrap();
        assert!(y.data().iter().all(|&v| v == c), "constant {c} not preserved");
    }
}

#[test]
fn upsample_2x2_to_4x4_matches_hand_weights() {
    // with half-pixel centers the 1D source coordinates for 2 -> 4 are
    // [-0.25, 0.25, 0.75, 1.25], clamped to [0, 1]; the separable weights on
    // the two source samples are therefore [1, .75/.25, .25/.75, 1]
    let wts = [(0usize, 0.0f64), (0, 0.25), (0, 0.75), (1, 0.0)];
    let x = agenet::tensor::Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = ops::upsample_bilinear(&x, 4, 4).unwrap();
    let src = |r: usize, c: usize| x.data()[r * 2 + c];
    for oy in 0..4 {
        for ox in 0..4 {
            let (y0, ty) = wts[oy];
            let (x0, tx) = wts[ox];
            let top = src(y0, x0) * (1.0 - tx) + src(y0, (x0 + 1).min(1)) * tx;
            let bot = src((y0 + 1).min(1), x0) * (1.0 - tx) + src((y0 + 1).min(1), (x0 + 1).min(1)) * tx;
            let want = top * (1.0 - ty) + bot * ty;
            assert!((y.data()[oy * 4 + ox] - want).abs() < 1e-12, "({oy},{ox})");
        }
    }
}

// ---------------------------------------------------------------------------
// property tests
// ---------------------------------------------------------------------------

fn fake_records(names: &[String]) -> Vec<SampleRecord> {
    names
        .iter()
        .map(|n| SampleRecord {
            path: std::path::PathBuf::from(format!("/x/{n}.jpg")),
            age_years: 30,
            gender: Gender::Male,
            bucket: 2,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_disjoint_and_exhaustive(
        names in proptest::collection::hash_set("[a-z0-9]{4,12}", 0..200),
        seed in any::<u64>(),
    ) {
        let names: Vec<String> = names.into_iter().collect();
        let records = fake_records(&names);
        let split = split_dataset(&records, seed, (0.8, 0.1, 0.1)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for part in [&split.train, &split.val, &split.test] {
            for r in part {
                prop_assert!(seen.insert(r.path.clone()), "duplicate assignment");
            }
        }
        prop_assert_eq!(seen.len(), records.len());
    }

    #[test]
    fn split_is_order_independent(
        names in proptest::collection::hash_set("[a-z0-9]{4,12}", 2..100),
        seed in any::<u64>(),
    ) {
        let names: Vec<String> = names.into_iter().collect();
        let mut reversed = names.clone();
        reversed.reverse();
        let a = split_dataset(&fake_records(&names), seed, (0.8, 0.1, 0.1)).unwrap();
        let b = split_dataset(&fake_records(&reversed), seed, (0.8, 0.1, 0.1)).unwrap();
        let key = |v: &[SampleRecord]| {
            let mut k: Vec<_> = v.iter().map(|r| r.path.clone()).collect();
            k.sort();
            k
        };
        prop_assert_eq!(key(&a.train), key(&b.train));
        prop_assert_eq!(key(&a.val), key(&b.val));
        prop_assert_eq!(key(&a.test), key(&b.test));
    }

    #[test]
    fn softmax_rows_are_distributions(
        vals in proptest::collection::vec(-20.0f64..20.0, 12),
        shift in -10.0f64..10.0,
    ) {
        let x = agenet::tensor::Tensor::from_vec(&[3, 4], vals.clone()).unwrap();
        let y = ops::softmax(&x, 1).unwrap();
        for i in 0..3 {
            let row = &y.data()[i * 4..(i + 1) * 4];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        // invariance under a constant shift of the logits
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let y2 = ops::softmax(&agenet::tensor::Tensor::from_vec(&[3, 4], shifted).unwrap(), 1).unwrap();
        for (a, b) in y.data().iter().zip(y2.data().iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
