//! Randomized invariants of AdaIN and of the rank AUC, driven by an explicit
//! proptest runner so that both the test suite and the acceptance report can use them.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use ucf_forge::disentangler::adain;
use ucf_forge::evalkit::{auc, auc_fraction};
use ucf_forge::nn::Tensor;

fn channel_stats(t: &Tensor<f64>, n: usize, c: usize) -> Vec<(f64, f64)> {
    let hw = t.len() / (n * c);
    t.data()
        .chunks(hw)
        .map(|p| {
            let m = p.iter().sum::<f64>() / hw as f64;
            let v = p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / hw as f64;
            (m, v.sqrt())
        })
        .collect()
}

fn min_channel_var(t: &Tensor<f64>, n: usize, c: usize) -> f64 {
    channel_stats(t, n, c).iter().map(|&(_, s)| s * s).fold(f64::INFINITY, f64::min)
}

type AdainCase = ((usize, usize, usize, usize), Vec<f64>, Vec<f64>);

/// `(n, c, h, w)` and two independent value buffers of that size.
fn adain_case() -> impl Strategy<Value = AdainCase> {
    (1usize..3, 1usize..4, 2usize..6, 2usize..6).prop_flat_map(|(n, c, h, w)| {
        let len = n * c * h * w;
        (
            Just((n, c, h, w)),
            prop::collection::vec(-3.0f64..3.0, len),
            prop::collection::vec(-2.0f64..2.0, len),
        )
    })
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

/// `adain(c, c) == c` within 1e-5.
pub fn adain_identity(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&adain_case(), |((n, c, h, w), content, _)| {
            let x = Tensor::from_vec(&[n, c, h, w], content).unwrap();
            let out = adain(&x, &x).unwrap();
            prop_assert!(out.max_abs_diff(&x) < 1e-5);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Output channel mean and std equal the fingerprint's within 1e-5.
pub fn adain_statistics(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&adain_case(), |((n, c, h, w), content, style)| {
            let x = Tensor::from_vec(&[n, c, h, w], content).unwrap();
            let f = Tensor::from_vec(&[n, c, h, w], style).unwrap();
            // Near-constant channels have no well-defined standardization.
            prop_assume!(min_channel_var(&x, n, c) > 0.5 && min_channel_var(&f, n, c) > 0.5);
            let out = adain(&x, &f).unwrap();
            for ((mo, so), (mf, sf)) in channel_stats(&out, n, c).into_iter().zip(channel_stats(&f, n, c)) {
                prop_assert!((mo - mf).abs() < 1e-5, "mean {mo} vs {mf}");
                prop_assert!((so - sf).abs() < 1e-5, "std {so} vs {sf}");
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Twice the number of (positive, negative) pairs won, counting ties as one, by enumeration.
pub fn brute_force(scores: &[f64], labels: &[usize]) -> (u64, u64) {
    let (mut wins2, mut pairs2) = (0, 0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs2 += 2;
                wins2 += match si.partial_cmp(&sj).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (wins2, pairs2)
}

/// Instances with both classes present; few distinct values so most contain ties.
fn auc_case() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (2usize..=50)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..6).prop_map(|v| f64::from(v) * 0.25), n),
                prop::collection::vec(0usize..2, n),
            )
        })
        .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
}

/// Rank AUC equals the brute-force pairwise win rate exactly.
pub fn auc_matches_brute_force(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&auc_case(), |(scores, labels)| {
            let frac = auc_fraction(&scores, &labels).unwrap();
            let (wins2, pairs2) = brute_force(&scores, &labels);
            prop_assert_eq!((frac.wins2, frac.pairs2), (wins2, pairs2));
            prop_assert_eq!(auc(&scores, &labels).unwrap(), wins2 as f64 / pairs2 as f64);
            Ok(())
        })
        .map_err(|e| e.to_string())
}
