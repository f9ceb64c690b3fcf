mod common;

use hart_core::corpus::BlockSequence;
use hart_core::hart::{run_sequence, ForwardMode, HartModel};
use hart_core::metrics::{
    bootstrap_test, history_sweep, ks_distance_uniform, pearson_r, permutation_test, perplexity,
    perplexity_from, weighted_f1, NllCount,
};
use hart_core::training::hulm_loss_sum;
use proptest::prelude::*;
use rand::Rng;

/// Precision/recall form, weighted by gold support.
fn f1_oracle(pred: &[usize], gold: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let tp = pred
            .iter()
            .zip(gold)
            .filter(|&(&p, &g)| p == c && g == c)
            .count() as f64;
        let np = pred.iter().filter(|&&p| p == c).count() as f64;
        let ng = gold.iter().filter(|&&g| g == c).count() as f64;
        if ng == 0.0 {
            continue;
        }
        let prec = if np == 0.0 { 0.0 } else { tp / np };
        let rec = tp / ng;
        let f = if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        };
        total += ng / gold.len() as f64 * f;
    }
    total
}

#[test]
fn weighted_f1_matches_precision_recall_oracle() {
    let mut rng = common::rng(1);
    for _ in 0..1000 {
        let k = rng.gen_range(2..6);
        let n = rng.gen_range(1..40);
        let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = gold
            .iter()
            .map(|&g| {
                if rng.gen_bool(0.5) {
                    g
                } else {
                    rng.gen_range(0..k)
                }
            })
            .collect();
        let got = weighted_f1(&pred, &gold, k).unwrap();
        assert!((got - f1_oracle(&pred, &gold, k)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn balanced_support_makes_weighted_equal_macro() {
    let mut rng = common::rng(2);
    for _ in 0..100 {
        let k = rng.gen_range(2..5);
        let gold: Vec<usize> = (0..k * 7).map(|i| i % k).collect();
        let pred: Vec<usize> = gold.iter().map(|_| rng.gen_range(0..k)).collect();
        let macro_f1: f64 = (0..k)
            .map(|c| {
                let tp = pred
                    .iter()
                    .zip(&gold)
                    .filter(|&(&p, &g)| p == c && g == c)
                    .count() as f64;
                let np = pred.iter().filter(|&&p| p == c).count() as f64;
                if tp == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (np + 7.0)
                }
            })
            .sum::<f64>()
            / k as f64;
        assert!((weighted_f1(&pred, &gold, k).unwrap() - macro_f1).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn pearson_matches_moment_form(xy in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50)) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        let n = x.len() as f64;
        let ex = x.iter().sum::<f64>() / n;
        let ey = y.iter().sum::<f64>() / n;
        let cov = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n - ex * ey;
        let vx = x.iter().map(|a| a * a).sum::<f64>() / n - ex * ex;
        let vy = y.iter().map(|b| b * b).sum::<f64>() / n - ey * ey;
        prop_assume!(vx > 1e-3 && vy > 1e-3);
        let r = pearson_r(&x, &y).unwrap();
        prop_assert!((r - cov / (vx * vy).sqrt()).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn paired_tests_are_symmetric_in_their_arguments(ab in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..30), seed in any::<u64>()) {
        let (a, b): (Vec<f64>, Vec<f64>) = ab.into_iter().unzip();
        prop_assert_eq!(permutation_test(&a, &b, 200, seed).unwrap(), permutation_test(&b, &a, 200, seed).unwrap());
        prop_assert_eq!(bootstrap_test(&a, &b, 200, seed).unwrap(), bootstrap_test(&b, &a, 200, seed).unwrap());
    }
}

#[test]
fn null_p_values_are_uniform() {
    let mut rng = common::rng(3);
    let p: Vec<f64> = (0..400)
        .map(|i| {
            let a: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
            permutation_test(&a, &b, 500, i).unwrap()
        })
        .collect();
    // 1% critical value for n = 400 is about 0.081
    let d = ks_distance_uniform(&p).unwrap();
    assert!(d < 0.081, "KS distance {d}");
}

#[test]
fn shifted_pairs_are_significant() {
    let mut rng = common::rng(4);
    let a: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
    let b: Vec<f64> = a
        .iter()
        .map(|x| x + 0.3 + rng.gen_range(-0.05..0.05))
        .collect();
    assert!(permutation_test(&a, &b, 1000, 0).unwrap() < 0.01);
    assert!(bootstrap_test(&a, &b, 1000, 0).unwrap() < 0.01);
}

fn data(n: usize, blocks: usize) -> Vec<BlockSequence> {
    let mut rng = common::rng(5);
    (0..n)
        .map(|_| common::random_sequence(&mut rng, 20, 6, blocks))
        .collect()
}

#[test]
fn silent_model_has_vocabulary_sized_perplexity() {
    let mut m = HartModel::init(common::config(20, 8, 2, 2, 6), 0).unwrap();
    m.params
        .get_mut("ln_f.g")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let r = perplexity(&m, &data(5, 3), 4, ForwardMode::Full).unwrap();
    assert!((r.perplexity - 20.0).abs() < 1e-9);
}

#[test]
fn perfect_predictions_have_unit_perplexity() {
    assert_eq!(
        perplexity_from(&[
            NllCount { nll: 0.0, count: 7 },
            NllCount { nll: 0.0, count: 3 }
        ])
        .unwrap(),
        1.0
    );
    assert!(perplexity_from(&[]).is_err());
}

#[test]
fn sweep_of_one_equals_single_block_perplexity() {
    let m = common::generic_model(common::config(20, 8, 2, 2, 6), 6, 2.0);
    let seqs = data(6, 3);
    let rows = history_sweep(&m, &seqs, &[1]).unwrap();
    let p = perplexity(&m, &seqs, 1, ForwardMode::Full).unwrap();
    assert_eq!(rows[0].perplexity, p.perplexity);
    // one block of history is the same as no recurrence at all
    let nr = perplexity(&m, &seqs, 1, ForwardMode::NoRecurrence).unwrap();
    assert!((nr.perplexity - p.perplexity).abs() < 1e-12 * p.perplexity);
}

#[test]
fn sweep_rows_score_identical_tokens() {
    let m = common::generic_model(common::config(20, 8, 2, 2, 6), 7, 2.0);
    let seqs = data(6, 4);
    let rows = history_sweep(&m, &seqs, &[1, 2, 4]).unwrap();
    let counts: Vec<Vec<usize>> = rows
        .iter()
        .map(|r| r.per_user.iter().map(|u| u.count).collect())
        .collect();
    assert_eq!(counts[0], counts[1]);
    assert_eq!(counts[0], counts[2]);
    let want: Vec<usize> = seqs.iter().map(|s| s.blocks[3].len_nonpad() - 1).collect();
    assert_eq!(counts[0], want);
    // with every block as history, the last block is scored by one plain run
    for (s, u) in seqs.iter().zip(&rows[2].per_user) {
        let mut out = run_sequence(&m, s, ForwardMode::Full).unwrap();
        out.logits.iter_mut().take(3).for_each(|l| *l = None);
        let (nll, _) = hulm_loss_sum(&out.logits, s).unwrap();
        assert!((nll - u.nll).abs() < 1e-12);
    }
    assert!(history_sweep(&m, &seqs, &[2, 1]).is_err());
}
