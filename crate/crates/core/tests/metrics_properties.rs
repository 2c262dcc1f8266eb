mod common;

use common::{brute_auc, random_records};
use egl_core::metrics::{auc, fairness_report, Grouping, Metric, DEFAULT_THRESHOLD};
use egl_core::synthdata::{AgeGroup, Sex};
use egl_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_scored(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=200);
    let levels = rng.random_range(2..=50);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    (scores, labels)
}

#[test]
fn auc_equals_pairwise_count_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..500 {
        let (scores, labels) = random_scored(&mut rng);
        assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels), "case {case}");
    }
}

#[test]
fn auc_single_class_is_undefined() {
    assert!(matches!(auc(&[0.2, 0.4], &[true, true]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(auc(&[0.2, 0.4], &[false, false]), Err(Error::UndefinedMetric(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auc_invariant_under_increasing_maps(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scores, labels) = random_scored(&mut rng);
        let base = auc(&scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| 3.0 * s * s * s + 1.0).collect();
        let logit: Vec<f64> = scores.iter().map(|s| (s + 0.01).ln()).collect();
        prop_assert_eq!(auc(&cubed, &labels).unwrap(), base);
        prop_assert_eq!(auc(&logit, &labels).unwrap(), base);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn gaps_are_nonnegative(seed in any::<u64>(), per_cell in 2usize..30, classes in 1usize..4) {
        let records = random_records(seed, per_cell, classes);
        for g in [Grouping::Sex, Grouping::Age] {
            let r = fairness_report(&records, g, DEFAULT_THRESHOLD).unwrap();
            prop_assert!(r.gaps.contains_key(&Metric::Auc));
            prop_assert!(r.gaps.values().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn identical_subgroups_have_zero_gap(seed in any::<u64>(), per_cell in 2usize..30, classes in 1usize..4) {
        let mut records = random_records(seed, per_cell, classes);
        // mirror the female records onto the male subgroup
        records.retain(|r| r.demographics.sex == Sex::Female);
        let mirrored: Vec<_> = records
            .iter()
            .cloned()
            .map(|mut r| {
                r.demographics.sex = Sex::Male;
                r
            })
            .collect();
        records.extend(mirrored);
        let r = fairness_report(&records, Grouping::Sex, DEFAULT_THRESHOLD).unwrap();
        prop_assert!(r.gaps.values().all(|&v| v == 0.0), "{:?}", r.gaps);
    }

    #[test]
    fn gaps_survive_subgroup_relabeling(seed in any::<u64>(), per_cell in 2usize..30, classes in 1usize..4) {
        let records = random_records(seed, per_cell, classes);
        let swapped: Vec<_> = records
            .iter()
            .cloned()
            .map(|mut r| {
                r.demographics.sex = match r.demographics.sex {
                    Sex::Female => Sex::Male,
                    Sex::Male => Sex::Female,
                };
                r.demographics.age_group = match r.demographics.age_group {
                    AgeGroup::Young => AgeGroup::Old,
                    AgeGroup::Old => AgeGroup::Young,
                };
                r
            })
            .collect();
        for g in [Grouping::Sex, Grouping::Age] {
            let a = fairness_report(&records, g, DEFAULT_THRESHOLD).unwrap();
            let b = fairness_report(&swapped, g, DEFAULT_THRESHOLD).unwrap();
            prop_assert_eq!(a.gaps, b.gaps);
        }
    }
}

#[test]
fn one_defined_subgroup_makes_the_auc_gap_undefined() {
    let mut records = random_records(5, 6, 1);
    for r in records.iter_mut().filter(|r| r.demographics.sex == Sex::Male) {
        r.labels[0] = false;
    }
    assert!(matches!(
        fairness_report(&records, Grouping::Sex, DEFAULT_THRESHOLD),
        Err(Error::UndefinedMetric(_))
    ));
}
