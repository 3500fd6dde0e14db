mod common;

use common::*;
use proptest::prelude::*;
use taskgen::assessment::{gwet_ac1, likert_summary, summarize_rubrics, Bucket, Criterion};

/// AC1 from the 2x2 contingency table, using the general multi-category
/// chance term with q = 2 categories.
fn ac1_oracle(pairs: &[(bool, bool)]) -> f64 {
    let mut table = [[0f64; 2]; 2];
    for &(a, b) in pairs {
        table[a as usize][b as usize] += 1.0;
    }
    let n = pairs.len() as f64;
    let pa = (table[0][0] + table[1][1]) / n;
    let q = 2.0;
    let pe: f64 = (0..2)
        .map(|k| {
            let pi_k = (table[k][0] + table[k][1] + table[0][k] + table[1][k]) / (2.0 * n);
            pi_k * (1.0 - pi_k)
        })
        .sum::<f64>()
        / (q - 1.0);
    (pa - pe) / (1.0 - pe)
}

proptest! {
    #[test]
    fn ac1_matches_contingency_oracle(pairs in prop::collection::vec(any::<(bool, bool)>(), 1..200)) {
        let got = gwet_ac1(&pairs).unwrap().ac1;
        prop_assert!((got - ac1_oracle(&pairs)).abs() <= 1e-12);
    }

    #[test]
    fn perfect_agreement_gives_one(labels in prop::collection::vec(any::<bool>(), 1..200)) {
        let pairs: Vec<_> = labels.iter().map(|&v| (v, v)).collect();
        let s = gwet_ac1(&pairs).unwrap();
        prop_assert_eq!(s.pa, 1.0);
        prop_assert!((s.ac1 - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn likert_is_permutation_invariant(mut values in prop::collection::vec(1u8..=5, 1..100), seed in any::<u64>()) {
        let before = likert_summary(&values).unwrap();
        let k = (seed as usize) % values.len();
        values.rotate_left(k);
        values.reverse();
        prop_assert_eq!(likert_summary(&values).unwrap(), before);
    }

    #[test]
    fn ac1_never_exceeds_one(pairs in prop::collection::vec(any::<(bool, bool)>(), 1..200)) {
        let s = gwet_ac1(&pairs).unwrap();
        prop_assert!(s.ac1 <= 1.0 + 1e-12 && s.pe <= 0.5);
    }
}

#[test]
fn worked_ac1_example() {
    let s = gwet_ac1(&[(true, true), (true, false), (false, false), (true, true)]).unwrap();
    assert_eq!((s.pa, s.pi_hat, s.pe), (0.75, 0.625, 0.46875));
    assert!((s.ac1 - 0.28125 / 0.53125).abs() < 1e-15);
    assert_eq!(format!("{:.4}", s.ac1), "0.5294");
}

#[test]
fn table_fixture_percentages() {
    let (tasks, ratings) = rated_corpus(&REFERENCE_COUNTS);
    let s = summarize_rubrics(&tasks, &ratings).unwrap();
    assert_eq!(s.bucket_sizes, [100, 50, 50, 200]);
    let all: Vec<String> = Criterion::ALL.iter().map(|&c| s.cell(c, Bucket::All).display_percent()).collect();
    assert_eq!(all, ["89.5%", "92.5%", "74.0%", "100%", "85.4%", "80.0%"]);
    assert_eq!(s.cell(Criterion::E5, Bucket::All).denominator, 185);
    assert_eq!(s.cell(Criterion::E6, Bucket::All).denominator, 185);
    assert_eq!(s.cell(Criterion::E3, Bucket::Three).display_percent(), "40.0%");
    assert_eq!(s.cell(Criterion::E5, Bucket::One).display_percent(), "83.1%");
}
