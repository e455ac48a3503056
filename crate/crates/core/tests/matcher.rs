use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safl_core::formats::{DifferenceMatrix, FeatureMatrix};
use safl_core::matcher::{
    contrast_enhance, difference_matrix, feature_difference, read_matches_csv, sequence_match, write_matches_csv,
    Metric, QueryOutcome, SeqMatchConfig,
};

/// Straight-line reference scorer: every (query, column, velocity) triple
/// scored independently, lexicographic argmin over (score, column, velocity).
#[derive(Debug, PartialEq)]
struct Naive {
    query: usize,
    reference: usize,
    velocity: f64,
    score: f64,
    second: Option<f64>,
}

fn naive(dm: &DifferenceMatrix, ds: usize, vels: &[f64], window: usize) -> Vec<Option<Naive>> {
    let score = |i: usize, j: usize, v: f64| {
        let mut terms = Vec::new();
        for s in -(ds as i64)..=ds as i64 {
            let c = (j as f64 + v * s as f64).round();
            if c >= 0.0 && (c as usize) < dm.cols {
                terms.push(dm.get((i as i64 + s) as usize, c as usize));
            }
        }
        terms.iter().sum::<f64>() / terms.len() as f64
    };
    (0..dm.rows)
        .map(|i| {
            if i < ds || i + ds >= dm.rows || dm.cols == 0 {
                return None;
            }
            let mut all = Vec::new();
            for j in 0..dm.cols {
                for (k, &v) in vels.iter().enumerate() {
                    all.push((score(i, j, v), j, k));
                }
            }
            let &(s, j, k) = all
                .iter()
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
                .unwrap();
            let second = all
                .iter()
                .filter(|t| t.1.abs_diff(j) > window / 2)
                .map(|t| t.0)
                .min_by(f64::total_cmp);
            Some(Naive { query: i, reference: j, velocity: vels[k], score: s, second })
        })
        .collect()
}

fn random_dm(seed: u64, rows: usize, cols: usize) -> DifferenceMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DifferenceMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.0..10.0)).collect()).unwrap()
}

fn small_cfg() -> SeqMatchConfig {
    SeqMatchConfig { ds: 4, exclusion_window: 6, ..SeqMatchConfig::default() }
}

fn check_against_naive(dm: &DifferenceMatrix, cfg: &SeqMatchConfig) {
    let got = sequence_match(dm, cfg).unwrap();
    let want = naive(dm, cfg.ds, &cfg.velocities(), cfg.exclusion_window);
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        match (g.matched(), w) {
            (None, None) => {}
            (Some(m), Some(w)) => {
                assert_eq!(g.query, w.query);
                assert_eq!((m.reference, m.velocity, m.score, m.second_score), (w.reference, w.velocity, w.score, w.second));
            }
            _ => panic!("context mismatch at query {}", g.query),
        }
    }
}

#[test]
fn matches_brute_force_on_random_matrices() {
    for seed in 0..100 {
        check_against_naive(&random_dm(seed, 30, 30), &small_cfg());
    }
}

#[test]
fn matches_brute_force_with_ties() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..900).map(|_| rng.random_range(0..3) as f64).collect();
        check_against_naive(&DifferenceMatrix::new(30, 30, v).unwrap(), &small_cfg());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dyadic_scaling_keeps_the_argmin(seed in any::<u64>(), k in -8i32..8, rows in 9usize..25, cols in 1usize..25) {
        let dm = random_dm(seed, rows, cols);
        let c = 2f64.powi(k);
        let scaled = DifferenceMatrix::new(rows, cols, dm.values.iter().map(|v| v * c).collect()).unwrap();
        let a = sequence_match(&dm, &small_cfg()).unwrap();
        let b = sequence_match(&scaled, &small_cfg()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            match (x.matched(), y.matched()) {
                (Some(p), Some(q)) => {
                    prop_assert_eq!((p.reference, p.velocity), (q.reference, q.velocity));
                    prop_assert_eq!(p.ratio, q.ratio);
                }
                (None, None) => {}
                _ => prop_assert!(false),
            }
        }
    }

    #[test]
    fn permuting_references_permutes_columns(seed in any::<u64>(), nq in 0usize..6, nr in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 5;
        let mk = |rng: &mut ChaCha8Rng, n: usize| {
            let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            rows
        };
        let q = mk(&mut rng, nq);
        let r = mk(&mut rng, nr);
        let mut perm: Vec<usize> = (0..nr).collect();
        for i in (1..nr).rev() { perm.swap(i, rng.random_range(0..=i)); }
        let rp: Vec<Vec<f32>> = perm.iter().map(|&p| r[p].clone()).collect();
        let fq = FeatureMatrix::from_rows(dim, &q).unwrap();
        let d = difference_matrix(&fq, &FeatureMatrix::from_rows(dim, &r).unwrap(), Metric::SqEuclid).unwrap();
        let dp = difference_matrix(&fq, &FeatureMatrix::from_rows(dim, &rp).unwrap(), Metric::SqEuclid).unwrap();
        for i in 0..nq {
            for (j, &p) in perm.iter().enumerate() {
                prop_assert_eq!(dp.get(i, j), d.get(i, p));
                prop_assert_eq!(d.get(i, p), feature_difference(&q[i], &r[p]).unwrap());
            }
        }
    }

    #[test]
    fn contrast_enhanced_values_are_nonnegative(seed in any::<u64>(), w in 1usize..12) {
        let dm = random_dm(seed, 12, 15);
        let e = contrast_enhance(&dm, w);
        prop_assert!(e.values.iter().all(|&v| v >= 0.0 && v.is_finite()));
        prop_assert!(e.values.iter().any(|&v| v == 0.0));
    }
}

#[test]
fn planted_diagonal_is_recovered() {
    let n = 40;
    let mut dm = DifferenceMatrix::filled(n, n, 5.0);
    for i in 0..n {
        dm.set(i, i, 0.0);
    }
    let cfg = SeqMatchConfig::default();
    for q in sequence_match(&dm, &cfg).unwrap() {
        if let QueryOutcome::Matched(m) = q.outcome {
            assert_eq!(m.reference, q.query);
            assert_eq!(m.score, 0.0);
            assert_eq!(m.ratio, 0.0);
        }
    }
}

#[test]
fn empty_reference_set_gives_no_matches() {
    let dm = DifferenceMatrix::new(25, 0, vec![]).unwrap();
    let out = sequence_match(&dm, &SeqMatchConfig::default()).unwrap();
    assert!(out.iter().all(|q| q.matched().is_none()));
    let mut buf = Vec::new();
    write_matches_csv(&mut buf, &out).unwrap();
    assert!(read_matches_csv(std::str::from_utf8(&buf).unwrap()).unwrap().is_empty());
}
