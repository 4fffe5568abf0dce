//! Metric values against closed forms and hand-computed sums.

use foley_bridge::eval::{desync, frechet_distance, ib_score, mean_kl, onset_detect, EmbeddingSet, PosteriorSet};
use foley_bridge::tensor::Matrix;
use foley_bridge::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn normal_set(n: usize, d: usize, mean: f64, sd: f64, seed: u64) -> EmbeddingSet {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(mean, sd).unwrap();
    EmbeddingSet::new(Matrix::from_fn(n, d, |_, _| dist.sample(&mut r)), "gauss").unwrap()
}

#[test]
fn fd_matches_gaussian_closed_forms() {
    let one = frechet_distance(&normal_set(100_000, 1, 0.0, 1.0, 1), &normal_set(100_000, 1, 1.0, 1.0, 2)).unwrap();
    assert!((one - 1.0).abs() < 0.05, "1-D FD {one}");
    let two = frechet_distance(&normal_set(100_000, 2, 0.0, 1.0, 3), &normal_set(100_000, 2, 0.0, 2.0, 4)).unwrap();
    assert!((two - 2.0).abs() < 0.1, "2-D FD {two}");
}

#[test]
fn fd_one_dimensional_formula() {
    let a = normal_set(5000, 1, 0.3, 0.7, 5);
    let b = normal_set(5000, 1, -0.4, 1.6, 6);
    let stats = |s: &EmbeddingSet| {
        let v = s.embeddings.data();
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    };
    let ((ma, sa), (mb, sb)) = (stats(&a), stats(&b));
    let want = (ma - mb).powi(2) + (sa - sb).powi(2);
    assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);
}

#[test]
fn fd_input_errors() {
    let a = normal_set(10, 3, 0.0, 1.0, 7);
    assert!(matches!(frechet_distance(&a, &normal_set(10, 2, 0.0, 1.0, 8)), Err(Error::Shape(_))));
    assert!(matches!(frechet_distance(&a, &normal_set(1, 3, 0.0, 1.0, 8)), Err(Error::Input(_))));
}

#[test]
fn kl_matches_direct_summation() {
    let r = PosteriorSet::from_rows(&[vec![0.5, 0.5]]).unwrap();
    let g = PosteriorSet::from_rows(&[vec![0.25, 0.75]]).unwrap();
    let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((mean_kl(&r, &g).unwrap() - want).abs() < 1e-12);
    assert!((want - 0.1438).abs() < 5e-5);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..50)
            .map(|_| {
                let v: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect()
    };
    let (rr, gg) = (rows(&mut rng), rows(&mut rng));
    let mut direct = 0.0;
    for (p, q) in rr.iter().zip(&gg) {
        for (a, b) in p.iter().zip(q) {
            direct += a * (a / b).ln();
        }
    }
    direct /= 50.0;
    let got = mean_kl(&PosteriorSet::from_rows(&rr).unwrap(), &PosteriorSet::from_rows(&gg).unwrap()).unwrap();
    assert!((got - direct).abs() < 1e-12);
}

#[test]
fn kl_clamps_zero_probabilities() {
    let r = PosteriorSet::from_rows(&[vec![0.5, 0.5]]).unwrap();
    let g = PosteriorSet::from_rows(&[vec![0.0, 1.0]]).unwrap();
    let kl = mean_kl(&r, &g).unwrap();
    assert!(kl.is_finite() && kl > 5.0);
    let two = PosteriorSet::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
    assert!(matches!(mean_kl(&two, &g), Err(Error::Input(_))));
}

#[test]
fn ib_examples() {
    let audio = EmbeddingSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], "ib").unwrap();
    let same = EmbeddingSet::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]], "ib").unwrap();
    assert!((ib_score(&audio, &same, &[0, 1]).unwrap() - 1.0).abs() < 1e-12);
    let half = EmbeddingSet::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]], "ib").unwrap();
    assert!((ib_score(&audio, &half, &[0, 1]).unwrap() - 0.5).abs() < 1e-12);
    let orth = EmbeddingSet::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]], "ib").unwrap();
    assert!(ib_score(&audio, &orth, &[0, 1]).unwrap().abs() < 1e-12);
    let zero = EmbeddingSet::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]], "ib").unwrap();
    let err = ib_score(&zero, &same, &[0, 1]).unwrap_err();
    assert!(matches!(err, Error::Numeric(ref m) if m.contains("clip 0")));
}

fn bumps(n: usize, at: &[usize]) -> Matrix<f64> {
    Matrix::from_fn(n, 8, |f, _| {
        at.iter()
            .filter(|&&s| f >= s)
            .map(|&s| 2.0 * (-((f - s) as f64) / 2.0).exp())
            .sum::<f64>()
            + 0.01
    })
}

#[test]
fn onset_examples() {
    assert!(onset_detect(&Matrix::from_fn(64, 8, |_, _| 0.7), 0.6, 16.0).is_empty());
    assert!(onset_detect(&Matrix::zeros(64, 8), 0.6, 16.0).is_empty());

    let one = onset_detect(&bumps(64, &[20]), 0.6, 16.0);
    assert_eq!(one.len(), 1);
    assert!((one[0] - 1.25).abs() <= 1.0 / 16.0, "{one:?}");

    let two = onset_detect(&bumps(64, &[20, 30]), 0.6, 16.0);
    assert_eq!(two.len(), 2, "{two:?}");
    assert!(two.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn desync_examples() {
    assert_eq!(desync(&[0.5, 1.5, 3.0], &[0.5, 1.5, 3.0]), 0.0);
    assert!((desync(&[0.6, 1.6, 3.1], &[0.5, 1.5, 3.0]) - 0.1).abs() < 1e-12);
    assert_eq!(desync(&[], &[1.0, 2.0]), 1.0);
    assert_eq!(desync(&[], &[]), 0.0);
    assert!((desync(&[0.2, 3.0], &[0.0]) - 0.6).abs() < 1e-12);
}
