//! The evaluation metrics on inputs with known answers.

use foley_bridge::eval::{desync, frechet_distance, ib_score, mean_kl, onset_detect, EmbeddingSet, PosteriorSet};
use foley_bridge::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn gaussian(n: usize, d: usize, mean: f64, sd: f64, seed: u64) -> foley_bridge::Result<EmbeddingSet> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(mean, sd).expect("valid normal");
    EmbeddingSet::new(Matrix::from_fn(n, d, |_, _| dist.sample(&mut r)), "gaussian")
}

fn main() -> foley_bridge::Result<()> {
    let fd1 = frechet_distance(&gaussian(100_000, 1, 0.0, 1.0, 1)?, &gaussian(100_000, 1, 1.0, 1.0, 2)?)?;
    let fd2 = frechet_distance(&gaussian(100_000, 2, 0.0, 1.0, 3)?, &gaussian(100_000, 2, 0.0, 2.0, 4)?)?;
    println!("FD  N(0,1) vs N(1,1): {fd1:.4} (closed form 1)");
    println!("FD  N(0,I) vs N(0,4I): {fd2:.4} (closed form 2)");

    let kl = mean_kl(&PosteriorSet::from_rows(&[vec![0.5, 0.5]])?, &PosteriorSet::from_rows(&[vec![0.25, 0.75]])?)?;
    println!("KL  [0.5, 0.5] || [0.25, 0.75]: {kl:.4}");

    let audio = EmbeddingSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], "joint")?;
    let frames = EmbeddingSet::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]], "joint")?;
    println!("IB  cosines 1 and 0: {:.2}", ib_score(&audio, &frames, &[0, 1])?);

    // One decaying burst at frame 20 of a 64-frame, 16 fps latent.
    let latent = Matrix::from_fn(64, 8, |f, _| if f >= 20 { 2.0 * (-((f - 20) as f64) / 2.0).exp() } else { 0.0 });
    let onsets = onset_detect(&latent, 0.6, 16.0);
    println!("onsets of a burst at 1.25 s: {onsets:?}");
    println!("DeSync, predictions 0.1 s late: {:.3}", desync(&[0.6, 1.6, 3.1], &[0.5, 1.5, 3.0]));
    println!("DeSync, nothing predicted for 2 events: {:.3}", desync(&[], &[1.0, 2.0]));
    Ok(())
}
