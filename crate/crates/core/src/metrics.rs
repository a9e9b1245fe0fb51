//! Reconstruction quality and latent-neighborhood metrics.

use crate::error::{LsiError, Result};

/// PSNR in dB for images in `[0, 1]`; identical inputs give `f64::INFINITY`.
pub fn psnr(pred: &[f64], target: &[f64]) -> f64 {
    let m = mse(pred, target);
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse: length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "mean_abs: length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub psnr_db: f64,
    pub latent_l1: f64,
    pub pixel_l1: f64,
}

pub fn metrics(pred_image: &[f64], image: &[f64], pred_latent: &[f64], latent: &[f64]) -> Result<Metrics> {
    if pred_image.len() != image.len() || pred_latent.len() != latent.len() {
        return Err(LsiError::dim("metrics: prediction and reference sizes differ"));
    }
    Ok(Metrics {
        psnr_db: psnr(pred_image, image),
        latent_l1: mean_abs(pred_latent, latent),
        pixel_l1: mean_abs(pred_image, image),
    })
}

/// Formats a PSNR value, writing the infinite sentinel as `inf`.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Leave-one-out 1-nearest-neighbor accuracy under the L1 distance.
/// Ties go to the lowest index.
pub fn loo_1nn_accuracy(points: &[Vec<f64>], labels: &[u32]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(LsiError::dim(format!("{} points but {} labels", points.len(), labels.len())));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(LsiError::Dataset("retrieval needs at least two labels with two items each".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(LsiError::dim("retrieval: points have different lengths"));
    }
    let mut hits = 0usize;
    for (i, p) in points.iter().enumerate() {
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        hits += (labels[best.1] == labels[i]) as usize;
    }
    Ok(hits as f64 / points.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalReport {
    pub latent_accuracy: f64,
    pub pixel_accuracy: f64,
}

pub fn retrieval_proxy(latents: &[Vec<f64>], pixels: &[Vec<f64>], labels: &[u32]) -> Result<RetrievalReport> {
    Ok(RetrievalReport {
        latent_accuracy: loo_1nn_accuracy(latents, labels)?,
        pixel_accuracy: loo_1nn_accuracy(pixels, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn psnr_values() {
        let a = vec![0.3; 16];
        assert_eq!(psnr(&a, &a), f64::INFINITY);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&b, &a) - 20.0).abs() < 1e-9);
        assert_eq!(format_psnr(f64::INFINITY), "inf");
    }

    #[test]
    fn psnr_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let mut s = 0.0;
        for i in 0..100 {
            s += (a[i] - b[i]).powi(2);
        }
        let want = 10.0 * (100.0 / s).log10();
        assert!((psnr(&a, &b) - want).abs() < 1e-12);
        let m = metrics(&a, &b, &a[..10], &b[..10]).unwrap();
        assert!((m.pixel_l1 - mean_abs(&a, &b)).abs() < 1e-15);
        assert!(metrics(&a, &b[..99], &a, &b).is_err());
    }

    #[test]
    fn identical_pairs_retrieve_perfectly() {
        let pts = vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![5.0, 5.0], vec![5.0, 5.0]];
        assert_eq!(loo_1nn_accuracy(&pts, &[0, 0, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_labels_rejected() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(loo_1nn_accuracy(&pts, &[0, 0, 0]).is_err());
        assert!(loo_1nn_accuracy(&pts, &[0, 0, 1]).is_err());
    }

    #[test]
    fn random_latents_are_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec<f64>> = (0..200).map(|_| (0..16).map(|_| rng.random()).collect()).collect();
        let labels: Vec<u32> = (0..200).map(|i| (i % 2) as u32).collect();
        let acc = loo_1nn_accuracy(&pts, &labels).unwrap();
        assert!((acc - 0.5).abs() <= 0.1, "{acc}");
        assert!((0.0..=1.0).contains(&acc));
    }
}
