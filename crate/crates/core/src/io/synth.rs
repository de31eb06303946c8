//! Synthetic two-class texture patches.
//!
//! Class 0 is a smooth, low-frequency texture: a few large colour-tinted
//! Gaussian blobs. Class 1 is a high-frequency texture: an oriented sine
//! grating with a random period, phase and tint. Both get i.i.d. pixel
//! noise. The classes differ in local texture statistics rather than in a
//! single global value.

use std::f32::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::train::Dataset;

/// `C×H×W` of every generated sample.
pub const SAMPLE_SHAPE: [usize; 3] = [3, 64, 64];

const NOISE: f32 = 0.35;

fn blobs(rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let [_, h, w] = SAMPLE_SHAPE;
    let count = rng.random_range(3..=5);
    for _ in 0..count {
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let sigma: f32 = rng.random_range(8.0..12.0);
        let amp: f32 = rng.random_range(0.8..1.2);
        // a purple-ish stain tint with some variation
        let tint = [
            0.8 + rng.random_range(-0.2..0.2),
            0.3 + rng.random_range(-0.2..0.2),
            0.9 + rng.random_range(-0.2..0.2),
        ];
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                let v = amp * (-d2 * inv).exp();
                for (c, t) in tint.iter().enumerate() {
                    out[(c * h + y) * w + x] += t * v;
                }
            }
        }
    }
    // remove the per-channel mean so brightness alone does not give the
    // class away
    for channel in out.chunks_mut(h * w) {
        let mean = channel.iter().sum::<f32>() / (h * w) as f32;
        channel.iter_mut().for_each(|v| *v -= mean);
    }
}

fn stripes(rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let [_, h, w] = SAMPLE_SHAPE;
    let theta: f32 = rng.random_range(0.0..PI);
    let period: f32 = rng.random_range(3.0..6.0);
    let phase: f32 = rng.random_range(0.0..2.0 * PI);
    let amp: f32 = rng.random_range(0.4..0.7);
    let tint = [
        0.8 + rng.random_range(-0.2..0.2),
        0.3 + rng.random_range(-0.2..0.2),
        0.9 + rng.random_range(-0.2..0.2),
    ];
    let (fy, fx) = (
        2.0 * PI * theta.sin() / period,
        2.0 * PI * theta.cos() / period,
    );
    for y in 0..h {
        for x in 0..w {
            let v = amp * (fy * y as f32 + fx * x as f32 + phase).sin();
            for (c, t) in tint.iter().enumerate() {
                out[(c * h + y) * w + x] += t * v;
            }
        }
    }
}

/// `n` labelled patches, deterministic in `seed`. Labels are balanced to
/// within one sample and shuffled.
pub fn synthesize(n: usize, seed: u64) -> Result<Dataset<f32>> {
    if n < 2 {
        return Err(Error::Data(format!(
            "need at least 2 samples, asked for {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let size: usize = SAMPLE_SHAPE.iter().product();
    let noise = Normal::new(0.0f32, NOISE).expect("valid normal");
    let mut data = vec![0.0f32; n * size];
    for (sample, &label) in data.chunks_mut(size).zip(&labels) {
        if label == 0 {
            blobs(&mut rng, sample);
        } else {
            stripes(&mut rng, sample);
        }
        for v in sample.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let [c, h, w] = SAMPLE_SHAPE;
    Dataset::new(Tensor::new([n, c, h, w], data)?, labels)
}

/// Accuracy of a `k`-nearest-neighbour vote (Euclidean distance on raw
/// values) over `test`, with `train` as the reference set. Ties in the
/// vote go to the lower class.
pub fn knn_accuracy(train: &Dataset<f32>, test: &Dataset<f32>, k: usize) -> Result<f64> {
    if train.len() < k || test.is_empty() || k == 0 {
        return Err(Error::Data(format!(
            "k-NN with k={k} needs at least k reference and one query samples"
        )));
    }
    if train.sample_shape() != test.sample_shape() {
        return Err(Error::Dimension(
            "train and test samples differ in shape".into(),
        ));
    }
    let d: usize = train.sample_shape().iter().product();
    let sq = |x: &[f32]| {
        x.chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f32>())
            .collect::<Vec<_>>()
    };
    let (a, b) = (train.images().data(), test.images().data());
    let (na, nb) = (sq(a), sq(b));
    let classes = train
        .labels()
        .iter()
        .chain(test.labels())
        .max()
        .map_or(1, |m| m + 1);
    let mut correct = 0;
    // test × train inner products, in query blocks to bound memory
    for (block, queries) in b.chunks(256 * d).enumerate() {
        let q = queries.len() / d;
        let mut dots = vec![0.0f32; q * train.len()];
        f32::gemm(q, d, train.len(), queries, false, a, true, &mut dots, false);
        for i in 0..q {
            let qi = block * 256 + i;
            let mut dist: Vec<(f32, usize)> = (0..train.len())
                .map(|j| (nb[qi] + na[j] - 2.0 * dots[i * train.len() + j], j))
                .collect();
            dist.select_nth_unstable_by(k - 1, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let mut votes = vec![0usize; classes];
            for &(_, j) in &dist[..k] {
                votes[train.labels()[j]] += 1;
            }
            let predicted = (0..classes)
                .rev()
                .max_by_key(|&c| votes[c])
                .expect("classes ≥ 1");
            correct += usize::from(predicted == test.labels()[qi]);
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synthesize(6, 9).unwrap(), synthesize(6, 9).unwrap());
        assert_ne!(synthesize(6, 9).unwrap(), synthesize(6, 10).unwrap());
    }

    #[test]
    fn labels_are_balanced() {
        for n in [2, 7, 64, 101] {
            let d = synthesize(n, 1).unwrap();
            let ones = d.labels().iter().filter(|&&l| l == 1).count();
            assert!(ones.abs_diff(n - ones) <= 1, "n={n}: {ones}");
            assert_eq!(d.sample_shape(), SAMPLE_SHAPE);
        }
    }

    #[test]
    fn too_few_samples() {
        assert!(synthesize(1, 0).is_err());
    }

    #[test]
    fn knn_on_separated_points() {
        let train = Dataset::new(
            Tensor::new([4, 1, 1, 1], vec![0.0, 0.1, 5.0, 5.1]).unwrap(),
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let test = Dataset::new(
            Tensor::new([2, 1, 1, 1], vec![0.05, 4.9]).unwrap(),
            vec![0, 1],
        )
        .unwrap();
        assert_eq!(knn_accuracy(&train, &test, 1).unwrap(), 1.0);
        assert_eq!(knn_accuracy(&train, &test, 3).unwrap(), 1.0);
    }
}
