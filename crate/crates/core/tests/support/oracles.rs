//! Reference implementations written straight from the layer definitions,
//! shared by the oracle tests and the acceptance harness.

use fernnet::fern::{fern_init, FernConfig, FernEnsembleLayer, WeightMode};
use fernnet::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// out[u] = Σ_k w(c_k) · lut[offset_k + code(c_k)], written out longhand.
pub fn naive_forward(rows: &[f64], n: usize, layer: &FernEnsembleLayer<f64>) -> Vec<f64> {
    let cfg = layer.config();
    let (k, m, d, c_out) = (cfg.ferns, cfg.depth, cfg.in_dim, cfg.out_channels);
    let t = layer.thresholds().data();
    let lut = layer.lut().data();
    let mut out = vec![0.0; n * c_out];
    for u in 0..n {
        for f in 0..k {
            let mut code = 0usize;
            let mut c = Vec::with_capacity(m);
            for j in 0..m {
                let v = (rows[u * d + layer.dims()[f * m + j]] - t[f * m + j]).tanh();
                code = code * 2 + usize::from(v > 0.0);
                c.push(v);
            }
            let dist = c
                .iter()
                .map(|v: &f64| (v.abs() - 1.0).powi(2))
                .sum::<f64>()
                .sqrt();
            let w = match cfg.weight_mode {
                WeightMode::LiteralL2 => dist,
                WeightMode::NormalizedProximity => 1.0 - dist / (m as f64).sqrt(),
                WeightMode::MeanL1Proximity => {
                    1.0 - c.iter().map(|v| 1.0 - v.abs()).sum::<f64>() / m as f64
                }
            };
            let row = f * (1 << m) + code;
            for o in 0..c_out {
                out[u * c_out + o] += w * lut[row * c_out + o];
            }
        }
    }
    out
}

/// Row (n, oy, ox), column (c, i, j) = x[n][c][oy·s+i−p][ox·s+j−p], zero outside.
pub fn sliding_window(x: &Tensor<f64>, k: usize, s: usize, p: usize) -> Vec<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    for i in 0..k {
                        for j in 0..k {
                            let y = (oy * s + i) as isize - p as isize;
                            let xx = (ox * s + j) as isize - p as isize;
                            let inside = y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w;
                            out.push(if inside {
                                x.at(&[b, ch, y as usize, xx as usize])
                            } else {
                                0.0
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// How many receptive fields cover each input pixel.
pub fn coverage(shape: [usize; 4], k: usize, s: usize, p: usize) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    for i in 0..k {
                        for j in 0..k {
                            let y = (oy * s + i) as isize - p as isize;
                            let x = (ox * s + j) as isize - p as isize;
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                out[((b * c + ch) * h + y as usize) * w + x as usize] += 1.0;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// A random layer within K≤8, m≤4, c_out≤16 and a batch of at most 64 rows.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (FernEnsembleLayer<f64>, Tensor<f64>) {
    let config = FernConfig {
        ferns: rng.random_range(1..=8),
        depth: rng.random_range(1..=4),
        in_dim: rng.random_range(1..=40),
        out_channels: rng.random_range(1..=16),
        weight_mode: WeightMode::ALL[rng.random_range(0..3)],
        thresholds_trainable: true,
        seed: rng.random(),
    };
    let n = rng.random_range(1..=64);
    let rows: Vec<f64> = (0..n * config.in_dim)
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    let rows = Tensor::new([n, config.in_dim], rows).unwrap();
    (fern_init(config).unwrap(), rows)
}

/// A smooth, non-repeating test image.
pub fn ramp(shape: [usize; 4]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|i| (i as f64 * 0.37).sin() + i as f64 * 1e-3)
            .collect(),
    )
    .unwrap()
}
