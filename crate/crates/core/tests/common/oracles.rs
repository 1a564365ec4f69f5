//! Reference implementations that share no code with the library.

use ecgmoe::model::Task;
use ecgmoe::nn::ops::{self, ConvGeometry};
use ecgmoe::nn::Tensor;
use ecgmoe::signal::{generate_with_truth, SyntheticConfig};
use ecgmoe::{EcgMoe, ModelConfig, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct convolution: `y[o][i] = b[o] + sum_c sum_j w[o][c][j] * x[c][i*s + j*d - p]`.
pub fn conv1d_naive(
    x: &[f64],
    (cin, t): (usize, usize),
    w: &[f64],
    (cout, k): (usize, usize),
    bias: Option<&[f64]>,
    (stride, dilation, padding): (usize, usize, usize),
) -> (Vec<f64>, usize) {
    let span = dilation * (k - 1) + 1;
    let out_len = (t + 2 * padding - span) / stride + 1;
    let mut y = vec![0.0; cout * out_len];
    for o in 0..cout {
        for i in 0..out_len {
            let mut acc = bias.map_or(0.0, |b| b[o]);
            for c in 0..cin {
                for j in 0..k {
                    let pos = (i * stride + j * dilation) as isize - padding as isize;
                    if pos >= 0 && (pos as usize) < t {
                        acc += w[(o * cin + c) * k + j] * x[c * t + pos as usize];
                    }
                }
            }
            y[o * out_len + i] = acc;
        }
    }
    (y, out_len)
}

/// Largest absolute difference between `ops::conv1d` and the direct loop over
/// a grid of channel counts, kernel sizes, strides, dilations and paddings.
/// Returns the difference and the number of shapes compared.
pub fn conv_grid_max_diff(seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut shapes = 0;
    for cin in [1, 2, 3] {
        for cout in [1, 4] {
            for k in [1, 2, 3, 5] {
                for stride in [1, 2, 3] {
                    for dilation in [1, 2] {
                        for padding in [0, 1, 3] {
                            let t = rng.random_range(12..40);
                            if t + 2 * padding < dilation * (k - 1) + 1 {
                                continue;
                            }
                            let x = Tensor::<f64>::uniform(&[cin, t], 2.0, &mut rng);
                            let w = Tensor::<f64>::uniform(&[cout, cin, k], 1.0, &mut rng);
                            let b = Tensor::<f64>::uniform(&[cout], 1.0, &mut rng);
                            let geom = ConvGeometry::new(stride, dilation, padding);
                            let y = ops::conv1d(&x, &w, Some(&b), geom)?;
                            let (want, out_len) = conv1d_naive(
                                x.data(),
                                (cin, t),
                                w.data(),
                                (cout, k),
                                Some(b.data()),
                                (stride, dilation, padding),
                            );
                            assert_eq!(y.shape(), &[cout, out_len], "conv output shape");
                            for (a, b) in y.data().iter().zip(&want) {
                                worst = worst.max((a - b).abs());
                            }
                            shapes += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((worst, shapes))
}

/// F1 from a brute-force 2x2 confusion matrix `m[pred][truth]`, via precision
/// and recall. No positives anywhere counts as perfect agreement.
pub fn f1_confusion(pred: &[bool], truth: &[bool]) -> f64 {
    let mut m = [[0u64; 2]; 2];
    for i in 0..pred.len() {
        m[pred[i] as usize][truth[i] as usize] += 1;
    }
    let (tp, fp, fneg) = (m[1][1] as f64, m[1][0] as f64, m[0][1] as f64);
    if tp + fp + fneg == 0.0 {
        return 1.0;
    }
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fneg);
    2.0 * precision * recall / (precision + recall)
}

/// Random prediction/label pairs with varied lengths and positive rates.
pub fn random_binary_pairs(n: usize, seed: u64) -> Vec<(Vec<bool>, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(0..60);
            let (pp, pt) = (rng.random::<f64>(), rng.random::<f64>());
            let pred = (0..len).map(|_| rng.random::<f64>() < pp).collect();
            let truth = (0..len).map(|_| rng.random::<f64>() < pt).collect();
            (pred, truth)
        })
        .collect()
}

/// `z1` plus `z2 = cos(theta) z1 + sin(theta) q`, with `q` orthogonal to
/// `z1` row by row, so `theta` sets the angle within each positive pair.
pub fn rotated_views(n: usize, d: usize, theta: f64, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z1 = Vec::with_capacity(n * d);
    let mut z2 = Vec::with_capacity(n * d);
    for _ in 0..n {
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: Vec<f64> = a.iter().map(|v| v / na).collect();
        let proj: f64 = u.iter().zip(&r).map(|(x, y)| x * y).sum();
        let q: Vec<f64> = r.iter().zip(&u).map(|(y, x)| y - proj * x).collect();
        let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        z1.extend(&u);
        z2.extend(u.iter().zip(&q).map(|(x, y)| theta.cos() * x + theta.sin() * y / nq));
    }
    (
        Tensor::from_vec(&[n, d], z1).unwrap(),
        Tensor::from_vec(&[n, d], z2).unwrap(),
    )
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DetectionScore {
    pub true_pos: usize,
    pub detected: usize,
    pub truth: usize,
}

impl DetectionScore {
    pub fn precision(&self) -> f64 {
        if self.detected == 0 {
            0.0
        } else {
            self.true_pos as f64 / self.detected as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.truth == 0 {
            0.0
        } else {
            self.true_pos as f64 / self.truth as f64
        }
    }
}

/// One-to-one greedy matching of sorted detections to sorted true times.
pub fn match_peaks(detected_s: &[f64], truth_s: &[f64], tol_s: f64) -> usize {
    let (mut i, mut j, mut hits) = (0, 0, 0);
    while i < detected_s.len() && j < truth_s.len() {
        let d = detected_s[i] - truth_s[j];
        if d.abs() <= tol_s {
            hits += 1;
            i += 1;
            j += 1;
        } else if d < 0.0 {
            i += 1;
        } else {
            j += 1;
        }
    }
    hits
}

/// Detection precision and recall over `n` generated records, heart rate
/// drawn from 40-180 bpm and noise up to 0.05 mV, matched within `tol_s`.
pub fn rpeak_detection(n: usize, seed: u64, tol_s: f64) -> Result<DetectionScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut score = DetectionScore::default();
    for i in 0..n {
        let cfg = SyntheticConfig {
            seed: seed * 10_007 + i as u64,
            heart_rate_bpm: rng.random_range(40.0..=180.0),
            hr_jitter_pct: rng.random_range(0.0..0.1),
            noise_std_mv: rng.random_range(0.0..=0.05),
            leads: rng.random_range(1..=2),
            duration_s: 10.0,
            sample_rate_hz: if i % 2 == 0 { 250.0 } else { 500.0 },
            morphology_class: (i % 15) as u8,
        };
        let (record, truth) = generate_with_truth(&cfg)?;
        let peaks = ecgmoe::beats::detect_r_peaks(&record, 0)?;
        let times: Vec<f64> = peaks.iter().map(|&p| p as f64 / cfg.sample_rate_hz).collect();
        score.true_pos += match_peaks(&times, &truth.r_peak_times_s, tol_s);
        score.detected += times.len();
        score.truth += truth.r_peak_times_s.len();
    }
    Ok(score)
}

#[derive(Clone, Copy, Debug)]
pub struct SimplexStats {
    pub samples: usize,
    pub max_sum_error: f64,
    pub min_weight: f64,
    pub max_weight: f64,
    pub min_alpha: f64,
    pub max_alpha: f64,
}

/// Expert gate weights and branch gates for `n` random inputs, spread over a
/// few model initializations and all tasks.
pub fn gate_simplex(cfg: &ModelConfig, n: usize, seed: u64) -> Result<SimplexStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SimplexStats {
        samples: 0,
        max_sum_error: 0.0,
        min_weight: f64::INFINITY,
        max_weight: f64::NEG_INFINITY,
        min_alpha: f64::INFINITY,
        max_alpha: f64::NEG_INFINITY,
    };
    let models = 10;
    for m in 0..models {
        let model = EcgMoe::<f64>::new(cfg.clone(), seed + m as u64)?;
        let per_model = n / models + usize::from(m < n % models);
        for _ in 0..per_model {
            let task = Task::ALL[rng.random_range(0..Task::ALL.len())];
            let scale = rng.random_range(0.1..5.0);
            let stats = Tensor::uniform(&[cfg.stats_dim()], scale, &mut rng);
            let w = model.gate(&stats, task)?;
            let sum: f64 = w.data().iter().sum();
            s.max_sum_error = s.max_sum_error.max((sum - 1.0).abs());
            for &v in w.data() {
                s.min_weight = s.min_weight.min(v);
                s.max_weight = s.max_weight.max(v);
            }
            let f_m = Tensor::uniform(&[cfg.multi_model_dim()], scale, &mut rng);
            let f_p = Tensor::uniform(&[cfg.d_p], scale, &mut rng);
            let (_, cache) = model
                .fusion
                .fuse(&f_m, Some(&f_p), &model.task_embeddings[task.index()].value)?;
            for a in [cache.alpha_m, cache.alpha_p.expect("periodic gate")] {
                s.min_alpha = s.min_alpha.min(a);
                s.max_alpha = s.max_alpha.max(a);
            }
            s.samples += 1;
        }
    }
    Ok(s)
}
