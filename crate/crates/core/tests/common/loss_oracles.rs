//! Closed-form scalar evaluations of the losses.

use std::f64::consts::PI;

use gabn::losses::LossConfig;
use gabn::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `-log softmax(z)[y]` written directly.
pub fn ce_oracle(z: &[f64], y: usize) -> f64 {
    log_sum_exp(z) - z[y]
}

/// `-(1/N) * sum_j log softmax(z)[j]`.
pub fn uniform_oracle(z: &[f64]) -> f64 {
    let lse = log_sum_exp(z);
    z.iter().map(|v| lse - v).sum::<f64>() / z.len() as f64
}

pub fn random_logits(rng: &mut ChaCha8Rng, n: usize, races: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..races).map(|_| rng.gen_range(-6.0..6.0)).collect()).collect()
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

/// Angles of 2-d unit vectors: samples at `phi`, classes at `psi`.
pub struct AngleCase {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub labels: Vec<usize>,
    pub cfg: LossConfig,
    pub k: f64,
}

impl AngleCase {
    pub fn random(rng: &mut ChaCha8Rng, k: f64) -> Self {
        let n = rng.gen_range(1..5);
        let classes = rng.gen_range(2..6);
        AngleCase {
            phi: (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect(),
            psi: (0..classes).map(|_| rng.gen_range(0.0..2.0 * PI)).collect(),
            labels: (0..n).map(|_| rng.gen_range(0..classes)).collect(),
            cfg: LossConfig {
                scale: rng.gen_range(1.0..64.0),
                margin: rng.gen_range(0.0..1.2),
                ..LossConfig::default()
            },
            k,
        }
    }

    pub fn tensors(&self) -> (Tensor<f64>, Tensor<f64>) {
        let unit = |a: &[f64]| a.iter().flat_map(|t| [t.cos(), t.sin()]).collect::<Vec<_>>();
        (
            Tensor::new(vec![self.phi.len(), 2], unit(&self.phi)).unwrap(),
            Tensor::new(vec![self.psi.len(), 2], unit(&self.psi)).unwrap(),
        )
    }

    /// Scalar evaluation: angle from the dot product, offsets clamped to [0, pi].
    pub fn oracle(&self) -> f64 {
        let eps = 1e-7;
        let s = self.cfg.scale;
        let mut total = 0.0;
        for (i, &phi) in self.phi.iter().enumerate() {
            let y = self.labels[i];
            let z: Vec<f64> = self
                .psi
                .iter()
                .enumerate()
                .map(|(j, &psi)| {
                    let dot = phi.cos() * psi.cos() + phi.sin() * psi.sin();
                    let theta = dot.clamp(-1.0 + eps, 1.0 - eps).acos();
                    let off = if j == y { self.cfg.margin } else { self.k };
                    if off == 0.0 {
                        s * dot
                    } else {
                        s * (theta + off).clamp(0.0, PI).cos()
                    }
                })
                .collect();
            total += ce_oracle(&z, y);
        }
        total / self.phi.len() as f64
    }
}
