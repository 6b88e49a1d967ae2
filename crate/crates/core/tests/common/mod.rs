//! Reference implementations written independently of the library, plus
//! small shared fixtures.

#![allow(dead_code)]

use std::f64::consts::PI;

use capsroute::capsnet::{CapsNet, CapsNetConfig};
use capsroute::cnn::{Cnn, CnnConfig};
use capsroute::model::{Mlp, MLP_PARAM_NAMES};
use capsroute::tensor::{MarginConstants, Tensor};
use capsroute::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SQUASH_EPS: f64 = 1e-9;

/// Central-difference steps for whole-model checks. A ±step interval that
/// straddles a ReLU or max-pool switch point spoils the larger step; round-off
/// on small gradients spoils the smaller one. A wrong gradient fails both.
pub const GRAD_STEPS: [f64; 2] = [1e-5, 1e-6];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn oracle_squash(s: &[f64]) -> Vec<f64> {
    let sq: f64 = s.iter().map(|v| v * v).sum();
    let n = sq.sqrt();
    let factor = sq / ((1.0 + sq) * (n + SQUASH_EPS));
    s.iter().map(|v| v * factor).collect()
}

/// `u: P×Din`, `w: P×J×Dout×Din` (flat, row-major) → votes `P×J×Dout`.
pub fn oracle_votes(u: &[f64], w: &[f64], p: usize, j: usize, dout: usize, din: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * j * dout];
    for i in 0..p {
        for c in 0..j {
            for r in 0..dout {
                let mut acc = 0.0;
                for k in 0..din {
                    acc += w[((i * j + c) * dout + r) * din + k] * u[i * din + k];
                }
                out[(i * j + c) * dout + r] = acc;
            }
        }
    }
    out
}

pub struct OracleRouting {
    /// `J×D`.
    pub v: Vec<f64>,
    /// `P×J` couplings used in the last iteration.
    pub c: Vec<f64>,
    /// Coupling matrices of every iteration.
    pub history: Vec<Vec<f64>>,
}

/// Straight-line routing-by-agreement over votes `P×J×D`.
pub fn oracle_routing(u_hat: &[f64], p: usize, j: usize, d: usize, iterations: usize) -> OracleRouting {
    let mut b = vec![0.0; p * j];
    let mut history = Vec::new();
    let mut v = vec![0.0; j * d];
    let mut c = vec![0.0; p * j];
    for it in 0..iterations {
        for i in 0..p {
            let row = &b[i * j..(i + 1) * j];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for q in 0..j {
                c[i * j + q] = e[q] / z;
            }
        }
        history.push(c.clone());
        for q in 0..j {
            let mut s = vec![0.0; d];
            for i in 0..p {
                for r in 0..d {
                    s[r] += c[i * j + q] * u_hat[(i * j + q) * d + r];
                }
            }
            v[q * d..(q + 1) * d].copy_from_slice(&oracle_squash(&s));
        }
        if it + 1 < iterations {
            for i in 0..p {
                for q in 0..j {
                    let mut dot = 0.0;
                    for r in 0..d {
                        dot += u_hat[(i * j + q) * d + r] * v[q * d + r];
                    }
                    b[i * j + q] += dot;
                }
            }
        }
    }
    OracleRouting { v, c, history }
}

pub fn oracle_margin(lengths: &[f64], target: usize, m: &MarginConstants) -> f64 {
    lengths
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            if k == target {
                (m.m_plus - n).max(0.0).powi(2)
            } else {
                m.lambda * (n - m.m_minus).max(0.0).powi(2)
            }
        })
        .sum()
}

/// Hann-windowed DFT magnitudes `|X(k)|`, bins `0..bins`, by direct summation.
pub fn oracle_stft(x: &[f64], window: usize, hop: usize, bins: usize) -> Vec<Vec<f64>> {
    let hann: Vec<f64> = (0..window)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / (window - 1) as f64).cos()))
        .collect();
    let frames = (x.len() - window) / hop + 1;
    (0..bins)
        .map(|k| {
            (0..frames)
                .map(|f| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for n in 0..window {
                        let v = x[f * hop + n] * hann[n];
                        let phase = 2.0 * PI * ((k * n) % window) as f64 / window as f64;
                        re += v * phase.cos();
                        im -= v * phase.sin();
                    }
                    re.hypot(im)
                })
                .collect()
        })
        .collect()
}

/// Reduced-width capsule network: same layer sequence, tiny widths.
pub fn small_capsnet_config(h: usize, w: usize) -> CapsNetConfig {
    CapsNetConfig {
        conv1_channels: 6,
        conv1_kernel: 3,
        conv1_stride: 1,
        conv2_channels: 8,
        conv2_kernel: 3,
        conv2_stride: 2,
        primary_dim: 4,
        secondary_dim: 4,
        decoder_hidden: [7, 9],
        ..CapsNetConfig::for_input(h, w)
    }
}

pub fn small_capsnet(h: usize, w: usize, seed: u64) -> CapsNet {
    let mut cfg = small_capsnet_config(h, w);
    // Wider init keeps routing outputs away from the flat tails of squash.
    cfg.init_std = 0.5;
    CapsNet::new(cfg, &mut rng(seed)).unwrap()
}

pub fn small_cnn(h: usize, w: usize, seed: u64) -> Cnn {
    let cfg = CnnConfig {
        channels: [3, 4, 5],
        hidden: 6,
        init_std: 0.5,
        ..CnnConfig::for_input(h, w)
    };
    Cnn::new(cfg, &mut rng(seed)).unwrap()
}

/// Checks `analytic` against central differences of `loss` at selected
/// coordinates of `params[t]`, keeping per coordinate the best agreement over
/// `steps`. Returns the worst relative error per tensor.
pub fn central_difference_check(
    params: &mut [Tensor],
    analytic: &[Tensor],
    coords_per_tensor: usize,
    steps: &[f64],
    seed: u64,
    mut loss: impl FnMut(&[Tensor]) -> f64,
) -> Vec<(usize, f64)> {
    let mut rng = rng(seed);
    let mut worst = Vec::new();
    for t in 0..params.len() {
        let len = params[t].len();
        let coords: Vec<usize> = if len <= coords_per_tensor {
            (0..len).collect()
        } else {
            (0..coords_per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        let mut max_rel: f64 = 0.0;
        for i in coords {
            let orig = params[t].data()[i];
            let a = analytic[t].data()[i];
            let mut rel = f64::INFINITY;
            for &h in steps {
                params[t].data_mut()[i] = orig + h;
                let up = loss(params);
                params[t].data_mut()[i] = orig - h;
                let down = loss(params);
                params[t].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                rel = rel.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            }
            max_rel = max_rel.max(rel);
        }
        worst.push((t, max_rel));
    }
    worst
}

fn replace_all<'t>(targets: impl IntoIterator<Item = &'t mut Tensor>, values: &[Tensor]) {
    for (dst, src) in targets.into_iter().zip(values) {
        *dst = src.clone();
    }
}

fn named(worst: Vec<(usize, f64)>, names: &[&str]) -> Vec<(String, f64)> {
    worst.into_iter().map(|(t, e)| (names[t].to_string(), e)).collect()
}

/// Checks one model at an input size and label; worst error per group.
pub type GradCheck = fn(usize, usize, u64, Label) -> Vec<(String, f64)>;

/// Worst relative error per parameter group of the reduced capsule network.
pub fn capsnet_gradcheck(h: usize, w: usize, seed: u64, label: Label) -> Vec<(String, f64)> {
    let net = small_capsnet(h, w, seed);
    let img = uniform(&mut rng(seed + 1), h * w, 0.0, 1.0);
    let (_, grads, _) = net.loss_and_gradients(&img, label).unwrap();
    let mut params: Vec<Tensor> = net.params.tensors().into_iter().cloned().collect();
    let worst = central_difference_check(&mut params, &grads, 25, &GRAD_STEPS, seed + 2, |ps| {
        let mut m = net.clone();
        replace_all(m.params.tensors_mut(), ps);
        m.loss_unit(&img, label).unwrap()
    });
    named(worst, &capsroute::capsnet::PARAM_NAMES)
}

/// Same for the reduced CNN, with a fixed dropout mask.
pub fn cnn_gradcheck(h: usize, w: usize, seed: u64, label: Label) -> Vec<(String, f64)> {
    let net = small_cnn(h, w, seed);
    let img = uniform(&mut rng(seed + 1), h * w, 0.0, 1.0);
    let mask = Some(seed + 3);
    let (_, grads, _) = net.loss_and_gradients(&img, label, mask).unwrap();
    let mut params: Vec<Tensor> = net.params.tensors().into_iter().cloned().collect();
    let worst = central_difference_check(&mut params, &grads, 25, &GRAD_STEPS, seed + 2, |ps| {
        let mut m = net.clone();
        replace_all(m.params.tensors_mut(), ps);
        m.loss_unit(&img, label, mask).unwrap()
    });
    named(worst, &capsroute::cnn::PARAM_NAMES)
}

/// Same for the shallow baseline with a narrow hidden layer.
pub fn mlp_gradcheck(h: usize, w: usize, seed: u64, label: Label) -> Vec<(String, f64)> {
    let net = Mlp::new(h, w, 7, 0.5, &mut rng(seed));
    let img = uniform(&mut rng(seed + 1), h * w, 0.0, 1.0);
    let (_, grads, _) = net.loss_and_gradients(&img, label).unwrap();
    let mut params: Vec<Tensor> = net.tensors().into_iter().cloned().collect();
    let worst = central_difference_check(&mut params, &grads, 25, &GRAD_STEPS, seed + 2, |ps| {
        let mut m = net.clone();
        replace_all(m.tensors_mut(), ps);
        let (loss, _, _) = m.loss_and_gradients(&img, label).unwrap();
        loss
    });
    named(worst, &MLP_PARAM_NAMES)
}
