#![allow(dead_code)]
//! Reference implementations shared by the integration tests.

use magn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform_image(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[h, w, c], (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

pub fn naive_psnr(a: &Tensor<f64>, b: &Tensor<f64>, peak: f64) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        let d = a.data()[i] - b.data()[i];
        se += d * d;
    }
    10.0 * (peak * peak / (se / a.len() as f64)).log10()
}

/// Windowed SSIM evaluated position by position with explicit 2-D weights.
pub fn naive_ssim(a: &Tensor<f64>, b: &Tensor<f64>, peak: f64) -> f64 {
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let gray = |t: &Tensor<f64>, y: usize, x: usize| {
        if c == 1 {
            t.at(&[y, x, 0])
        } else {
            0.299 * t.at(&[y, x, 0]) + 0.587 * t.at(&[y, x, 1]) + 0.114 * t.at(&[y, x, 2])
        }
    };
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let mut weights = [[0.0; 11]; 11];
    let mut z = 0.0;
    for i in 0..11 {
        for j in 0..11 {
            weights[i][j] = g[i] * g[j];
            z += weights[i][j];
        }
    }
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let mut total = 0.0;
    let mut n = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = weights[i][j] / z;
                    mx += wt * gray(a, y + i, x + j);
                    my += wt * gray(b, y + i, x + j);
                }
            }
            let (mut vx, mut vy, mut cv) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = weights[i][j] / z;
                    let (p, q) = (gray(a, y + i, x + j) - mx, gray(b, y + i, x + j) - my);
                    vx += wt * p * p;
                    vy += wt * q * q;
                    cv += wt * p * q;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            n += 1;
        }
    }
    total / n as f64
}
