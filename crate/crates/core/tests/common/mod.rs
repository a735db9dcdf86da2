//! Plain-loop reference implementations used as test oracles. None of this
//! goes through the tensor engine or the tape.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vadkit::loss::{Layer, LossNetwork, IMAGENET_MEAN, IMAGENET_STD};
use vadkit::tensor::Tensor;

pub fn random_frame(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Sum over pixels of the channel-vector Euclidean norm.
pub fn intensity_ref(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let mut sq = 0.0;
            for k in 0..c {
                let d = a.data()[(k * h + i) * w + j] - b.data()[(k * h + i) * w + j];
                sq += d * d;
            }
            total += sq.sqrt();
        }
    }
    total
}

pub fn grad_diff_ref(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let at = |t: &Tensor<f64>, k: usize, i: usize, j: usize| t.data()[(k * h + i) * w + j];
    let mut total = 0.0;
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    let ga = (at(a, k, i + 1, j) - at(a, k, i, j)).abs();
                    let gb = (at(b, k, i + 1, j) - at(b, k, i, j)).abs();
                    total += (ga - gb).abs();
                }
                if j + 1 < w {
                    let ga = (at(a, k, i, j + 1) - at(a, k, i, j)).abs();
                    let gb = (at(b, k, i, j + 1) - at(b, k, i, j)).abs();
                    total += (ga - gb).abs();
                }
            }
        }
    }
    total
}

/// Convolution with odd kernel, stride one, zero padding `k / 2`.
#[allow(clippy::too_many_arguments)]
pub fn conv_ref(x: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], cout: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut s = bias[o];
                for c in 0..cin {
                    for di in 0..k {
                        for dj in 0..k {
                            let (y, xx) = (i as isize + di as isize - pad, j as isize + dj as isize - pad);
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            s += weight[((o * cin + c) * k + di) * k + dj] * x[(c * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                out[(o * h + i) * w + j] = s;
            }
        }
    }
    out
}

/// Activations of every tap of the loss network, in tap order.
pub fn loss_taps_ref(net: &LossNetwork<f64>, frame: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (c0, mut h, mut w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let mut x = Vec::with_capacity(3 * h * w);
    for k in 0..3 {
        let src = if c0 == 1 { 0 } else { k };
        for p in 0..h * w {
            let v = (frame.data()[src * h * w + p] + 1.0) / 2.0;
            x.push((v - IMAGENET_MEAN[k]) / IMAGENET_STD[k]);
        }
    }
    let mut c = 3;
    let mut seen = 0;
    let mut taps = Vec::new();
    for layer in &net.spec().layers {
        match *layer {
            Layer::Conv { index, cin, cout } => {
                let p = net.params();
                let wt = p.get(p.id(&format!("features.{index}.weight")).unwrap()).data().to_vec();
                let b = p.get(p.id(&format!("features.{index}.bias")).unwrap()).data().to_vec();
                x = conv_ref(&x, cin, h, w, &wt, &b, cout, 3);
                c = cout;
            }
            Layer::Relu => {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
                seen += 1;
                if net.spec().taps.contains(&seen) {
                    taps.push(x.clone());
                }
            }
            Layer::MaxPool => {
                let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
                let mut y = vec![0.0; c * nh * nw];
                for k in 0..c {
                    for i in 0..nh {
                        for j in 0..nw {
                            let mut m = f64::NEG_INFINITY;
                            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                if 2 * i + di < h && 2 * j + dj < w {
                                    m = m.max(x[(k * h + 2 * i + di) * w + 2 * j + dj]);
                                }
                            }
                            y[(k * nh + i) * nw + j] = m;
                        }
                    }
                }
                x = y;
                h = nh;
                w = nw;
            }
        }
    }
    taps
}

pub fn noise_tolerance_ref(net: &LossNetwork<f64>, a: &Tensor<f64>, b: &Tensor<f64>, alpha: &[f64]) -> f64 {
    let (ta, tb) = (loss_taps_ref(net, a), loss_taps_ref(net, b));
    ta.iter()
        .zip(&tb)
        .zip(alpha)
        .map(|((x, y), a)| a * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .sum()
}

/// Embedded-Gaussian non-local block by explicit all-pairs sums:
/// `x + W_out * (sum_j softmax_j(theta_i . phi_j) g_j)`.
#[allow(clippy::too_many_arguments)]
pub fn nonlocal_ref(
    x: &[f64],
    c: usize,
    hw: usize,
    theta: (&[f64], &[f64]),
    phi: (&[f64], &[f64]),
    g: (&[f64], &[f64]),
    out: (&[f64], &[f64]),
    inner: usize,
) -> Vec<f64> {
    let project = |(w, b): (&[f64], &[f64]), cin: usize, cout: usize, src: &[f64]| -> Vec<f64> {
        let mut y = vec![0.0; cout * hw];
        for o in 0..cout {
            for p in 0..hw {
                let mut s = b[o];
                for k in 0..cin {
                    s += w[o * cin + k] * src[k * hw + p];
                }
                y[o * hw + p] = s;
            }
        }
        y
    };
    let (th, ph, gv) = (project(theta, c, inner, x), project(phi, c, inner, x), project(g, c, inner, x));
    let mut y = vec![0.0; inner * hw];
    for i in 0..hw {
        let logits: Vec<f64> = (0..hw)
            .map(|j| (0..inner).map(|k| th[k * hw + i] * ph[k * hw + j]).sum())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for k in 0..inner {
            y[k * hw + i] = (0..hw).map(|j| e[j] / z * gv[k * hw + j]).sum();
        }
    }
    let o = project(out, inner, c, &y);
    x.iter().zip(&o).map(|(a, b)| a + b).collect()
}

/// Pair counting with ties worth one half.
pub fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
        }
    }
    wins / pairs
}
