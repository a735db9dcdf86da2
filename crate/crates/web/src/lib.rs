//! Browser demo: play a synthetic test clip, score it with a
//! previous-frame predictor, and compare how the loss terms react to noise
//! and to a structural edit.

use vadkit::data_io::{denormalize, synthetic_clip, Split, SynthConfig, VideoClip};
use vadkit::evaluation::{auc, roc_curve};
use vadkit::loss::{intensity_loss, noise_tolerance_loss, LossNetwork, LossNetworkSpec, LossWeights};
use vadkit::scoring::{frame_psnr, normalize_scores};
use vadkit::tensor::Tensor;
use wasm_bindgen::prelude::*;

const SIZE: usize = 64;

fn js(e: vadkit::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    clip: VideoClip,
    loss_net: LossNetwork<f32>,
}

#[wasm_bindgen]
impl Demo {
    /// Test clip `index` of the benchmark generated with `seed`; the anomaly
    /// kind cycles speed jump, new shape, reversal with the index.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, index: usize) -> Result<Demo, JsError> {
        Demo::build(seed, index).map_err(js)
    }

    pub fn frame_count(&self) -> usize {
        self.clip.len()
    }

    pub fn frame_size(&self) -> usize {
        SIZE
    }

    pub fn labels(&self) -> Vec<u8> {
        self.clip.labels.clone().unwrap_or_default()
    }

    /// Frame `t` as RGBA bytes for an `ImageData`.
    pub fn rgba(&self, t: usize) -> Vec<u8> {
        rgba(&self.clip.frames[t.min(self.clip.len() - 1)])
    }

    /// Anomaly scores of frames `1..T` when each frame is predicted by its
    /// predecessor.
    pub fn baseline_scores(&self) -> Vec<f64> {
        self.baseline()
    }

    /// `[intensity, noise tolerance]` for uniform noise of `amplitude`, then
    /// for a square patch edit with the same intensity loss, at frame `t`.
    pub fn loss_probe(&self, t: usize, amplitude: f64, seed: u64) -> Result<Vec<f64>, JsError> {
        self.probe(t, amplitude, seed).map_err(js)
    }
}

impl Demo {
    pub fn build(seed: u64, index: usize) -> vadkit::Result<Demo> {
        let config = SynthConfig {
            seed,
            num_test_clips: index + 1,
            ..SynthConfig::default()
        };
        Ok(Demo {
            clip: synthetic_clip(&config, Split::Test, index)?,
            loss_net: LossNetwork::random(LossNetworkSpec::vgg16_scaled(16), seed),
        })
    }

    pub fn baseline(&self) -> Vec<f64> {
        let psnr: Vec<f64> = self
            .clip
            .frames
            .windows(2)
            .map(|w| frame_psnr(&w[1], &w[0]).expect("frames share a shape"))
            .collect();
        normalize_scores(&psnr)
    }

    pub fn probe(&self, t: usize, amplitude: f64, seed: u64) -> vadkit::Result<Vec<f64>> {
        let base = &self.clip.frames[t.min(self.clip.len() - 1)];
        let alpha = LossWeights::default().alpha;
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        let mut noisy = base.clone();
        for v in noisy.data_mut() {
            // xorshift keeps the demo free of extra dependencies.
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            *v += (amplitude * (2.0 * u - 1.0)) as f32;
        }
        let noise_int = intensity_loss(base, &noisy)?;
        let noise_nt = noise_tolerance_loss(base, &noisy, &self.loss_net, &alpha)?;
        let k = 12;
        let offset = noise_int / ((k * k) as f64 * 3f64.sqrt());
        let (x0, y0) = (8 + (seed as usize * 7) % 40, 8 + (seed as usize * 13) % 40);
        let mut edit = base.clone();
        for c in 0..3 {
            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    edit.data_mut()[(c * SIZE + y) * SIZE + x] += offset as f32;
                }
            }
        }
        let edit_int = intensity_loss(base, &edit)?;
        let edit_nt = noise_tolerance_loss(base, &edit, &self.loss_net, &alpha)?;
        Ok(vec![noise_int, noise_nt, edit_int, edit_nt])
    }
}

fn rgba(frame: &Tensor<f32>) -> Vec<u8> {
    let (c, n) = (frame.shape()[0], frame.shape()[1] * frame.shape()[2]);
    let d = frame.data();
    let mut out = vec![255u8; 4 * n];
    for i in 0..n {
        for k in 0..3 {
            out[4 * i + k] = denormalize(d[(k % c) * n + i]);
        }
    }
    out
}

/// Area under the ROC curve of `scores` against 0/1 `labels`.
#[wasm_bindgen]
pub fn score_auc(scores: &[f64], labels: &[u8]) -> Result<f64, JsError> {
    auc(scores, labels).map_err(js)
}

/// ROC points flattened as `fpr0, tpr0, fpr1, tpr1, ...`.
#[wasm_bindgen]
pub fn score_roc(scores: &[f64], labels: &[u8]) -> Result<Vec<f64>, JsError> {
    let roc = roc_curve(scores, labels).map_err(js)?;
    Ok(roc.fpr.iter().zip(&roc.tpr).flat_map(|(&f, &t)| [f, t]).collect())
}
