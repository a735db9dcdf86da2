//! Training objective: intensity, gradient-difference and noise-tolerance
//! losses, plus the frozen VGG16-style loss network behind the latter.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::{grad_diff_sum, intensity_sum, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{same, Conv2d, Init, ParamStore, RELU_GAIN};
use crate::tensor::{Real, Tensor};

/// Taps of the loss network: outputs of the 2nd, 4th, 7th, 10th and 13th
/// convolution+ReLU pairs (relu1_2, relu2_2, relu3_3, relu4_3, relu5_3).
pub const VGG_TAPS: [usize; 5] = [2, 4, 7, 10, 13];
pub const VGG_ALPHA: [f64; 5] = [0.1, 1.0, 10.0, 10.0, 10.0];

/// ImageNet statistics expected by pretrained weights.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_int: f64,
    pub lambda_gd: f64,
    pub lambda_nt: f64,
    /// Weight per loss-network tap.
    pub alpha: BTreeMap<usize, f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_int: 1.0,
            lambda_gd: 1.0,
            lambda_nt: 1.0,
            alpha: VGG_TAPS.iter().copied().zip(VGG_ALPHA).collect(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_int, self.lambda_gd, self.lambda_nt]
            .into_iter()
            .chain(self.alpha.values().copied());
        for v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// How per-term sums are normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Plain sums over pixels (and over the batch).
    Sum,
    /// Intensity per pixel, gradient per element, each loss-network tap per
    /// activation; averaged over the batch.
    #[default]
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub intensity: f64,
    pub gradient: f64,
    pub noise_tolerance: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 4] {
        [
            ("intensity", self.intensity),
            ("gradient", self.gradient),
            ("noise_tolerance", self.noise_tolerance),
            ("total", self.total),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    /// 3x3 convolution with padding 1, stored as `features.{index}`.
    Conv { index: usize, cin: usize, cout: usize },
    Relu,
    MaxPool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossNetworkSpec {
    pub layers: Vec<Layer>,
    /// 1-based conv+ReLU indices whose activations are compared.
    pub taps: Vec<usize>,
}

impl LossNetworkSpec {
    /// The VGG16 feature stack up to relu5_3.
    pub fn vgg16() -> Self {
        Self::vgg16_scaled(1)
    }

    /// VGG16 layout with every width divided by `divisor` (at least 1
    /// channel), for cheap random-weight networks.
    pub fn vgg16_scaled(divisor: usize) -> Self {
        let blocks: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
        let mut layers = Vec::new();
        let mut cin = 3;
        let mut index = 0;
        for (b, &(width, convs)) in blocks.iter().enumerate() {
            if b > 0 {
                layers.push(Layer::MaxPool);
                index += 1;
            }
            let cout = (width / divisor.max(1)).max(1);
            for _ in 0..convs {
                layers.push(Layer::Conv { index, cin, cout });
                layers.push(Layer::Relu);
                index += 2;
                cin = cout;
            }
        }
        LossNetworkSpec {
            layers,
            taps: VGG_TAPS.to_vec(),
        }
    }

    fn convs(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.layers.iter().filter_map(|l| match *l {
            Layer::Conv { index, cin, cout } => Some((index, cin, cout)),
            _ => None,
        })
    }

    /// Spatial size of every tap for a square input of side `size`.
    pub fn tap_sizes(&self, size: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let (mut side, mut seen) = (size, 0);
        for l in &self.layers {
            match l {
                Layer::MaxPool => side = side.div_ceil(2),
                Layer::Relu => {
                    seen += 1;
                    if self.taps.contains(&seen) {
                        out.push((seen, side));
                    }
                }
                Layer::Conv { .. } => {}
            }
        }
        out
    }
}

/// The frozen loss network. Its parameters live outside any optimiser and
/// are bound as constants, so no gradient ever reaches them.
#[derive(Clone, Debug)]
pub struct LossNetwork<T> {
    spec: LossNetworkSpec,
    convs: Vec<Conv2d>,
    params: ParamStore<T>,
}

impl<T: Real> LossNetwork<T> {
    fn build(spec: LossNetworkSpec, init: Init, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let convs = spec
            .convs()
            .map(|(index, cin, cout)| {
                Conv2d::new(&mut params, &mut rng, &format!("features.{index}"), cin, cout, same(3), init, true)
            })
            .collect();
        LossNetwork { spec, convs, params }
    }

    /// Seeded random weights (fan-in uniform, zero biases).
    pub fn random(spec: LossNetworkSpec, seed: u64) -> Self {
        Self::build(spec, Init::FanIn(RELU_GAIN), seed)
    }

    pub fn zeros(spec: LossNetworkSpec) -> Self {
        Self::build(spec, Init::Zeros, 0)
    }

    /// Pretrained weights from an archive with `features.{index}.weight` and
    /// `features.{index}.bias` entries.
    pub fn from_archive(spec: LossNetworkSpec, path: &Path) -> Result<Self> {
        let archive = Archive::load(path).map_err(|e| match e {
            Error::NotFound(p) => Error::Config(format!("loss-network weights not found: {}", p.display())),
            other => other,
        })?;
        let mut net = Self::zeros(spec);
        let mut entries = Vec::new();
        for (name, t) in net.params.iter() {
            let loaded: Tensor<T> = archive.tensor(name)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Validation(format!(
                    "loss-network tensor {name}: expected shape {:?}, got {:?}",
                    t.shape(),
                    loaded.shape()
                )));
            }
            entries.push((name.to_string(), loaded));
        }
        net.params.load(entries)?;
        Ok(net)
    }

    pub fn spec(&self) -> &LossNetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn cast<U: Real>(&self) -> LossNetwork<U> {
        LossNetwork {
            spec: self.spec.clone(),
            convs: self.convs.clone(),
            params: self.params.cast(),
        }
    }

    /// Tap activations for a batch `[N, C, H, W]` in `[-1, 1]`, in tap order.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Vec<(usize, Var)> {
        let p = self.params.bind(g, Some(&vec![false; self.params.len()]));
        let c = g.value(x).dims4().1;
        let mut h = if c == 1 { g.repeat_channels(x, 3) } else { x };
        let scale: Vec<T> = IMAGENET_STD.iter().map(|s| T::c(0.5 / s)).collect();
        let shift: Vec<T> = IMAGENET_MEAN
            .iter()
            .zip(IMAGENET_STD)
            .map(|(m, s)| T::c((0.5 - m) / s))
            .collect();
        h = g.channel_affine(h, &scale, &shift);
        let mut taps = Vec::new();
        let (mut conv, mut relus) = (0, 0);
        let last = self.spec.taps.iter().copied().max().unwrap_or(0);
        for layer in &self.spec.layers {
            if relus >= last {
                break;
            }
            match layer {
                Layer::Conv { .. } => {
                    h = self.convs[conv].forward(g, &p, h);
                    conv += 1;
                }
                Layer::Relu => {
                    h = g.relu(h);
                    relus += 1;
                    if self.spec.taps.contains(&relus) {
                        taps.push((relus, h));
                    }
                }
                Layer::MaxPool => h = g.maxpool2(h),
            }
        }
        taps
    }
}

fn check_pair<T: Real>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<()> {
    if target.shape() != pred.shape() {
        return Err(Error::Validation(format!(
            "shape mismatch: target {:?}, prediction {:?}",
            target.shape(),
            pred.shape()
        )));
    }
    if target.shape().len() != 3 {
        return Err(Error::Validation(format!("expected a [C, H, W] frame, got {:?}", target.shape())));
    }
    Ok(())
}

fn batched<T: Real>(f: &Tensor<T>) -> Tensor<T> {
    let mut shape = vec![1];
    shape.extend_from_slice(f.shape());
    f.clone().reshape(&shape).expect("same element count")
}

/// Sum over pixels of the Euclidean norm of the channel difference.
pub fn intensity_loss<T: Real>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    check_pair(target, pred)?;
    Ok(intensity_sum(&batched(target), &batched(pred)).to_f64())
}

/// Summed l1 mismatch of the absolute vertical and horizontal forward
/// differences of the two frames.
pub fn gradient_difference_loss<T: Real>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    check_pair(target, pred)?;
    Ok(grad_diff_sum(&batched(target), &batched(pred)).to_f64())
}

/// Activations of one `[C, H, W]` frame at every tap, each `[C_v, H_v, W_v]`.
pub fn loss_network_forward<T: Real>(frame: &Tensor<T>, net: &LossNetwork<T>) -> Result<Vec<(usize, Tensor<T>)>> {
    match frame.shape() {
        [1 | 3, _, _] => {}
        s => return Err(Error::Validation(format!("loss network needs a [1|3, H, W] frame, got {s:?}"))),
    }
    let mut g = Graph::inference();
    let x = g.constant(batched(frame));
    let taps = net.forward_graph(&mut g, x);
    Ok(taps
        .into_iter()
        .map(|(v, t)| {
            let value = g.value(t);
            let shape = value.shape()[1..].to_vec();
            (v, value.clone().reshape(&shape).expect("same element count"))
        })
        .collect())
}

/// `sum_v alpha_v * || f_v(target) - f_v(pred) ||_1`.
pub fn noise_tolerance_loss<T: Real>(
    target: &Tensor<T>,
    pred: &Tensor<T>,
    net: &LossNetwork<T>,
    alpha: &BTreeMap<usize, f64>,
) -> Result<f64> {
    check_pair(target, pred)?;
    let ft = loss_network_forward(target, net)?;
    let fp = loss_network_forward(pred, net)?;
    let mut total = 0.0;
    for ((v, a), (_, b)) in ft.iter().zip(&fp) {
        let weight = alpha.get(v).copied().unwrap_or(0.0);
        let l1: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (Real::to_f64(x) - Real::to_f64(y)).abs()).sum();
        total += weight * l1;
    }
    Ok(total)
}

/// Every term summed (no normalisation). The loss network is only run when
/// `lambda_nt > 0`.
pub fn total_loss<T: Real>(
    target: &Tensor<T>,
    pred: &Tensor<T>,
    weights: &LossWeights,
    net: Option<&LossNetwork<T>>,
) -> Result<LossBreakdown> {
    let intensity = intensity_loss(target, pred)?;
    let gradient = gradient_difference_loss(target, pred)?;
    let noise_tolerance = if weights.lambda_nt > 0.0 {
        let net = net.ok_or_else(|| Error::Config("lambda_nt > 0 needs a loss network".into()))?;
        noise_tolerance_loss(target, pred, net, &weights.alpha)?
    } else {
        0.0
    };
    Ok(LossBreakdown {
        intensity,
        gradient,
        noise_tolerance,
        total: weights.lambda_int * intensity + weights.lambda_gd * gradient + weights.lambda_nt * noise_tolerance,
    })
}

/// Loss terms recorded on a tape for a batch of predictions.
pub struct GraphLoss {
    pub total: Var,
    pub intensity: Var,
    pub gradient: Var,
    pub noise_tolerance: Option<Var>,
}

impl GraphLoss {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        LossBreakdown {
            intensity: g.value(self.intensity).item().to_f64(),
            gradient: g.value(self.gradient).item().to_f64(),
            noise_tolerance: self.noise_tolerance.map_or(0.0, |v| g.value(v).item().to_f64()),
            total: g.value(self.total).item().to_f64(),
        }
    }
}

/// Records the weighted objective for `pred` against `target`, both
/// `[N, C, H, W]`.
pub fn graph_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    weights: &LossWeights,
    net: Option<&LossNetwork<T>>,
    reduction: Reduction,
) -> Result<GraphLoss> {
    let (n, c, h, w) = g.value(pred).dims4();
    if g.value(target).shape() != g.value(pred).shape() {
        return Err(Error::Validation(format!(
            "shape mismatch: target {:?}, prediction {:?}",
            g.value(target).shape(),
            g.value(pred).shape()
        )));
    }
    let per = |count: usize| match reduction {
        Reduction::Sum => T::one(),
        Reduction::Mean => T::c(1.0 / (n * count) as f64),
    };
    let intensity = g.intensity_loss(pred, target, per(h * w));
    let gradient = g.grad_diff_loss(pred, target, per(c * h * w));
    let mut terms = vec![(intensity, T::c(weights.lambda_int)), (gradient, T::c(weights.lambda_gd))];
    let mut noise_tolerance = None;
    if weights.lambda_nt > 0.0 {
        let net = net.ok_or_else(|| Error::Config("lambda_nt > 0 needs a loss network".into()))?;
        let fp = net.forward_graph(g, pred);
        let ft = net.forward_graph(g, target);
        let mut parts = Vec::new();
        for ((v, a), (_, b)) in fp.into_iter().zip(ft) {
            let alpha = weights.alpha.get(&v).copied().unwrap_or(0.0);
            let numel = g.value(a).numel() / n;
            let l = g.l1_loss(a, b, per(numel));
            parts.push((l, T::c(alpha)));
        }
        let nt = g.weighted_sum(&parts);
        terms.push((nt, T::c(weights.lambda_nt)));
        noise_tolerance = Some(nt);
    }
    let total = g.weighted_sum(&terms);
    Ok(GraphLoss {
        total,
        intensity,
        gradient,
        noise_tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&[c, h, w], data).unwrap()
    }

    #[test]
    fn intensity_three_four_five() {
        let a = Tensor::<f64>::zeros(&[3, 2, 2]);
        let mut b = a.clone();
        b.data_mut()[0] = 0.3;
        b.data_mut()[8] = 0.4;
        assert!((intensity_loss(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(intensity_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn gradient_hand_example() {
        let t = frame(1, 2, 2, vec![0.0, 1.0, 0.0, 0.0]);
        let p = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(gradient_difference_loss(&t, &p).unwrap(), 2.0);
        let c1 = Tensor::<f64>::full(&[1, 3, 3], 0.2);
        let c2 = Tensor::<f64>::full(&[1, 3, 3], -0.7);
        assert_eq!(gradient_difference_loss(&c1, &c2).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::<f32>::zeros(&[3, 4, 4]);
        let b = Tensor::<f32>::zeros(&[3, 4, 5]);
        assert!(matches!(intensity_loss(&a, &b), Err(Error::Validation(_))));
    }

    #[test]
    fn vgg_layout() {
        let spec = LossNetworkSpec::vgg16();
        assert_eq!(spec.convs().count(), 13);
        let idx: Vec<usize> = spec.convs().map(|c| c.0).collect();
        assert_eq!(idx, vec![0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28]);
        assert_eq!(
            spec.tap_sizes(256),
            vec![(2, 256), (4, 128), (7, 64), (10, 32), (13, 16)]
        );
    }

    #[test]
    fn zero_network_has_zero_taps() {
        let net = LossNetwork::<f64>::zeros(LossNetworkSpec::vgg16_scaled(16));
        let x = Tensor::full(&[3, 16, 16], 0.3);
        for (_, t) in loss_network_forward(&x, &net).unwrap() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lambda_nt_zero_needs_no_network() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.1);
        let b = Tensor::<f64>::full(&[3, 4, 4], 0.2);
        let w = LossWeights {
            lambda_nt: 0.0,
            ..LossWeights::default()
        };
        let out = total_loss(&a, &b, &w, None).unwrap();
        assert_eq!(out.noise_tolerance, 0.0);
        assert_eq!(out.total, out.intensity + out.gradient);
        assert!(total_loss(&a, &b, &LossWeights::default(), None).is_err());
    }
}
