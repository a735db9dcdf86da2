//! Parameter storage and the building blocks of the prediction network.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Real, Tensor};

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor by the entry of the same name in `entries`,
    /// checking that names and shapes agree exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, archive has {}",
                self.tensors.len(),
                entries.len()
            )));
        }
        for (name, value) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Validation(format!("unexpected parameter {name}")))?;
            if self.tensors[id].shape() != value.shape() {
                return Err(Error::Validation(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    self.tensors[id].shape(),
                    value.shape()
                )));
            }
            self.tensors[id] = value;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Puts every parameter on the tape. `trainable[id] == false` turns the
    /// slot into a constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: Option<&[bool]>) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(id, t)| g.param(t.clone(), id, trainable.is_none_or(|m| m[id])))
            .collect()
    }
}

/// Uniform fan-in initialisation with bound `gain * sqrt(3 / fan_in)`.
fn kaiming<T: Real>(shape: &[usize], gain: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// How a freshly registered convolution is initialised.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    FanIn(f64),
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: Option<usize>,
    pub geom: ConvGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        init: Init,
        bias: bool,
    ) -> Self {
        let shape = [cout, cin, geom.kernel, geom.kernel];
        let w = match init {
            Init::FanIn(gain) => kaiming(&shape, gain, rng),
            Init::Zeros => Tensor::zeros(&shape),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d { weight, bias, geom }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.geom)
    }
}

/// Stride-one convolution that preserves the spatial size (odd `kernel`).
pub fn same(kernel: usize) -> ConvGeom {
    ConvGeom {
        kernel,
        stride: 1,
        pad: kernel / 2,
    }
}

/// Stride-two convolution that halves even spatial sizes.
pub fn down(kernel: usize) -> ConvGeom {
    ConvGeom {
        kernel,
        stride: 2,
        pad: kernel / 2,
    }
}

pub const POINTWISE: ConvGeom = ConvGeom {
    kernel: 1,
    stride: 1,
    pad: 0,
};
const POINTWISE_DOWN: ConvGeom = ConvGeom {
    kernel: 1,
    stride: 2,
    pad: 0,
};

/// Residual block without normalisation layers:
/// `shortcut(x) + conv2(relu(conv1(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        downsample: bool,
    ) -> Self {
        let first = if downsample { down(kernel) } else { same(kernel) };
        let conv1 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv1"),
            cin,
            cout,
            first,
            Init::FanIn(RELU_GAIN),
            true,
        );
        let conv2 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv2"),
            cout,
            cout,
            same(kernel),
            Init::FanIn(1.0),
            true,
        );
        let shortcut = (downsample || cin != cout).then(|| {
            Conv2d::new(
                store,
                rng,
                &format!("{name}.shortcut"),
                cin,
                cout,
                if downsample { POINTWISE_DOWN } else { POINTWISE },
                Init::FanIn(1.0),
                false,
            )
        });
        ResBlock {
            conv1,
            conv2,
            shortcut,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let h = self.conv1.forward(g, p, x);
        let h = g.relu(h);
        let h = self.conv2.forward(g, p, h);
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, p, x),
            None => x,
        };
        g.add(skip, h)
    }
}

/// Embedded-Gaussian non-local block with a residual connection. The output
/// projection starts at zero, so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct NonLocal {
    pub theta: Conv2d,
    pub phi: Conv2d,
    pub g: Conv2d,
    pub out: Conv2d,
}

impl NonLocal {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        let inner = (channels / 2).max(1);
        let mut proj = |suffix: &str, cin, cout, init| {
            Conv2d::new(
                store,
                rng,
                &format!("{name}.{suffix}"),
                cin,
                cout,
                POINTWISE,
                init,
                true,
            )
        };
        let theta = proj("theta", channels, inner, Init::FanIn(1.0));
        let phi = proj("phi", channels, inner, Init::FanIn(1.0));
        let g = proj("g", channels, inner, Init::FanIn(1.0));
        let out = proj("out", inner, channels, Init::Zeros);
        NonLocal { theta, phi, g, out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let th = self.theta.forward(g, p, x);
        let ph = self.phi.forward(g, p, x);
        let gv = self.g.forward(g, p, x);
        let y = g.attention(th, ph, gv);
        let y = self.out.forward(g, p, y);
        g.add(x, y)
    }
}

/// Convolutional GRU cell:
///
/// ```text
/// u  = sigmoid(W_u * [x, h])
/// r  = sigmoid(W_r * [x, h])
/// c  = tanh(W_c * [x, r . h])
/// h' = (1 - u) . h + u . c
/// ```
///
/// `W_u` and `W_r` share one convolution with `2C` output channels.
#[derive(Clone, Debug)]
pub struct ConvGru {
    pub gates: Conv2d,
    pub candidate: Conv2d,
    pub channels: usize,
}

impl ConvGru {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        kernel: usize,
    ) -> Self {
        let gates = Conv2d::new(
            store,
            rng,
            &format!("{name}.gates"),
            2 * channels,
            2 * channels,
            same(kernel),
            Init::FanIn(1.0),
            true,
        );
        let candidate = Conv2d::new(
            store,
            rng,
            &format!("{name}.candidate"),
            2 * channels,
            channels,
            same(kernel),
            Init::FanIn(1.0),
            true,
        );
        ConvGru {
            gates,
            candidate,
            channels,
        }
    }

    pub fn step<T: Real>(&self, g: &mut Graph<T>, p: &[Var], h: Var, x: Var) -> Var {
        let c = self.channels;
        let xh = g.concat_channels(&[x, h]);
        let gates = self.gates.forward(g, p, xh);
        let u = g.narrow_channels(gates, 0, c);
        let u = g.sigmoid(u);
        let r = g.narrow_channels(gates, c, c);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let xrh = g.concat_channels(&[x, rh]);
        let cand = self.candidate.forward(g, p, xrh);
        let cand = g.tanh(cand);
        let keep = g.one_minus(u);
        let kept = g.mul(keep, h);
        let fresh = g.mul(u, cand);
        g.add(kept, fresh)
    }
}
