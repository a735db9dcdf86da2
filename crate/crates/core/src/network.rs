//! The multi-path frame prediction network.
//!
//! A shared residual encoder turns every input frame into `L` feature maps at
//! halving resolutions. Each scale has its own predictor path (non-local block
//! followed by a ConvGRU) that consumes the `P` feature maps of its scale in
//! temporal order. The decoder starts from the deepest hidden state and fuses
//! the shallower ones on the way back up to frame resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{same, ConvGru, Conv2d, Init, NonLocal, ParamStore, ResBlock};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Number of predictor paths (`L`).
    pub paths: usize,
    /// Number of input frames per prediction (`P`).
    pub input_len: usize,
    pub in_channels: usize,
    /// Height and width of the (square) input frames.
    pub frame_size: usize,
    /// Channel width of every path, shallowest first.
    pub path_channels: Vec<usize>,
    /// Residual blocks per encoder stage; the first one downsamples.
    pub blocks_per_stage: usize,
    pub kernel: usize,
    pub seed: u64,
    /// When false only the deepest path runs and the decoder skips fusion.
    pub multi_path: bool,
    /// When false the non-local blocks are replaced by the identity.
    pub nonlocal: bool,
    /// When false each path forwards the features of the latest frame
    /// instead of running a ConvGRU.
    pub convgru: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            paths: 3,
            input_len: 8,
            in_channels: 3,
            frame_size: 256,
            path_channels: vec![32, 64, 128],
            blocks_per_stage: 2,
            kernel: 3,
            seed: 0,
            multi_path: true,
            nonlocal: true,
            convgru: true,
        }
    }
}

impl NetworkConfig {
    /// Reduced widths for 64x64 colour clips that train in minutes on a
    /// single CPU core.
    pub fn desk() -> Self {
        NetworkConfig {
            frame_size: 64,
            path_channels: vec![4, 8, 16],
            blocks_per_stage: 1,
            ..Self::default()
        }
    }

    pub fn path_resolutions(&self) -> Vec<usize> {
        (1..=self.paths).map(|l| self.frame_size >> l).collect()
    }

    /// Whether path `l` (zero based) takes part in prediction.
    pub fn path_active(&self, l: usize) -> bool {
        self.multi_path || l + 1 == self.paths
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.paths == 0 {
            return fail("at least one predictor path is required".into());
        }
        if self.path_channels.len() != self.paths {
            return fail(format!(
                "path_channels has {} entries for {} paths",
                self.path_channels.len(),
                self.paths
            ));
        }
        if self.path_channels.contains(&0) {
            return fail("path channel widths must be positive".into());
        }
        if self.input_len == 0 {
            return fail("input length must be at least 1".into());
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return fail(format!("in_channels must be 1 or 3, got {}", self.in_channels));
        }
        if self.frame_size == 0 || !self.frame_size.is_multiple_of(1 << self.paths) {
            return fail(format!(
                "frame size {} is not divisible by 2^{}",
                self.frame_size, self.paths
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return fail(format!("kernel size must be odd, got {}", self.kernel));
        }
        if self.blocks_per_stage == 0 {
            return fail("each encoder stage needs at least one block".into());
        }
        Ok(())
    }
}

/// Encoder outputs for one frame, shallowest first; each `[C_l, r_l, r_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps<T> {
    pub taps: Vec<Tensor<T>>,
}

/// Hidden state of every predictor path; `None` for paths that have not seen
/// a frame yet or are disabled. Active entries are `[C_l, r_l, r_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub hidden: Vec<Option<Tensor<T>>>,
}

/// Per-frame inputs of the recurrent step for every path (`None` for
/// inactive paths).
#[derive(Clone, Debug, PartialEq)]
pub struct PathInputs<T> {
    pub inputs: Vec<Option<Tensor<T>>>,
}

/// How the frames of a training batch are arranged along the batch axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowLayout {
    /// `P * B` frames: all first frames, then all second frames, and so on.
    TimeMajor,
    /// `P + B - 1` consecutive frames of one clip; window `k` is frames
    /// `k .. k + P`, so neighbouring windows share their encoder work.
    Sliding,
}

impl WindowLayout {
    pub fn frame_count(self, steps: usize, batch: usize) -> usize {
        match self {
            WindowLayout::TimeMajor => steps * batch,
            WindowLayout::Sliding => steps + batch - 1,
        }
    }

    fn step_offset(self, t: usize, batch: usize) -> usize {
        match self {
            WindowLayout::TimeMajor => t * batch,
            WindowLayout::Sliding => t,
        }
    }
}

#[derive(Clone, Debug)]
struct PathModule {
    nonlocal: Option<NonLocal>,
    gru: Option<ConvGru>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    params: ParamStore<T>,
    stem: Conv2d,
    stages: Vec<Vec<ResBlock>>,
    paths: Vec<Option<PathModule>>,
    /// `ups[l]` maps the state at scale `l + 1` to scale `l` after upsampling.
    ups: Vec<ResBlock>,
    fuses: Vec<Option<ResBlock>>,
    head: Conv2d,
}

fn batched<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape).expect("same element count")
}

fn unbatched<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.clone().reshape(&t.shape()[1..]).expect("same element count")
}

impl<T: Real> Network<T> {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let k = config.kernel;
        let ch = &config.path_channels;

        let stem = Conv2d::new(
            &mut params,
            &mut rng,
            "enc.stem",
            config.in_channels,
            ch[0],
            same(k),
            Init::FanIn(1.0),
            true,
        );
        let mut stages = Vec::with_capacity(config.paths);
        let mut cin = ch[0];
        for (l, &cout) in ch.iter().enumerate() {
            let blocks = (0..config.blocks_per_stage)
                .map(|b| {
                    let name = format!("enc.stage{}.block{b}", l + 1);
                    let c_in = if b == 0 { cin } else { cout };
                    ResBlock::new(&mut params, &mut rng, &name, c_in, cout, k, b == 0)
                })
                .collect();
            stages.push(blocks);
            cin = cout;
        }

        let paths = (0..config.paths)
            .map(|l| {
                config.path_active(l).then(|| {
                    let name = format!("pre.path{}", l + 1);
                    let nonlocal = config.nonlocal.then(|| {
                        NonLocal::new(&mut params, &mut rng, &format!("{name}.nonlocal"), ch[l])
                    });
                    let gru = config.convgru.then(|| {
                        ConvGru::new(&mut params, &mut rng, &format!("{name}.gru"), ch[l], k)
                    });
                    PathModule { nonlocal, gru }
                })
            })
            .collect();

        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        for l in 0..config.paths - 1 {
            ups.push(ResBlock::new(
                &mut params,
                &mut rng,
                &format!("dec.up{}", l + 1),
                ch[l + 1],
                ch[l],
                k,
                false,
            ));
            fuses.push(config.path_active(l).then(|| {
                ResBlock::new(
                    &mut params,
                    &mut rng,
                    &format!("dec.fuse{}", l + 1),
                    2 * ch[l],
                    ch[l],
                    k,
                    false,
                )
            }));
        }
        let head = Conv2d::new(
            &mut params,
            &mut rng,
            "dec.head",
            ch[0],
            config.in_channels,
            same(k),
            Init::FanIn(1.0),
            true,
        );

        Ok(Network {
            config,
            params,
            stem,
            stages,
            paths,
            ups,
            fuses,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Parameter slots belonging to predictor path `l` (one based), covering
    /// both its non-local block and its ConvGRU.
    pub fn path_param_ids(&self, l: usize) -> Vec<usize> {
        let prefix = format!("pre.path{l}.");
        (0..self.params.len())
            .filter(|&id| self.params.name(id).starts_with(&prefix))
            .collect()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            paths: self.paths.clone(),
            ups: self.ups.clone(),
            fuses: self.fuses.clone(),
            head: self.head.clone(),
        }
    }

    // ----- tape-level building blocks -------------------------------------

    /// Encoder taps for a batch of frames `[N, C, H, W]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, p: &[Var], frames: Var) -> Vec<Var> {
        let mut x = self.stem.forward(g, p, frames);
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                x = block.forward(g, p, x);
            }
            taps.push(x);
        }
        taps
    }

    /// Non-local block of path `l` (zero based), or the identity when disabled.
    pub fn nonlocal_graph(&self, g: &mut Graph<T>, p: &[Var], l: usize, z: Var) -> Var {
        match self.paths[l].as_ref().and_then(|m| m.nonlocal.as_ref()) {
            Some(nl) => nl.forward(g, p, z),
            None => z,
        }
    }

    /// One recurrent step of path `l`; `h = None` is the zero state.
    pub fn gru_step_graph(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        l: usize,
        h: Option<Var>,
        x: Var,
    ) -> Var {
        let Some(gru) = self.paths[l].as_ref().and_then(|m| m.gru.as_ref()) else {
            return x;
        };
        let h = h.unwrap_or_else(|| g.constant(Tensor::zeros(g.value(x).shape())));
        gru.step(g, p, h, x)
    }

    /// Decoder from per-path hidden states (`None` for inactive paths).
    pub fn decode_graph(&self, g: &mut Graph<T>, p: &[Var], hidden: &[Option<Var>]) -> Var {
        let last = self.config.paths - 1;
        let mut x = hidden[last].expect("deepest path is always active");
        for l in (0..last).rev() {
            x = g.upsample2x(x);
            x = self.ups[l].forward(g, p, x);
            if let (Some(fuse), Some(h)) = (&self.fuses[l], hidden[l]) {
                let cat = g.concat_channels(&[x, h]);
                x = fuse.forward(g, p, cat);
            }
        }
        x = g.upsample2x(x);
        x = self.head.forward(g, p, x);
        g.tanh(x)
    }

    /// Prediction for a batch of `batch` windows of `P` frames each, laid out
    /// as described by `layout`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        frames: Var,
        batch: usize,
        layout: WindowLayout,
    ) -> Var {
        let steps = self.config.input_len;
        assert_eq!(g.value(frames).shape()[0], layout.frame_count(steps, batch), "frame batch size");
        let taps = self.encode_graph(g, p, frames);
        let mut hidden = vec![None; self.config.paths];
        for (l, &tap) in taps.iter().enumerate() {
            if !self.config.path_active(l) {
                continue;
            }
            let z = self.nonlocal_graph(g, p, l, tap);
            let mut h = None;
            for t in 0..steps {
                let zt = g.narrow_batch(z, layout.step_offset(t, batch), batch);
                h = Some(self.gru_step_graph(g, p, l, h, zt));
            }
            hidden[l] = h;
        }
        self.decode_graph(g, p, &hidden)
    }

    // ----- tensor-level operations -----------------------------------------

    fn check_frame(&self, frame: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let expected = [c.in_channels, c.frame_size, c.frame_size];
        if frame.shape() != expected {
            return Err(Error::Validation(format!(
                "frame shape {:?} does not match the network input {expected:?}",
                frame.shape()
            )));
        }
        Ok(())
    }

    fn check_path(&self, l: usize) -> Result<()> {
        if l >= self.config.paths || !self.config.path_active(l) {
            return Err(Error::Validation(format!("path {l} is not an active path")));
        }
        Ok(())
    }

    /// Encoder taps of a single `[C, H, W]` frame.
    pub fn encode(&self, frame: &Tensor<T>) -> Result<FeatureMaps<T>> {
        self.check_frame(frame)?;
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, None);
        let x = g.constant(batched(frame));
        let taps = self.encode_graph(&mut g, &p, x);
        Ok(FeatureMaps {
            taps: taps.iter().map(|&t| unbatched(g.value(t))).collect(),
        })
    }

    /// Non-local block of path `l` (zero based) on a `[C_l, r, r]` grid.
    pub fn nonlocal_block(&self, l: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_path(l)?;
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, None);
        let xv = g.constant(batched(x));
        let y = self.nonlocal_graph(&mut g, &p, l, xv);
        Ok(unbatched(g.value(y)))
    }

    /// One ConvGRU step of path `l` on `[C_l, r, r]` grids.
    pub fn convgru_step(&self, l: usize, h: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_path(l)?;
        if h.shape() != x.shape() {
            return Err(Error::Validation(format!(
                "state {:?} and input {:?} differ in shape",
                h.shape(),
                x.shape()
            )));
        }
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, None);
        let hv = g.constant(batched(h));
        let xv = g.constant(batched(x));
        let y = self.gru_step_graph(&mut g, &p, l, Some(hv), xv);
        Ok(unbatched(g.value(y)))
    }

    /// Runs path `l` over a sequence of encoder taps from the zero state.
    pub fn predict_path(&self, l: usize, zs: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.check_path(l)?;
        if zs.is_empty() {
            return Err(Error::Validation("empty feature sequence".into()));
        }
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, None);
        let mut h = None;
        for z in zs {
            let zv = g.constant(batched(z));
            let zv = self.nonlocal_graph(&mut g, &p, l, zv);
            h = Some(self.gru_step_graph(&mut g, &p, l, h, zv));
        }
        Ok(unbatched(g.value(h.expect("nonempty"))))
    }

    /// Predicted `[C, H, W]` frame from a recurrent state.
    pub fn decode(&self, state: &RecurrentState<T>) -> Result<Tensor<T>> {
        if state.hidden.len() != self.config.paths {
            return Err(Error::Validation(format!(
                "state has {} paths, network has {}",
                state.hidden.len(),
                self.config.paths
            )));
        }
        let res = self.config.path_resolutions();
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, None);
        let mut hidden = vec![None; self.config.paths];
        for (l, h) in state.hidden.iter().enumerate() {
            if !self.config.path_active(l) {
                continue;
            }
            let h = h.as_ref().ok_or_else(|| {
                Error::Validation(format!("path {l} has no hidden state to decode"))
            })?;
            let expected = [self.config.path_channels[l], res[l], res[l]];
            if h.shape() != expected {
                return Err(Error::Validation(format!(
                    "path {l} state {:?}, expected {expected:?}",
                    h.shape()
                )));
            }
            hidden[l] = Some(g.constant(batched(h)));
        }
        let y = self.decode_graph(&mut g, &p, &hidden);
        Ok(unbatched(g.value(y)))
    }

    /// The zero state every prediction window starts from.
    pub fn initial_state(&self) -> RecurrentState<T> {
        RecurrentState {
            hidden: vec![None; self.config.paths],
        }
    }

    /// Encoder taps of one frame passed through each active path's non-local
    /// block; these are the per-frame inputs of the recurrent step.
    pub fn path_inputs(&self, frame: &Tensor<T>) -> Result<PathInputs<T>> {
        self.check_frame(frame)?;
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, None);
        let x = g.constant(batched(frame));
        let taps = self.encode_graph(&mut g, &p, x);
        let inputs = taps
            .iter()
            .enumerate()
            .map(|(l, &tap)| {
                self.config.path_active(l).then(|| {
                    let z = self.nonlocal_graph(&mut g, &p, l, tap);
                    unbatched(g.value(z))
                })
            })
            .collect();
        Ok(PathInputs { inputs })
    }

    /// Advances every active path by one recurrent step.
    pub fn step(&self, state: &mut RecurrentState<T>, inputs: &PathInputs<T>) -> Result<()> {
        if inputs.inputs.len() != self.config.paths || state.hidden.len() != self.config.paths {
            return Err(Error::Validation("state or inputs do not match the path count".into()));
        }
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, None);
        for (l, z) in inputs.inputs.iter().enumerate() {
            let Some(z) = z else { continue };
            let h = state.hidden[l].as_ref().map(|h| g.constant(batched(h)));
            let zv = g.constant(batched(z));
            let next = self.gru_step_graph(&mut g, &p, l, h, zv);
            state.hidden[l] = Some(unbatched(g.value(next)));
        }
        Ok(())
    }

    /// Encodes one frame and advances every active path by one step.
    pub fn advance(&self, state: &mut RecurrentState<T>, frame: &Tensor<T>) -> Result<()> {
        let inputs = self.path_inputs(frame)?;
        self.step(state, &inputs)
    }

    /// Predicts the frame that follows `frames` (exactly `P` of them).
    pub fn forward(&self, frames: &[Tensor<T>]) -> Result<Tensor<T>> {
        if frames.len() != self.config.input_len {
            return Err(Error::Validation(format!(
                "expected {} input frames, got {}",
                self.config.input_len,
                frames.len()
            )));
        }
        let mut state = self.initial_state();
        for f in frames {
            self.advance(&mut state, f)?;
        }
        self.decode(&state)
    }

    // ----- persistence -----------------------------------------------------

    /// Writes the configuration and every parameter (prefixed `net/`).
    pub fn write_into(&self, archive: &mut Archive) -> Result<()> {
        archive.set_meta("network", &self.config)?;
        for (name, t) in self.params.iter() {
            archive.put(format!("net/{name}"), t);
        }
        Ok(())
    }

    /// Rebuilds a network from an archive written by [`Network::write_into`],
    /// validating every parameter name and shape.
    pub fn read_from(archive: &Archive) -> Result<Self> {
        let config: NetworkConfig = archive.meta("network")?;
        let mut net = Network::new(config)?;
        let entries = archive
            .names()
            .filter_map(|n| n.strip_prefix("net/").map(|s| (n, s)))
            .map(|(full, short)| Ok((short.to_string(), archive.tensor::<T>(full)?)))
            .collect::<Result<Vec<_>>>()?;
        net.params.load(entries)?;
        Ok(net)
    }
}
