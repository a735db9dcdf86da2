//! AdamW training on normal clips with staged freezing of predictor paths.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::Graph;
use crate::data_io::{load_split, DatasetManifest, Split, VideoClip};
use crate::error::{Error, Result};
use crate::loss::{graph_loss, LossBreakdown, LossNetwork, LossNetworkSpec, LossWeights, Reduction};
use crate::network::{Network, NetworkConfig, WindowLayout};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// How training windows are grouped into batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Every window is shuffled independently.
    #[default]
    Shuffled,
    /// Batches are runs of consecutive windows from one clip and the runs are
    /// shuffled. Overlapping windows share encoder work.
    Contiguous,
}

/// Where the loss-network weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossNetworkConfig {
    /// Pretrained VGG16 weights in the archive format. When absent a seeded
    /// random network is used.
    pub weights: Option<PathBuf>,
    /// Width divisor of the random network.
    pub width_divisor: usize,
    pub seed: u64,
}

impl Default for LossNetworkConfig {
    fn default() -> Self {
        LossNetworkConfig {
            weights: None,
            width_divisor: 16,
            seed: 0,
        }
    }
}

impl LossNetworkConfig {
    pub fn build(&self) -> Result<LossNetwork<f32>> {
        match &self.weights {
            Some(path) => LossNetwork::from_archive(LossNetworkSpec::vgg16(), path),
            None => Ok(LossNetwork::random(
                LossNetworkSpec::vgg16_scaled(self.width_divisor.max(1)),
                self.seed,
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// `(path, epoch)` pairs: the path is frozen once that epoch completes.
    /// `None` freezes paths 1 and 2 at 60% and 80% of the epochs.
    pub freeze_epochs: Option<Vec<(usize, usize)>>,
    pub seed: u64,
    pub loss: LossWeights,
    pub reduction: Reduction,
    pub batching: Batching,
    pub loss_network: LossNetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            epochs: 50,
            freeze_epochs: None,
            seed: 0,
            loss: LossWeights::default(),
            reduction: Reduction::Mean,
            batching: Batching::Shuffled,
            loss_network: LossNetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The freeze schedule in effect for a network with `paths` paths.
    pub fn freeze_schedule(&self, paths: usize) -> Vec<(usize, usize)> {
        match &self.freeze_epochs {
            Some(s) => s.clone(),
            None => [(1, 0.6), (2, 0.8)]
                .into_iter()
                .filter(|&(l, _)| l < paths)
                .map(|(l, frac)| (l, ((self.epochs as f64 * frac).round() as usize).max(1)))
                .collect(),
        }
    }

    pub fn validate(&self, paths: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if self.epochs == 0 {
            return fail("at least one epoch is required".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        for (l, e) in self.freeze_schedule(paths) {
            if l == 0 || l > paths {
                return fail(format!("freeze schedule names path {l}, network has {paths}"));
            }
            if e > self.epochs {
                return fail(format!("path {l} freezes after epoch {e} of {}", self.epochs));
            }
        }
        self.loss.validate()
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Slots with `trainable[id] == false` are left untouched;
    /// trainable slots without a gradient are treated as having a zero one.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[(usize, Tensor<f32>)], trainable: &[bool]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate as f32;
        let decay = (1.0 - self.learning_rate * self.weight_decay) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let (c1, c2) = (c1 as f32, c2 as f32);
        let mut next = grads.iter().peekable();
        for id in 0..params.len() {
            let grad = match next.peek() {
                Some((slot, g)) if *slot == id => {
                    next.next();
                    Some(g)
                }
                _ => None,
            };
            if !trainable[id] {
                continue;
            }
            let p = params.get_mut(id).data_mut();
            let (m, v) = (self.m[id].data_mut(), self.v[id].data_mut());
            for k in 0..p.len() {
                let g = grad.map_or(0.0, |g| g.data()[k]);
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] = p[k] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Marks the non-local and ConvGRU parameters of the listed paths (one
/// based) as not trainable.
pub fn freeze_paths(net: &Network<f32>, trainable: &mut [bool], paths: &[usize]) -> Result<()> {
    let total = net.config().paths;
    for &l in paths {
        if l == 0 || l > total {
            return Err(Error::Validation(format!("path index {l} is outside 1..={total}")));
        }
        for id in net.path_param_ids(l) {
            trainable[id] = false;
        }
    }
    Ok(())
}

/// Per-epoch training record. Wall time only goes to the text log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub windows: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub optimizer: AdamW,
    /// Number of completed epochs.
    pub epoch: usize,
    pub frozen_paths: Vec<usize>,
    pub history: Vec<EpochRecord>,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn fresh(net_config: NetworkConfig, config: TrainConfig) -> Result<Self> {
        let network = Network::new(net_config)?;
        let optimizer = AdamW::new(network.params(), config.learning_rate, config.weight_decay);
        Ok(Checkpoint {
            network,
            optimizer,
            epoch: 0,
            frozen_paths: Vec::new(),
            history: Vec::new(),
            config,
        })
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        self.network.write_into(&mut a)?;
        a.set_meta("epoch", &self.epoch)?;
        a.set_meta("optimizer_step", &self.optimizer.step)?;
        a.set_meta("frozen_paths", &self.frozen_paths)?;
        a.set_meta("history", &self.history)?;
        a.set_meta("train", &self.config)?;
        for (id, (name, _)) in self.network.params().iter().enumerate() {
            a.put(format!("adam.m/{name}"), &self.optimizer.m[id]);
            a.put(format!("adam.v/{name}"), &self.optimizer.v[id]);
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let network = Network::read_from(a)?;
        let config: TrainConfig = a.meta("train")?;
        let mut optimizer = AdamW::new(network.params(), config.learning_rate, config.weight_decay);
        optimizer.step = a.meta("optimizer_step")?;
        for (id, (name, t)) in network.params().iter().enumerate() {
            for (prefix, slot) in [("adam.m", &mut optimizer.m[id]), ("adam.v", &mut optimizer.v[id])] {
                let loaded: Tensor<f32> = a.tensor(&format!("{prefix}/{name}"))?;
                if loaded.shape() != t.shape() {
                    return Err(Error::Archive(format!("{prefix}/{name} has the wrong shape")));
                }
                *slot = loaded;
            }
        }
        Ok(Checkpoint {
            network,
            optimizer,
            epoch: a.meta("epoch")?,
            frozen_paths: a.meta("frozen_paths")?,
            history: a.meta("history")?,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// One batch: `(clip, first target index, window count)`.
type BatchPlan = (usize, Vec<usize>);

fn plan_batches(clips: &[VideoClip], p: usize, config: &TrainConfig, epoch: usize) -> Vec<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(epoch as u64);
    let b = config.batch_size;
    match config.batching {
        Batching::Shuffled => {
            let mut all: Vec<(usize, usize)> = clips
                .iter()
                .enumerate()
                .flat_map(|(c, clip)| (p..clip.len()).map(move |t| (c, t)))
                .collect();
            all.shuffle(&mut rng);
            all.chunks(b).map(<[_]>::to_vec).collect()
        }
        Batching::Contiguous => {
            let mut runs: Vec<BatchPlan> = Vec::new();
            for (c, clip) in clips.iter().enumerate() {
                let targets: Vec<usize> = (p..clip.len()).collect();
                for chunk in targets.chunks(b) {
                    runs.push((c, chunk.to_vec()));
                }
            }
            runs.shuffle(&mut rng);
            runs.into_iter()
                .map(|(c, ts)| ts.into_iter().map(|t| (c, t)).collect())
                .collect()
        }
    }
}

fn batch_tensors(
    clips: &[VideoClip],
    p: usize,
    windows: &[(usize, usize)],
    layout: WindowLayout,
) -> (Tensor<f32>, Tensor<f32>) {
    let frames: Vec<&Tensor<f32>> = match layout {
        WindowLayout::TimeMajor => (0..p)
            .flat_map(|s| windows.iter().map(move |&(c, t)| &clips[c].frames[t - p + s]))
            .collect(),
        WindowLayout::Sliding => {
            let (c, first) = windows[0];
            let last = windows[windows.len() - 1].1;
            clips[c].frames[first - p..last].iter().collect()
        }
    };
    let targets: Vec<&Tensor<f32>> = windows.iter().map(|&(c, t)| &clips[c].frames[t]).collect();
    (Tensor::stack(&frames), Tensor::stack(&targets))
}

/// Trains from scratch. Checkpoints and the JSON-lines log go to `out` when
/// given.
pub fn train(
    manifest: &DatasetManifest,
    net_config: &NetworkConfig,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<Checkpoint> {
    let start = Checkpoint::fresh(net_config.clone(), config.clone())?;
    resume(manifest, start, out, &mut |_| {})
}

/// Continues training from `state` until `state.config.epochs` epochs are
/// complete. `on_epoch` sees every finished epoch.
pub fn resume(
    manifest: &DatasetManifest,
    mut state: Checkpoint,
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    let config = state.config.clone();
    let net_config = state.network.config().clone();
    config.validate(net_config.paths)?;
    if manifest.train.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    if manifest.frame_size != net_config.frame_size || manifest.channels != net_config.in_channels {
        return Err(Error::Config(format!(
            "dataset frames are {}x{}x{}, network expects {}x{}x{}",
            manifest.channels,
            manifest.frame_size,
            manifest.frame_size,
            net_config.in_channels,
            net_config.frame_size,
            net_config.frame_size
        )));
    }
    let clips = load_split(manifest, Split::Train)?;
    let p = net_config.input_len;
    if clips.iter().all(|c| c.len() <= p) {
        return Err(Error::Config(format!("no training clip has more than {p} frames")));
    }
    let loss_net = if config.loss.lambda_nt > 0.0 {
        Some(config.loss_network.build()?)
    } else {
        None
    };
    let layout = match config.batching {
        Batching::Shuffled => WindowLayout::TimeMajor,
        Batching::Contiguous => WindowLayout::Sliding,
    };
    let schedule = config.freeze_schedule(net_config.paths);
    let mut trainable = vec![true; state.network.params().len()];
    freeze_paths(&state.network, &mut trainable, &state.frozen_paths)?;
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(TRAIN_LOG);
            let file = fs::OpenOptions::new()
                .create(true)
                .append(state.epoch > 0)
                .write(true)
                .truncate(state.epoch == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, file))
        }
        None => None,
    };

    for epoch in state.epoch + 1..=config.epochs {
        let timer = Instant::now();
        let mut sums = LossBreakdown::default();
        let mut seen = 0usize;
        for (step, windows) in plan_batches(&clips, p, &config, epoch).into_iter().enumerate() {
            let (frames, targets) = batch_tensors(&clips, p, &windows, layout);
            let mut g = Graph::new();
            let params = state.network.params().bind(&mut g, Some(&trainable));
            let x = g.constant(frames);
            let y = g.constant(targets);
            let pred = state.network.forward_graph(&mut g, &params, x, windows.len(), layout);
            let loss = graph_loss(&mut g, pred, y, &config.loss, loss_net.as_ref(), config.reduction)?;
            let b = loss.breakdown(&g);
            for (term, value) in b.terms() {
                if !value.is_finite() {
                    return Err(Error::NonFinite { term, epoch, step });
                }
            }
            let grads = g.backward(loss.total).param_grads();
            state.optimizer.update(state.network.params_mut(), &grads, &trainable);
            let n = windows.len() as f64;
            sums.intensity += b.intensity * n;
            sums.gradient += b.gradient * n;
            sums.noise_tolerance += b.noise_tolerance * n;
            sums.total += b.total * n;
            seen += windows.len();
        }
        let k = seen as f64;
        let record = EpochRecord {
            epoch,
            loss: LossBreakdown {
                intensity: sums.intensity / k,
                gradient: sums.gradient / k,
                noise_tolerance: sums.noise_tolerance / k,
                total: sums.total / k,
            },
            windows: seen,
        };
        for &(l, e) in &schedule {
            if e == epoch && !state.frozen_paths.contains(&l) {
                state.frozen_paths.push(l);
                freeze_paths(&state.network, &mut trainable, &[l])?;
            }
        }
        state.epoch = epoch;
        state.history.push(record.clone());
        if let Some((path, file)) = log.as_mut() {
            let line = serde_json::json!({
                "epoch": epoch,
                "intensity": record.loss.intensity,
                "gradient": record.loss.gradient,
                "noise_tolerance": record.loss.noise_tolerance,
                "total": record.loss.total,
                "windows": seen,
                "frozen_paths": state.frozen_paths,
                "wall_time_s": timer.elapsed().as_secs_f64(),
            });
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(dir) = out {
            state.save(&dir.join(epoch_checkpoint_name(epoch)))?;
        }
        on_epoch(&record);
    }
    if let Some(dir) = out {
        state.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> Network<f32> {
        Network::new(NetworkConfig {
            paths: 2,
            input_len: 2,
            in_channels: 1,
            frame_size: 8,
            path_channels: vec![2, 2],
            blocks_per_stage: 1,
            ..NetworkConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_gradient_parameter_decays_multiplicatively() {
        let net = tiny_net();
        let mut params = net.params().clone();
        let mut opt = AdamW::new(&params, 0.1, 0.5);
        let before = params.get(0).clone();
        let all = vec![true; params.len()];
        opt.update(&mut params, &[], &all);
        let expected = before.map(|v| v * (1.0 - 0.05));
        assert_eq!(params.get(0), &expected);
    }

    #[test]
    fn frozen_slots_are_untouched() {
        let net = tiny_net();
        let mut trainable = vec![true; net.params().len()];
        freeze_paths(&net, &mut trainable, &[1]).unwrap();
        assert!(freeze_paths(&net, &mut trainable, &[3]).is_err());
        let mut params = net.params().clone();
        let mut opt = AdamW::new(&params, 0.1, 0.0);
        let grads: Vec<(usize, Tensor<f32>)> =
            params.iter().enumerate().map(|(i, (_, t))| (i, Tensor::full(t.shape(), 1.0))).collect();
        opt.update(&mut params, &grads, &trainable);
        for id in 0..params.len() {
            let same = params.get(id) == net.params().get(id);
            assert_eq!(same, !trainable[id], "{}", params.name(id));
        }
    }

    #[test]
    fn default_schedule_scales_with_epochs() {
        let c = TrainConfig::default();
        assert_eq!(c.freeze_schedule(3), vec![(1, 30), (2, 40)]);
        let c = TrainConfig { epochs: 5, ..TrainConfig::default() };
        assert_eq!(c.freeze_schedule(3), vec![(1, 3), (2, 4)]);
        let bad = TrainConfig { freeze_epochs: Some(vec![(1, 9)]), epochs: 5, ..TrainConfig::default() };
        assert!(bad.validate(3).is_err());
    }
}
