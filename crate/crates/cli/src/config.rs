//! Flat run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vadkit::data_io::SynthConfig;
use vadkit::loss::{LossWeights, Reduction};
use vadkit::network::NetworkConfig;
use vadkit::trainer::{Batching, LossNetworkConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub input_len: usize,
    pub frame_size: usize,
    pub channels: usize,
    pub paths: usize,
    pub path_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub multi_path: bool,
    pub nonlocal: bool,
    pub convgru: bool,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub freeze_epochs: Option<Vec<(usize, usize)>>,
    pub batching: Batching,
    pub reduction: Reduction,
    pub lambda_int: f64,
    pub lambda_gd: f64,
    pub lambda_nt: f64,
    pub loss_weights: Option<PathBuf>,
    pub loss_width_divisor: usize,
    pub q: usize,
    pub num_clips: usize,
    pub num_test_clips: usize,
    pub frames_per_clip: usize,
    pub anomaly_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetworkConfig::desk();
        let train = TrainConfig::default();
        let synth = SynthConfig::default();
        RunConfig {
            seed: 0,
            input_len: net.input_len,
            frame_size: net.frame_size,
            channels: net.in_channels,
            paths: net.paths,
            path_channels: net.path_channels,
            blocks_per_stage: net.blocks_per_stage,
            multi_path: true,
            nonlocal: true,
            convgru: true,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            epochs: train.epochs,
            freeze_epochs: None,
            batching: Batching::Contiguous,
            reduction: train.reduction,
            lambda_int: train.loss.lambda_int,
            lambda_gd: train.loss.lambda_gd,
            lambda_nt: train.loss.lambda_nt,
            loss_weights: None,
            loss_width_divisor: train.loss_network.width_divisor,
            q: 1,
            num_clips: synth.num_clips,
            num_test_clips: synth.num_test_clips,
            frames_per_clip: synth.frames_per_clip,
            anomaly_rate: synth.anomaly_rate,
        }
    }
}

/// `(key, description)` for every configuration key, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed; every random stream derives from it"),
    ("input_len", "frames per prediction window P (full scale: 8)"),
    ("frame_size", "square frame side in pixels (full scale: 256)"),
    ("channels", "colour channels per frame"),
    ("paths", "predictor paths L (full scale: 3)"),
    ("path_channels", "channel width per path (full scale: [32, 64, 128])"),
    ("blocks_per_stage", "residual blocks per encoder stage"),
    ("multi_path", "fuse every path; false keeps only the deepest"),
    ("nonlocal", "non-local block before each ConvGRU"),
    ("convgru", "ConvGRU prediction modules"),
    ("batch_size", "windows per batch (full scale: 4)"),
    ("learning_rate", "AdamW learning rate (full scale: 3e-4)"),
    ("weight_decay", "AdamW decoupled weight decay (full scale: 1e-4)"),
    ("epochs", "training epochs (full scale: 50)"),
    ("freeze_epochs", "[[path, epoch], ...]; default freezes paths 1, 2 at 60%, 80% of epochs (full scale: [[1, 30], [2, 40]])"),
    ("batching", "shuffled or contiguous window batches"),
    ("reduction", "mean or sum over pixels and batch"),
    ("lambda_int", "intensity loss weight (full scale: 1)"),
    ("lambda_gd", "gradient difference loss weight (full scale: 1)"),
    ("lambda_nt", "noise tolerance loss weight (full scale: 1, 0 for Ped1/Ped2)"),
    ("loss_weights", "pretrained VGG16 archive; unset uses a seeded random loss network"),
    ("loss_width_divisor", "width divisor of the random loss network"),
    ("q", "frames predicted per warm-up in reuse scoring; 1 is standard scoring"),
    ("num_clips", "synthetic training clips"),
    ("num_test_clips", "synthetic test clips"),
    ("frames_per_clip", "frames per synthetic clip"),
    ("anomaly_rate", "fraction of each synthetic test clip that is anomalous"),
];

pub fn keys_help() -> String {
    let defaults = toml::Value::try_from(RunConfig::default()).expect("config serializes");
    let mut out = String::from("Configuration keys (flat TOML, --config FILE; flags override the file):\n");
    for (key, doc) in KEYS {
        let value = defaults.get(key).map_or("unset".to_string(), |v| v.to_string());
        out.push_str(&format!("  {key:<20} {doc} [default: {value}]\n"));
    }
    out
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            paths: self.paths,
            input_len: self.input_len,
            in_channels: self.channels,
            frame_size: self.frame_size,
            path_channels: self.path_channels.clone(),
            blocks_per_stage: self.blocks_per_stage,
            seed: self.seed,
            multi_path: self.multi_path,
            nonlocal: self.nonlocal,
            convgru: self.convgru,
            ..NetworkConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            freeze_epochs: self.freeze_epochs.clone(),
            seed: self.seed,
            loss: LossWeights {
                lambda_int: self.lambda_int,
                lambda_gd: self.lambda_gd,
                lambda_nt: self.lambda_nt,
                ..LossWeights::default()
            },
            reduction: self.reduction,
            batching: self.batching,
            loss_network: LossNetworkConfig {
                weights: self.loss_weights.clone(),
                width_divisor: self.loss_width_divisor,
                seed: self.seed,
            },
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            num_clips: self.num_clips,
            num_test_clips: self.num_test_clips,
            frames_per_clip: self.frames_per_clip,
            frame_size: self.frame_size,
            channels: self.channels,
            anomaly_rate: self.anomaly_rate,
            input_len: self.input_len,
            ..SynthConfig::default()
        }
    }
}
