use std::fs;
use std::path::{Path, PathBuf};

use vadkit::archive::Archive;
use vadkit::data_io::{generate_synthetic, load_clip, load_split, synthetic_clip, DatasetManifest, Split, SynthConfig};
use vadkit::error::Error;
use vadkit::network::{Network, NetworkConfig};
use vadkit::scoring::{read_scores_csv, score_clip, score_clip_reuse, write_scores_csv};
use vadkit::trainer::{epoch_checkpoint_name, resume, train, Checkpoint, LossNetworkConfig, TrainConfig, FINAL_CHECKPOINT, TRAIN_LOG};

fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        num_clips: 2,
        num_test_clips: 2,
        frames_per_clip: 14,
        frame_size: 32,
        input_len: 3,
        ..SynthConfig::default()
    }
}

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        input_len: 3,
        frame_size: 32,
        path_channels: vec![2, 2, 4],
        ..NetworkConfig::desk()
    }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        loss_network: LossNetworkConfig { width_divisor: 32, ..LossNetworkConfig::default() },
        ..TrainConfig::default()
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthesis_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(&tiny_synth(5), a.path()).unwrap();
    generate_synthetic(&tiny_synth(5), b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&tiny_synth(6), c.path()).unwrap();
    assert_ne!(files(a.path()), files(c.path()));
}

#[test]
fn in_memory_clips_match_written_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&tiny_synth(1), dir.path()).unwrap();
    for (split, i, id) in [(Split::Train, 1, "train_001"), (Split::Test, 0, "test_000")] {
        let mem = synthetic_clip(&tiny_synth(1), split, i).unwrap();
        let disk = load_clip(&DatasetManifest::load(dir.path()).unwrap(), id).unwrap();
        assert_eq!(mem, disk, "{id}");
    }
    let test = load_split(&m, Split::Test).unwrap();
    let labels = test[0].labels.as_ref().unwrap();
    assert!(labels[..3].iter().all(|&l| l == 0) && labels.contains(&1));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let data = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&tiny_synth(2), data.path()).unwrap();
    let (run_a, run_b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let straight = train(&m, &tiny_net(), &tiny_train(3), Some(run_a.path())).unwrap();
    let log = fs::read_to_string(run_a.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 3);

    let partial = Checkpoint::load(&run_a.path().join(epoch_checkpoint_name(1))).unwrap();
    assert_eq!(partial.epoch, 1);
    let resumed = resume(&m, partial, Some(run_b.path()), &mut |_| {}).unwrap();
    assert_eq!(resumed.network.params(), straight.network.params());
    assert_eq!(resumed.optimizer, straight.optimizer);
    assert_eq!(resumed.history, straight.history);

    let loaded = Checkpoint::load(&run_a.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(loaded.network.params(), straight.network.params());
    assert_eq!(loaded.frozen_paths, vec![1, 2]);
    let a = fs::read(run_a.path().join(FINAL_CHECKPOINT)).unwrap();
    let b = fs::read(run_b.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn frozen_path_is_bit_identical_after_its_epoch() {
    let data = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&tiny_synth(3), data.path()).unwrap();
    let run = tempfile::tempdir().unwrap();
    let config = TrainConfig { freeze_epochs: Some(vec![(1, 1)]), ..tiny_train(3) };
    let last = train(&m, &tiny_net(), &config, Some(run.path())).unwrap();
    let first = Checkpoint::load(&run.path().join(epoch_checkpoint_name(1))).unwrap();
    let ids = last.network.path_param_ids(1);
    assert!(!ids.is_empty());
    for id in ids {
        assert_eq!(first.network.params().get(id), last.network.params().get(id));
    }
    let moved = (0..last.network.params().len())
        .filter(|&id| first.network.params().get(id) != last.network.params().get(id))
        .count();
    assert!(moved > 0);
}

#[test]
fn zero_nt_weight_never_loads_the_loss_network() {
    let data = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&tiny_synth(4), data.path()).unwrap();
    let missing = LossNetworkConfig { weights: Some("/nonexistent/vgg16.vadarch".into()), ..LossNetworkConfig::default() };
    let mut config = TrainConfig { loss_network: missing, ..tiny_train(1) };
    assert!(matches!(train(&m, &tiny_net(), &config, None), Err(Error::Config(_) | Error::NotFound(_))));
    config.loss.lambda_nt = 0.0;
    let done = train(&m, &tiny_net(), &config, None).unwrap();
    assert_eq!(done.history[0].loss.noise_tolerance, 0.0);
}

#[test]
fn exploding_updates_report_the_failing_term() {
    let data = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&tiny_synth(4), data.path()).unwrap();
    let mut state = Checkpoint::fresh(tiny_net(), tiny_train(1)).unwrap();
    let id = state.network.params().id("dec.head.bias").unwrap();
    state.network.params_mut().get_mut(id).data_mut()[0] = f32::NAN;
    match resume(&m, state, None, &mut |_| {}) {
        Err(Error::NonFinite { term, .. }) => assert!(["intensity", "gradient", "noise_tolerance", "total"].contains(&term)),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn reuse_scoring_agrees_with_standard_scoring() {
    let data = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&tiny_synth(7), data.path()).unwrap();
    let trained = train(&m, &tiny_net(), &tiny_train(1), None).unwrap();
    let clip = &load_split(&m, Split::Test).unwrap()[1];
    let standard = score_clip(&trained.network, clip).unwrap();
    assert_eq!(score_clip_reuse(&trained.network, clip, 1).unwrap(), standard);
    assert_eq!(standard.len() + standard.skipped_prefix, clip.len());
    let q = 4;
    let reuse = score_clip_reuse(&trained.network, clip, q).unwrap();
    for k in (0..reuse.len()).step_by(q) {
        assert_eq!(reuse.psnr[k], standard.psnr[k], "block start {k}");
    }
    assert!(score_clip_reuse(&trained.network, clip, 0).is_err());
    assert!(score_clip_reuse(&trained.network, clip, clip.len()).is_err());

    let mut short = clip.clone();
    short.frames.truncate(4);
    short.labels.as_mut().unwrap().truncate(4);
    assert_eq!(score_clip(&trained.network, &short).unwrap().score, vec![0.0]);
    short.frames.truncate(3);
    assert!(matches!(score_clip(&trained.network, &short), Err(Error::Validation(_))));

    let csv = data.path().join("scores.csv");
    let renamed = vadkit::scoring::ScoreSeries { clip_id: "reuse".into(), ..reuse };
    write_scores_csv(&csv, &[standard.clone(), renamed]).unwrap();
    let back = read_scores_csv(&csv).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0].score, standard.score);
    assert_eq!(back[0].psnr, standard.psnr);
    assert_eq!(back[0].labels, standard.labels);
}

fn conv(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    cout * cin * k * k + if bias { cout } else { 0 }
}

fn res(cin: usize, cout: usize, k: usize, down: bool) -> usize {
    conv(cin, cout, k, true) + conv(cout, cout, k, true) + if down || cin != cout { cin * cout } else { 0 }
}

fn expected_params(c: &NetworkConfig) -> usize {
    let (k, ch) = (c.kernel, &c.path_channels);
    let mut total = conv(c.in_channels, ch[0], k, true) + conv(ch[0], c.in_channels, k, true);
    let mut cin = ch[0];
    for &cout in ch {
        total += res(cin, cout, k, true) + (c.blocks_per_stage - 1) * res(cout, cout, k, false);
        cin = cout;
    }
    for l in 0..c.paths {
        if !c.path_active(l) {
            continue;
        }
        let inner = (ch[l] / 2).max(1);
        if c.nonlocal {
            total += 3 * conv(ch[l], inner, 1, true) + conv(inner, ch[l], 1, true);
        }
        if c.convgru {
            total += conv(2 * ch[l], 2 * ch[l], k, true) + conv(2 * ch[l], ch[l], k, true);
        }
        if l + 1 < c.paths {
            total += res(2 * ch[l], ch[l], k, false);
        }
    }
    for l in 0..c.paths - 1 {
        total += res(ch[l + 1], ch[l], k, false);
    }
    total
}

#[test]
fn parameter_counts_are_pinned() {
    let desk = NetworkConfig::desk();
    let single = NetworkConfig { multi_path: false, nonlocal: false, ..desk.clone() };
    for (config, pinned) in [(NetworkConfig::default(), 2_198_707), (desk, 28_721), (single, 21_279)] {
        let n = Network::<f32>::new(config.clone()).unwrap().params().num_scalars();
        assert_eq!(n, expected_params(&config));
        assert_eq!(n, pinned);
    }
}

#[test]
fn checkpoint_rejects_wrong_optimizer_shapes() {
    let state = Checkpoint::fresh(tiny_net(), tiny_train(1)).unwrap();
    let mut a = state.to_archive().unwrap();
    let name = state.network.params().name(0).to_string();
    a.put(format!("adam.m/{name}"), &vadkit::tensor::Tensor::<f32>::zeros(&[1]));
    assert!(matches!(Checkpoint::from_archive(&a), Err(Error::Archive(_))));
    assert!(Checkpoint::from_archive(&Archive::new()).is_err());
}
