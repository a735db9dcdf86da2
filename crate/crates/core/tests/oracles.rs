mod common;

use common::*;
use rand::Rng;
use vadkit::evaluation::auc;
use vadkit::loss::{
    gradient_difference_loss, intensity_loss, noise_tolerance_loss, total_loss, LossNetwork, LossNetworkSpec,
    LossWeights, VGG_ALPHA,
};
use vadkit::network::{Network, NetworkConfig};
use vadkit::scoring::mse;
use vadkit::tensor::Tensor;

#[test]
fn losses_match_direct_formulas() {
    let net = LossNetwork::<f64>::random(LossNetworkSpec::vgg16_scaled(16), 5);
    let alpha = LossWeights::default().alpha;
    for seed in 0..20 {
        let mut r = rng(seed);
        let a = random_frame(&mut r, &[3, 8, 8]);
        let b = random_frame(&mut r, &[3, 8, 8]);
        assert!(rel_err(intensity_loss(&a, &b).unwrap(), intensity_ref(&a, &b)) < 1e-9);
        assert!(rel_err(gradient_difference_loss(&a, &b).unwrap(), grad_diff_ref(&a, &b)) < 1e-9);
        let nt = noise_tolerance_loss(&a, &b, &net, &alpha).unwrap();
        assert!(rel_err(nt, noise_tolerance_ref(&net, &a, &b, &VGG_ALPHA)) < 1e-6, "seed {seed}");
    }
}

#[test]
fn total_is_sum_of_independent_terms() {
    let net = LossNetwork::<f64>::random(LossNetworkSpec::vgg16_scaled(16), 1);
    let mut r = rng(9);
    let a = random_frame(&mut r, &[3, 8, 8]);
    let b = random_frame(&mut r, &[3, 8, 8]);
    let t = total_loss(&a, &b, &LossWeights::default(), Some(&net)).unwrap();
    let expected = intensity_ref(&a, &b) + grad_diff_ref(&a, &b) + noise_tolerance_ref(&net, &a, &b, &VGG_ALPHA);
    assert!(rel_err(t.total, expected) < 1e-9);
    let only_int = LossWeights { lambda_gd: 0.0, lambda_nt: 0.0, ..LossWeights::default() };
    assert_eq!(total_loss(&a, &b, &only_int, None).unwrap().total, intensity_loss(&a, &b).unwrap());
}

#[test]
fn gray_frames_are_replicated_for_the_loss_network() {
    let net = LossNetwork::<f64>::random(LossNetworkSpec::vgg16_scaled(32), 2);
    let mut r = rng(4);
    let a = random_frame(&mut r, &[1, 8, 8]);
    let b = random_frame(&mut r, &[1, 8, 8]);
    let nt = noise_tolerance_loss(&a, &b, &net, &LossWeights::default().alpha).unwrap();
    assert!(rel_err(nt, noise_tolerance_ref(&net, &a, &b, &VGG_ALPHA)) < 1e-6);
}

#[test]
fn mse_matches_summation() {
    let mut r = rng(3);
    let a: Tensor<f32> = random_frame(&mut r, &[3, 4, 4]).cast();
    let b: Tensor<f32> = random_frame(&mut r, &[3, 4, 4]).cast();
    let direct: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / 16.0;
    assert!((mse(&a, &b).unwrap() - direct).abs() < 1e-12);
}

fn nonlocal_net() -> Network<f64> {
    Network::new(NetworkConfig {
        paths: 2,
        input_len: 2,
        in_channels: 3,
        frame_size: 32,
        path_channels: vec![4, 4],
        blocks_per_stage: 1,
        seed: 11,
        ..NetworkConfig::default()
    })
    .unwrap()
}

fn param<'a>(net: &'a Network<f64>, name: &str) -> &'a [f64] {
    let p = net.params();
    p.get(p.id(name).unwrap_or_else(|| panic!("{name}"))).data()
}

#[test]
fn nonlocal_matches_all_pairs_reference() {
    let mut net = nonlocal_net();
    let mut r = rng(8);
    let id = net.params().id("pre.path1.nonlocal.out.weight").unwrap();
    for v in net.params_mut().get_mut(id).data_mut() {
        *v = r.random_range(-0.5..0.5);
    }
    let x = random_frame(&mut r, &[4, 8, 8]);
    let got = net.nonlocal_block(0, &x).unwrap();
    let pair = |n: &str| {
        (
            param(&net, &format!("pre.path1.nonlocal.{n}.weight")),
            param(&net, &format!("pre.path1.nonlocal.{n}.bias")),
        )
    };
    let want = nonlocal_ref(x.data(), 4, 64, pair("theta"), pair("phi"), pair("g"), pair("out"), 2);
    let worst = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn fresh_nonlocal_block_is_identity() {
    let net = nonlocal_net();
    let x = random_frame(&mut rng(2), &[4, 8, 8]);
    assert_eq!(net.nonlocal_block(0, &x).unwrap(), x);
}

#[test]
fn convgru_single_pixel_by_hand() {
    let mut net = Network::<f64>::new(NetworkConfig {
        paths: 1,
        input_len: 1,
        in_channels: 1,
        frame_size: 32,
        path_channels: vec![1],
        kernel: 1,
        nonlocal: false,
        ..NetworkConfig::default()
    })
    .unwrap();
    // Gate rows are [update, reset]; columns are [x, h].
    let set = |net: &mut Network<f64>, name: &str, v: &[f64]| {
        let id = net.params().id(name).unwrap();
        net.params_mut().get_mut(id).data_mut().copy_from_slice(v);
    };
    set(&mut net, "pre.path1.gru.gates.weight", &[0.5, -1.0, 2.0, 0.25]);
    set(&mut net, "pre.path1.gru.gates.bias", &[0.1, -0.2]);
    set(&mut net, "pre.path1.gru.candidate.weight", &[1.5, -0.75]);
    set(&mut net, "pre.path1.gru.candidate.bias", &[0.05]);
    let (x, h) = (0.8, -0.4);
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let u = sig(0.5 * x - 1.0 * h + 0.1);
    let rr = sig(2.0 * x + 0.25 * h - 0.2);
    let c = (1.5 * x - 0.75 * rr * h + 0.05).tanh();
    let want = (1.0 - u) * h + u * c;
    let t = |v| Tensor::from_vec(&[1, 1, 1], vec![v]).unwrap();
    let got = net.convgru_step(0, &t(h), &t(x)).unwrap().data()[0];
    assert!((got - want).abs() < 1e-12, "{got} {want}");
}

#[test]
fn auc_matches_pair_counting() {
    let mut r = rng(21);
    for _ in 0..100 {
        let n = r.random_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64 / 5.0).collect();
        assert_eq!(auc(&scores, &labels).unwrap(), auc_pairs(&scores, &labels));
    }
}
