use vadkit_web::Demo;

#[test]
fn clip_renders_and_scores() {
    let demo = Demo::build(3, 1).unwrap();
    assert_eq!(demo.frame_count(), 100);
    assert_eq!(demo.rgba(0).len(), 64 * 64 * 4);
    assert!(demo.labels().contains(&1));
    let scores = demo.baseline();
    assert_eq!(scores.len(), 99);
    assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
}

#[test]
fn patch_edit_matches_noise_intensity() {
    let demo = Demo::build(0, 0).unwrap();
    let p = demo.probe(20, 0.1, 1).unwrap();
    assert!((p[0] - p[2]).abs() / p[0] < 1e-3, "{p:?}");
    assert!(p[1] > 0.0 && p[3] > 0.0);
}
