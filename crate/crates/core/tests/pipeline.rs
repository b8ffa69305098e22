use lensfuse::backbone::Backbone;
use lensfuse::data::{
    crop_side, curriculum_order, load_manifest, simulate_narrow, simulate_wide, synthesize_pair, write_pair, DegradationSpec,
    PairSidecar, NARROW_ZOOM, NOISE_SIGMA_MAX,
};
use lensfuse::evaluation::{psnr, LossLog, MetricReport, MetricRow};
use lensfuse::generator::GeneratorConfig;
use lensfuse::imaging::{assemble, partition, resize_image, Image, PATCH_COUNT};
use lensfuse::inference::{enhance, LensStack, Model};
use lensfuse::matching::{match_patches, similarity};
use lensfuse::train::{Checkpoint, TrainConfig};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

fn textured(h: usize, w: usize, k: f64) -> Image {
    Image::from_fn(h, w, |y, x, c| {
        0.5 + 0.4 * ((x as f64 * k + c as f64).sin() * (y as f64 * 0.7 * k).cos())
    })
    .unwrap()
}

fn small_ckpt() -> Checkpoint {
    let cfg = TrainConfig {
        generator: GeneratorConfig { width: 8, blocks: 1, upscale: 2 },
        ..Default::default()
    };
    Checkpoint::fresh(&cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn partition_assemble_is_lossless(rows in 1usize..5, cols in 1usize..5, seed in 0u64..1000) {
        let (h, w) = (8 * rows, 8 * cols);
        let img = Image::from_fn(h, w, |y, x, c| ((y * 31 + x * 17 + c * 7) as u64 ^ seed) as f64 % 97.0 / 96.0).unwrap();
        let patches = partition(&img).unwrap();
        prop_assert_eq!(patches.len(), PATCH_COUNT);
        prop_assert_eq!(assemble(&patches, 0).unwrap(), img);
    }

    #[test]
    fn wide_degradation_is_seeded(seed in 0u64..10_000, blur in 0.2f64..3.0, noise in 0.0f64..NOISE_SIGMA_MAX) {
        let gt = textured(32, 32, 0.3);
        let spec = DegradationSpec { blur_sigma: blur, noise_sigma: noise, down_size: 16 };
        let a = simulate_wide(&gt, &spec, seed).unwrap();
        prop_assert_eq!(&a, &simulate_wide(&gt, &spec, seed).unwrap());
        prop_assert!(a.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn narrow_crop_side_is_even(side in 8usize..2048) {
        let c = crop_side(side, NARROW_ZOOM);
        prop_assert_eq!(c % 2, 0);
        prop_assert!(c as f64 <= side as f64 / NARROW_ZOOM);
    }
}

#[test]
fn synthesized_pair_shapes_and_sidecar() {
    let gt = textured(96, 64, 0.2);
    let (pair, spec) = synthesize_pair("scene", &gt, NARROW_ZOOM, 2, 11).unwrap();
    assert_eq!(pair.wide.dims(), (96, 64));
    assert_eq!(pair.narrow.dims(), (96, 64));
    assert_eq!(spec.down_size, 32);
    let (again, _) = synthesize_pair("scene", &gt, NARROW_ZOOM, 2, 11).unwrap();
    assert_eq!(pair.wide, again.wide);

    let dir = tempfile::tempdir().unwrap();
    let files = write_pair(dir.path(), &pair, &spec, NARROW_ZOOM, 11).unwrap();
    assert_eq!(files.len(), 4);
    let side: PairSidecar = serde_json::from_str(&std::fs::read_to_string(&files[3]).unwrap()).unwrap();
    assert_eq!(side.seed, 11);
    assert_eq!(side.degradation, spec);
    assert_eq!(Image::open(&files[1]).unwrap().dims(), (96, 64));
}

#[test]
fn narrow_view_is_a_centered_zoom() {
    let gt = textured(120, 120, 0.15);
    let narrow = simulate_narrow(&gt, 2.0).unwrap();
    let (cy, cx) = (60, 60);
    let d = (narrow.get(cy, cx, 0) - gt.get(cy, cx, 0)).abs();
    assert!(d < 0.05, "center pixel drifted by {d}");
    assert!(simulate_narrow(&gt, 1.0).is_err());
}

#[test]
fn manifest_resolves_relative_paths_and_reports_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    textured(64, 64, 0.3).save_png(dir.path().join("a.png")).unwrap();
    std::fs::write(dir.path().join("list.tsv"), "# id\tpath\na\ta.png\ttrain\n\nb\ta.png\n").unwrap();
    let recs = load_manifest(dir.path().join("list.tsv")).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].split.as_deref(), Some("train"));
    assert_eq!(recs[1].split, None);
    assert!(recs[0].path.is_absolute() || recs[0].path.starts_with(dir.path()));

    std::fs::write(dir.path().join("bad.tsv"), "a\ta.png\nmissing\tnope.png\n").unwrap();
    let err = load_manifest(dir.path().join("bad.tsv")).unwrap_err().to_string();
    assert!(err.contains("row 2") && err.contains("missing"), "{err}");
}

#[test]
fn curriculum_is_stable() {
    let flat = |id: &str| {
        let img = Image::constant(16, 16, [0.3; 3]).unwrap();
        lensfuse::data::FoVPair::new(id, img.clone(), img.clone(), img).unwrap()
    };
    let busy = {
        let img = textured(16, 16, 0.9);
        lensfuse::data::FoVPair::new("busy", img.clone(), img.clone(), img).unwrap()
    };
    let order: Vec<String> = curriculum_order(vec![busy, flat("x"), flat("y")])
        .unwrap()
        .into_iter()
        .map(|p| p.source_id)
        .collect();
    assert_eq!(order, ["x", "y", "busy"]);
    assert!(curriculum_order(Vec::new()).is_err());
}

#[test]
fn matches_agree_with_exhaustive_search() {
    let bb = Backbone::random(0);
    let wide = partition(&textured(128, 128, 0.21)).unwrap();
    let narrow = partition(&textured(128, 128, 0.37)).unwrap();
    let matches = match_patches(&bb, &wide, &narrow, 0.7).unwrap();
    let we: Vec<Vec<f64>> = wide.iter().map(|p| bb.embed(p).unwrap()).collect();
    let ne: Vec<Vec<f64>> = narrow.iter().map(|p| bb.embed(p).unwrap()).collect();
    assert_eq!(matches.len(), PATCH_COUNT);
    for (i, m) in matches.iter().enumerate() {
        let row: Vec<f64> = ne.iter().map(|n| similarity(&we[i], n).unwrap().score).collect();
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(m.wide_pos.index(), i);
        assert_eq!(m.score, best);
        assert_eq!(row[m.narrow_pos.index()], best);
        assert_eq!(m.above_threshold, best >= 0.7);
    }
}

#[test]
fn fresh_model_is_close_to_bicubic() {
    let wide = textured(64, 64, 0.25);
    let out = enhance(&wide, &wide, &small_ckpt()).unwrap();
    let bic = resize_image(&wide, 128, 128).unwrap();
    let p = psnr(&out, &bic).unwrap();
    assert!(p > 35.0, "{p}");
}

#[test]
fn enhance_rounds_odd_sizes_up() {
    let model = Model::from_checkpoint(&small_ckpt()).unwrap();
    let r = model.enhance_with_matches(&textured(50, 70, 0.3), &textured(70, 100, 0.2)).unwrap();
    assert_eq!(r.image.dims(), (256, 256));
    assert_eq!(r.matches.len(), PATCH_COUNT);
    let json = serde_json::to_value(model.match_report(r.matches)).unwrap();
    assert_eq!(json["matches"].as_array().unwrap().len(), PATCH_COUNT);
    assert!(json["matches"][0]["narrow_cues"].as_array().unwrap().len() == 6);
}

#[test]
fn lens_stack_loads_from_json() {
    let dir = tempfile::tempdir().unwrap();
    for (i, name) in ["tele.png", "main.png"].iter().enumerate() {
        textured(64, 64, 0.2 + i as f64 * 0.1).save_png(dir.path().join(name)).unwrap();
    }
    let list = r#"[{"zoom": 3.0, "path": "tele.png"}, {"zoom": 1.0, "path": "main.png"}]"#;
    std::fs::write(dir.path().join("stack.json"), list).unwrap();
    let stack = LensStack::load(dir.path().join("stack.json")).unwrap();
    assert_eq!(stack.len(), 2);
    let bad = r#"[{"zoom": 1.0, "path": "tele.png"}, {"zoom": 3.0, "path": "main.png"}]"#;
    std::fs::write(dir.path().join("bad.json"), bad).unwrap();
    assert!(LensStack::load(dir.path().join("bad.json")).is_err());
}

#[test]
fn metric_report_formats() {
    let bb = Backbone::random(0);
    let gt = textured(32, 32, 0.3);
    let pred = textured(32, 32, 0.31);
    let rows = vec![
        MetricRow::compute("same", &gt, &gt, Some(&bb)).unwrap(),
        MetricRow::compute("close", &pred, &gt, Some(&bb)).unwrap(),
    ];
    assert_eq!(rows[0].psnr_db, 100.0);
    assert!(rows[1].psnr_db < 100.0 && rows[1].perceptual_distance > 0.0);
    assert_eq!(rows[0].backend, "lpips-proxy");
    let report = MetricReport::new(rows);
    let csv = report.to_csv();
    assert!(csv.starts_with("id,psnr_db,ssim,perceptual_distance,backend\n"));
    assert_eq!(csv.lines().count(), 3);
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["ssim_space"], "luminance");
    assert!(report.to_text().contains("close"));
    assert!(MetricRow::compute("x", &gt, &gt, None).is_err());
}

#[test]
fn loss_log_parses_and_renders() {
    let mut text = String::from("iteration,L_content,L_visual\n");
    for i in 0..40 {
        text += &format!("{i},{},{}\n", 1.0 / (i + 1) as f64, 0.5);
    }
    let log = LossLog::parse(&text).unwrap();
    assert_eq!(log.columns, ["L_content", "L_visual"]);
    assert_eq!(log.iterations.len(), 40);
    let smoothed = log.smoothed_csv(10);
    assert_eq!(smoothed.lines().count(), 1 + 31);
    let img = log.render(10, (200, 100));
    assert_eq!(img.dimensions(), (400, 100));
    assert!(LossLog::parse("step,a\n0,1\n").is_err());
}
