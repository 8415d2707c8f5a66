use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stlpd::check::{nms_reference, random_detections, reference_iou};
use stlpd::data::{images_to_tensor, sample_seed, synth_sample, Preset, Sample};
use stlpd::engine::train::CHECKPOINT_FILE;
use stlpd::engine::{
    detect, evaluate, evaluate_detections, format_log, format_report, load_weights, nms, save_weights, train,
    DetectConfig, Detection, EngineError, EvalConfig, TrainConfig,
};
use stlpd::geom::{BoxXYXY, Quad};
use stlpd::net::{Backbone, Model, NetConfig};

fn samples(preset: &str, global: u64, n: u64) -> Vec<Sample> {
    let p = Preset::by_name(preset).unwrap();
    (0..n).map(|i| synth_sample(&p, sample_seed(global, i), 64).unwrap()).collect()
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn weights_equal(a: &Model, b: &Model) -> bool {
    a.params().len() == b.params().len()
        && a.params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| x.name == y.name && x.tensor.data() == y.tensor.data())
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let cfg = TrainConfig {
        lr: 0.0,
        ..quick_config(2)
    };
    let out = train(&cfg, &samples("base", 1, 6), &mut |_| {}).unwrap();
    assert_eq!(out.log.len(), 4);
    assert!(out.log.iter().all(|s| s.lr == 0.0));
    assert!(weights_equal(&out.model, &Model::build(&cfg.net, cfg.seed).unwrap()));
}

#[test]
fn single_image_loss_drops_below_a_fifth() {
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        augment: None,
        ..quick_config(0)
    };
    let out = train(&cfg, &samples("base", 2, 1), &mut |_| {}).unwrap();
    let first = out.log[0].loss.total;
    let last = out.log.last().unwrap().loss.total;
    assert!(last < 0.2 * first, "first {first}, last {last}");
}

#[test]
fn same_seed_same_log_and_callback_sees_every_step() {
    let data = samples("tilt", 3, 6);
    let mut seen = Vec::new();
    let a = train(&quick_config(3), &data, &mut |s| seen.push(s.step)).unwrap();
    let b = train(&quick_config(3), &data, &mut |_| {}).unwrap();
    assert_eq!(seen, (1..=6).collect::<Vec<_>>());
    assert_eq!(format_log(&a.log), format_log(&b.log));
    assert!(weights_equal(&a.model, &b.model));
    let c = train(&TrainConfig { seed: 4, ..quick_config(3) }, &data, &mut |_| {}).unwrap();
    assert_ne!(format_log(&a.log), format_log(&c.log));
}

#[test]
fn log_lines_have_five_fields() {
    let out = train(&quick_config(1), &samples("base", 4, 4), &mut |_| {}).unwrap();
    let text = format_log(&out.log);
    let line = text.lines().next().unwrap();
    let fields: Vec<&str> = line.split('\t').collect();
    assert_eq!(fields.len(), 5);
    assert_eq!(fields[0], "1");
    assert_eq!(fields[4].parse::<f32>().unwrap(), out.log[0].loss.total);
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(matches!(
        train(&quick_config(1), &[], &mut |_| {}),
        Err(EngineError::EmptyDataset)
    ));
    let p = Preset::by_name("base").unwrap();
    let small = vec![synth_sample(&p, 1, 32).unwrap()];
    assert!(matches!(
        train(&quick_config(1), &small, &mut |_| {}),
        Err(EngineError::ImageSize { index: 0, .. })
    ));
    let m = Model::build(&NetConfig::default(), 0).unwrap();
    assert!(matches!(
        evaluate(&m, &[], &EvalConfig::default()),
        Err(EngineError::EmptyDataset)
    ));
    assert!(detect(&m, &small[0].image, &DetectConfig::default()).is_err());
}

#[test]
fn weights_round_trip_for_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let x = images_to_tensor(&samples("base", 5, 2).iter().map(|s| &s.image).collect::<Vec<_>>());
    for backbone in [Backbone::Residual, Backbone::Lightweight] {
        for attention in [true, false] {
            let cfg = NetConfig {
                backbone,
                attention,
                stage_channels: [8, 16, 16, 32],
                fpn_dim: 16,
                ..NetConfig::default()
            };
            let m = Model::build(&cfg, 21).unwrap();
            let path = dir.path().join("w.stlpdw");
            save_weights(&m, &path).unwrap();
            let back = load_weights(&path, 64).unwrap();
            assert_eq!(back.config(), &cfg);
            assert!(weights_equal(&m, &back));
            assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
        }
    }
    std::fs::write(dir.path().join("junk"), b"not a weights file").unwrap();
    assert!(load_weights(&dir.path().join("junk"), 64).is_err());
    assert!(load_weights(&dir.path().join("missing"), 64).is_err());
}

#[test]
fn fresh_model_detects_nothing() {
    let m = Model::build(&NetConfig::default(), 0).unwrap();
    for s in samples("challenge", 6, 4) {
        assert!(detect(&m, &s.image, &DetectConfig::default()).unwrap().is_empty());
    }
}

#[test]
fn nms_matches_brute_force_and_is_an_antichain() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let dets = random_detections(&mut rng, 50);
        let kept = nms(&dets, 0.4);
        assert_eq!(kept, nms_reference(&dets, 0.4));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                assert!(a.score >= b.score);
                assert!(reference_iou(&a.bbox, &b.bbox) <= 0.4);
            }
        }
    }
}

fn detection_at(b: BoxXYXY, q: Quad) -> Detection {
    Detection {
        score: 0.9,
        bbox: b,
        quad: q,
    }
}

#[test]
fn injected_ground_truth_scores_perfectly() {
    let data = samples("weather", 7, 5);
    let top: Vec<_> = data.iter().map(|s| Some(detection_at(s.gt_box, s.gt_quad))).collect();
    let m = evaluate_detections(&data, &top, 0.7).unwrap();
    assert_eq!(m.overall.accuracy(), 1.0);
    assert_eq!(m.overall.mean_corner_error, 0.0);
    assert_eq!(m.overall.mean_iou, 1.0);
    assert!(format_report(&m).contains("all\t5\t5\t1.000\t5\t1.0000\t0.0000"));

    let none = vec![None; data.len()];
    let m = evaluate_detections(&data, &none, 0.7).unwrap();
    assert_eq!((m.overall.accuracy(), m.overall.detected), (0.0, 0));
    assert!(m.overall.mean_iou.is_nan());
    assert!(format_report(&m).contains("all\t5\t0\t0.000\t0\t-\t-"));
}

#[test]
fn mixed_fixture_matches_hand_count() {
    let mut data = samples("base", 8, 3);
    data.extend(samples("db", 9, 3));
    let shift = |s: &Sample, frac: f32| {
        let d = frac * s.gt_box.width();
        let b = s.gt_box.translate(d, 0.0);
        let q = Quad::new(s.gt_quad.points().map(|[x, y]| [x + d, y])).unwrap();
        Some(detection_at(b, q))
    };
    // Shifting by f of the width gives IoU (1-f)/(1+f): 0.05 -> 0.905, 0.3 -> 0.538.
    let top = vec![
        shift(&data[0], 0.05),
        shift(&data[1], 0.3),
        None,
        shift(&data[3], 0.0),
        shift(&data[4], 0.05),
        shift(&data[5], 0.3),
    ];
    let m = evaluate_detections(&data, &top, 0.7).unwrap();
    assert_eq!((m.overall.correct, m.overall.detected, m.overall.total), (3, 5, 6));
    assert_eq!((m.per_tag["base"].correct, m.per_tag["db"].correct), (1, 2));
    let want = (2.0 * 0.95 / 1.05 + 1.0 + 2.0 * 0.7 / 1.3) / 5.0;
    assert!((m.overall.mean_iou - want).abs() < 1e-5);
}

#[test]
fn evaluation_ignores_dataset_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data = samples("rotate", 10, 12);
    let top: Vec<_> = data
        .iter()
        .map(|s| {
            let d = rng.gen_range(-4.0..4.0);
            let b = s.gt_box.translate(d, d / 2.0);
            Some(detection_at(b, Quad::new(s.gt_quad.points().map(|[x, y]| [x + d, y + d / 2.0])).unwrap()))
        })
        .collect();
    let base = evaluate_detections(&data, &top, 0.7).unwrap();
    for _ in 0..5 {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        let d: Vec<_> = idx.iter().map(|&i| data[i].clone()).collect();
        let t: Vec<_> = idx.iter().map(|&i| top[i]).collect();
        assert_eq!(evaluate_detections(&d, &t, 0.7).unwrap(), base);
    }
}

#[test]
fn checkpoint_matches_final_model_and_preserves_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples("base", 11, 4);
    let cfg = TrainConfig {
        checkpoint_dir: Some(dir.path().join("ckpt")),
        ..quick_config(2)
    };
    let out = train(&cfg, &data, &mut |_| {}).unwrap();
    let restored = load_weights(&dir.path().join("ckpt").join(CHECKPOINT_FILE), 64).unwrap();
    assert!(weights_equal(&out.model, &restored));
    let ev = EvalConfig {
        detect: DetectConfig {
            score_threshold: 0.0,
            ..DetectConfig::default()
        },
        ..EvalConfig::default()
    };
    let a = evaluate(&out.model, &data, &ev).unwrap();
    let b = evaluate(&restored, &data, &ev).unwrap();
    assert_eq!(format_report(&a), format_report(&b));
    assert_eq!(a.overall.detected, 4);
}

/// The only test touching `STLPD_THREADS`; evaluation must not depend on it.
#[test]
fn threaded_evaluation_matches_serial() {
    let data = samples("fn", 13, 7);
    let model = train(&quick_config(2), &data, &mut |_| {}).unwrap().model;
    let ev = EvalConfig {
        detect: DetectConfig {
            score_threshold: 0.0,
            ..DetectConfig::default()
        },
        ..EvalConfig::default()
    };
    let serial = evaluate(&model, &data, &ev).unwrap();
    std::env::set_var("STLPD_THREADS", "3");
    let threaded = evaluate(&model, &data, &ev);
    std::env::remove_var("STLPD_THREADS");
    assert_eq!(format_report(&serial), format_report(&threaded.unwrap()));
}
