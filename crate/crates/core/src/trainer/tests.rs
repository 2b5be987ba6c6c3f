use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::genome_io::generate_synthetic_genome;

fn tiny_model(ctx: usize) -> ModelConfig {
    ModelConfig {
        ffn_dim: 32,
        ..ModelConfig::tiny(16, 2, 2, ctx)
    }
}

fn quick_train(total: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        warmup_iters: 2,
        total_iters: total,
        lr_peak: 3e-3,
        lr_min: 3e-4,
        seed: 11,
        ..TrainConfig::desk_base()
    }
}

fn corpus(window: usize, n: usize, seed: u64) -> TokenShard {
    let record = generate_synthetic_genome(seed, window * n, 2, 3.0).unwrap();
    let windows: Vec<&str> = (0..n).map(|i| &record.sequence[i * window..(i + 1) * window]).collect();
    TokenShard::from_windows(&windows, window).unwrap()
}

#[test]
fn base_plan_anchor_points() {
    let cfg = TrainConfig::full_scale_base();
    assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
    assert_eq!(lr_at(1000, &cfg).unwrap(), 4.8e-4);
    assert_eq!(lr_at(19_000, &cfg).unwrap(), 4.8e-5);
    assert_eq!(lr_at(500, &cfg).unwrap(), 2.4e-4);
    assert!(lr_at(19_001, &cfg).is_err());
}

#[test]
fn extension_plan_anchor_points() {
    for (w, t) in [(50, 1000), (20, 200)] {
        let cfg = TrainConfig::full_scale_extension(w, t);
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(w, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(t, &cfg).unwrap(), 4e-5);
        assert_eq!(cfg.batch_size, 32);
    }
}

#[test]
fn cosine_midpoint_and_continuity() {
    let cfg = TrainConfig {
        warmup_iters: 100,
        total_iters: 300,
        lr_peak: 1.0,
        lr_min: 0.2,
        ..TrainConfig::full_scale_base()
    };
    assert!((lr_at(200, &cfg).unwrap() - 0.6).abs() < 1e-15);
    let before = lr_at(99, &cfg).unwrap();
    let at = lr_at(100, &cfg).unwrap();
    let after = lr_at(101, &cfg).unwrap();
    assert_eq!(at, 1.0);
    assert!((at - before).abs() < 0.011 && (at - after).abs() < 1e-3);
}

#[test]
fn linear_decay_schedule() {
    let cfg = TrainConfig::finetune(100);
    assert_eq!(cfg.warmup_iters, 10);
    assert_eq!(lr_at(10, &cfg).unwrap(), 1e-4);
    assert!((lr_at(55, &cfg).unwrap() - 0.5e-4).abs() < 1e-18);
    assert_eq!(lr_at(100, &cfg).unwrap(), 0.0);
    let species = TrainConfig::finetune_species(100);
    assert_eq!(lr_at(10, &species).unwrap(), 1e-5);
    assert_eq!((species.beta1, species.beta2, species.weight_decay), (0.9, 0.999, 0.0));
}

#[test]
fn config_validation() {
    let mut cfg = TrainConfig::desk_base();
    cfg.warmup_iters = cfg.total_iters + 1;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::desk_base();
    cfg.beta2 = 1.0;
    assert!(cfg.validate().is_err());
    assert!(TrainConfig::full_scale_base().validate().is_ok());
}

fn scalar(v: f32) -> Tensor {
    Tensor::new(vec![1], vec![v]).unwrap()
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::full_scale_base()
    };
    let mut p = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let before = p.clone();
    let mut m = AdamMoments::zeros_like(&[&p]);
    for step in 0..5 {
        adamw_step(&mut [&mut p], &[Tensor::zeros(&[3, 4])], &mut m, step, 1e-2, &cfg).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn first_step_closed_form() {
    // m1 = (1-b1) g, v1 = (1-b2) g^2; after bias correction m/sqrt(v) = g/|g|
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::full_scale_base()
    };
    for g in [0.3f32, -2.0, 1e-3] {
        let mut p = scalar(1.0);
        let mut m = AdamMoments::zeros_like(&[&p]);
        let lr = 0.01;
        adamw_step(&mut [&mut p], &[scalar(g)], &mut m, 0, lr, &cfg).unwrap();
        let g = g as f64;
        let expected = 1.0 - lr * g / (g.abs() + cfg.eps);
        assert!((p.item() as f64 - expected).abs() < 1e-7, "{g}");
    }
}

#[test]
fn weight_decay_contracts_exactly() {
    let cfg = TrainConfig::full_scale_base();
    let lr = 0.05;
    let mut p = Tensor::randn(&[10], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let mut m = AdamMoments::zeros_like(&[&p]);
    for step in 0..3 {
        let expect: Vec<f32> = p.data().iter().map(|&v| (v as f64 * (1.0 - lr * 0.1)) as f32).collect();
        adamw_step(&mut [&mut p], &[Tensor::zeros(&[10])], &mut m, step, lr, &cfg).unwrap();
        assert_eq!(p.data(), expect.as_slice());
    }
}

#[test]
fn quadratic_converges() {
    let cfg = TrainConfig::finetune(500);
    let mut p = scalar(0.0);
    let mut m = AdamMoments::zeros_like(&[&p]);
    for step in 0..500 {
        let g = scalar(p.item() - 3.0);
        adamw_step(&mut [&mut p], &[g], &mut m, step, 0.1, &cfg).unwrap();
    }
    assert!((p.item() - 3.0).abs() < 1e-3, "{}", p.item());
}

#[test]
fn nan_gradient_reports_step() {
    let cfg = TrainConfig::full_scale_base();
    let mut p = scalar(1.0);
    let mut m = AdamMoments::zeros_like(&[&p]);
    let err = adamw_step(&mut [&mut p], &[scalar(f32::NAN)], &mut m, 41, 0.1, &cfg).unwrap_err();
    assert!(matches!(err, Error::TrainingDiverged { step: 41, .. }));
}

#[test]
fn clipping_examples() {
    let mut g = vec![Tensor::new(vec![2], vec![0.3, 0.4]).unwrap()];
    assert_eq!(clip_global_norm(&mut g, 1.0), 1.0);
    assert_eq!(g[0].data(), &[0.3, 0.4]);

    let mut g = vec![scalar(0.0), Tensor::new(vec![2], vec![0.0, 4.0]).unwrap()];
    assert_eq!(clip_global_norm(&mut g, 1.0), 0.25);
    assert!((global_norm(&g) - 1.0).abs() < 1e-6);

    let mut g = vec![Tensor::zeros(&[5])];
    assert_eq!(clip_global_norm(&mut g, 1.0), 1.0);
    assert!(g[0].data().iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn clipped_norm_is_bounded(vals in proptest::collection::vec(-1e3f32..1e3, 1..50), max in 0.01f64..10.0) {
        let mut g = vec![Tensor::new(vec![vals.len()], vals).unwrap()];
        clip_global_norm(&mut g, max);
        prop_assert!(global_norm(&g) <= max + 1e-6);
    }

    #[test]
    fn schedule_stays_within_bounds(w in 0u64..200, extra in 1u64..500, step_frac in 0.0f64..=1.0) {
        let cfg = TrainConfig { warmup_iters: w, total_iters: w + extra, ..TrainConfig::full_scale_base() };
        let step = (step_frac * cfg.total_iters as f64) as u64;
        let lr = lr_at(step, &cfg).unwrap();
        prop_assert!((0.0..=cfg.lr_peak).contains(&lr));
        if step >= w {
            prop_assert!(lr >= cfg.lr_min);
        }
        prop_assert_eq!(lr_at(cfg.total_iters, &cfg).unwrap(), cfg.lr_min);
    }
}

#[test]
fn targets_shift_and_mask() {
    let (t, m) = next_token_targets(&[&[2, 3, 1, 5], &[4, 0, 2, 2]]);
    assert_eq!(t, vec![3, 1, 5, 0, 0, 2, 2, 0]);
    assert_eq!(m, vec![true, false, true, false, false, true, true, false]);
}

#[test]
fn initial_loss_is_near_uniform_and_training_reduces_it() {
    let data = corpus(64, 16, 3);
    let model = ModelConfig {
        init_std: 0.02,
        ..tiny_model(64)
    };
    let ck = Checkpoint::fresh(&model, &quick_train(60), 0).unwrap();
    let (_, rec) = train(ck, &data, &mut TrainOptions::default()).unwrap();
    assert!((rec[0].loss - 6f64.ln()).abs() < 0.05, "{}", rec[0].loss);
    let tail: f64 = rec[55..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    assert!(tail < rec[0].loss - 0.3, "{} -> {tail}", rec[0].loss);
    assert_eq!(rec.last().unwrap().tokens_seen, 60 * 2 * 64);
    assert!(rec.iter().all(|r| (r.ppl - r.loss.exp()).abs() < 1e-12));
}

#[test]
fn sampler_covers_each_epoch_once() {
    let mut s = BatchSampler::new(7, 3);
    let mut first: Vec<usize> = (0..7).map(|k| s.index(k)).collect();
    first.sort();
    assert_eq!(first, (0..7).collect::<Vec<_>>());
    let second: Vec<usize> = (7..14).map(|k| s.index(k)).collect();
    let mut again = BatchSampler::new(7, 3);
    assert_eq!(second, (7..14).map(|k| again.index(k)).collect::<Vec<_>>());
}

fn losses(rec: &[StepRecord]) -> Vec<u64> {
    rec.iter().map(|r| r.loss.to_bits()).collect()
}

#[test]
fn fixed_seeds_give_identical_curves() {
    let data = corpus(32, 8, 4);
    let run = || {
        let ck = Checkpoint::fresh(&tiny_model(32), &quick_train(12), 0).unwrap();
        train(ck, &data, &mut TrainOptions::default()).unwrap()
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(losses(&ra), losses(&rb));
    assert_eq!(a, b);
}

#[test]
fn resume_through_a_file_is_bit_exact() {
    let data = corpus(32, 8, 5);
    let cfg = quick_train(20);
    let (full, full_rec) = train(
        Checkpoint::fresh(&tiny_model(32), &cfg, 9).unwrap(),
        &data,
        &mut TrainOptions::default(),
    )
    .unwrap();

    let mut first = TrainOptions {
        stop_after: Some(10),
        ..Default::default()
    };
    let (half, mut rec) = train(Checkpoint::fresh(&tiny_model(32), &cfg, 9).unwrap(), &data, &mut first).unwrap();
    assert_eq!(half.step, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    half.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let (done, rest) = train(loaded, &data, &mut TrainOptions::default()).unwrap();
    rec.extend(rest);
    assert_eq!(losses(&rec), losses(&full_rec));
    assert_eq!(done, full);
}

#[test]
fn checkpoint_bytes_are_stable() {
    let data = corpus(32, 4, 6);
    let (ck, _) = train(
        Checkpoint::fresh(&tiny_model(32), &quick_train(3), 2).unwrap(),
        &data,
        &mut TrainOptions::default(),
    )
    .unwrap();
    let mut a = Vec::new();
    ck.write_to(&mut a).unwrap();
    let back = Checkpoint::read_from(&a[..]).unwrap();
    assert_eq!(back, ck);
    let mut b = Vec::new();
    back.write_to(&mut b).unwrap();
    assert_eq!(a, b);
    for (x, y) in back.model.params().iter().zip(ck.model.params()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x), bits(y));
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let ck = Checkpoint::fresh(&tiny_model(32), &quick_train(3), 2).unwrap();
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes).unwrap();

    let mut flipped = bytes.clone();
    let n = flipped.len();
    flipped[n - 17] ^= 0x40;
    match Checkpoint::read_from(&flipped[..]) {
        Err(Error::CheckpointFormat(m)) => assert!(m.contains("checksum"), "{m}"),
        other => panic!("{:?}", other.map(|_| ())),
    }

    let truncated = &bytes[..bytes.len() - 8];
    assert!(matches!(Checkpoint::read_from(truncated), Err(Error::CheckpointFormat(_))));

    let mut wrong_version = bytes.clone();
    wrong_version[19] = b'9';
    match Checkpoint::read_from(&wrong_version[..]) {
        Err(Error::CheckpointFormat(m)) => assert!(m.contains("version"), "{m}"),
        other => panic!("{:?}", other.map(|_| ())),
    }

    let text = String::from_utf8_lossy(&bytes).into_owned();
    let pos = text.find("layers.0.wq 16x16").unwrap();
    let mut bad_shape = bytes.clone();
    bad_shape[pos + 12..pos + 17].copy_from_slice(b"16x17");
    assert!(matches!(Checkpoint::read_from(&bad_shape[..]), Err(Error::CheckpointFormat(_))));
}

#[test]
fn loading_into_another_config_names_the_tensor() {
    let ck = Checkpoint::fresh(&tiny_model(32), &quick_train(3), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    ck.save(&path).unwrap();
    let other = ModelConfig {
        ffn_dim: 40,
        ..tiny_model(32)
    };
    match Checkpoint::load_for(&path, &other) {
        Err(Error::Shape(m)) => assert!(m.contains("layers.0.w1"), "{m}"),
        other => panic!("{:?}", other.map(|_| ())),
    }
    assert!(Checkpoint::load_for(&path, &tiny_model(32)).is_ok());
}

#[test]
fn extension_keeps_weights_and_swaps_base() {
    let ck = Checkpoint::fresh(&tiny_model(32), &quick_train(3), 2).unwrap();
    let ext = begin_extension(&ck, 64, 16e4, &quick_train(4)).unwrap();
    assert_eq!(ext.model.params(), ck.model.params());
    assert_eq!(ext.model.config.rope_base, 16e4);
    assert_eq!(ext.model.config.max_seq_len, 64);
    assert_eq!((ext.step, ext.stage), (0, 1));
    assert!(begin_extension(&ck, 32, 1e5, &quick_train(4)).is_err());

    let short = corpus(48, 4, 1);
    assert!(matches!(
        extend_context(&ck, 64, 1e5, &quick_train(4), &short, &mut TrainOptions::default()),
        Err(Error::DataConfig(_))
    ));
}

#[test]
fn staged_doubling_plan_runs() {
    let data = corpus(512, 4, 7);
    let mut model = tiny_model(128);
    model.rope_base = 1e4;
    let stage = |len| Stage {
        context_len: len,
        rope_base: None,
        train_config: TrainConfig {
            batch_size: 1,
            ..quick_train(3)
        },
    };
    let plan = StagePlan {
        model,
        stages: vec![stage(128), stage(256), stage(512)],
        base_range: None,
    };
    let bases: Vec<f64> = plan.resolved_bases().iter().map(|b| b.1).collect();
    assert_eq!(bases, vec![1e4, 4e4, 16e4]);
    let (cks, rec) = plan.run(&data, 0).unwrap();
    assert_eq!(cks.len(), 3);
    assert_eq!(cks[2].model.config.max_seq_len, 512);
    for start in [0, 3, 6] {
        assert!(rec[start].loss.is_finite());
    }

    let mut bad = plan.clone();
    bad.stages.swap(0, 1);
    assert!(bad.validate().is_err());
}

#[test]
fn default_base_scaling() {
    assert_eq!(default_next_base(1e4, 4096, 8192, None), 4e4);
    assert_eq!(default_next_base(4e6, 32_768, 65_536, Some(FULL_SCALE_BASE_RANGE)), 1.5e7);
}

#[test]
fn metrics_log_lines_parse() {
    let mut log = MetricsLog::new(Vec::new());
    let rec = StepRecord {
        step: 3,
        lr: 1e-4,
        loss: 1.25,
        ppl: 1.25f64.exp(),
        grad_norm: 0.5,
        tokens_seen: 128,
        wall_ms: 7,
    };
    log.write(&rec).unwrap();
    log.write(&rec).unwrap();
    let text = String::from_utf8(log.into_inner()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let back: StepRecord = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(back, rec);
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    for key in ["step", "lr", "loss", "ppl", "grad_norm", "tokens_seen", "wall_ms"] {
        assert!(v.get(key).is_some());
    }
}

#[test]
fn divergence_is_reported() {
    let data = corpus(32, 4, 8);
    let mut ck = Checkpoint::fresh(&tiny_model(32), &quick_train(3), 2).unwrap();
    ck.model.token_embedding.data_mut()[2 * 16] = f32::NAN;
    let err = train(ck, &data, &mut TrainOptions::default()).unwrap_err();
    assert!(err.is_numeric_failure(), "{err}");
}
