use msc::diffusion::{
    add_noise_per_frame, denoising_loss, mc_pooled_noise_var, pooled_snr_gain, run_snr_experiment,
    sample_autoregressive, sample_autoregressive_with, sample_variance, NoiseSchedule, Signal,
};
use msc::geometry::Grid;
use msc::model::{predict, FrameTimesteps, ModelConfig, ModelParams};
use msc::rng::Stream;
use msc::tensor::Tensor;

#[test]
fn forward_process_moments_match_closed_form() {
    let sched = NoiseSchedule::for_steps(50).unwrap();
    let n = 100_000;
    for (t, x) in [(0usize, 0.8f64), (20, -1.5), (49, 2.0)] {
        let x0 = Tensor::full([1, n, 1, 1], x);
        let ft = FrameTimesteps::constant(1, t, 50).unwrap();
        let nv = add_noise_per_frame(&x0, &ft, &sched, 17 + t as u64).unwrap();
        let a = sched.alpha_bar(t).unwrap();
        let mean = nv.x_t.data().iter().sum::<f64>() / n as f64;
        let var = sample_variance(n, |i| nv.x_t.data()[i]).unwrap();
        let mean_se = ((1.0 - a) / n as f64).sqrt();
        assert!((mean - a.sqrt() * x).abs() < 3.0 * mean_se, "t={t}: mean {mean}");
        assert!(var.within(1.0 - a, 3.0), "t={t}: var {:?} vs {}", var, 1.0 - a);
    }
}

#[test]
fn pooled_noise_variance_is_a_quarter_at_r2() {
    let e = mc_pooled_noise_var(1.0, 2, 100_000, 3).unwrap();
    assert!(e.within(0.25, 3.0), "{e:?}");
    let e4 = mc_pooled_noise_var(2.0, 4, 100_000, 4).unwrap();
    assert!(e4.within(2.0 / 16.0, 3.0), "{e4:?}");
}

#[test]
fn pooled_noise_variance_through_the_pooling_op() {
    // Pool whole pure-noise frames with the tensor op rather than block sums.
    let frames = Tensor::<f64>::from_fn([100, 64, 64, 1], |i| Stream::new(8).normal(i as u64));
    let pooled = msc::tensor::avg_pool2d(&frames, 2).unwrap();
    let e = sample_variance(pooled.numel(), |i| pooled.data()[i]).unwrap();
    assert!(pooled.numel() >= 100_000);
    assert!(e.within(0.25, 3.0), "{e:?}");
}

#[test]
fn snr_gain_on_constant_signal_is_r_squared() {
    for r in [1usize, 2, 4] {
        let img = Signal::Constant.image(8);
        let gain = pooled_snr_gain(&img, 0.3, r).unwrap();
        assert!((gain - (r * r) as f64).abs() < 1e-6);
    }
    let smooth = Tensor::from_fn([8, 8, 1], |i| if (i / 8) / 2 % 2 == 0 { 3.0 } else { -1.0 });
    assert!((pooled_snr_gain(&smooth, 1.0, 2).unwrap() - 4.0).abs() < 1e-12);
}

#[test]
fn snr_table_rows() {
    let rows = run_snr_experiment(&[0.5, 1.0], &[1, 2], 20_000, 1).unwrap();
    assert_eq!(rows.len(), 8);
    for row in &rows {
        assert!((row.var_empirical - row.var_expected).abs() < 3.0 * row.var_std_err + 1e-12);
        match (row.signal, row.r) {
            (_, 1) => assert!((row.gain_expected - 1.0).abs() < 1e-12),
            (Signal::Constant, r) => assert_eq!(row.gain_expected, (r * r) as f64),
            (Signal::Checkerboard, _) => assert_eq!(row.gain_expected, 0.0),
        }
        if row.gain_expected > 0.0 {
            assert!((row.gain_empirical - row.gain_expected).abs() < 4.0 * row.gain_std_err);
        }
    }
    let unit = rows.iter().find(|r| r.sigma == 1.0 && r.r == 2).unwrap();
    assert_eq!(unit.var_expected, 0.25);
}

fn small_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.grid = Grid::new(4, 4, 4);
    cfg.diffusion_steps = 6;
    cfg
}

#[test]
fn loss_is_deterministic_and_near_one_for_a_zero_head() {
    let cfg = small_cfg();
    let sched = NoiseSchedule::for_steps(cfg.diffusion_steps).unwrap();
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let x0 = Tensor::<f64>::from_fn([8, 4, 4, 4, 2], |i| (i as f64 * 0.1).cos());
    let a = denoising_loss(&cfg, &params, &x0, &sched, 5).unwrap();
    let b = denoising_loss(&cfg, &params, &x0, &sched, 5).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    // Zero-initialized head predicts zero: the loss is the mean of ε² over
    // 1024 elements, sd sqrt(2/1024).
    assert!((a - 1.0).abs() < 4.0 * (2.0f64 / 1024.0).sqrt(), "{a}");
}

#[test]
fn emitted_frames_never_change() {
    let cfg = small_cfg();
    let sched = NoiseSchedule::for_steps(cfg.diffusion_steps).unwrap();
    let params = ModelParams::<f32>::random(&cfg, 3, 0.3).unwrap();
    let mut snapshots: Vec<Vec<Tensor<f32>>> = Vec::new();
    let out = sample_autoregressive_with(&cfg, &params, &sched, 4, None, 9, |_, frames| {
        snapshots.push(frames.to_vec());
    })
    .unwrap();
    for pair in snapshots.windows(2) {
        for (a, b) in pair[0].iter().zip(&pair[1]) {
            assert!(a.bit_eq(b));
        }
    }
    assert_eq!(out.audit.future_reads, 0);
    assert_eq!(out.audit.max_frame_read, vec![None, Some(0), Some(1), Some(2)]);
    let again = sample_autoregressive(&cfg, &params, &sched, 4, None, 9).unwrap();
    assert!(again.video.bit_eq(&out.video));
    let shorter = sample_autoregressive(&cfg, &params, &sched, 2, None, 9).unwrap();
    assert_eq!(shorter.video.data(), &out.video.data()[..shorter.video.numel()]);
}

#[test]
fn context_frames_are_kept_and_overlong_context_is_rejected() {
    let cfg = small_cfg();
    let sched = NoiseSchedule::for_steps(cfg.diffusion_steps).unwrap();
    let params = ModelParams::<f32>::random(&cfg, 4, 0.3).unwrap();
    let ctx = Tensor::<f32>::from_fn([2, 4, 4, 2], |i| (i % 7) as f32 * 0.1);
    let out = sample_autoregressive(&cfg, &params, &sched, 3, Some(&ctx), 1).unwrap();
    assert_eq!(&out.video.data()[..ctx.numel()], ctx.data());
    assert!(sample_autoregressive(&cfg, &params, &sched, 1, Some(&ctx), 1).is_err());
    assert!(sample_autoregressive(&cfg, &params, &sched, 0, None, 1).is_err());
}

#[test]
fn longer_than_model_clips_slide_the_context_window() {
    let cfg = small_cfg();
    let sched = NoiseSchedule::for_steps(cfg.diffusion_steps).unwrap();
    let params = ModelParams::<f32>::random(&cfg, 5, 0.3).unwrap();
    let out = sample_autoregressive(&cfg, &params, &sched, 6, None, 2).unwrap();
    assert_eq!(out.video.shape(), [6, 4, 4, 2]);
    assert_eq!(out.audit.max_frame_read[5], Some(4));
    assert_eq!(out.audit.future_reads, 0);
}

#[test]
fn single_frame_sampling_is_plain_ddpm() {
    let cfg = small_cfg();
    let sched = NoiseSchedule::for_steps(cfg.diffusion_steps).unwrap();
    let params = ModelParams::<f64>::random(&cfg, 6, 0.3).unwrap();
    let seed = 12;
    let got = sample_autoregressive(&cfg, &params, &sched, 1, None, seed).unwrap();

    let key = Stream::new(seed).child(0);
    let n = sched.steps();
    let mut x = Tensor::from_fn([1, 1, 4, 4, 2], |i| key.child(n as u64).normal(i as u64));
    for t in (0..n).rev() {
        let ft = [FrameTimesteps::constant(1, t, n).unwrap()];
        let eps = predict(&cfg, &params, &x, &ft).unwrap();
        let (b, a) = (sched.betas()[t], sched.alpha_bars()[t]);
        let z = key.child(t as u64);
        x = Tensor::from_fn([1, 1, 4, 4, 2], |i| {
            let mean = (x.data()[i] - b / (1.0 - a).sqrt() * eps.data()[i]) / (1.0 - b).sqrt();
            if t > 0 {
                mean + b.sqrt() * z.normal(i as u64)
            } else {
                mean
            }
        });
    }
    assert!(got.video.max_abs_diff(&x.reshape([1, 4, 4, 2]).unwrap()).unwrap() < 1e-12);
}
