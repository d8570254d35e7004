use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use msc::audit::audit_with_control;
use msc::cost::{compare, default_sweep, highres_trend, sweep_csv, CostInputs};
use msc::diffusion::{run_snr_experiment, sample_autoregressive, NoiseSchedule};
use msc::geometry::{AttentionGeometry, Grid};
use msc::gradcheck::run_suite;
use msc::io::{encode_pbm, load_checkpoint, load_video, render_frames, save_video};
use msc::model::{ModelConfig, ModelParams};
use msc::synth::{gen_synthetic_video, ClipShape, MotionSpec};
use msc::train::{train as run_training, RunConfig, TrainOptions};
use msc::{Error, Result};

use crate::{AuditArgs, Branch, FlopsArgs, GradcheckArgs, MaskArgs, SampleArgs, SnrArgs, SynthArgs, TrainArgs};

/// Largest mask side whose bitmap is echoed in the JSON summary.
const INLINE_PBM_SIDE: usize = 64;
const MIN_SNR_TRIALS: usize = 10_000;

pub struct Outcome {
    pub summary: String,
    pub pass: bool,
}

pub fn is_usage_error(e: &Error) -> bool {
    e.is_config() || matches!(e, Error::Shape(_))
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn read_input(path: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| config_error(format!("cannot read {path}: {e}")))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn pretty(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

/// Writes `summary.json` (when `out` is set) and returns the stdout text.
fn finish(out: Option<&Path>, value: &impl Serialize, pass: bool) -> Result<Outcome> {
    let summary = pretty(value)?;
    if let Some(dir) = out {
        write_file(&dir.join("summary.json"), format!("{summary}\n"))?;
    }
    Ok(Outcome { summary, pass })
}

fn parse_dims<const N: usize>(text: &str, what: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = text
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| config_error(format!("{what} must look like {}, got {text:?}", vec!["N"; N].join("x"))))?;
    parts
        .try_into()
        .map_err(|_| config_error(format!("{what} needs {N} dimensions, got {text:?}")))
}

fn parse_pair(text: &str, what: &str) -> Result<(i64, i64)> {
    let (a, b) = text
        .split_once(',')
        .ok_or_else(|| config_error(format!("{what} must be `rows,cols`, got {text:?}")))?;
    let parse = |s: &str| s.trim().parse::<i64>().map_err(|_| config_error(format!("bad {what} {text:?}")));
    Ok((parse(a)?, parse(b)?))
}

/// Accepts either a full run config (with a `model` key) or a bare model config.
fn load_run(config: &str) -> Result<RunConfig> {
    if config == "defaults" {
        return Ok(RunConfig::desk());
    }
    let bytes = read_input(config)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    if value.get("model").is_some() {
        RunConfig::from_json(&bytes)
    } else {
        Ok(RunConfig {
            model: ModelConfig::from_json(&bytes)?,
            ..RunConfig::desk()
        })
    }
}

pub fn flops(a: FlopsArgs) -> Result<Outcome> {
    let inputs = if a.config == "defaults" {
        CostInputs::desk()
    } else {
        let i: CostInputs = serde_json::from_slice(&read_input(&a.config)?)?;
        i.validate()?;
        i
    };
    let report = compare(&inputs)?;
    let trend = highres_trend(inputs.w, inputs.v, &[4, 6, 8, 12, 16])?;
    let mut rows = vec![CostInputs { grid: None, ..inputs }];
    rows.extend(default_sweep());
    let csv = sweep_csv(&rows)?;
    if let Some(dir) = &a.out {
        write_file(&dir.join("report.json"), format!("{}\n", pretty(&report)?))?;
        write_file(&dir.join("sweep.csv"), &csv)?;
    }
    finish(a.out.as_deref(), &json!({ "report": report, "trend": trend }), true)
}

pub fn mask(a: MaskArgs) -> Result<Outcome> {
    let geom = match &a.config {
        Some(path) => AttentionGeometry::from_json(&read_input(path)?)?,
        None => {
            let [t, h, w] = parse_dims::<3>(&a.grid, "grid")?;
            let grid = Grid::new(t, h, w);
            grid.validate()?;
            let g = match a.branch {
                Branch::High => AttentionGeometry::high_res(grid, a.window, a.frames)?,
                Branch::Low => AttentionGeometry::low_res(grid, a.stride)?,
            };
            if a.non_causal {
                g.non_causal()
            } else {
                g
            }
        }
    };
    let mask = geom.build_dense_mask_capped(a.cap)?;
    let pbm = encode_pbm(&mask)?;
    if let Some(dir) = &a.out {
        write_file(&dir.join("mask.pbm"), &pbm)?;
    }
    let tokens = geom.tokens();
    let summary = json!({
        "geometry": geom,
        "tokens": tokens,
        "pairs": mask.count_true(),
        "pair_bound": geom.pair_bound(),
        "pbm": (tokens <= INLINE_PBM_SIDE).then_some(pbm),
    });
    finish(a.out.as_deref(), &summary, true)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<Outcome> {
    if a.seeds == 0 {
        return Err(config_error("--seeds must be >= 1"));
    }
    let seeds: Vec<u64> = (0..a.seeds).map(|i| a.seed.wrapping_add(i)).collect();
    let report = run_suite(&seeds, a.eps, a.tol)?;
    let pass = report.pass;
    finish(a.out.as_deref(), &report, pass)
}

pub fn train(a: TrainArgs) -> Result<Outcome> {
    let mut run = load_run(&a.config)?;
    run.train.seed = a.seed;
    if let Some(s) = a.steps {
        run.train.steps = s;
    }
    if let Some(lr) = a.lr {
        run.train.lr = lr;
    }
    run.validate()?;
    let resume_from = match &a.resume {
        Some(dir) => Some(load_checkpoint(dir).map_err(|e| match e {
            Error::Io { path, source } => config_error(format!("cannot read {}: {source}", path.display())),
            other => other,
        })?),
        None => None,
    };
    let summary = run_training(
        &run,
        TrainOptions {
            out_dir: Some(a.out.clone()),
            resume_from,
            stop_at: a.stop_at,
            timing: a.timing,
        },
    )?;
    finish(Some(&a.out), &summary, true)
}

fn write_frames(dir: &Path, video: &msc::tensor::Tensor<f32>) -> Result<()> {
    save_video(&dir.join("video"), video)?;
    for (i, img) in render_frames(video)?.into_iter().enumerate() {
        write_file(&dir.join("frames").join(format!("frame_{i:03}.pgm")), img)?;
    }
    Ok(())
}

fn frame_means(video: &msc::tensor::Tensor<f32>) -> Vec<f64> {
    let frames = video.shape()[0];
    let per = video.numel() / frames.max(1);
    video
        .data()
        .chunks(per)
        .map(|f| f.iter().map(|&v| v as f64).sum::<f64>() / per as f64)
        .collect()
}

pub fn sample(a: SampleArgs) -> Result<Outcome> {
    let run = load_run(&a.config)?;
    let (cfg, params) = match &a.checkpoint {
        Some(dir) => {
            let ckpt = load_checkpoint(dir)?;
            (ckpt.config, ckpt.params)
        }
        None => {
            let p = ModelParams::<f32>::init(&run.model, a.seed)?;
            (run.model.clone(), p)
        }
    };
    let sched: NoiseSchedule = run.schedule.build(cfg.diffusion_steps)?;
    let context = match &a.context {
        Some(dir) => Some(load_video(dir)?),
        None => None,
    };
    let frames = a.frames.unwrap_or(cfg.grid.frames);
    let out = sample_autoregressive(&cfg, &params, &sched, frames, context.as_ref(), a.seed)?;
    write_frames(&a.out, &out.video)?;
    let pass = out.audit.future_reads == 0;
    let summary = json!({
        "shape": out.video.shape(),
        "frame_means": frame_means(&out.video),
        "audit": out.audit,
    });
    finish(Some(&a.out), &summary, pass)
}

pub fn snr(a: SnrArgs) -> Result<Outcome> {
    if a.trials < MIN_SNR_TRIALS {
        return Err(config_error(format!("--trials must be >= {MIN_SNR_TRIALS}")));
    }
    let rows = run_snr_experiment(&a.sigmas, &a.rs, a.trials, a.seed)?;
    if let Some(dir) = &a.out {
        let mut csv = String::from(
            "sigma,r,signal,var_expected,var_empirical,var_std_err,gain_expected,gain_empirical,gain_std_err\n",
        );
        for r in &rows {
            let signal = serde_json::to_value(r.signal)?;
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.sigma,
                r.r,
                signal.as_str().unwrap_or_default(),
                r.var_expected,
                r.var_empirical,
                r.var_std_err,
                r.gain_expected,
                r.gain_empirical,
                r.gain_std_err
            ));
        }
        write_file(&dir.join("snr.csv"), csv)?;
    }
    finish(a.out.as_deref(), &json!({ "trials": a.trials, "rows": rows }), true)
}

pub fn audit(a: AuditArgs) -> Result<Outcome> {
    if a.trials == 0 {
        return Err(config_error("--trials must be >= 1"));
    }
    let run = load_run(&a.config)?;
    let (main, control) = audit_with_control(&run.model, a.trials, a.seed)?;
    let pass = main.pass && !control.pass;
    let summary = json!({
        "pass": pass,
        "causal_pass": main.pass,
        "negative_control_failed": !control.pass,
        "max_abs_dev_per_frame": main.max_abs_dev_per_frame,
        "main": main,
        "control": control,
    });
    finish(a.out.as_deref(), &summary, pass)
}

pub fn synth(a: SynthArgs) -> Result<Outcome> {
    let [frames, height, width, channels] = parse_dims::<4>(&a.shape, "shape")?;
    let shape = ClipShape {
        frames,
        height,
        width,
        channels,
    };
    let motion = MotionSpec {
        square: a.square,
        square_velocity: parse_pair(&a.velocity, "velocity")?,
        pan_velocity: parse_pair(&a.pan, "pan")?,
    };
    let video = gen_synthetic_video(shape, motion, a.seed)?;
    write_frames(&a.out, &video)?;
    let summary = json!({
        "shape": video.shape(),
        "motion": motion,
        "frame_means": frame_means(&video),
    });
    finish(Some(&a.out), &summary, true)
}

