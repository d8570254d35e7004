//! SGD-with-momentum training of the denoiser on synthetic clips.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{noisy_batch, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::io::{save_checkpoint, Checkpoint};
use crate::model::{branch_gate, model_forward, predict, FrameTimesteps, ModelConfig, ModelParams};
use crate::rng::Stream;
use crate::synth::{ClipShape, Dataset};
use crate::tensor::{Tape, Tensor};

const DATA_TAG: u64 = 10;
const NOISE_TAG: u64 = 11;
const EVAL_TAG: u64 = 12;

pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::steps")]
    pub steps: u64,
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    /// Rescales the gradient to at most this global norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: Dataset,
    /// Reuse the step-0 batch, noise and timesteps at every step.
    #[serde(default)]
    pub fixed_batch: bool,
    #[serde(default = "defaults::gate_log_every")]
    pub gate_log_every: u64,
    #[serde(default = "defaults::eval_batch")]
    pub eval_batch: usize,
    /// Losses above this, or non-finite losses, abort the run.
    #[serde(default = "defaults::diverge_above")]
    pub diverge_above: f64,
}

mod defaults {
    pub fn steps() -> u64 {
        300
    }
    pub fn batch() -> usize {
        4
    }
    pub fn lr() -> f64 {
        0.05
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn gate_log_every() -> u64 {
        25
    }
    pub fn eval_batch() -> usize {
        8
    }
    pub fn diverge_above() -> f64 {
        1e4
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::config("grad_clip must be > 0"));
        }
        if self.gate_log_every == 0 {
            return Err(Error::config("gate_log_every must be >= 1"));
        }
        Ok(())
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.schedule.build(self.model.diffusion_steps)?;
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let run: Self = serde_json::from_slice(bytes)?;
        run.validate()?;
        Ok(run)
    }

    pub fn clip_shape(&self) -> ClipShape {
        let g = self.model.grid;
        ClipShape {
            frames: g.frames,
            height: g.height,
            width: g.width,
            channels: self.model.in_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub step: u64,
    pub layer: usize,
    pub frame: usize,
    pub timestep: usize,
    pub g_high: f64,
    pub g_low: f64,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step(StepRecord),
    Gate(GateRecord),
    Eval { step: u64, loss: f64 },
}

/// Timesteps spread evenly over the chain, one per token frame, used for
/// gate logging.
pub fn spread_timesteps(frames: usize, steps: usize) -> Result<FrameTimesteps> {
    let ts = (0..frames)
        .map(|f| if frames == 1 { 0 } else { f * (steps - 1) / (frames - 1) })
        .collect();
    FrameTimesteps::new(ts, steps)
}

pub struct Trainer {
    run: RunConfig,
    sched: NoiseSchedule,
    params: ModelParams<f32>,
    momentum: Vec<Tensor<f32>>,
    step: u64,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let params = ModelParams::init(&run.model, run.train.seed)?;
        Self::from_parts(run, params, None, 0)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(run: RunConfig, ckpt: Checkpoint) -> Result<Self> {
        run.validate()?;
        if ckpt.config != run.model {
            return Err(Error::config("checkpoint model config differs from the run config"));
        }
        Self::from_parts(run, ckpt.params, ckpt.momentum, ckpt.step)
    }

    fn from_parts(run: RunConfig, params: ModelParams<f32>, momentum: Option<Vec<Tensor<f32>>>, step: u64) -> Result<Self> {
        let sched = run.schedule.build(run.model.diffusion_steps)?;
        let momentum = match momentum {
            Some(m) => m,
            None => params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        };
        Ok(Self {
            run,
            sched,
            params,
            momentum,
            step,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    fn token_frames(&self) -> Result<usize> {
        Ok(self.run.model.token_grid()?.frames)
    }

    /// One update; the record holds the loss before the update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let t = &self.run.train;
        let data_step = if t.fixed_batch { 0 } else { self.step };
        let root = Stream::new(t.seed);
        let x0 = t.dataset.batch(
            self.run.clip_shape(),
            root.child(DATA_TAG).bits(0),
            data_step * t.batch as u64,
            t.batch,
        )?;
        let noise_seed = root.child(NOISE_TAG).bits(data_step);
        let noisy = noisy_batch(&x0, self.token_frames()?, &self.sched, noise_seed)?;

        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let out = model_forward(&mut tape, &self.run.model, &bound, self.params.slots(), &noisy.x_t, &noisy.ft)?;
        let target = tape.constant(noisy.eps);
        let diff = tape.sub(out.eps, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss_var = tape.mean(sq)?;
        let loss = tape.value(loss_var).data()[0] as f64;
        if !loss.is_finite() || loss > t.diverge_above {
            return Err(Error::Diverged { step: self.step, loss });
        }
        let mut grads = tape.backward(loss_var)?;
        let grads: Vec<Tensor<f32>> = bound
            .vars()
            .iter()
            .map(|&v| grads.take(v).expect("trainable parameters always get gradients"))
            .collect();
        let grad_norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step: self.step, loss });
        }
        let scale = match t.grad_clip {
            Some(c) if grad_norm > c => (c / grad_norm) as f32,
            _ => 1.0,
        };
        let (lr, mu) = (t.lr as f32, t.momentum as f32);
        for ((p, m), g) in self.params.tensors_mut().iter_mut().zip(&mut self.momentum).zip(&grads) {
            for ((pv, mv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
                *mv = mu * *mv + scale * gv;
                *pv -= lr * *mv;
            }
        }
        let record = StepRecord {
            step: self.step,
            loss,
            grad_norm,
            wall_ms: None,
        };
        self.step += 1;
        Ok(record)
    }

    /// Loss on a fixed held-out batch with fixed noise.
    pub fn eval_loss(&self) -> Result<f64> {
        let t = &self.run.train;
        let root = Stream::new(t.seed).child(EVAL_TAG);
        let x0 = t.dataset.batch(self.run.clip_shape(), root.bits(0), 0, t.eval_batch)?;
        let noisy = noisy_batch(&x0, self.token_frames()?, &self.sched, root.bits(1))?;
        let pred = predict(&self.run.model, &self.params, &noisy.x_t, &noisy.ft)?;
        crate::diffusion::mse(&pred, &noisy.eps)
    }

    /// Gate values of every layer for timesteps spread over the chain.
    pub fn gate_records(&self) -> Result<Vec<GateRecord>> {
        let ft = spread_timesteps(self.token_frames()?, self.run.model.diffusion_steps)?;
        let mut out = Vec::new();
        for layer in 0..self.run.model.layers.len() {
            let (gh, gl) = branch_gate(&self.run.model, &self.params, layer, &ft)?;
            for frame in 0..ft.len() {
                out.push(GateRecord {
                    step: self.step,
                    layer,
                    frame,
                    timestep: ft.as_slice()[frame],
                    g_high: gh.data()[frame] as f64,
                    g_low: gl.data()[frame] as f64,
                });
            }
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.run.model.clone(),
            params: self.params.clone(),
            momentum: Some(self.momentum.clone()),
            step: self.step,
        }
    }
}

/// Per layer, the largest difference between any two frames' gates.
pub fn gate_spread(records: &[GateRecord], layers: usize) -> Vec<f64> {
    (0..layers)
        .map(|l| {
            let mut spread = 0.0f64;
            for key in [|r: &GateRecord| r.g_high, |r: &GateRecord| r.g_low] {
                let vals: Vec<f64> = records.iter().filter(|r| r.layer == l).map(key).collect();
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                if !vals.is_empty() {
                    spread = spread.max(hi - lo);
                }
            }
            spread
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    pub resume_from: Option<Checkpoint>,
    /// Stop once this many total steps have run.
    pub stop_at: Option<u64>,
    /// Add wall-clock milliseconds to step records.
    pub timing: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub first_step: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub gate_spread: Vec<f64>,
    /// Checkpoint directory, relative to the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

struct Metrics {
    out: Option<BufWriter<File>>,
}

impl Metrics {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let out = match dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let path = d.join("metrics.jsonl");
                Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
            }
            None => None,
        };
        Ok(Self { out })
    }

    fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        if let Some(w) = &mut self.out {
            let line = serde_json::to_string(rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(w) = &mut self.out {
            w.flush().map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        Ok(())
    }
}

/// Runs (or resumes) training to `run.train.steps`, writing
/// `metrics.jsonl`, `run.json` and a `checkpoint/` directory under
/// `out_dir` when one is given.
pub fn train(run: &RunConfig, opts: TrainOptions) -> Result<TrainSummary> {
    let mut trainer = match opts.resume_from {
        Some(ckpt) => Trainer::resume(run.clone(), ckpt)?,
        None => Trainer::new(run.clone())?,
    };
    let dir = opts.out_dir.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let path = d.join("run.json");
        std::fs::write(&path, serde_json::to_vec_pretty(run)?).map_err(|e| Error::io(&path, e))?;
    }
    let mut metrics = Metrics::open(dir)?;
    let end = opts.stop_at.unwrap_or(run.train.steps).min(run.train.steps);
    let first_step = trainer.step_index();
    let initial_eval_loss = trainer.eval_loss()?;
    metrics.write(&MetricRecord::Eval {
        step: first_step,
        loss: initial_eval_loss,
    })?;
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    while trainer.step_index() < end {
        if trainer.step_index() % run.train.gate_log_every == 0 {
            for g in trainer.gate_records()? {
                metrics.write(&MetricRecord::Gate(g))?;
            }
        }
        let started = Instant::now();
        let mut rec = trainer.step()?;
        if opts.timing {
            rec.wall_ms = Some(started.elapsed().as_millis() as u64);
        }
        if rec.step == first_step {
            initial_loss = rec.loss;
        }
        final_loss = rec.loss;
        metrics.write(&MetricRecord::Step(rec))?;
    }
    let gates = trainer.gate_records()?;
    for g in &gates {
        metrics.write(&MetricRecord::Gate(g.clone()))?;
    }
    let final_eval_loss = trainer.eval_loss()?;
    metrics.write(&MetricRecord::Eval {
        step: trainer.step_index(),
        loss: final_eval_loss,
    })?;
    metrics.finish()?;
    let checkpoint = match dir {
        Some(d) => {
            save_checkpoint(&d.join(CHECKPOINT_DIR), &trainer.checkpoint())?;
            Some(CHECKPOINT_DIR.to_string())
        }
        None => None,
    };
    Ok(TrainSummary {
        steps: trainer.step_index() - first_step,
        first_step,
        initial_loss,
        final_loss,
        initial_eval_loss,
        final_eval_loss,
        gate_spread: gate_spread(&gates, run.model.layers.len()),
        checkpoint,
    })
}
