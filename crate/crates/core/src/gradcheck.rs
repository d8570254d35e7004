//! Analytic-vs-finite-difference checks for every tape op and for the full
//! model, run at `f64`.

use std::sync::Arc;

use serde::Serialize;

use crate::attention::KeySets;
use crate::error::Result;
use crate::geometry::{AttentionGeometry, Grid};
use crate::model::{model_forward, FrameTimesteps, ModelConfig, ModelParams};
use crate::rng::{Cursor, Stream};
use crate::tensor::{finite_diff_grad, max_rel_err, Mask, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
    pub max_rel_err: f64,
    pub pass: bool,
}

type Builder = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn random(cur: &mut Cursor, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| std * cur.normal())
}

/// Worst relative error of `d/dx_i sum(f(x) ⊙ R)` over all inputs, where `R`
/// is a fixed random probe.
fn check_op(build: &Builder, inputs: &[Tensor<f64>], probe_seed: u64, eps: f64) -> Result<f64> {
    let run = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let y = build(tape, vars)?;
        let shape = tape.shape(y).to_vec();
        let mut cur = Cursor::new(Stream::new(probe_seed).child(99));
        let r = tape.constant(random(&mut cur, &shape, 1.0));
        let prod = tape.mul(y, r)?;
        tape.sum(prod)
    };

    let mut tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = run(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let f = |x: &Tensor<f64>| {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| t.constant(if i == j { x.clone() } else { v.clone() }))
                .collect();
            let l = run(&mut t, &vars).expect("forward succeeded once already");
            t.value(l).data()[0]
        };
        let numeric = finite_diff_grad(f, input, eps)?;
        let analytic = grads.get(vars[i]).expect("every input is a parameter");
        worst = worst.max(max_rel_err(analytic, &numeric)?);
    }
    Ok(worst)
}

/// Named op cases: builder plus inputs for a given seed.
fn op_cases(seed: u64) -> Vec<(&'static str, Box<Builder>, Vec<Tensor<f64>>)> {
    let mut c = Cursor::new(Stream::new(seed).child(1));
    let mut r = |shape: &[usize]| random(&mut c, shape, 1.0);
    let geom = AttentionGeometry::high_res(Grid::new(3, 3, 3), 3, 2).expect("static");
    let keys = Arc::new(KeySets::from_geometry(&geom).expect("static"));
    let low = AttentionGeometry::low_res(Grid::new(3, 2, 2), 2).expect("static");
    let low_keys = Arc::new(KeySets::from_geometry(&low).expect("static"));
    let mask = Arc::new(Mask::from_fn([4, 5], |i| i % 5 != 3 || i / 5 == 0));
    let gather_index: Arc<[usize]> = (0..12).map(|i| (i * 7 + 3) % 12).chain([0, 0, 5]).collect();

    vec![
        ("matmul", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.matmul(v[0], v[1])) as Box<Builder>, vec![r(&[2, 3, 4]), r(&[4, 5])]),
        ("transpose", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.transpose(v[0])), vec![r(&[3, 4])]),
        ("add", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.add(v[0], v[1])), vec![r(&[3, 2]), r(&[3, 2])]),
        ("sub", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.sub(v[0], v[1])), vec![r(&[3, 2]), r(&[3, 2])]),
        ("mul", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mul(v[0], v[1])), vec![r(&[3, 2]), r(&[3, 2])]),
        ("add_bias", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.add_bias(v[0], v[1])), vec![r(&[2, 3, 4]), r(&[4])]),
        ("scale", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.scale(v[0], -1.7)), vec![r(&[5])]),
        ("sum", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.sum(v[0])), vec![r(&[2, 3])]),
        ("mean", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mean(v[0])), vec![r(&[2, 3])]),
        ("gelu", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.gelu(v[0])), vec![r(&[7])]),
        ("silu", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.silu(v[0])), vec![r(&[7])]),
        ("sigmoid", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.sigmoid(v[0])), vec![r(&[7])]),
        ("layer_norm", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.layer_norm(v[0], v[1], v[2])), vec![r(&[3, 5]), r(&[5]), r(&[5])]),
        ("masked_softmax", Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.masked_softmax(v[0], &mask)), vec![r(&[4, 5])]),
        ("avg_pool2d", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.avg_pool2d(v[0], 2)), vec![r(&[2, 4, 4, 3])]),
        ("upsample_nearest2d", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.upsample_nearest2d(v[0], 2)), vec![r(&[2, 2, 2, 3])]),
        ("slice_last", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.slice_last(v[0], 1, 2)), vec![r(&[3, 4])]),
        ("concat_last", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.concat_last(v[0], v[1])), vec![r(&[3, 2]), r(&[3, 3])]),
        ("frame_scale", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.frame_scale(v[0], v[1])), vec![r(&[2, 3, 2, 2]), r(&[2, 3])]),
        ("reshape", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.reshape(v[0], [6, 2])), vec![r(&[3, 4])]),
        ("gather", Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.gather(v[0], gather_index.clone(), [15])), vec![r(&[3, 4])]),
        ("attention_high_res", Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.attention(v[0], v[1], v[2], keys.clone(), 2)), vec![r(&[2, 27, 4]), r(&[2, 27, 4]), r(&[2, 27, 4])]),
        ("attention_low_res", Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.attention(v[0], v[1], v[2], low_keys.clone(), 1)), vec![r(&[1, 12, 3]), r(&[1, 12, 3]), r(&[1, 12, 3])]),
    ]
}

/// The two-layer configuration used for whole-model checks.
pub fn model_check_config() -> ModelConfig {
    ModelConfig::tiny()
}

/// Gradient of `sum(model(x) ⊙ R)` with respect to every parameter.
pub fn check_model(cfg: &ModelConfig, seed: u64, eps: f64) -> Result<f64> {
    let params = ModelParams::<f64>::random(cfg, seed, 0.4)?;
    let grid = cfg.token_grid()?;
    let g = cfg.grid;
    let mut cur = Cursor::new(Stream::new(seed).child(2));
    let x = random(&mut cur, &[1, g.frames, g.height, g.width, cfg.in_channels], 1.0);
    let ft = vec![FrameTimesteps::new(
        (0..grid.frames).map(|_| cur.below(cfg.diffusion_steps as u64) as usize).collect(),
        cfg.diffusion_steps,
    )?];
    let probe = random(&mut cur, x.shape(), 1.0);

    let loss_of = |tape: &mut Tape<f64>, p: &ModelParams<f64>, trainable: bool| -> Result<(Var, Vec<Var>)> {
        let bound = p.bind(tape, trainable);
        let out = model_forward(tape, cfg, &bound, p.slots(), &x, &ft)?;
        let r = tape.constant(probe.clone());
        let prod = tape.mul(out.eps, r)?;
        Ok((tape.sum(prod)?, bound.vars().to_vec()))
    };

    let mut tape = Tape::new().with_finite_checks(true);
    let (loss, vars) = loss_of(&mut tape, &params, true)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (slot, var) in vars.iter().enumerate() {
        let f = |t: &Tensor<f64>| {
            let mut p = params.clone();
            *p.get_mut(slot) = t.clone();
            let mut tape = Tape::new();
            let (l, _) = loss_of(&mut tape, &p, false).expect("forward succeeded once already");
            tape.value(l).data()[0]
        };
        let numeric = finite_diff_grad(f, params.get(slot), eps)?;
        worst = worst.max(max_rel_err(grads.get(*var).expect("trainable"), &numeric)?);
    }
    Ok(worst)
}

/// Runs every op check and the whole-model check for each seed.
pub fn run_suite(seeds: &[u64], eps: f64, tolerance: f64) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    for &seed in seeds {
        for (name, build, inputs) in op_cases(seed) {
            let err = check_op(build.as_ref(), &inputs, seed, eps)?;
            checks.push(CheckResult {
                name: name.to_string(),
                seed,
                max_rel_err: err,
            });
        }
        checks.push(CheckResult {
            name: "msc_model".into(),
            seed,
            max_rel_err: check_model(&model_check_config(), seed, eps)?,
        });
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        eps,
        tolerance,
        pass: max_rel_err < tolerance,
        checks,
        max_rel_err,
    })
}
