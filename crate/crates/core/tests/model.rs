use msc::geometry::Grid;
use msc::model::{
    branch_gate, layer_key_sets, model_forward, msc_layer_forward, predict, timestep_inputs, FrameTimesteps,
    LayerConfig, ModelConfig, ModelParams, Patch,
};
use msc::rng::{Cursor, Stream};
use msc::attention::masked_attention;
use msc::tensor::{layer_norm, matmul, Mask, Tape, Tensor};
use proptest::prelude::*;

fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut c = Cursor::new(Stream::new(seed));
    Tensor::from_fn(shape.to_vec(), |_| c.normal())
}

fn run_layer(cfg: &ModelConfig, params: &ModelParams<f64>, layer: usize, x: &Tensor<f64>, ft: &[FrameTimesteps]) -> Tensor<f64> {
    let lc = &cfg.layers[layer];
    let grid = Grid::new(x.shape()[1], x.shape()[2], x.shape()[3]);
    let keys = layer_key_sets(lc, grid, cfg.causal).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let temb = timestep_inputs(&mut tape, ft, cfg.t_embed_dim);
    let xv = tape.constant(x.clone());
    let (y, _) = msc_layer_forward(&mut tape, xv, temb, lc, &params.slots().layers[layer], &bound, &keys).unwrap();
    tape.value(y).clone()
}

fn layer_input(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    let g = cfg.token_grid().unwrap();
    random(seed, &[1, g.frames, g.height, g.width, cfg.hidden])
}

fn mixed_steps(cfg: &ModelConfig, seed: u64) -> Vec<FrameTimesteps> {
    let frames = cfg.token_grid().unwrap().frames;
    let mut c = Cursor::new(Stream::new(seed).child(5));
    vec![FrameTimesteps::new(
        (0..frames).map(|_| c.below(cfg.diffusion_steps as u64) as usize).collect(),
        cfg.diffusion_steps,
    )
    .unwrap()]
}

#[test]
fn zero_parameters_give_residual_identity() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::zeros(&cfg).unwrap();
    let x = layer_input(&cfg, 1);
    let ft = mixed_steps(&cfg, 1);
    for layer in 0..cfg.layers.len() {
        assert!(run_layer(&cfg, &params, layer, &x, &ft).bit_eq(&x));
    }
}

#[test]
fn fresh_initialization_is_residual_identity_per_layer() {
    // The FFN output matrix is the only random tensor on the residual path.
    let cfg = ModelConfig::tiny();
    let mut params = ModelParams::<f64>::init(&cfg, 4).unwrap();
    let ls = params.slots().layers[0];
    *params.get_mut(ls.ffn_w2) = Tensor::zeros(params.get(ls.ffn_w2).shape().to_vec());
    let x = layer_input(&cfg, 2);
    assert!(run_layer(&cfg, &params, 0, &x, &mixed_steps(&cfg, 2)).bit_eq(&x));
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// A plain frame-causal transformer layer: one attention over all `h`
/// channels with block-diagonal projections, per-frame channel scaling in
/// place of the two gates, then the FFN.
fn reference_layer(
    x: &Tensor<f64>,
    p: &ModelParams<f64>,
    heads: usize,
    gates: (&Tensor<f64>, &Tensor<f64>),
) -> Tensor<f64> {
    let ls = p.slots().layers[0];
    let &[_, t, hh, ww, h] = x.shape() else { unreachable!() };
    let s = t * hh * ww;
    let half = h / 2;
    let block = |a: usize, b: usize| {
        let (a, b) = (p.get(a), p.get(b));
        Tensor::from_fn([h, h], |i| {
            let (r, c) = (i / h, i % h);
            match (r < half, c < half) {
                (true, true) => a.data()[r * half + c],
                (false, false) => b.data()[(r - half) * half + c - half],
                _ => 0.0,
            }
        })
    };
    let wq = block(ls.high.wq, ls.low.wq);
    let wk = block(ls.high.wk, ls.low.wk);
    let wv = block(ls.high.wv, ls.low.wv);

    let x2 = x.clone().reshape([s, h]).unwrap();
    let n = layer_norm(&x2, p.get(ls.norm1_gamma), p.get(ls.norm1_beta)).unwrap();
    let (q, k, v) = (matmul(&n, &wq).unwrap(), matmul(&n, &wk).unwrap(), matmul(&n, &wv).unwrap());
    let mask = Mask::from_fn([s, s], |i| (i % s) / (hh * ww) <= (i / s) / (hh * ww));
    let hd = h / heads;
    let mut cat = vec![0.0; s * h];
    for head in 0..heads {
        let cols = |m: &Tensor<f64>| Tensor::from_fn([s, hd], |i| m.data()[(i / hd) * h + head * hd + i % hd]);
        let o = masked_attention(&cols(&q), &cols(&k), &cols(&v), &mask).unwrap();
        for row in 0..s {
            for c in 0..hd {
                let ch = head * hd + c;
                let frame = row / (hh * ww);
                let g = if ch < half { gates.0.data()[frame] } else { gates.1.data()[frame] };
                cat[row * h + ch] = g * o.data()[row * hd + c];
            }
        }
    }
    let cat = Tensor::new([s, h], cat).unwrap();
    let proj = matmul(&cat, p.get(ls.out_weight)).unwrap();
    let bo = p.get(ls.out_bias).data();
    let y = Tensor::from_fn([s, h], |i| x2.data()[i] + proj.data()[i] + bo[i % h]);
    let n2 = layer_norm(&y, p.get(ls.norm2_gamma), p.get(ls.norm2_beta)).unwrap();
    let f = matmul(&n2, p.get(ls.ffn_w1)).unwrap();
    let b1 = p.get(ls.ffn_b1).data();
    let width = b1.len();
    let f = Tensor::from_fn([s, width], |i| gelu(f.data()[i] + b1[i % width]));
    let f = matmul(&f, p.get(ls.ffn_w2)).unwrap();
    let b2 = p.get(ls.ffn_b2).data();
    Tensor::from_fn(x.shape().to_vec(), |i| y.data()[i] + f.data()[i] + b2[i % h])
}

#[test]
fn full_windows_without_pooling_match_a_plain_causal_layer() {
    let lc = LayerConfig {
        hidden: 8,
        heads_high: 2,
        heads_low: 2,
        window: 3,
        frames: 3,
        down: 1,
        stride: 1,
        ffn_mult: 2,
    };
    let cfg = ModelConfig {
        hidden: 8,
        layers: vec![lc],
        grid: Grid::new(3, 3, 3),
        in_channels: 2,
        patch: Patch::default(),
        t_embed_dim: 4,
        gate_hidden: 3,
        diffusion_steps: 10,
        causal: true,
    };
    cfg.validate().unwrap();
    for seed in 0..4 {
        let params = ModelParams::<f64>::random(&cfg, seed, 0.5).unwrap();
        let x = layer_input(&cfg, 10 + seed);
        let ft = mixed_steps(&cfg, seed);
        let gates = branch_gate(&cfg, &params, 0, &ft[0]).unwrap();
        let got = run_layer(&cfg, &params, 0, &x, &ft);
        let want = reference_layer(&x, &params, 4, (&gates.0, &gates.1));
        let diff = got.max_abs_diff(&want).unwrap();
        assert!(diff < 1e-10, "seed {seed}: {diff}");
    }
}

#[test]
fn layer_perturbation_only_moves_later_frames() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::random(&cfg, 7, 0.5).unwrap();
    let x = layer_input(&cfg, 3);
    let ft = mixed_steps(&cfg, 3);
    let g = cfg.token_grid().unwrap();
    let per_frame = g.frame_tokens() * cfg.hidden;
    for layer in 0..cfg.layers.len() {
        let base = run_layer(&cfg, &params, layer, &x, &ft);
        for t0 in 0..g.frames {
            let mut x2 = x.clone();
            for v in &mut x2.data_mut()[t0 * per_frame..(t0 + 1) * per_frame] {
                *v += 0.75;
            }
            let out = run_layer(&cfg, &params, layer, &x2, &ft);
            let split = t0 * per_frame;
            assert_eq!(&out.data()[..split], &base.data()[..split], "layer {layer}, t0 {t0}");
            assert_ne!(&out.data()[split..split + per_frame], &base.data()[split..split + per_frame]);
        }
    }
}

#[test]
fn zeroing_the_low_branch_leaves_the_high_contribution_intact() {
    // With the output projection's low-half rows zeroed, the layer output can
    // only depend on the low branch through leakage into the high half.
    let cfg = ModelConfig::tiny();
    let mut params = ModelParams::<f64>::random(&cfg, 11, 0.5).unwrap();
    let ls = params.slots().layers[1];
    let h = cfg.hidden;
    let wo = params.get_mut(ls.out_weight);
    for v in &mut wo.data_mut()[(h / 2) * h..] {
        *v = 0.0;
    }
    let x = layer_input(&cfg, 5);
    let ft = mixed_steps(&cfg, 5);
    let with_low = run_layer(&cfg, &params, 1, &x, &ft);
    let mut silenced = params.clone();
    for slot in [ls.low.wq, ls.low.wk, ls.low.wv] {
        let shape = silenced.get(slot).shape().to_vec();
        *silenced.get_mut(slot) = Tensor::zeros(shape);
    }
    assert!(run_layer(&cfg, &silenced, 1, &x, &ft).bit_eq(&with_low));

    let mut unmasked = ModelParams::<f64>::random(&cfg, 11, 0.5).unwrap();
    let a = run_layer(&cfg, &unmasked, 1, &x, &ft);
    *unmasked.get_mut(ls.low.wv) = Tensor::zeros(vec![h / 2, h / 2]);
    assert!(!run_layer(&cfg, &unmasked, 1, &x, &ft).bit_eq(&a));
}

#[test]
fn gates_start_at_one_half() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let ft = mixed_steps(&cfg, 0);
    for layer in 0..cfg.layers.len() {
        let (gh, gl) = branch_gate(&cfg, &params, layer, &ft[0]).unwrap();
        assert_eq!(gh.shape(), [ft[0].len()]);
        assert_eq!(gl.shape(), [ft[0].len()]);
        assert!(gh.data().iter().chain(gl.data()).all(|&g| g == 0.5));
    }
}

#[test]
fn gates_are_per_frame_functions() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::random(&cfg, 2, 1.0).unwrap();
    let n = cfg.diffusion_steps;
    let a = FrameTimesteps::new(vec![3, 7, 1], n).unwrap();
    let b = FrameTimesteps::new(vec![9, 7, 0], n).unwrap();
    let (ah, al) = branch_gate(&cfg, &params, 0, &a).unwrap();
    let (bh, bl) = branch_gate(&cfg, &params, 0, &b).unwrap();
    assert_eq!(ah.data()[1], bh.data()[1]);
    assert_eq!(al.data()[1], bl.data()[1]);
    assert_ne!(ah.data()[0], bh.data()[0]);
    assert!(ah.data().iter().chain(al.data()).all(|&g| g > 0.0 && g < 1.0));
    let bad = FrameTimesteps::new(vec![0, n, 0], n);
    assert!(bad.is_err());
}

fn video(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    let g = cfg.grid;
    random(seed, &[1, g.frames, g.height, g.width, cfg.in_channels])
}

#[test]
fn model_output_matches_input_shape() {
    let mut cfg = ModelConfig::tiny();
    cfg.grid = Grid::new(4, 4, 4);
    cfg.patch = Patch { spatial: 2, temporal: 2 };
    cfg.layers.iter_mut().for_each(|l| {
        l.window = 2;
        l.down = 1;
    });
    cfg.validate().unwrap();
    let params = ModelParams::<f64>::random(&cfg, 0, 0.3).unwrap();
    let x = video(&cfg, 0);
    let ft = vec![FrameTimesteps::new(vec![1, 8], cfg.diffusion_steps).unwrap()];
    let out = predict(&cfg, &params, &x, &ft).unwrap();
    assert_eq!(out.shape(), x.shape());
    assert!(predict(&cfg, &params, &x, &[]).is_err());
    let wrong = random(0, &[1, 4, 4, 2, 2]);
    assert!(predict(&cfg, &params, &wrong, &ft).is_err());
}

#[test]
fn model_is_frame_causal_end_to_end() {
    let cfg = ModelConfig::tiny();
    let g = cfg.grid;
    let per_frame = g.height * g.width * cfg.in_channels;
    for seed in 0..3 {
        let params = ModelParams::<f64>::random(&cfg, seed, 0.5).unwrap();
        let x = video(&cfg, 100 + seed);
        let ft = mixed_steps(&cfg, seed);
        let base = predict(&cfg, &params, &x, &ft).unwrap();
        for t in 0..g.frames - 1 {
            let mut x2 = x.clone();
            let noise = random(200 + seed, &[per_frame * (g.frames - t - 1)]);
            for (v, n) in x2.data_mut()[(t + 1) * per_frame..].iter_mut().zip(noise.data()) {
                *v = *n;
            }
            let out = predict(&cfg, &params, &x2, &ft).unwrap();
            let keep = (t + 1) * per_frame;
            assert_eq!(&out.data()[..keep], &base.data()[..keep], "seed {seed}, t {t}");
        }
    }
}

#[test]
fn a_prefix_clip_reproduces_the_leading_frames() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::random(&cfg, 9, 0.5).unwrap();
    let x = video(&cfg, 9);
    let ft = mixed_steps(&cfg, 9);
    let full = predict(&cfg, &params, &x, &ft).unwrap();
    let g = cfg.grid;
    let per_frame = g.height * g.width * cfg.in_channels;
    let prefix = Tensor::new([1, 2, g.height, g.width, cfg.in_channels], x.data()[..2 * per_frame].to_vec()).unwrap();
    let ft2 = vec![FrameTimesteps::new(ft[0].as_slice()[..2].to_vec(), cfg.diffusion_steps).unwrap()];
    let short = predict(&cfg, &params, &prefix, &ft2).unwrap();
    assert_eq!(short.data(), &full.data()[..2 * per_frame]);
}

#[test]
fn zero_depth_model_is_a_normalized_linear_map_of_the_embedding() {
    let mut cfg = ModelConfig::tiny();
    cfg.layers.clear();
    cfg.validate().unwrap();
    let params = ModelParams::<f64>::random(&cfg, 1, 0.5).unwrap();
    let x = video(&cfg, 1);
    let ft = mixed_steps(&cfg, 1);
    let out = predict(&cfg, &params, &x, &ft).unwrap();

    let slots = params.slots();
    let g = cfg.grid;
    let s = g.frames * g.height * g.width;
    let x2 = x.clone().reshape([s, cfg.in_channels]).unwrap();
    let e = matmul(&x2, params.get(slots.embed_weight)).unwrap();
    let pos = msc::model::position_embedding::<f64>(g, cfg.hidden);
    let eb = params.get(slots.embed_bias).data();
    let h = cfg.hidden;
    let e = Tensor::from_fn([s, h], |i| e.data()[i] + eb[i % h] + pos.data()[i]);
    let n = layer_norm(&e, params.get(slots.final_gamma), params.get(slots.final_beta)).unwrap();
    let y = matmul(&n, params.get(slots.head_weight)).unwrap();
    let hb = params.get(slots.head_bias).data();
    let c = cfg.in_channels;
    let want = Tensor::from_fn(x.shape().to_vec(), |i| y.data()[i] + hb[i % c]);
    assert!(out.max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn model_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let err = msc::gradcheck::check_model(&cfg, 21, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn forward_reports_gates_for_every_layer() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = video(&cfg, 0).cast::<f32>();
    let ft = vec![mixed_steps(&cfg, 0)[0].clone(); 1];
    let out = model_forward(&mut tape, &cfg, &bound, params.slots(), &x, &ft).unwrap();
    assert_eq!(out.gates.len(), cfg.layers.len());
    assert_eq!(tape.shape(out.gates[0].high), [1, cfg.grid.frames]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn causality_holds_for_random_parameters(seed in 0u64..10_000, t in 0usize..2, scale in 0.1f64..2.0) {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::<f64>::random(&cfg, seed, scale).unwrap();
        let x = video(&cfg, seed ^ 0xabc);
        let ft = mixed_steps(&cfg, seed);
        let base = predict(&cfg, &params, &x, &ft).unwrap();
        let per_frame = cfg.grid.height * cfg.grid.width * cfg.in_channels;
        let mut x2 = x.clone();
        x2.data_mut()[(t + 1) * per_frame] += 1.0;
        let out = predict(&cfg, &params, &x2, &ft).unwrap();
        prop_assert_eq!(&out.data()[..(t + 1) * per_frame], &base.data()[..(t + 1) * per_frame]);
    }
}
