use std::sync::Arc;

use msc::attention::{branch_attention_dense, branch_attention_eval, masked_attention, AttentionParams, KeySets};
use msc::geometry::{AttentionGeometry, Grid};
use msc::rng::{Cursor, Stream};
use msc::tensor::{Mask, Tape, Tensor};
use proptest::prelude::*;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut c = Cursor::new(Stream::new(seed));
    Tensor::from_fn(shape.to_vec(), |_| c.normal())
}

fn geometries(grid: Grid) -> Vec<AttentionGeometry> {
    let mut out = Vec::new();
    for w in [1, 3] {
        for v in [1, 2] {
            out.push(AttentionGeometry::high_res(grid, w, v).unwrap());
        }
    }
    for d in [1, 2, 3] {
        out.push(AttentionGeometry::low_res(grid, d).unwrap());
    }
    out
}

#[test]
fn windowed_equals_dense_masked_on_all_small_grids() {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for t in 1..=4 {
        for h in 1..=4 {
            for w in 1..=4 {
                let grid = Grid::new(t, h, w);
                for (gi, geom) in geometries(grid).into_iter().enumerate() {
                    let seed = (t * 100 + h * 10 + w) as u64 * 16 + gi as u64;
                    let x = random(&[1, grid.tokens(), 4], seed);
                    let p = AttentionParams {
                        wq: random(&[4, 4], seed + 1),
                        wk: random(&[4, 4], seed + 2),
                        wv: random(&[4, 4], seed + 3),
                        heads: 2,
                    };
                    let sparse = branch_attention_eval(&x, &p, &geom).unwrap();
                    let dense = branch_attention_dense(&x, &p, &geom.build_dense_mask().unwrap()).unwrap();
                    worst = worst.max(sparse.max_abs_diff(&dense).unwrap());
                    cases += 1;
                }
            }
        }
    }
    assert_eq!(cases, 64 * 7);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn future_keys_receive_exactly_zero_gradient() {
    let grid = Grid::new(4, 3, 3);
    for geom in geometries(grid) {
        let keys = Arc::new(KeySets::from_geometry(&geom).unwrap());
        let s = grid.tokens();
        for q_tok in [0, 10, 20, 35] {
            let qt = grid.coord(q_tok).unwrap().t;
            let mut tape = Tape::<f64>::new();
            let q = tape.param(random(&[1, s, 4], 1));
            let k = tape.param(random(&[1, s, 4], 2));
            let v = tape.param(random(&[1, s, 4], 3));
            let out = tape.attention(q, k, v, keys.clone(), 2).unwrap();
            let sel = tape.constant(Tensor::from_fn([1, s, 4], |i| if i / 4 == q_tok { 1.0 + i as f64 } else { 0.0 }));
            let picked = tape.mul(out, sel).unwrap();
            let loss = tape.sum(picked).unwrap();
            let grads = tape.backward(loss).unwrap();
            for var in [k, v] {
                let g = grads.get(var).unwrap();
                for tok in 0..s {
                    if grid.coord(tok).unwrap().t > qt {
                        assert!(g.data()[tok * 4..tok * 4 + 4].iter().all(|&x| x == 0.0));
                    }
                }
            }
            let gq = grads.get(q).unwrap();
            assert!(gq.data().iter().enumerate().all(|(i, &x)| i / 4 == q_tok || x == 0.0));
        }
    }
}

fn permuted(order: &[usize], x: &Tensor<f64>) -> Tensor<f64> {
    let d = x.shape()[1];
    Tensor::from_fn(x.shape().to_vec(), |i| x.data()[order[i / d] * d + i % d])
}

proptest! {
    #[test]
    fn key_order_does_not_matter(seed in 0u64..1000, perm_seed in 0u64..1000) {
        let s = 6;
        let q = random(&[s, 3], seed);
        let k = random(&[s, 3], seed + 1);
        let v = random(&[s, 3], seed + 2);
        let stream = Stream::new(seed + 3);
        let mask = Mask::from_fn([s, s], |i| i % (s + 1) == 0 || stream.uniform(i as u64) < 0.5);
        let mut order: Vec<usize> = (0..s).collect();
        let mut c = Cursor::new(Stream::new(perm_seed));
        for i in (1..s).rev() {
            order.swap(i, c.below(i as u64 + 1) as usize);
        }
        let mask_p = Mask::from_fn([s, s], |i| mask.at(i / s, order[i % s]));
        let a = masked_attention(&q, &k, &v, &mask).unwrap();
        let b = masked_attention(&q, &permuted(&order, &k), &permuted(&order, &v), &mask_p).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }
}
