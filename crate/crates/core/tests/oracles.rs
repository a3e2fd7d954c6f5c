mod common;

use common::{attention_oracle, conv_oracle, diffusion_oracle, rng, spae_oracle, uniform};
use pastn::graph::{diffusion_conv, Supports};
use pastn::spae::{SpaeInit, SpaeTable};
use pastn::tensor::{Tape, Tensor};
use pastn::tpam::{multi_head_attention, qkv_project, TpamParams};
use rand::Rng;

#[test]
fn dilated_conv_is_bit_exact() {
    let mut r = rng(1);
    for case in 0..40 {
        let c_in = r.gen_range(1..5);
        let c_out = r.gen_range(1..5);
        let k = r.gen_range(1..4);
        let d = r.gen_range(1..4);
        let t = d * (k - 1) + r.gen_range(1..8);
        let x = uniform(&mut r, &[c_in, t], -2.0, 2.0);
        let f = uniform(&mut r, &[c_out, c_in, k], -2.0, 2.0);
        let mut tape = Tape::new();
        let (xv, fv) = (tape.constant(x.clone()), tape.constant(f.clone()));
        let y = tape.dilated_causal_conv(xv, fv, d).unwrap();
        assert_eq!(tape.value(y).data(), conv_oracle(&x, &f, d).data(), "case {case}");
    }
}

#[test]
fn diffusion_matches_matrix_powers() {
    let mut r = rng(2);
    for depth in 0..=3 {
        for _ in 0..5 {
            let n = r.gen_range(2..7);
            let c = r.gen_range(1..4);
            let m = r.gen_range(1..4);
            let ops = [
                uniform(&mut r, &[n, n], 0.0, 1.0),
                uniform(&mut r, &[n, n], 0.0, 1.0),
                uniform(&mut r, &[n, n], 0.0, 1.0),
            ];
            let weights: Vec<Tensor> = (0..3 * (depth + 1)).map(|_| uniform(&mut r, &[c, m], -1.0, 1.0)).collect();
            let x = uniform(&mut r, &[n, c], -2.0, 2.0);
            let want = diffusion_oracle(&x, &ops, &weights, depth);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone().reshape(vec![1, n, 1, c]).unwrap());
            let s = Supports {
                forward: tape.constant(ops[0].clone()),
                backward: tape.constant(ops[1].clone()),
                adaptive: tape.constant(ops[2].clone()),
            };
            let wv: Vec<_> = weights.iter().map(|w| tape.constant(w.clone())).collect();
            let z = diffusion_conv(&mut tape, xv, &s, &wv, depth).unwrap();
            let got = tape.value(z).clone().reshape(vec![n, m]).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-10, "depth {depth}: {}", got.max_abs_diff(&want));
        }
    }
}

#[test]
fn attention_matches_scalar_loops() {
    let mut r = rng(3);
    for _ in 0..30 {
        let t = r.gen_range(1..=4);
        let heads = r.gen_range(1..=2);
        let d = heads * r.gen_range(1..=3);
        let x = uniform(&mut r, &[t, d], -2.0, 2.0);
        let w: Vec<Tensor> = (0..4).map(|_| uniform(&mut r, &[d, d], -1.0, 1.0)).collect();
        let (want, want_maps) = attention_oracle(&x, &w[0], &w[1], &w[2], &w[3], heads);
        let mut tape = Tape::new();
        let p = TpamParams {
            query: tape.constant(w[0].clone()),
            key: tape.constant(w[1].clone()),
            value: tape.constant(w[2].clone()),
            output: tape.constant(w[3].clone()),
            gamma: tape.constant(Tensor::ones(vec![d])),
            beta: tape.constant(Tensor::zeros(vec![d])),
            heads,
        };
        let xv = tape.constant(x);
        let (q, k, v) = qkv_project(&mut tape, xv, &p).unwrap();
        let att = multi_head_attention(&mut tape, q, k, v, &p).unwrap();
        assert!(tape.value(att.output).max_abs_diff(&want) < 1e-12);
        for (m, wm) in att.maps.iter().zip(&want_maps) {
            assert!(tape.value(*m).max_abs_diff(wm) < 1e-12);
        }
    }
}

#[test]
fn sinusoid_table_matches_reference() {
    for (n, d) in [(1000, 64), (1000, 7), (17, 4), (3, 1)] {
        let t = SpaeTable::init(n, d, SpaeInit::Sinusoidal, 0).table;
        let mut worst = 0.0f64;
        for i in 0..n {
            for k in 0..d {
                worst = worst.max((t.get(&[i, k]) - spae_oracle(i, k, d)).abs());
            }
        }
        assert!(worst < 1e-12, "n {n}, d {d}: {worst:e}");
    }
}

#[test]
fn spec_level_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = tape.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]));
    let p = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(p).data(), &[17.0, 39.0]);
    let s = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let sm = tape.softmax(s, 0).unwrap();
    for (v, w) in tape.value(sm).data().iter().zip([0.09003, 0.24473, 0.66524]) {
        assert!((v - w).abs() < 1e-5);
    }
    let x = tape.constant(Tensor::from_vec(vec![0.0, 2.0, 4.0]));
    let g = tape.constant(Tensor::ones(vec![3]));
    let z = tape.constant(Tensor::zeros(vec![3]));
    let ln = tape.layer_norm(x, g, z, 0.0).unwrap();
    for (v, w) in tape.value(ln).data().iter().zip([-1.22474, 0.0, 1.22474]) {
        assert!((v - w).abs() < 1e-5);
    }
}
