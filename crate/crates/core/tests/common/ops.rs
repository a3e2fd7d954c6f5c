//! Gradient-check cases for every differentiable tape operation.

use pastn::graph::{adaptive_adjacency, diffusion_conv, Supports};
use pastn::tensor::{Tape, Tensor, Var};
use pastn::tpam::{tpam_forward, TpamParams};

use super::{grad_check, rng, ring, uniform};

fn rand_t(seed: u64, shape: &[usize]) -> Tensor {
    uniform(&mut rng(seed), shape, -2.0, 2.0)
}

/// Uniform in ±[0.2, 2], keeping clear of the kinks of relu and abs.
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor {
    let mut t = uniform(&mut rng(seed), shape, 0.2, 2.0);
    let mut signs = rng(seed + 1000);
    for v in t.data_mut() {
        if rand::Rng::gen_bool(&mut signs, 0.5) {
            *v = -*v;
        }
    }
    t
}

/// `(operation, worst relative error)` for every case.
pub fn op_gradient_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut check = |name: &str, inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var| {
        out.push((name.to_string(), grad_check(inputs, 17, f)));
    };

    let a = rand_t(1, &[3, 4]);
    let b = rand_t(2, &[4]);
    check("add", &[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]).unwrap());
    check("sub", &[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", &[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]).unwrap());
    check("scale", &[a.clone()], &|t, v| t.scale(v[0], -1.7));
    check("tanh", &[a.clone()], &|t, v| t.tanh(v[0]));
    check("sigmoid", &[a.clone()], &|t, v| t.sigmoid(v[0]));
    let k = away_from_zero(3, &[3, 4]);
    check("relu", &[k.clone()], &|t, v| t.relu(v[0]));
    check("abs", &[k], &|t, v| t.abs(v[0]));
    check("sum", &[a.clone()], &|t, v| t.sum(v[0]));
    check("mean", &[a], &|t, v| t.mean(v[0]));

    check("dropout", &[rand_t(4, &[5, 6])], &|t, v| {
        let mut r = pastn::rng::derive_rng(3, "mask");
        t.dropout(v[0], 0.4, Some(&mut r)).unwrap()
    });

    check("matmul", &[rand_t(5, &[3, 4]), rand_t(6, &[4, 2])], &|t, v| t.matmul(v[0], v[1]).unwrap());
    check("linear", &[rand_t(7, &[2, 3, 4]), rand_t(8, &[4, 5])], &|t, v| t.linear(v[0], v[1]).unwrap());
    check("batch_matmul", &[rand_t(9, &[2, 3, 4]), rand_t(10, &[2, 4, 2])], &|t, v| {
        t.batch_matmul(v[0], v[1], false).unwrap()
    });
    check("batch_matmul_t", &[rand_t(11, &[2, 3, 4]), rand_t(12, &[2, 5, 4])], &|t, v| {
        t.batch_matmul(v[0], v[1], true).unwrap()
    });
    check("propagate", &[rand_t(13, &[3, 3]), rand_t(14, &[2, 3, 2, 2])], &|t, v| t.propagate(v[0], v[1]).unwrap());
    // large enough to take the gemm path
    check("matmul_large", &[rand_t(15, &[20, 17]), rand_t(16, &[17, 19])], &|t, v| t.matmul(v[0], v[1]).unwrap());

    for (d, k) in [(1, 2), (2, 2), (1, 3), (3, 2)] {
        check(&format!("conv_time d{d} k{k}"), &[rand_t(20 + d as u64, &[2, 3, 9, 3]), rand_t(30 + k as u64, &[4, 3, k])], &|t, v| {
            t.conv_time(v[0], v[1], d).unwrap()
        });
        check(&format!("dilated_causal_conv d{d} k{k}"), &[rand_t(40, &[3, 8]), rand_t(41, &[2, 3, k])], &|t, v| {
            t.dilated_causal_conv(v[0], v[1], d).unwrap()
        });
    }

    let a = rand_t(50, &[2, 3, 4]);
    check("concat", &[a.clone(), rand_t(51, &[2, 2, 4])], &|t, v| t.concat(&[v[0], v[1]], 1).unwrap());
    check("slice", &[a.clone()], &|t, v| t.slice(v[0], 2, 1, 2).unwrap());
    check("split", &[a.clone()], &|t, v| {
        let parts = t.split(v[0], 2, 2).unwrap();
        let twice = t.scale(parts[1], 2.0);
        t.mul(parts[0], twice).unwrap()
    });
    check("permute", &[a.clone()], &|t, v| t.permute(v[0], &[2, 0, 1]).unwrap());
    check("transpose", &[rand_t(52, &[3, 5])], &|t, v| t.transpose(v[0]).unwrap());
    check("reshape", &[a], &|t, v| t.reshape(v[0], &[6, 4]).unwrap());

    let a = rand_t(60, &[3, 5]);
    check("softmax_last", &[a.clone()], &|t, v| t.softmax(v[0], 1).unwrap());
    check("softmax_first", &[a.clone()], &|t, v| t.softmax(v[0], 0).unwrap());
    check("layer_norm", &[a, rand_t(61, &[5]), rand_t(62, &[5])], &|t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });

    let bundle = ring(4);
    let mut inputs = vec![rand_t(70, &[4, 3]), rand_t(71, &[4, 3]), rand_t(72, &[1, 4, 3, 2])];
    for i in 0..9 {
        inputs.push(rand_t(80 + i, &[2, 2]));
    }
    check("diffusion_conv", &inputs, &|t, v| {
        let adaptive = adaptive_adjacency(t, v[0], v[1]).unwrap();
        let s = Supports::bind(t, &bundle, adaptive);
        diffusion_conv(t, v[2], &s, &v[3..], 2).unwrap()
    });

    let mut inputs = vec![rand_t(90, &[2, 2, 4, 4])];
    for i in 0..6 {
        inputs.push(rand_t(91 + i, if i < 4 { &[4, 4] } else { &[4] }));
    }
    check("tpam", &inputs, &|t, v| {
        let p = TpamParams { query: v[1], key: v[2], value: v[3], output: v[4], gamma: v[5], beta: v[6], heads: 2 };
        tpam_forward(t, v[0], &p).unwrap().output
    });
    out
}
