//! Independent reference implementations shared by the integration tests and
//! the acceptance target. Nothing here calls into the tape except to read the
//! value under test.
#![allow(dead_code)]

pub mod ops;

use pastn::graph::{Edge, GraphBundle};
use pastn::model::{forward, Bound, ModelConfig, ModelParams, Mode};
use pastn::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Symmetric relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor for gradient comparisons.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

/// Worst relative error between tape gradients and central differences.
///
/// `f` receives a fresh tape and leaf handles for `inputs` and must return a tensor
/// output; it is reduced to a scalar by a fixed random weighting.
pub fn grad_check<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let mut r = rng(seed ^ 0x5eed);
        uniform(&mut r, &shape, -1.0, 1.0)
    };
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().requiring_grad())).collect();
    let out = f(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric, GRAD_FLOOR));
        }
    }
    worst
}

/// `out[co][t'] = Σ_s Σ_ci f[co][ci][s] · x[ci][t' + r − d·s]`, summed in that order.
pub fn conv_oracle(x: &Tensor, f: &Tensor, d: usize) -> Tensor {
    let (c_in, t) = (x.shape()[0], x.shape()[1]);
    let (c_out, k) = (f.shape()[0], f.shape()[2]);
    let r = d * (k - 1);
    let mut out = Tensor::zeros(vec![c_out, t - r]);
    for co in 0..c_out {
        for tp in 0..t - r {
            let mut acc = 0.0;
            for s in 0..k {
                for ci in 0..c_in {
                    acc += f.get(&[co, ci, s]) * x.get(&[ci, tp + r - d * s]);
                }
            }
            out.set(&[co, tp], acc);
        }
    }
    out
}

pub fn dense_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

/// `Σ_k Σ_j P_j^k X W_{k,j}` for a single `N x C` signal, with explicit matrix powers.
pub fn diffusion_oracle(x: &Tensor, ops: &[Tensor; 3], weights: &[Tensor], depth: usize) -> Tensor {
    let n = x.shape()[0];
    let xr = rows(x);
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for k in 0..=depth {
        for (j, op) in ops.iter().enumerate() {
            let mut power = rows(&Tensor::eye(n));
            for _ in 0..k {
                power = dense_matmul(&power, &rows(op));
            }
            let term = dense_matmul(&dense_matmul(&power, &xr), &rows(&weights[3 * k + j]));
            acc = Some(match acc {
                None => term,
                Some(a) => a.iter().zip(&term).map(|(r1, r2)| r1.iter().zip(r2).map(|(u, v)| u + v).collect()).collect(),
            });
        }
    }
    Tensor::from_rows(&acc.unwrap())
}

/// Scalar loops for one `T x D` sequence: per-head softmax(QKᵀ/√d_h)V, heads concatenated, then W_O.
/// Returns the output and the per-head maps.
pub fn attention_oracle(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
) -> (Tensor, Vec<Tensor>) {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let dh = d / heads;
    let proj = |w: &Tensor| {
        let mut out = vec![vec![0.0; d]; t];
        for i in 0..t {
            for j in 0..d {
                for p in 0..d {
                    out[i][j] += x.get(&[i, p]) * w.get(&[p, j]);
                }
            }
        }
        out
    };
    let (q, k, v) = (proj(wq), proj(wk), proj(wv));
    let mut concat = vec![vec![0.0; d]; t];
    let mut maps = Vec::new();
    for h in 0..heads {
        let mut map = Tensor::zeros(vec![t, t]);
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..t {
                map.set(&[i, j], e[j] / z);
                for c in 0..dh {
                    concat[i][h * dh + c] += e[j] / z * v[j][h * dh + c];
                }
            }
        }
        maps.push(map);
    }
    let mut out = Tensor::zeros(vec![t, d]);
    for i in 0..t {
        for j in 0..d {
            out.set(&[i, j], (0..d).map(|p| concat[i][p] * wo.get(&[p, j])).sum());
        }
    }
    (out, maps)
}

/// `sin` for even dimensions, `cos` for odd, angle `i / 10000^(2k/d)`.
pub fn spae_oracle(i: usize, k: usize, d: usize) -> f64 {
    let angle = i as f64 * (-(2.0 * k as f64 / d as f64) * 10000f64.ln()).exp();
    if k % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Lag autocorrelation of one series.
pub fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let cov: f64 = (0..n - lag).map(|i| (x[i] - mean) * (x[i + lag] - mean)).sum();
    cov / var
}

/// Each node linked to its next two neighbours around a ring.
pub fn ring(n: usize) -> GraphBundle {
    let edges: Vec<Edge> = (0..n)
        .flat_map(|i| {
            [Edge { from: i, to: (i + 1) % n, distance: 1.0 }, Edge { from: i, to: (i + 2) % n, distance: 1.5 }]
        })
        .collect();
    GraphBundle::from_edges(&edges, n).unwrap()
}

/// Gradient check over every parameter of the tiny configuration, N = 5, eval mode.
pub fn tiny_model_grad_error() -> f64 {
    let n = 5;
    let params = ModelParams::init(&ModelConfig::tiny(), n, 3).unwrap();
    let bundle = ring(n);
    let x = uniform(&mut rng(5), &[2, 12, n, 3], -1.0, 1.0);
    let values: Vec<Tensor> = params.store.iter().map(|p| p.value.clone()).collect();
    grad_check(&values, 23, |tape, vars| {
        let bound = Bound::from_vars(vars.to_vec());
        let xv = tape.constant(x.clone());
        forward(tape, &params, &bound, xv, &bundle, Mode::Eval).unwrap().prediction
    })
}

/// Largest row-sum deviation from 1 over attention maps, nonzero rows of
/// `P_f` and `P_b`, and the learned adjacency, for one random instance.
pub fn stochasticity_deviation(seed: u64) -> f64 {
    use pastn::graph::{adaptive_adjacency, random_geometric_graph};
    use pastn::tpam::{multi_head_attention, qkv_project, TpamParams};
    let mut r = rng(seed);
    let n = r.gen_range(2..12);
    let (_, edges) = random_geometric_graph(n, r.gen_range(0.2..0.8), &mut r);
    let bundle = GraphBundle::from_edges(&edges, n).unwrap();
    let mut worst = 0.0f64;
    let mut rows_of = |t: &Tensor, skip_zero: bool| {
        let c = *t.shape().last().unwrap();
        for row in t.data().chunks(c) {
            let s: f64 = row.iter().sum();
            if skip_zero && row.iter().all(|&v| v == 0.0) {
                continue;
            }
            worst = worst.max((s - 1.0).abs());
        }
    };
    rows_of(&bundle.forward, true);
    rows_of(&bundle.backward, true);
    let mut tape = Tape::new();
    let de = r.gen_range(1..6);
    let e1 = tape.constant(uniform(&mut r, &[n, de], -3.0, 3.0));
    let e2 = tape.constant(uniform(&mut r, &[n, de], -3.0, 3.0));
    let a = adaptive_adjacency(&mut tape, e1, e2).unwrap();
    let a = tape.value(a).clone();
    rows_of(&a, false);
    let heads = r.gen_range(1..4);
    let d = heads * r.gen_range(1..4);
    let t = r.gen_range(1..10);
    let m = |tape: &mut Tape, r: &mut ChaCha8Rng| tape.constant(uniform(r, &[d, d], -2.0, 2.0));
    let p = TpamParams {
        query: m(&mut tape, &mut r),
        key: m(&mut tape, &mut r),
        value: m(&mut tape, &mut r),
        output: m(&mut tape, &mut r),
        gamma: tape.constant(Tensor::ones(vec![d])),
        beta: tape.constant(Tensor::zeros(vec![d])),
        heads,
    };
    let x = tape.constant(uniform(&mut r, &[2, 3, t, d], -3.0, 3.0));
    let (q, k, v) = qkv_project(&mut tape, x, &p).unwrap();
    let att = multi_head_attention(&mut tape, q, k, v, &p).unwrap();
    for map in &att.maps {
        let map = tape.value(*map).clone();
        rows_of(&map, false);
    }
    worst
}

/// Perturbs STLM inputs from a random step onwards; true when every earlier output
/// is bit-identical.
pub fn stlm_is_causal(seed: u64) -> bool {
    use pastn::graph::Supports;
    use pastn::stlm::{stlm_forward, DiffusionWeights, GatedTcn};
    let mut r = rng(seed);
    let n = r.gen_range(2..6);
    let c = r.gen_range(1..5);
    let k = r.gen_range(1..4);
    let d = r.gen_range(1..3);
    let depth = r.gen_range(0..3);
    let reach = d * (k - 1);
    let t = reach + r.gen_range(2..8);
    let bundle = ring(n);
    let x = uniform(&mut r, &[2, n, t, c], -2.0, 2.0);
    let cut = r.gen_range(1..t);
    let mut x2 = x.clone();
    for b in 0..2 {
        for i in 0..n {
            for s in cut..t {
                for ch in 0..c {
                    x2.set(&[b, i, s, ch], r.gen_range(-5.0..5.0));
                }
            }
        }
    }
    let filter = uniform(&mut r, &[c, c, k], -1.0, 1.0);
    let gate = uniform(&mut r, &[c, c, k], -1.0, 1.0);
    let e1 = uniform(&mut r, &[n, 3], -1.0, 1.0);
    let e2 = uniform(&mut r, &[n, 3], -1.0, 1.0);
    let ws: Vec<Tensor> = (0..3 * (depth + 1)).map(|_| uniform(&mut r, &[c, c], -1.0, 1.0)).collect();
    let run = |input: &Tensor| {
        let mut tape = Tape::new();
        let tcn = GatedTcn {
            filter: tape.constant(filter.clone()),
            gate: tape.constant(gate.clone()),
            filter_bias: tape.constant(Tensor::zeros(vec![c])),
            gate_bias: tape.constant(Tensor::zeros(vec![c])),
            dilation: d,
            layer: 0,
        };
        let (a, b) = (tape.constant(e1.clone()), tape.constant(e2.clone()));
        let adaptive = pastn::graph::adaptive_adjacency(&mut tape, a, b).unwrap();
        let s = Supports::bind(&mut tape, &bundle, adaptive);
        let diff = DiffusionWeights { weights: ws.iter().map(|w| tape.constant(w.clone())).collect(), depth };
        let xv = tape.constant(input.clone());
        let y = stlm_forward::<ChaCha8Rng>(&mut tape, xv, &tcn, &diff, &s, 0.3, None).unwrap();
        tape.value(y).clone()
    };
    let (y1, y2) = (run(&x), run(&x2));
    let t_out = t - reach;
    for b in 0..2 {
        for i in 0..n {
            // output step j reads input steps up to j + reach
            for j in 0..t_out {
                let affected = j + reach >= cut;
                for ch in 0..c {
                    let same = y1.get(&[b, i, j, ch]).to_bits() == y2.get(&[b, i, j, ch]).to_bits();
                    if !affected && !same {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Max deviation between attention on time-permuted input and the permuted attention output.
pub fn attention_equivariance_error(seed: u64) -> f64 {
    use pastn::tpam::{multi_head_attention, qkv_project, TpamParams};
    let mut r = rng(seed);
    let heads = r.gen_range(1..4);
    let d = heads * r.gen_range(1..4);
    let t = r.gen_range(2..9);
    let n = r.gen_range(1..4);
    let x = uniform(&mut r, &[n, t, d], -2.0, 2.0);
    let mut perm: Vec<usize> = (0..t).collect();
    use rand::seq::SliceRandom;
    perm.shuffle(&mut r);
    let xp = Tensor::from_fn(vec![n, t, d], |ix| x.get(&[ix[0], perm[ix[1]], ix[2]]));
    let w: Vec<Tensor> = (0..4).map(|_| uniform(&mut r, &[d, d], -1.0, 1.0)).collect();
    let run = |input: &Tensor| {
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
        let xv = tape.constant(input.clone());
        let (q, k, v) = qkv_project(&mut tape, xv, &p).unwrap();
        let att = multi_head_attention(&mut tape, q, k, v, &p).unwrap();
        tape.value(att.output).clone()
    };
    let (y, yp) = (run(&x), run(&xp));
    let want = Tensor::from_fn(vec![n, t, d], |ix| y.get(&[ix[0], perm[ix[1]], ix[2]]));
    yp.max_abs_diff(&want)
}
