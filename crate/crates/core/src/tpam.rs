//! Temporal multi-head self-attention, applied independently at every node.
//!
//! Inputs are `[..., T, D]`; all leading axes (batch, node) are independent
//! groups. Projections are shared across nodes.

use crate::error::{PastnError, Result};
use crate::tensor::{Tape, Var};

/// Layer-norm epsilon used after the attention residual.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct TpamParams {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
    pub gamma: Var,
    pub beta: Var,
    pub heads: usize,
}

/// Attention output together with the per-head attention maps `[..., T, T]`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub output: Var,
    pub maps: Vec<Var>,
}

pub fn qkv_project(tape: &mut Tape, x: Var, p: &TpamParams) -> Result<(Var, Var, Var)> {
    Ok((tape.linear(x, p.query)?, tape.linear(x, p.key)?, tape.linear(x, p.value)?))
}

/// Scaled dot-product attention per head, heads concatenated and mixed by the output projection.
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, p: &TpamParams) -> Result<Attention> {
    let shape = tape.shape(q).to_vec();
    let width = *shape.last().unwrap();
    if p.heads == 0 || width % p.heads != 0 {
        return Err(PastnError::Config(format!(
            "attention width {width} is not divisible by {} heads",
            p.heads
        )));
    }
    let axis = shape.len() - 1;
    let qs = tape.split(q, axis, p.heads)?;
    let ks = tape.split(k, axis, p.heads)?;
    let vs = tape.split(v, axis, p.heads)?;
    let scale = 1.0 / ((width / p.heads) as f64).sqrt();
    let mut maps = Vec::with_capacity(p.heads);
    let mut contexts = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let scores = tape.batch_matmul(qs[h], ks[h], true)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores, axis)?;
        contexts.push(tape.batch_matmul(weights, vs[h], false)?);
        maps.push(weights);
    }
    let joined = tape.concat(&contexts, axis)?;
    let output = tape.linear(joined, p.output)?;
    Ok(Attention { output, maps })
}

/// `LayerNorm(MultiheadAttention(x) + x)`, normalising the feature axis per step.
pub fn tpam_forward(tape: &mut Tape, x: Var, p: &TpamParams) -> Result<Attention> {
    let (q, k, v) = qkv_project(tape, x, p)?;
    let att = multi_head_attention(tape, q, k, v, p)?;
    let res = tape.add(att.output, x)?;
    let output = tape.layer_norm(res, p.gamma, p.beta, LAYER_NORM_EPS)?;
    Ok(Attention { output, maps: att.maps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params(tape: &mut Tape, d: usize, heads: usize, seed: u64) -> TpamParams {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(seed, "tpam.test");
        let mut m = |tape: &mut Tape| tape.constant(Tensor::from_fn(vec![d, d], |_| rng.gen_range(-1.0..1.0)));
        TpamParams {
            query: m(tape),
            key: m(tape),
            value: m(tape),
            output: m(tape),
            gamma: tape.constant(Tensor::ones(vec![d])),
            beta: tape.constant(Tensor::zeros(vec![d])),
            heads,
        }
    }

    #[test]
    fn zero_input_projects_to_zero() {
        let mut tape = Tape::new();
        let p = params(&mut tape, 4, 2, 1);
        let x = tape.constant(Tensor::zeros(vec![3, 4]));
        let (q, k, v) = qkv_project(&mut tape, x, &p).unwrap();
        for t in [q, k, v] {
            assert!(tape.value(t).data().iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn single_step_attends_to_itself() {
        let mut tape = Tape::new();
        let p = params(&mut tape, 4, 2, 2);
        let v = tape.constant(Tensor::from_fn(vec![1, 4], |i| i[1] as f64 + 0.5));
        let q = tape.constant(Tensor::from_fn(vec![1, 4], |i| i[1] as f64 * 3.0));
        let att = multi_head_attention(&mut tape, q, q, v, &p).unwrap();
        for m in &att.maps {
            assert_eq!(tape.value(*m).data(), &[1.0]);
        }
        let want = tape.linear(v, p.output).unwrap();
        assert!(tape.value(att.output).max_abs_diff(tape.value(want)) < 1e-15);
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        let mut tape = Tape::new();
        let p = params(&mut tape, 4, 2, 3);
        let q = tape.constant(Tensor::from_fn(vec![3, 4], |i| (i[0] * 4 + i[1]) as f64 * 0.1));
        let k = tape.constant(Tensor::from_fn(vec![3, 4], |i| i[1] as f64));
        let v = tape.constant(Tensor::from_fn(vec![3, 4], |i| ((i[0] + 1) * (i[1] + 2)) as f64));
        let att = multi_head_attention(&mut tape, q, k, v, &p).unwrap();
        for m in &att.maps {
            assert!(tape.value(*m).data().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        }
        let vd = tape.value(v).clone();
        let mean = Tensor::from_fn(vec![1, 4], |i| (0..3).map(|t| vd.get(&[t, i[1]])).sum::<f64>() / 3.0);
        let mv = tape.constant(mean);
        let want = tape.linear(mv, p.output).unwrap();
        let w = tape.value(want).clone();
        let out = tape.value(att.output);
        for t in 0..3 {
            for c in 0..4 {
                assert!((out.get(&[t, c]) - w.get(&[0, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_branch_reduces_to_layer_norm() {
        let mut tape = Tape::new();
        let mut p = params(&mut tape, 4, 2, 4);
        p.value = tape.constant(Tensor::zeros(vec![4, 4]));
        p.output = tape.constant(Tensor::zeros(vec![4, 4]));
        let x = tape.constant(Tensor::from_fn(vec![2, 3, 5, 4], |i| ((i[0] + 2 * i[1] + 3 * i[2] + i[3] * i[3]) % 7) as f64));
        let out = tpam_forward(&mut tape, x, &p).unwrap();
        assert_eq!(tape.shape(out.output), tape.shape(x));
        let ln = tape.layer_norm(x, p.gamma, p.beta, LAYER_NORM_EPS).unwrap();
        assert!(tape.value(out.output).max_abs_diff(tape.value(ln)) < 1e-15);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut tape = Tape::new();
        let p = params(&mut tape, 4, 3, 5);
        let x = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(matches!(tpam_forward(&mut tape, x, &p), Err(PastnError::Config(_))));
    }
}
