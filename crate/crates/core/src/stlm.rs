//! Spatio-temporal learning module: gated dilated temporal convolution followed
//! by diffusion graph convolution.

use rand::Rng;

use crate::error::{PastnError, Result};
use crate::graph::{diffusion_conv, Supports};
use crate::tensor::{Tape, Var};

/// Kernels and biases of one gated temporal convolution, bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct GatedTcn {
    /// `C_out x C_in x k`, tanh branch.
    pub filter: Var,
    /// `C_out x C_in x k`, sigmoid branch.
    pub gate: Var,
    pub filter_bias: Var,
    pub gate_bias: Var,
    pub dilation: usize,
    /// Position in the layer stack, used in error messages.
    pub layer: usize,
}

/// Diffusion weights for one layer, `3 * (depth + 1)` matrices.
#[derive(Clone, Debug)]
pub struct DiffusionWeights {
    pub weights: Vec<Var>,
    pub depth: usize,
}

/// `tanh(Θ1 ∗ x + b) ⊙ σ(Θ2 ∗ x + c)` along the time axis of `x: [B, N, T, C]`.
pub fn gated_tcn(tape: &mut Tape, x: Var, p: &GatedTcn) -> Result<Var> {
    let tag = |e: PastnError| match e {
        PastnError::Length(m) => PastnError::Length(format!("layer {}: {m}", p.layer)),
        other => other,
    };
    let f = tape.conv_time(x, p.filter, p.dilation).map_err(tag)?;
    let f = tape.add(f, p.filter_bias)?;
    let f = tape.tanh(f);
    let g = tape.conv_time(x, p.gate, p.dilation).map_err(tag)?;
    let g = tape.add(g, p.gate_bias)?;
    let g = tape.sigmoid(g);
    tape.mul(f, g)
}

/// Gated TCN, then diffusion convolution at every remaining step, then dropout.
///
/// `rng == None` means evaluation mode.
pub fn stlm_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    tcn: &GatedTcn,
    diffusion: &DiffusionWeights,
    supports: &Supports,
    dropout: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    let h = gated_tcn(tape, x, tcn)?;
    let z = diffusion_conv(tape, h, supports, &diffusion.weights, diffusion.depth)?;
    tape.dropout(z, dropout, rng)
}
