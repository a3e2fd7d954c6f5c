//! Spatial positional embeddings: one learnable vector per sensor.
//!
//! The table is initialised with a sinusoid over the node index and added to
//! the hidden signal right after the input projection. This module also holds
//! the dispersion diagnostic used to check whether node representations stay
//! distinguishable: embeddings are reduced to two principal components,
//! projected onto the unit circle, and summarised by the circular resultant
//! length (0 for evenly spread angles, 1 when every node points the same way).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PastnError, Result};
use crate::rng::derive_rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpaeInit {
    #[default]
    Sinusoidal,
    Random,
}

/// Initial table entry for node `i`, dimension `k`.
///
/// Both branches use the exponent `2k / d_model`.
pub fn sinusoidal_value(i: usize, k: usize, d_model: usize) -> f64 {
    let angle = i as f64 / 10000f64.powf(2.0 * k as f64 / d_model as f64);
    if k % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpaeTable {
    /// `N x d_model`.
    pub table: Tensor,
    pub frozen: bool,
    pub init: SpaeInit,
}

impl SpaeTable {
    pub fn init(n: usize, d_model: usize, init: SpaeInit, seed: u64) -> SpaeTable {
        let table = match init {
            SpaeInit::Sinusoidal => Tensor::from_fn(vec![n, d_model], |ix| sinusoidal_value(ix[0], ix[1], d_model)),
            SpaeInit::Random => {
                let mut rng = derive_rng(seed, "spae.random");
                Tensor::from_fn(vec![n, d_model], |_| rng.gen_range(-0.5..=0.5))
            }
        };
        SpaeTable { table, frozen: false, init }
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }
}

/// `out[b, n, t, c] = h[b, n, t, c] + table[n, c]` for a channels-last `h: [B, N, T, C]`.
pub fn apply_spae(tape: &mut Tape, h: Var, table: Var) -> Result<Var> {
    let (sh, st) = (tape.shape(h).to_vec(), tape.shape(table).to_vec());
    if sh.len() != 4 || st.len() != 2 || sh[1] != st[0] || sh[3] != st[1] {
        return Err(PastnError::Dimension(format!(
            "positional table {st:?} does not match hidden signal {sh:?} (expected [B, N, T, C] with table [N, C])"
        )));
    }
    let t3 = tape.reshape(table, &[st[0], 1, st[1]])?;
    tape.add(h, t3)
}

/// Outcome of [`dispersion_score`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dispersion {
    /// `(node, angle)` for every node whose projection is nonzero.
    pub angles: Vec<(usize, f64)>,
    pub resultant_length: f64,
    /// Set when all embeddings coincide (or every projection vanished).
    pub collapsed: bool,
    /// Nodes skipped because their 2-D projection had zero norm.
    pub skipped: usize,
}

fn mat_vec(m: &[f64], dim: usize, v: &[f64]) -> Vec<f64> {
    (0..dim).map(|i| (0..dim).map(|j| m[i * dim + j] * v[j]).sum()).collect()
}

fn normalise(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Leading eigenvector of a symmetric PSD matrix by power iteration.
fn power_iteration(m: &[f64], dim: usize, seed_tag: &str) -> (Vec<f64>, f64) {
    let mut rng = derive_rng(0, seed_tag);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.5..1.5)).collect();
    normalise(&mut v);
    let mut lambda = 0.0;
    for _ in 0..20_000 {
        let mut w = mat_vec(m, dim, &v);
        let norm = normalise(&mut w);
        if norm == 0.0 {
            return (v, 0.0);
        }
        let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        lambda = norm;
        if delta < 1e-13 {
            break;
        }
    }
    // fix the sign so results are reproducible
    let (mut big, mut at) = (0.0f64, 0);
    for (i, x) in v.iter().enumerate() {
        if x.abs() > big {
            big = x.abs();
            at = i;
        }
    }
    if v[at] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (v, lambda)
}

/// Projects `points: [N, C]` onto their top two principal axes.
pub fn pca_2d(points: &Tensor) -> Result<Vec<(f64, f64)>> {
    let s = points.shape();
    if s.len() != 2 || s[0] < 2 || s[1] < 2 {
        return Err(PastnError::Dimension(format!("PCA needs an N x C matrix with N, C >= 2, got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let d = points.data();
    let mean: Vec<f64> = (0..c).map(|j| (0..n).map(|i| d[i * c + j]).sum::<f64>() / n as f64).collect();
    let centred: Vec<f64> = (0..n * c).map(|idx| d[idx] - mean[idx % c]).collect();
    let mut cov = vec![0.0; c * c];
    for i in 0..n {
        let row = &centred[i * c..(i + 1) * c];
        for a in 0..c {
            for b in 0..c {
                cov[a * c + b] += row[a] * row[b];
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    let (v1, l1) = power_iteration(&cov, c, "pca.first");
    let mut deflated = cov.clone();
    for a in 0..c {
        for b in 0..c {
            deflated[a * c + b] -= l1 * v1[a] * v1[b];
        }
    }
    let (mut v2, _) = power_iteration(&deflated, c, "pca.second");
    // keep the second axis orthogonal even when the deflated matrix is ~0
    let dot: f64 = v1.iter().zip(&v2).map(|(a, b)| a * b).sum();
    v2.iter_mut().zip(&v1).for_each(|(x, y)| *x -= dot * y);
    normalise(&mut v2);
    Ok((0..n)
        .map(|i| {
            let row = &centred[i * c..(i + 1) * c];
            let x = row.iter().zip(&v1).map(|(a, b)| a * b).sum();
            let y = row.iter().zip(&v2).map(|(a, b)| a * b).sum();
            (x, y)
        })
        .collect())
}

/// Circular resultant length of 2-D points after scaling each to unit norm.
pub fn resultant_of_points(points: &[(f64, f64)]) -> Dispersion {
    let scale = points.iter().map(|p| p.0.hypot(p.1)).fold(0.0, f64::max);
    let tiny = scale * 1e-12;
    let mut angles = Vec::with_capacity(points.len());
    let (mut sx, mut sy) = (0.0, 0.0);
    for (i, &(x, y)) in points.iter().enumerate() {
        let r = x.hypot(y);
        if !(r > tiny) {
            continue;
        }
        sx += x / r;
        sy += y / r;
        angles.push((i, y.atan2(x)));
    }
    let skipped = points.len() - angles.len();
    if angles.is_empty() {
        return Dispersion { angles, resultant_length: 1.0, collapsed: true, skipped };
    }
    let m = angles.len() as f64;
    let r = ((sx / m).powi(2) + (sy / m).powi(2)).sqrt().min(1.0);
    Dispersion { angles, resultant_length: r, collapsed: false, skipped }
}

/// PCA to two dimensions, unit-circle projection, and resultant length.
///
/// When every embedding is the same the centred cloud is a single point; the
/// result is then `R = 1` with `collapsed` set.
pub fn dispersion_score(node_embeddings: &Tensor) -> Result<Dispersion> {
    let pts = pca_2d(node_embeddings)?;
    let d = resultant_of_points(&pts);
    if d.skipped > 0 && !d.collapsed {
        log::warn!("dispersion: skipped {} nodes with zero-norm projections", d.skipped);
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_examples() {
        assert_eq!(sinusoidal_value(0, 0, 4), 0.0);
        assert_eq!(sinusoidal_value(0, 1, 4), 1.0);
        assert!((sinusoidal_value(1, 0, 4) - 0.8414709848078965).abs() < 1e-12);
        // exponent 2k/d_model = 1 here, so the angle is 1/10000
        assert!((sinusoidal_value(1, 2, 4) - 1e-4f64.sin()).abs() < 1e-12);
        assert!((sinusoidal_value(1, 2, 4) - 9.999999983333334e-5).abs() < 1e-12);
    }

    #[test]
    fn random_init_is_bounded_and_seeded() {
        let a = SpaeTable::init(10, 8, SpaeInit::Random, 3);
        let b = SpaeTable::init(10, 8, SpaeInit::Random, 3);
        assert_eq!(a, b);
        assert!(a.table.data().iter().all(|v| (-0.5..=0.5).contains(v)));
    }

    #[test]
    fn apply_examples() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::from_fn(vec![2, 3, 4, 5], |i| i.iter().sum::<usize>() as f64).requiring_grad());
        let zero = tape.constant(Tensor::zeros(vec![3, 5]));
        let same = apply_spae(&mut tape, h, zero).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(h).data());

        let hz = tape.constant(Tensor::zeros(vec![2, 3, 4, 5]));
        let table = tape.leaf(Tensor::from_fn(vec![3, 5], |i| (10 * i[0] + i[1]) as f64).requiring_grad());
        let out = apply_spae(&mut tape, hz, table).unwrap();
        let v = tape.value(out);
        for b in 0..2 {
            for t in 0..4 {
                for n in 0..3 {
                    for c in 0..5 {
                        assert_eq!(v.get(&[b, n, t, c]), (10 * n + c) as f64);
                    }
                }
            }
        }
        let l = tape.sum(out);
        tape.backward(l).unwrap();
        assert!(tape.grad(table).unwrap().data().iter().all(|&g| g == 8.0));

        let wrong = tape.constant(Tensor::zeros(vec![3, 4]));
        assert!(matches!(apply_spae(&mut tape, h, wrong), Err(PastnError::Dimension(_))));
    }

    #[test]
    fn dispersion_examples() {
        let same = Tensor::full(vec![6, 4], 2.5);
        let d = dispersion_score(&same).unwrap();
        assert!(d.collapsed);
        assert_eq!(d.resultant_length, 1.0);

        let four = resultant_of_points(&[(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)]);
        assert!(four.resultant_length < 1e-15);

        let three = resultant_of_points(&[(1.0, 0.0), (2.0, 0.0), (-1.0, 0.0)]);
        assert!((three.resultant_length - 1.0 / 3.0).abs() < 1e-15);

        let origin = resultant_of_points(&[(0.0, 0.0), (1.0, 0.0)]);
        assert_eq!(origin.skipped, 1);
        assert_eq!(origin.resultant_length, 1.0);
    }

    #[test]
    fn pca_recovers_dominant_axes() {
        // points spread along (1,1,0) strongly and along (1,-1,0) weakly
        let pts: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let a: f64 = i as f64 - 3.5;
                let b: f64 = if [0, 3, 4, 7].contains(&i) { 0.3 } else { -0.3 };
                vec![a + b, a - b, 0.0]
            })
            .collect();
        let proj = pca_2d(&Tensor::from_rows(&pts)).unwrap();
        for (i, (x, y)) in proj.iter().enumerate() {
            let a: f64 = i as f64 - 3.5;
            let b: f64 = if [0, 3, 4, 7].contains(&i) { 0.3 } else { -0.3 };
            assert!((x.abs() - a.abs() * 2f64.sqrt()).abs() < 1e-8);
            assert!((y.abs() - b.abs() * 2f64.sqrt()).abs() < 1e-8);
        }
    }
}
