//! Central finite-difference checks for analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, Var};

pub const FD_STEP: f32 = 1e-3;
pub const REL_TOL: f64 = 1e-2;
pub const COS_TOL: f64 = 0.999;

/// Agreement between an analytic and a numeric gradient vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `|a - n| / max(|a|, |n|)`
    pub rel_err: f64,
    pub cosine: f64,
}

impl GradCheck {
    pub fn compare(analytic: &[f32], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        let mut dot = 0.0;
        for (&a, &n) in analytic.iter().zip(numeric) {
            let a = a as f64;
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
            dot += a * n;
        }
        let (na, nn) = (na.sqrt(), nn.sqrt());
        let scale = na.max(nn);
        if scale < 1e-12 {
            return Self {
                rel_err: 0.0,
                cosine: 1.0,
            };
        }
        let cosine = if na < 1e-12 || nn < 1e-12 { 0.0 } else { dot / (na * nn) };
        Self {
            rel_err: diff.sqrt() / scale,
            cosine,
        }
    }

    pub fn passes(&self) -> bool {
        self.rel_err <= REL_TOL && self.cosine >= COS_TOL
    }
}

/// Central differences of a scalar function of `x`.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + step;
            let hi = f(&work);
            work[i] = x[i] - step;
            let lo = f(&work);
            work[i] = x[i];
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// Uniform `[-1, 1)` tensor from a seeded generator.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Checks every input of a graph-building closure against central
/// differences of the scalar `sum(r * f(inputs))`, with `r` a fixed
/// random projection. Returns one [`GradCheck`] per input.
pub fn check_graph_fn<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f32> = (0..g.value(out).numel())
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    g.backward(&[(out, &proj)])?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vs)?;
        Ok(g.value(y)
            .data()
            .iter()
            .zip(&proj)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    };

    let mut results = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + FD_STEP;
            let hi = eval(&work)?;
            work[i].data_mut()[j] = x0 - FD_STEP;
            let lo = eval(&work)?;
            work[i].data_mut()[j] = x0;
            // the perturbation actually applied in f32
            let h = ((x0 + FD_STEP) as f64 - (x0 - FD_STEP) as f64) / 2.0;
            numeric.push((hi - lo) / (2.0 * h));
        }
        results.push(GradCheck::compare(&analytic[i], &numeric));
    }
    Ok(results)
}
