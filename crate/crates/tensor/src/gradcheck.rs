//! Central finite-difference gradient checking.
//!
//! The objective is `sum(seed * f(inputs))` for a fixed pseudo-random seed
//! vector, so non-scalar outputs are checked through a random projection.

use crate::{Graph, Result, Tensor, Var};

/// Worst norm-wise relative error `|g_analytic - g_numeric| / max(|g_a|, |g_n|)`
/// over all inputs.
pub fn max_relative_error<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let seed = projection(g.value(out).len());
    g.backward_seeded(out, seed.clone())?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let objective = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).iter().zip(&seed).map(|(a, b)| a * b).sum())
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for i in 0..input.numel() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = objective(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = objective(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k][i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff2.sqrt() / scale);
        } else {
            worst = worst.max(diff2.sqrt());
        }
    }
    Ok(worst)
}

/// Deterministic projection weights in [-1, 1] (xorshift64*).
fn projection(n: usize) -> Vec<f64> {
    let mut s: u64 = 0x9E37_79B9_7F4A_7C15;
    (0..n)
        .map(|_| {
            s ^= s >> 12;
            s ^= s << 25;
            s ^= s >> 27;
            let r = s.wrapping_mul(0x2545_F491_4F6C_DD1D);
            (r >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}
