//! Central finite-difference verification of the analytic gradients.
//!
//! Checks every parameter tensor of a network against (L(p+h) - L(p-h)) / 2h
//! for the scalar loss L = sum(c * output) with fixed random weights c.
//! Meant for f64 and tiny configurations.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::nn::network::{SeqMeta, VelocityNet};
use crate::nn::params::NetParams;

/// Worst relative error per tensor, plus the overall maximum.
#[derive(Debug)]
pub struct GradCheckReport {
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_error: f64,
}

/// Elementwise relative error with an absolute floor so near-zero pairs
/// compare on absolute difference.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn finite_difference_check(
    net: &mut VelocityNet<f64>,
    x: &[f64],
    t: f64,
    codes: &[usize],
    meta: &SeqMeta,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..meta.padded_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let loss = |net: &VelocityNet<f64>| -> Result<f64> {
        let out = net.forward(x, t, codes, meta)?;
        Ok(out.iter().zip(&weights).map(|(o, w)| o * w).sum())
    };

    let (_, trace) = net.forward_traced(x, t, codes, meta)?;
    let mut grads = NetParams::zeros(&net.config);
    net.backward(&trace, &weights, meta, &mut grads);

    let names: Vec<String> = grads.named_tensors().iter().map(|(n, _, _)| n.clone()).collect();
    let analytic: Vec<Vec<f64>> = grads.flat_slices().iter().map(|s| s.to_vec()).collect();

    let mut per_tensor = Vec::with_capacity(names.len());
    let mut overall: f64 = 0.0;
    for ti in 0..names.len() {
        let len = analytic[ti].len();
        let mut worst: f64 = 0.0;
        for ei in 0..len {
            {
                let mut slices = net.params.flat_slices_mut();
                slices[ti][ei] += step;
            }
            let up = loss(net)?;
            {
                let mut slices = net.params.flat_slices_mut();
                slices[ti][ei] -= 2.0 * step;
            }
            let down = loss(net)?;
            {
                let mut slices = net.params.flat_slices_mut();
                slices[ti][ei] += step;
            }
            let fd = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(analytic[ti][ei], fd));
        }
        overall = overall.max(worst);
        per_tensor.push((names[ti].clone(), worst));
    }
    Ok(GradCheckReport { per_tensor, max_rel_error: overall })
}
