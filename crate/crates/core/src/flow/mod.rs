//! Flow matching: the probability path, training, and guided ODE sampling.

pub mod sample;
pub mod train;

pub use sample::{initial_noise, sample, SampleOptions, Velocity};
pub use train::{train, LogRow, TrainConfig, TrainOutcome};

use crate::error::{Error, Result};
use crate::tasks::ProjectionOp;

/// Discretization of the generative ODE on [0, 1].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowSchedule {
    pub n_steps: usize,
    /// Substitute for t = 0 wherever the score-form coefficients 1/t and
    /// (1-t)/t are evaluated.
    pub t_floor: f64,
    /// Clamp inside the guidance weight 1 / (1 - min(t, 1 - delta)).
    pub delta: f64,
}

impl FlowSchedule {
    pub fn new(n_steps: usize) -> Self {
        FlowSchedule { n_steps, t_floor: 1e-3, delta: 1e-4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(0.0 < self.t_floor && self.t_floor < 1.0) {
            return Err(Error::invalid("t_floor must be in (0, 1)"));
        }
        if !(0.0 < self.delta && self.delta < 1.0) {
            return Err(Error::invalid("delta must be in (0, 1)"));
        }
        Ok(())
    }

    /// Uniform step times t_i = i / S for i in 0..S, step size 1/S.
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_steps).map(move |i| i as f64 / self.n_steps as f64)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_steps as f64
    }
}

impl Default for FlowSchedule {
    /// 500 ODE discretization steps.
    fn default() -> Self {
        FlowSchedule::new(500)
    }
}

/// Guidance plugged into sampling.
#[derive(Debug, Clone)]
pub struct GuidanceSpec {
    pub projector: ProjectionOp,
    pub enabled: bool,
    /// Project the final state so constraints hold exactly on emitted
    /// samples. Defaults to on.
    pub final_hard_projection: bool,
}

impl GuidanceSpec {
    pub fn new(projector: ProjectionOp) -> Self {
        GuidanceSpec { projector, enabled: true, final_hard_projection: true }
    }
}

/// Linear interpolation x_t = t x1 + (1-t) x0 along the noise-to-data path.
pub fn interpolate<F: crate::nn::Real>(x0: &[F], x1: &[F], t: F) -> Vec<F> {
    debug_assert_eq!(x0.len(), x1.len());
    x0.iter()
        .zip(x1.iter())
        .map(|(&a, &b)| t * b + (F::one() - t) * a)
        .collect()
}

/// Velocity from the score: u = x/t + (1-t)/t * score, with t clamped to the
/// floor below which the coefficients blow up.
pub fn velocity_from_score(x_t: &[f64], t: f64, score: &[f64], t_floor: f64) -> Vec<f64> {
    let t = t.max(t_floor);
    let a = 1.0 / t;
    let b = (1.0 - t) / t;
    x_t.iter().zip(score.iter()).map(|(&x, &s)| a * x + b * s).collect()
}

/// One-step destination estimate x1_hat = x_t + (1-t) u.
pub fn estimate_x1<F: crate::nn::Real>(x_t: &[F], t: F, u: &[F]) -> Vec<F> {
    x_t.iter()
        .zip(u.iter())
        .map(|(&x, &v)| x + (F::one() - t) * v)
        .collect()
}

/// Guidance weight w_t = 1 / (1 - min(t, 1 - delta)).
pub fn guidance_weight(t: f64, delta: f64) -> f64 {
    1.0 / (1.0 - t.min(1.0 - delta))
}

/// Projection guidance g_t = w_t (P(x1_hat) - x1_hat).
pub fn guidance_term(x1_hat: &[f64], t: f64, projector: &ProjectionOp, delta: f64) -> Result<Vec<f64>> {
    let w = guidance_weight(t, delta);
    let projected = projector.project(x1_hat)?;
    Ok(projected
        .iter()
        .zip(x1_hat.iter())
        .map(|(p, x)| w * (p - x))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NumericCondition;

    #[test]
    fn interpolate_endpoints() {
        let x0 = vec![1.0, -2.0, 0.5];
        let x1 = vec![0.0, 4.0, 0.5];
        assert_eq!(interpolate(&x0, &x1, 0.0), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0), x1);
        assert_eq!(interpolate(&[0.0], &[2.0], 0.5), vec![1.0]);
    }

    #[test]
    fn velocity_from_score_examples() {
        // t=1: b=0, u = x.
        assert_eq!(velocity_from_score(&[3.0], 1.0, &[9.0], 1e-3), vec![3.0]);
        // t=0.5, x=2, score=1: 2*2 + 1*1 = 5.
        assert_eq!(velocity_from_score(&[2.0], 0.5, &[1.0], 1e-3), vec![5.0]);
        // Below the floor, the floor is used.
        let at_zero = velocity_from_score(&[1.0], 0.0, &[1.0], 1e-3);
        let at_floor = velocity_from_score(&[1.0], 1e-3, &[1.0], 1e-3);
        assert_eq!(at_zero, at_floor);
        assert!((at_zero[0] - (1000.0 + 999.0)).abs() < 1e-9);
    }

    #[test]
    fn estimate_x1_examples() {
        assert_eq!(estimate_x1(&[0.7], 1.0, &[100.0]), vec![0.7]);
        assert_eq!(estimate_x1(&[0.7], 0.3, &[0.0]), vec![0.7]);
        assert_eq!(estimate_x1(&[0.0], 0.5, &[2.0]), vec![1.0]);
    }

    #[test]
    fn guidance_weight_examples() {
        assert_eq!(guidance_weight(0.0, 1e-4), 1.0);
        assert!((guidance_weight(0.5, 1e-4) - 2.0).abs() < 1e-12);
        assert!((guidance_weight(0.99995, 1e-4) - 1e4).abs() < 1e-6);
        assert!((guidance_weight(1.0, 1e-4) - 1e4).abs() < 1e-6);
    }

    #[test]
    fn guidance_vanishes_on_feasible_states() {
        let op = ProjectionOp::new(
            NumericCondition::Impute { indices: vec![0, 2], values: vec![0.5, -0.25] },
            4,
        )
        .unwrap();
        let feasible = vec![0.5, 0.9, -0.25, 0.1];
        let g = guidance_term(&feasible, 0.3, &op, 1e-4).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let infeasible = vec![0.0, 0.9, -0.25, 0.1];
        let g = guidance_term(&infeasible, 0.5, &op, 1e-4).unwrap();
        assert!((g[0] - 2.0 * 0.5).abs() < 1e-12);
        assert_eq!(&g[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn schedule_defaults_and_validation() {
        let s = FlowSchedule::default();
        assert_eq!(s.n_steps, 500);
        assert_eq!(s.t_floor, 1e-3);
        assert_eq!(s.delta, 1e-4);
        s.validate().unwrap();
        let times: Vec<f64> = s.times().collect();
        assert_eq!(times.len(), 500);
        assert_eq!(times[0], 0.0);
        assert!(times[499] < 1.0);
        assert!(FlowSchedule { n_steps: 0, ..FlowSchedule::default() }.validate().is_err());
    }
}
