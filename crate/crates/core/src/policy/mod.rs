//! Learnable policy: MLP mean with a state-independent Gaussian head, the
//! observation layout, and the action decoding `q_target = q_init + sigma * a`.

mod adam;
mod checkpoint;
pub mod mlp;
pub mod obs;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::sim::{nominal_pose, RobotModel, NUM_JOINTS};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use mlp::{gradient_check, gradient_gate, Mlp, Real, Workspace, GRADIENT_GATE_TOLERANCE};
pub use obs::{ObsHistory, ObsNoise, ACTOR_OBS_DIM, CRITIC_OBS_DIM};

pub const ACTION_DIM: usize = NUM_JOINTS;
pub const HIDDEN_WIDTHS: [usize; 3] = [512, 256, 64];
pub const CRITIC_HIDDEN_WIDTHS: [usize; 2] = [256, 128];

pub fn actor_widths() -> Vec<usize> {
    let mut w = vec![ACTOR_OBS_DIM];
    w.extend_from_slice(&HIDDEN_WIDTHS);
    w.push(ACTION_DIM);
    w
}

pub fn critic_widths() -> Vec<usize> {
    let mut w = vec![CRITIC_OBS_DIM];
    w.extend_from_slice(&CRITIC_HIDDEN_WIDTHS);
    w.push(1);
    w
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f32], log_std: &[f32], action: &[f32]) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let ls = *ls as f64;
            let z = (*a as f64 - *m as f64) / ls.exp();
            -0.5 * z * z - ls - half_log_2pi
        })
        .sum()
}

/// Entropy of a diagonal Gaussian.
pub fn gaussian_entropy(log_std: &[f32]) -> f64 {
    let c = 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
    log_std.iter().map(|ls| *ls as f64 + c).sum()
}

/// Actor network plus the learnable per-joint log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub actor: Mlp<f32>,
    pub log_std: Vec<f32>,
}

impl GaussianPolicy {
    pub fn new(actor: Mlp<f32>, init_std: f64) -> Self {
        let n = actor.output_dim();
        Self {
            actor,
            log_std: vec![init_std.ln() as f32; n],
        }
    }

    /// Randomly initialised actor with the standard widths.
    pub fn random<R: Rng + ?Sized>(init_std: f64, rng: &mut R) -> Self {
        Self::new(Mlp::random(&actor_widths(), 0.01, rng), init_std)
    }

    pub fn mean(&self, obs: &[f32]) -> Vec<f32> {
        self.actor.forward(obs)
    }

    pub fn std(&self) -> Vec<f32> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    /// Draw `mean + std * eps` with standard normal `eps`.
    pub fn sample<R: Rng + ?Sized>(&self, mean: &[f32], rng: &mut R) -> Vec<f32> {
        mean.iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let eps: f64 = StandardNormal.sample(rng);
                m + (ls.exp() as f64 * eps) as f32
            })
            .collect()
    }

    pub fn log_prob(&self, mean: &[f32], action: &[f32]) -> f64 {
        gaussian_log_prob(mean, &self.log_std, action)
    }
}

/// Maps normalized actions to PD targets around the nominal pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionDecoder {
    pub q_init: [f64; NUM_JOINTS],
    pub sigma: f64,
}

impl Default for ActionDecoder {
    fn default() -> Self {
        Self {
            q_init: nominal_pose(),
            sigma: 0.05,
        }
    }
}

impl ActionDecoder {
    /// `q_init + sigma * a`, clamped to the joint limits.
    pub fn decode(&self, action: &[f32], model: &RobotModel) -> [f64; NUM_JOINTS] {
        let mut q = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            q[j] = model.clamp_joint(j, self.q_init[j] + self.sigma * action[j] as f64);
        }
        q
    }

    /// Inverse of the affine part of [`ActionDecoder::decode`].
    pub fn encode(&self, targets: &[f64; NUM_JOINTS]) -> [f32; NUM_JOINTS] {
        let mut a = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            a[j] = ((targets[j] - self.q_init[j]) / self.sigma) as f32;
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_prob_at_mean_is_analytic() {
        let mean = [0.3f32; 12];
        let log_std: Vec<f32> = (0..12).map(|i| -0.5 + 0.1 * i as f32).collect();
        let got = gaussian_log_prob(&mean, &log_std, &mean);
        let expect = -log_std.iter().map(|l| *l as f64).sum::<f64>()
            - 6.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn log_prob_matches_univariate_density() {
        let lp = gaussian_log_prob(&[1.0], &[(2.0f32).ln()], &[2.0]);
        let density = (-(0.5f64 * 0.25)).exp() / (2.0 * (2.0 * std::f64::consts::PI).sqrt());
        assert!((lp - density.ln()).abs() < 1e-6);
    }

    #[test]
    fn tiny_std_samples_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy = GaussianPolicy::random(1e-30, &mut rng);
        let mean = vec![0.25f32; 12];
        assert_eq!(policy.sample(&mean, &mut rng), mean);
    }

    #[test]
    fn decode_zero_is_nominal_and_linear_in_sigma() {
        let model = RobotModel::default();
        let d = ActionDecoder::default();
        assert_eq!(d.decode(&[0.0; 12], &model), d.q_init);
        let a = [0.5f32; 12];
        let d2 = ActionDecoder { sigma: 2.0 * d.sigma, ..d };
        let q1 = d.decode(&a, &model);
        let q2 = d2.decode(&a, &model);
        for j in 0..12 {
            let dev1 = q1[j] - d.q_init[j];
            let dev2 = q2[j] - d.q_init[j];
            assert!((dev2 - 2.0 * dev1).abs() < 1e-6);
        }
    }

    #[test]
    fn decode_large_action_hits_limits() {
        let model = RobotModel::default();
        let d = ActionDecoder::default();
        let hi = d.decode(&[1e6; 12], &model);
        let lo = d.decode(&[-1e6; 12], &model);
        for j in 0..12 {
            assert_eq!(hi[j], model.joint_limits[j][1]);
            assert_eq!(lo[j], model.joint_limits[j][0]);
        }
    }

    #[test]
    fn encode_inverts_decode_inside_limits() {
        let model = RobotModel::default();
        let d = ActionDecoder::default();
        let a = [0.1f32, -0.2, 0.3, 0.0, 0.5, -0.5, 0.2, 0.2, -0.1, 0.4, -0.3, 0.1];
        let back = d.encode(&d.decode(&a, &model));
        for j in 0..12 {
            assert!((back[j] - a[j]).abs() < 1e-6);
        }
    }
}
