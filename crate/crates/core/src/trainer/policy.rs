use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::num::{Scalar, Vec3};
use crate::sim::{ActionCommand, GripperCmd};

/// Action outputs: three displacement components and the gripper logit.
pub const ACT_DIM: usize = 4;
pub const HIDDEN: usize = 32;

/// Two-layer tanh network mapping a normalised observation to action means,
/// plus a per-output log standard deviation used for exploration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct PolicyParams<S> {
    pub obs_dim: usize,
    pub hidden: usize,
    pub act_dim: usize,
    /// `hidden x obs_dim`, row-major.
    pub w1: Vec<S>,
    pub b1: Vec<S>,
    /// `act_dim x hidden`, row-major.
    pub w2: Vec<S>,
    pub b2: Vec<S>,
    pub log_std: Vec<S>,
    pub seed: u64,
    /// 3-vector fields whose offsets from the end-effector the policy sees.
    #[serde(default)]
    pub observed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("warm-start policy has dims obs={got_obs} act={got_act}, expected obs={want_obs} act={want_act}")]
    DimMismatch { got_obs: usize, got_act: usize, want_obs: usize, want_act: usize },
    #[error("flat parameter vector has length {got}, expected {want}")]
    FlatLength { got: usize, want: usize },
    #[error("policy weights must be finite")]
    NonFinite,
}

pub fn param_count(obs_dim: usize, hidden: usize, act_dim: usize) -> usize {
    hidden * obs_dim + hidden + act_dim * hidden + act_dim + act_dim
}

/// Fresh policy from `seed`, or an exact copy of `warm_start`'s weights
/// carrying the new seed.
pub fn init_policy<S: Scalar>(
    obs_dim: usize,
    act_dim: usize,
    seed: u64,
    warm_start: Option<&PolicyParams<S>>,
) -> Result<PolicyParams<S>, PolicyError> {
    if let Some(w) = warm_start {
        if w.obs_dim != obs_dim || w.act_dim != act_dim {
            return Err(PolicyError::DimMismatch {
                got_obs: w.obs_dim,
                got_act: w.act_dim,
                want_obs: obs_dim,
                want_act: act_dim,
            });
        }
        return Ok(PolicyParams { seed, ..w.clone() });
    }
    let hidden = HIDDEN;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n1 = Normal::new(0.0, 1.0 / (obs_dim as f64).sqrt()).expect("valid normal");
    let n2 = Normal::new(0.0, 0.1 / (hidden as f64).sqrt()).expect("valid normal");
    let w1 = (0..hidden * obs_dim).map(|_| S::lit(n1.sample(&mut rng))).collect();
    let w2 = (0..act_dim * hidden).map(|_| S::lit(n2.sample(&mut rng))).collect();
    Ok(PolicyParams {
        obs_dim,
        hidden,
        act_dim,
        w1,
        b1: vec![S::zero(); hidden],
        w2,
        b2: vec![S::zero(); act_dim],
        log_std: vec![S::lit(-2.0); act_dim],
        seed,
        observed: Vec::new(),
    })
}

impl<S: Scalar> PolicyParams<S> {
    pub fn param_count(&self) -> usize {
        param_count(self.obs_dim, self.hidden, self.act_dim)
    }

    /// Concatenation `w1 | b1 | w2 | b2 | log_std`.
    pub fn to_flat(&self) -> Vec<S> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.extend_from_slice(&self.b2);
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn set_flat(&mut self, flat: &[S]) -> Result<(), PolicyError> {
        let want = self.param_count();
        if flat.len() != want {
            return Err(PolicyError::FlatLength { got: flat.len(), want });
        }
        let (h, o, a) = (self.hidden, self.obs_dim, self.act_dim);
        let mut rest = flat;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        self.w1 = take(h * o);
        self.b1 = take(h);
        self.w2 = take(a * h);
        self.b2 = take(a);
        self.log_std = take(a);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> PolicyParams<T> {
        let c = |v: &Vec<S>| v.iter().map(|x| T::lit(x.as_f64())).collect();
        PolicyParams {
            obs_dim: self.obs_dim,
            hidden: self.hidden,
            act_dim: self.act_dim,
            w1: c(&self.w1),
            b1: c(&self.b1),
            w2: c(&self.w2),
            b2: c(&self.b2),
            log_std: c(&self.log_std),
            seed: self.seed,
            observed: self.observed.clone(),
        }
    }

    /// Raw network outputs for a normalised observation.
    pub fn forward(&self, x: &[S], hidden_buf: &mut Vec<S>, out: &mut [S; ACT_DIM]) {
        debug_assert_eq!(x.len(), self.obs_dim);
        hidden_buf.clear();
        for j in 0..self.hidden {
            let row = &self.w1[j * self.obs_dim..(j + 1) * self.obs_dim];
            let mut acc = self.b1[j];
            for (w, xi) in row.iter().zip(x) {
                acc += *w * *xi;
            }
            hidden_buf.push(acc.tanh());
        }
        for (k, o) in out.iter_mut().enumerate().take(self.act_dim) {
            let row = &self.w2[k * self.hidden..(k + 1) * self.hidden];
            let mut acc = self.b2[k];
            for (w, h) in row.iter().zip(hidden_buf.iter()) {
                acc += *w * *h;
            }
            *o = acc;
        }
    }

    /// Maps raw outputs (optionally perturbed by `noise * exp(log_std)`) to a
    /// command. Displacements are squashed into `[-step_clamp, step_clamp]`;
    /// a gripper logit `>= 0` closes.
    pub fn command(&self, raw: &[S; ACT_DIM], noise: Option<&[S; ACT_DIM]>, step_clamp: S) -> ActionCommand<S> {
        let mut v = *raw;
        if let Some(eps) = noise {
            for k in 0..ACT_DIM {
                v[k] += eps[k] * self.log_std[k].exp();
            }
        }
        let delta = Vec3::new(step_clamp * v[0].tanh(), step_clamp * v[1].tanh(), step_clamp * v[2].tanh());
        let gripper_cmd = if v[3] >= S::zero() { GripperCmd::Close } else { GripperCmd::Open };
        ActionCommand { delta_pos: delta, gripper_cmd }
    }
}
