use serde::{Deserialize, Serialize};

use crate::num::{Scalar, Vec3};

/// Entity currently held by the gripper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attached {
    None,
    CubeA,
    CubeB,
    Plate,
    DrawerHandle,
}

impl Attached {
    pub fn label(self) -> &'static str {
        match self {
            Attached::None => "none",
            Attached::CubeA => "cubeA",
            Attached::CubeB => "cubeB",
            Attached::Plate => "plate",
            Attached::DrawerHandle => "drawer_handle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct SceneState<S> {
    pub ee_pos: Vec3<S>,
    pub gripper_aperture: S,
    pub cube_a_pos: Vec3<S>,
    pub cube_b_pos: Vec3<S>,
    pub plate_pos: Vec3<S>,
    pub drawer_fraction: S,
    pub attached: Attached,
    pub step_index: usize,
}

impl<S: Scalar> SceneState<S> {
    /// Exact equality on the bit patterns of every field.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.ee_pos.bit_eq(other.ee_pos)
            && self.gripper_aperture.bits() == other.gripper_aperture.bits()
            && self.cube_a_pos.bit_eq(other.cube_a_pos)
            && self.cube_b_pos.bit_eq(other.cube_b_pos)
            && self.plate_pos.bit_eq(other.plate_pos)
            && self.drawer_fraction.bits() == other.drawer_fraction.bits()
            && self.attached == other.attached
            && self.step_index == other.step_index
    }

    /// Hashable fingerprint of the exact state (bit patterns).
    pub fn fingerprint(&self) -> Vec<u64> {
        let mut v = Vec::with_capacity(16);
        for p in [self.ee_pos, self.cube_a_pos, self.cube_b_pos, self.plate_pos] {
            v.extend(p.to_array().iter().map(|c| c.bits()));
        }
        v.push(self.gripper_aperture.bits());
        v.push(self.drawer_fraction.bits());
        v.push(self.attached as u64);
        v.push(self.step_index as u64);
        v
    }

    pub fn cast<T: Scalar>(&self) -> SceneState<T> {
        SceneState {
            ee_pos: self.ee_pos.cast(),
            gripper_aperture: T::lit(self.gripper_aperture.as_f64()),
            cube_a_pos: self.cube_a_pos.cast(),
            cube_b_pos: self.cube_b_pos.cast(),
            plate_pos: self.plate_pos.cast(),
            drawer_fraction: T::lit(self.drawer_fraction.as_f64()),
            attached: self.attached,
            step_index: self.step_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperCmd {
    Open,
    Close,
    Hold,
}

/// End-effector displacement plus gripper command. Components of
/// `delta_pos` outside the step clamp are clamped, never rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct ActionCommand<S> {
    pub delta_pos: Vec3<S>,
    pub gripper_cmd: GripperCmd,
}

impl<S: Scalar> ActionCommand<S> {
    pub fn idle() -> Self {
        Self { delta_pos: Vec3::zero(), gripper_cmd: GripperCmd::Hold }
    }

    pub fn new(dx: f64, dy: f64, dz: f64, gripper_cmd: GripperCmd) -> Self {
        Self { delta_pos: Vec3::from_f64(dx, dy, dz), gripper_cmd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct Transition<S> {
    pub state: SceneState<S>,
    pub action: ActionCommand<S>,
    pub reward: S,
    pub success: bool,
}

/// One episode. `terminal_state` is the state the episode ended in: the
/// first state judged successful, or the state after the last action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct Trajectory<S> {
    pub steps: Vec<Transition<S>>,
    pub terminal_state: SceneState<S>,
    pub terminated_early: bool,
}

impl<S: Scalar> Trajectory<S> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn succeeded(&self) -> bool {
        self.steps.iter().any(|t| t.success)
    }

    pub fn total_reward(&self) -> S {
        self.steps.iter().map(|t| t.reward).sum()
    }

    pub fn initial_state(&self) -> &SceneState<S> {
        self.steps.first().map(|t| &t.state).unwrap_or(&self.terminal_state)
    }

    /// Every visited state in order. The terminal state is appended unless
    /// the episode stopped on a success, in which case it already is the
    /// last pre-action state.
    pub fn states(&self) -> Vec<&SceneState<S>> {
        let mut v: Vec<&SceneState<S>> = self.steps.iter().map(|t| &t.state).collect();
        if !self.terminated_early {
            v.push(&self.terminal_state);
        }
        v
    }
}

/// Indices of `k` keyframes over a trajectory of `len` states: first and
/// last always, the rest evenly spaced (fractional positions rounded half up).
/// Trajectories shorter than `k` yield every index.
pub fn keyframe_indices(len: usize, k: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    if len <= k || k < 2 {
        return (0..len).collect();
    }
    let last = len - 1;
    let span = k - 1;
    let mut out: Vec<usize> = (0..k).map(|i| (2 * i * last + span) / (2 * span)).collect();
    out.dedup();
    out
}

/// States of [`Trajectory::states`] at [`keyframe_indices`].
pub fn keyframes<S: Scalar>(traj: &Trajectory<S>, k: usize) -> Vec<SceneState<S>> {
    let states = traj.states();
    keyframe_indices(states.len(), k).into_iter().map(|i| states[i].clone()).collect()
}
