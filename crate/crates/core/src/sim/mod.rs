//! Deterministic kinematic tabletop scene: an end-effector with a gripper,
//! two cubes, a plate and a drawer.
//!
//! Grasping is radius-triggered attachment. Attached objects copy the
//! end-effector position exactly; released objects land instantly on the
//! highest support below them (the table or the top of another object).

mod config;
mod schema;
mod state;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{EnvConfig, PlacementBox, ResetDistribution};
pub use schema::{observe, observe_into, FieldKind, FieldSpec, ObservationSchema, SCHEMA_VERSION};
pub use state::{
    keyframe_indices, keyframes, ActionCommand, Attached, GripperCmd, SceneState, Trajectory, Transition,
};

use crate::num::{mix_seed, Scalar, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid scene state: {0}")]
    InvalidState(String),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("batch length mismatch: {states} states, {actions} actions")]
    BatchMismatch { states: usize, actions: usize },
    #[error("batch size must be at least 1")]
    EmptyBatch,
}

/// The tabletop scene with its constants converted to the scalar type.
#[derive(Debug, Clone)]
pub struct TabletopEnv<S> {
    config: EnvConfig,
    schema: ObservationSchema,
    ws_min: Vec3<S>,
    ws_max: Vec3<S>,
    grasp_radius: S,
    step_clamp: S,
    cube_half: S,
    plate_half_height: S,
    plate_radius: S,
    handle_closed: Vec3<S>,
    pull_axis: Vec3<S>,
    travel: S,
}

impl<S: Scalar> TabletopEnv<S> {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate().map_err(EnvError::InvalidConfig)?;
        let v = |a: [f64; 3]| Vec3::from_f64(a[0], a[1], a[2]);
        Ok(Self {
            schema: ObservationSchema::new(&config),
            ws_min: v(config.workspace_min),
            ws_max: v(config.workspace_max),
            grasp_radius: S::lit(config.grasp_radius),
            step_clamp: S::lit(config.step_clamp),
            cube_half: S::lit(config.cube_half_size),
            plate_half_height: S::lit(config.plate_half_height),
            plate_radius: S::lit(config.plate_radius),
            handle_closed: v(config.drawer_handle_closed),
            pull_axis: v(config.drawer_pull_axis),
            travel: S::lit(config.drawer_travel),
            config,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn schema(&self) -> &ObservationSchema {
        &self.schema
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    /// Draws a single reset state from the reset distribution.
    pub fn sample_reset(&self, env_seed: u64) -> SceneState<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(env_seed);
        let r = &self.config.reset;
        let mut place = |b: PlacementBox, z: f64| {
            let x = rng.random_range(b.x[0]..=b.x[1]);
            let y = rng.random_range(b.y[0]..=b.y[1]);
            Vec3::from_f64(x, y, z)
        };
        let table = self.config.workspace_min[2];
        let cube_z = table + self.config.cube_half_size;
        let cube_a_pos = place(r.cube_a, cube_z);
        let cube_b_pos = place(r.cube_b, cube_z);
        let plate_pos = place(r.plate, table + self.config.plate_half_height);
        let h = self.config.home_pos;
        SceneState {
            ee_pos: Vec3::from_f64(h[0], h[1], h[2]),
            gripper_aperture: S::one(),
            cube_a_pos,
            cube_b_pos,
            plate_pos,
            drawer_fraction: S::zero(),
            attached: Attached::None,
            step_index: 0,
        }
    }

    /// Reset a batch. Environment `i` is seeded with `mix_seed(seed, i)`, so a
    /// batch equals the concatenation of single resets with those seeds.
    /// With an override, every entry is an exact copy of it.
    pub fn reset(
        &self,
        seed: u64,
        batch: usize,
        override_state: Option<&SceneState<S>>,
    ) -> Result<Vec<SceneState<S>>, EnvError> {
        if batch == 0 {
            return Err(EnvError::EmptyBatch);
        }
        match override_state {
            Some(s) => {
                self.validate(s)?;
                Ok(vec![s.clone(); batch])
            }
            None => Ok((0..batch as u64).map(|i| self.sample_reset(mix_seed(seed, i))).collect()),
        }
    }

    pub fn handle_pos(&self, drawer_fraction: S) -> Vec3<S> {
        let d = self.travel * drawer_fraction;
        Vec3::new(
            self.handle_closed.x + self.pull_axis.x * d,
            self.handle_closed.y + self.pull_axis.y * d,
            self.handle_closed.z + self.pull_axis.z * d,
        )
    }

    fn inside(&self, p: Vec3<S>) -> bool {
        p.x >= self.ws_min.x
            && p.x <= self.ws_max.x
            && p.y >= self.ws_min.y
            && p.y <= self.ws_max.y
            && p.z >= self.ws_min.z
            && p.z <= self.ws_max.z
    }

    fn clamp_to_workspace(&self, p: Vec3<S>) -> Vec3<S> {
        Vec3::new(
            p.x.max(self.ws_min.x).min(self.ws_max.x),
            p.y.max(self.ws_min.y).min(self.ws_max.y),
            p.z.max(self.ws_min.z).min(self.ws_max.z),
        )
    }

    /// Checks every scene invariant, naming the first one violated.
    pub fn validate(&self, s: &SceneState<S>) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidState(m.to_string()));
        let finite = s.ee_pos.is_finite()
            && s.cube_a_pos.is_finite()
            && s.cube_b_pos.is_finite()
            && s.plate_pos.is_finite()
            && s.gripper_aperture.is_finite()
            && s.drawer_fraction.is_finite();
        if !finite {
            return bad("all coordinates must be finite");
        }
        if !self.inside(s.ee_pos) {
            return bad("ee_pos must lie inside the workspace box");
        }
        if !(s.gripper_aperture >= S::zero() && s.gripper_aperture <= S::one()) {
            return bad("gripper_aperture must lie in [0, 1]");
        }
        if !(s.drawer_fraction >= S::zero() && s.drawer_fraction <= S::one()) {
            return bad("drawer_fraction must lie in [0, 1]");
        }
        let objects = [
            (Attached::CubeA, "cubeA_pos", s.cube_a_pos),
            (Attached::CubeB, "cubeB_pos", s.cube_b_pos),
            (Attached::Plate, "plate_pos", s.plate_pos),
        ];
        for (who, name, pos) in objects {
            if s.attached == who {
                if !pos.bit_eq(s.ee_pos) {
                    return Err(EnvError::InvalidState(format!(
                        "attached object {name} must coincide with ee_pos"
                    )));
                }
            } else if !self.inside(pos) {
                return Err(EnvError::InvalidState(format!("{name} must lie inside the workspace box")));
            }
        }
        if s.attached == Attached::DrawerHandle
            && self.handle_pos(s.drawer_fraction).dist(s.ee_pos) > S::lit(1e-9)
        {
            return bad("attached drawer handle must coincide with ee_pos");
        }
        Ok(())
    }

    fn grasp_candidates(&self, s: &SceneState<S>) -> [(Attached, Vec3<S>); 4] {
        [
            (Attached::CubeA, s.cube_a_pos),
            (Attached::CubeB, s.cube_b_pos),
            (Attached::Plate, s.plate_pos),
            (Attached::DrawerHandle, self.handle_pos(s.drawer_fraction)),
        ]
    }

    /// Height of the highest support surface under `(x, y)`, ignoring `skip`.
    fn support_height(&self, s: &SceneState<S>, at: Vec3<S>, skip: Attached) -> S {
        let mut top = self.ws_min.z;
        let footprints = [
            (Attached::CubeA, s.cube_a_pos, self.cube_half, self.cube_half),
            (Attached::CubeB, s.cube_b_pos, self.cube_half, self.cube_half),
            (Attached::Plate, s.plate_pos, self.plate_radius, self.plate_half_height),
        ];
        for (who, pos, half_extent, half_height) in footprints {
            if who == skip || who == s.attached {
                continue;
            }
            if (at.x - pos.x).abs() <= half_extent && (at.y - pos.y).abs() <= half_extent {
                top = top.max(pos.z + half_height);
            }
        }
        top
    }

    /// Advances one environment by one step.
    pub fn step_one(&self, s: &SceneState<S>, action: &ActionCommand<S>) -> (SceneState<S>, bool) {
        let mut next = s.clone();
        let c = self.step_clamp;
        let d = action.delta_pos;
        let delta = Vec3::new(d.x.max(-c).min(c), d.y.max(-c).min(c), d.z.max(-c).min(c));
        next.ee_pos = self.clamp_to_workspace(s.ee_pos + delta);

        match next.attached {
            Attached::CubeA => next.cube_a_pos = next.ee_pos,
            Attached::CubeB => next.cube_b_pos = next.ee_pos,
            Attached::Plate => next.plate_pos = next.ee_pos,
            Attached::DrawerHandle => {
                // the handle only moves along its rail; the gripper follows it
                let rel = next.ee_pos - self.handle_closed;
                let along = rel.x * self.pull_axis.x + rel.y * self.pull_axis.y + rel.z * self.pull_axis.z;
                next.drawer_fraction = (along / self.travel).max(S::zero()).min(S::one());
                next.ee_pos = self.handle_pos(next.drawer_fraction);
            }
            Attached::None => {}
        }

        match action.gripper_cmd {
            GripperCmd::Hold => {}
            GripperCmd::Close => {
                next.gripper_aperture = S::zero();
                if next.attached == Attached::None {
                    let mut best: Option<(Attached, S)> = None;
                    for (who, pos) in self.grasp_candidates(&next) {
                        let dist = pos.dist(next.ee_pos);
                        if dist <= self.grasp_radius && best.is_none_or(|(_, b)| dist < b) {
                            best = Some((who, dist));
                        }
                    }
                    if let Some((who, _)) = best {
                        next.attached = who;
                        match who {
                            Attached::CubeA => next.cube_a_pos = next.ee_pos,
                            Attached::CubeB => next.cube_b_pos = next.ee_pos,
                            Attached::Plate => next.plate_pos = next.ee_pos,
                            Attached::DrawerHandle => next.ee_pos = self.handle_pos(next.drawer_fraction),
                            Attached::None => {}
                        }
                    }
                }
            }
            GripperCmd::Open => {
                next.gripper_aperture = S::one();
                let held = next.attached;
                if held != Attached::None {
                    next.attached = Attached::None;
                    let at = next.ee_pos;
                    let support = self.support_height(&next, at, held);
                    match held {
                        Attached::CubeA => next.cube_a_pos = Vec3::new(at.x, at.y, support + self.cube_half),
                        Attached::CubeB => next.cube_b_pos = Vec3::new(at.x, at.y, support + self.cube_half),
                        Attached::Plate => {
                            next.plate_pos = Vec3::new(at.x, at.y, support + self.plate_half_height)
                        }
                        Attached::DrawerHandle | Attached::None => {}
                    }
                }
            }
        }

        next.step_index = s.step_index + 1;
        let done = next.step_index >= self.config.horizon;
        (next, done)
    }

    /// Steps every environment of a batch with its own action.
    pub fn step(
        &self,
        states: &[SceneState<S>],
        actions: &[ActionCommand<S>],
    ) -> Result<Vec<(SceneState<S>, bool)>, EnvError> {
        if states.len() != actions.len() {
            return Err(EnvError::BatchMismatch { states: states.len(), actions: actions.len() });
        }
        Ok(states.iter().zip(actions).map(|(s, a)| self.step_one(s, a)).collect())
    }

    /// Flat observation of a state, laid out by [`Self::schema`].
    pub fn observe(&self, s: &SceneState<S>) -> Vec<S> {
        observe(s, self.handle_pos(s.drawer_fraction))
    }

    pub fn observe_into(&self, s: &SceneState<S>, out: &mut Vec<S>) {
        observe_into(s, self.handle_pos(s.drawer_fraction), out)
    }
}
