use serde::{Deserialize, Serialize};

/// Axis-aligned placement range on the table plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementBox {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

/// Initial-state distribution. Objects are placed uniformly inside their
/// boxes; the drawer starts closed and the gripper starts open at home.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResetDistribution {
    pub cube_a: PlacementBox,
    pub cube_b: PlacementBox,
    pub plate: PlacementBox,
}

impl Default for ResetDistribution {
    fn default() -> Self {
        Self {
            cube_a: PlacementBox { x: [0.45, 0.55], y: [-0.15, -0.05] },
            cube_b: PlacementBox { x: [0.45, 0.55], y: [0.05, 0.15] },
            plate: PlacementBox { x: [0.26, 0.34], y: [-0.30, -0.22] },
        }
    }
}

/// Geometry and episode constants of the tabletop scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    pub grasp_radius: f64,
    pub step_clamp: f64,
    pub horizon: usize,
    pub batch_size: usize,
    pub home_pos: [f64; 3],
    pub cube_half_size: f64,
    pub plate_half_height: f64,
    pub plate_radius: f64,
    /// Handle position with the drawer fully closed.
    pub drawer_handle_closed: [f64; 3],
    /// Unit vector along which the handle travels when opening.
    pub drawer_pull_axis: [f64; 3],
    pub drawer_travel: f64,
    pub reset: ResetDistribution,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            workspace_min: [0.0, -0.4, 0.0],
            workspace_max: [0.8, 0.4, 0.5],
            grasp_radius: 0.03,
            step_clamp: 0.05,
            horizon: 250,
            batch_size: 64,
            home_pos: [0.3, 0.0, 0.3],
            cube_half_size: 0.025,
            plate_half_height: 0.01,
            plate_radius: 0.08,
            drawer_handle_closed: [0.72, 0.28, 0.12],
            drawer_pull_axis: [-1.0, 0.0, 0.0],
            drawer_travel: 0.2,
            reset: ResetDistribution::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), String> {
        for i in 0..3 {
            if self.workspace_min[i] >= self.workspace_max[i] {
                return Err(format!("workspace axis {i} is empty"));
            }
        }
        if self.horizon == 0 {
            return Err("horizon must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if !(self.grasp_radius > 0.0 && self.step_clamp > 0.0 && self.drawer_travel > 0.0) {
            return Err("grasp_radius, step_clamp and drawer_travel must be positive".into());
        }
        let axis = self.drawer_pull_axis;
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err("drawer_pull_axis must be a unit vector".into());
        }
        let inside = |p: [f64; 3]| (0..3).all(|i| p[i] >= self.workspace_min[i] && p[i] <= self.workspace_max[i]);
        if !inside(self.home_pos) {
            return Err("home_pos lies outside the workspace".into());
        }
        let open = [0, 1, 2].map(|i| self.drawer_handle_closed[i] + axis[i] * self.drawer_travel);
        if !inside(self.drawer_handle_closed) || !inside(open) {
            return Err("drawer handle travel leaves the workspace".into());
        }
        for (name, b) in [("cube_a", self.reset.cube_a), ("cube_b", self.reset.cube_b), ("plate", self.reset.plate)] {
            if b.x[0] > b.x[1] || b.y[0] > b.y[1] {
                return Err(format!("placement box {name} is inverted"));
            }
            if !inside([b.x[0], b.y[0], self.workspace_min[2]]) || !inside([b.x[1], b.y[1], self.workspace_min[2]]) {
                return Err(format!("placement box {name} leaves the workspace"));
            }
        }
        Ok(())
    }
}
