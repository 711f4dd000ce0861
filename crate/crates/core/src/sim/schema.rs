//! Observation layout. The schema text rendered here is interpolated into
//! every generation prompt and is the only identifier source the expression
//! checker accepts.

use std::fmt::Write as _;

use super::config::EnvConfig;
use super::state::SceneState;
use crate::num::{Scalar, Vec3};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Scalar,
    Vec3,
}

impl FieldKind {
    pub fn width(self) -> usize {
        match self {
            FieldKind::Scalar => 1,
            FieldKind::Vec3 => 3,
        }
    }

    fn label(self) -> &'static str {
        match self {
            FieldKind::Scalar => "scalar",
            FieldKind::Vec3 => "vec3",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub name: &'static str,
    pub kind: FieldKind,
    pub unit: &'static str,
    pub offset: usize,
    pub description: &'static str,
    /// Per-component value range used to normalise policy inputs.
    pub range: [(f64, f64); 3],
}

impl FieldSpec {
    pub fn width(&self) -> usize {
        self.kind.width()
    }
}

/// Ordered field layout of the flat observation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSchema {
    fields: Vec<FieldSpec>,
    dim: usize,
    text: String,
}

const LAYOUT: [(&str, FieldKind, &str, &str); 8] = [
    ("ee_pos", FieldKind::Vec3, "m", "end-effector (gripper centre) position"),
    ("cubeA_pos", FieldKind::Vec3, "m", "centre of cube A"),
    ("cubeB_pos", FieldKind::Vec3, "m", "centre of cube B"),
    ("plate_pos", FieldKind::Vec3, "m", "centre of the plate"),
    ("drawer_handle_pos", FieldKind::Vec3, "m", "drawer handle grasp point"),
    ("gripper_aperture", FieldKind::Scalar, "1", "0 = closed, 1 = fully open"),
    ("drawer_fraction", FieldKind::Scalar, "1", "0 = closed, 1 = fully open"),
    ("step_index", FieldKind::Scalar, "steps", "steps elapsed since reset"),
];

impl ObservationSchema {
    pub fn new(config: &EnvConfig) -> Self {
        let lo = config.workspace_min;
        let hi = config.workspace_max;
        let pos_range = [(lo[0], hi[0]), (lo[1], hi[1]), (lo[2], hi[2])];
        let mut fields = Vec::with_capacity(LAYOUT.len());
        let mut offset = 0;
        for (name, kind, unit, description) in LAYOUT {
            let range = match (kind, name) {
                (FieldKind::Vec3, _) => pos_range,
                (FieldKind::Scalar, "step_index") => [(0.0, config.horizon as f64); 3],
                (FieldKind::Scalar, _) => [(0.0, 1.0); 3],
            };
            fields.push(FieldSpec { name, kind, unit, offset, description, range });
            offset += kind.width();
        }
        let text = render_text(config, &fields, offset);
        Self { fields, dim: offset, text }
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Versioned plain-text description (name, type, unit, index range).
    pub fn text(&self) -> &str {
        &self.text
    }

    /// Reads a 3-vector field back out of an observation.
    pub fn read_vec3<S: Scalar>(&self, obs: &[S], name: &str) -> Option<Vec3<S>> {
        let f = self.field(name).filter(|f| f.kind == FieldKind::Vec3)?;
        Some(Vec3::new(obs[f.offset], obs[f.offset + 1], obs[f.offset + 2]))
    }

    pub fn read_scalar<S: Scalar>(&self, obs: &[S], name: &str) -> Option<S> {
        let f = self.field(name).filter(|f| f.kind == FieldKind::Scalar)?;
        Some(obs[f.offset])
    }

    /// Maps every component affinely from its declared range onto [-1, 1].
    pub fn normalize_into<S: Scalar>(&self, obs: &[S], out: &mut Vec<S>) {
        out.clear();
        for f in &self.fields {
            for c in 0..f.width() {
                let (lo, hi) = f.range[c];
                let mid = S::lit(0.5 * (lo + hi));
                let half = S::lit(0.5 * (hi - lo));
                out.push((obs[f.offset + c] - mid) / half);
            }
        }
    }
}

fn render_text(config: &EnvConfig, fields: &[FieldSpec], dim: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# tabletop observation schema v{SCHEMA_VERSION}");
    let _ = writeln!(
        s,
        "# frame: x away from the robot base, y to the left, z up; table surface at z = 0"
    );
    let _ = writeln!(
        s,
        "# workspace: x in [{}, {}], y in [{}, {}], z in [{}, {}] (m)",
        config.workspace_min[0],
        config.workspace_max[0],
        config.workspace_min[1],
        config.workspace_max[1],
        config.workspace_min[2],
        config.workspace_max[2]
    );
    let _ = writeln!(
        s,
        "# cubes: edge {} m; plate: radius {} m; drawer travel {} m; episode horizon {} steps",
        2.0 * config.cube_half_size,
        config.plate_radius,
        config.drawer_travel,
        config.horizon
    );
    let _ = writeln!(s, "# observation dim: {dim}");
    let _ = writeln!(s, "{:<18} {:<7} {:<6} {:<9} description", "name", "type", "unit", "index");
    for f in fields {
        let index = format!("[{}, {})", f.offset, f.offset + f.width());
        let _ = writeln!(s, "{:<18} {:<7} {:<6} {:<9} {}", f.name, f.kind.label(), f.unit, index, f.description);
    }
    s
}

/// Flat observation vector, laid out by [`ObservationSchema`].
pub fn observe<S: Scalar>(state: &SceneState<S>, handle: Vec3<S>) -> Vec<S> {
    let mut v = Vec::with_capacity(18);
    observe_into(state, handle, &mut v);
    v
}

pub fn observe_into<S: Scalar>(state: &SceneState<S>, handle: Vec3<S>, out: &mut Vec<S>) {
    out.clear();
    for p in [state.ee_pos, state.cube_a_pos, state.cube_b_pos, state.plate_pos, handle] {
        out.extend_from_slice(&p.to_array());
    }
    out.push(state.gripper_aperture);
    out.push(state.drawer_fraction);
    out.push(S::from_usize(state.step_index).unwrap_or_else(S::infinity));
}
