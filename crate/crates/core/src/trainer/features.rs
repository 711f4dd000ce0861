use crate::num::Scalar;
use crate::sim::{FieldKind, ObservationSchema};

/// Length scale of the relative-position inputs (m).
const REL_SCALE: f64 = 0.1;

/// Policy input: a re-encoding of the observation.
///
/// The first 3-vector field (the end-effector) and the bounded scalar fields
/// are normalised onto [-1, 1]. Every other 3-vector field contributes its
/// offset from the end-effector, so "move toward X" is a simple function of
/// the input; offsets of fields the policy does not observe are held at zero
/// so unrelated objects cannot perturb it. Unbounded fields (the step
/// counter) are left out, which keeps the policy stationary.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    anchor: usize,
    /// `(offset, observed)` of the relative 3-vector inputs.
    others: Vec<(usize, bool)>,
    /// `(offset, mid, half-range)` of the normalised components.
    absolute: Vec<(usize, f64, f64)>,
    obs_dim: usize,
}

impl FeatureMap {
    /// Feature map observing the offsets of the named fields only.
    pub fn new<T: AsRef<str>>(schema: &ObservationSchema, observed: &[T]) -> Self {
        let mut vecs = schema.fields().iter().filter(|f| f.kind == FieldKind::Vec3);
        let anchor = vecs.next();
        let others = vecs.map(|f| (f.offset, observed.iter().any(|n| n.as_ref() == f.name))).collect();
        let mut absolute = Vec::new();
        let bounded = schema.fields().iter().filter(|f| f.kind == FieldKind::Scalar && f.unit != "steps");
        for f in anchor.into_iter().chain(bounded) {
            for c in 0..f.width() {
                let (lo, hi) = f.range[c];
                absolute.push((f.offset + c, 0.5 * (lo + hi), 0.5 * (hi - lo)));
            }
        }
        Self { anchor: anchor.map_or(0, |f| f.offset), others, absolute, obs_dim: schema.dim() }
    }

    /// Input width for `schema`; independent of which fields are observed.
    pub fn input_dim_for(schema: &ObservationSchema) -> usize {
        Self::new::<&str>(schema, &[]).input_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn input_dim(&self) -> usize {
        self.absolute.len() + 3 * self.others.len()
    }

    pub fn compute<S: Scalar>(&self, obs: &[S], out: &mut Vec<S>) {
        out.clear();
        for &(o, mid, half) in &self.absolute {
            out.push((obs[o] - S::lit(mid)) / S::lit(half));
        }
        let inv = S::lit(1.0 / REL_SCALE);
        for &(o, on) in &self.others {
            for c in 0..3 {
                out.push(if on { (obs[o + c] - obs[self.anchor + c]) * inv } else { S::zero() });
            }
        }
    }
}
