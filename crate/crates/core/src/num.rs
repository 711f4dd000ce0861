//! Scalar abstraction shared by the simulator, the expression evaluator and
//! the policy network.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating point type the numeric core is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 constant representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Bit pattern widened to 64 bits; used for exact state comparison and hashing.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    #[inline]
    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Fixed-size 3-vector over a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Vec3<S> {
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Scalar> Vec3<S> {
    pub fn new(x: S, y: S, z: S) -> Self {
        Self { x, y, z }
    }

    pub fn from_f64(x: f64, y: f64, z: f64) -> Self {
        Self::new(S::lit(x), S::lit(y), S::lit(z))
    }

    pub fn zero() -> Self {
        Self::new(S::zero(), S::zero(), S::zero())
    }

    pub fn to_array(self) -> [S; 3] {
        [self.x, self.y, self.z]
    }

    /// Euclidean distance, summed in x, y, z order.
    pub fn dist(self, o: Self) -> S {
        let d = self - o;
        (d.x * d.x + d.y * d.y + d.z * d.z).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn bit_eq(self, o: Self) -> bool {
        self.x.bits() == o.x.bits() && self.y.bits() == o.y.bits() && self.z.bits() == o.z.bits()
    }

    pub fn cast<T: Scalar>(self) -> Vec3<T> {
        Vec3::new(T::lit(self.x.as_f64()), T::lit(self.y.as_f64()), T::lit(self.z.as_f64()))
    }
}

impl<S: Scalar> std::ops::Add for Vec3<S> {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<S: Scalar> std::ops::Sub for Vec3<S> {
    type Output = Self;

    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

/// Deterministic 64-bit seed mixing (SplitMix64 finalizer over `base ^ stream`).
///
/// Every derived stream in the engine (per-env resets, per-candidate training,
/// evaluation episodes) goes through this so that seeds never depend on call order.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
