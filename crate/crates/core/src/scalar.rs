use std::fmt::{Debug, Display};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point type usable for delay samples and latency statistics.
pub trait DelayScalar:
    Float + FromPrimitive + ToPrimitive + FromStr + Debug + Display + Send + Sync + serde::Serialize + 'static
{
    /// Converts a millisecond value to whole simulator microseconds.
    fn to_micros(self) -> u64 {
        (self.to_f64().unwrap_or(0.0) * 1000.0).round().max(0.0) as u64
    }

    fn from_micros(us: u64) -> Self {
        Self::from_f64(us as f64 / 1000.0).unwrap_or_else(Self::zero)
    }
}

impl DelayScalar for f32 {}
impl DelayScalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micros_round_trip() {
        assert_eq!(2.5f64.to_micros(), 2500);
        assert_eq!(f32::from_micros(1500), 1.5);
        assert_eq!((-1.0f64).to_micros(), 0);
    }
}
