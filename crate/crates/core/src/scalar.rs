use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Scalar type for recall scores and ranking metrics.
pub trait Score:
    Float + FromPrimitive + Debug + Default + Send + Sync + Serialize + DeserializeOwned + 'static
{
    fn ratio(numerator: usize, denominator: usize) -> Self {
        let n = Self::from_usize(numerator).expect("count fits the score type");
        let d = Self::from_usize(denominator).expect("count fits the score type");
        n / d
    }
}

impl<T> Score for T where
    T: Float + FromPrimitive + Debug + Default + Send + Sync + Serialize + DeserializeOwned + 'static
{
}
