//! Readout maps: the pointwise function applied to the query/state dot
//! product to produce a mixing coefficient.

use serde::{Deserialize, Serialize};

use crate::util::{sigmoid, softplus};

/// Elementwise feature map used by kernelized readouts. Applied to queries
/// and to impulse states before their dot product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFeatureMap {
    EluPlusOne,
    Relu,
    Softplus,
    Exp,
}

impl KernelFeatureMap {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            KernelFeatureMap::EluPlusOne => {
                if x > 0.0 {
                    x + 1.0
                } else {
                    x.exp()
                }
            }
            KernelFeatureMap::Relu => x.max(0.0),
            KernelFeatureMap::Softplus => softplus(x),
            KernelFeatureMap::Exp => x.exp(),
        }
    }

    /// Derivative at `x`; for `relu` the subgradient 0 is used at the kink.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            KernelFeatureMap::EluPlusOne => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            KernelFeatureMap::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            KernelFeatureMap::Softplus => sigmoid(x),
            KernelFeatureMap::Exp => x.exp(),
        }
    }

    /// All four maps produce nonnegative outputs.
    pub fn nonnegative(&self) -> bool {
        true
    }
}

impl std::fmt::Display for KernelFeatureMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            KernelFeatureMap::EluPlusOne => "elu-plus-one",
            KernelFeatureMap::Relu => "relu",
            KernelFeatureMap::Softplus => "softplus",
            KernelFeatureMap::Exp => "exp",
        };
        f.write_str(s)
    }
}

/// The readout map applied to `q_i . h_{i,j}`.
///
/// `KernelProduct` is the odd one out: it evaluates on the vector pair
/// (feature map on both sides, then a dot product) rather than on the scalar
/// dot product, and the engine treats it as a preprocessing step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ReadoutMap {
    Identity,
    Exponential,
    Relu,
    Softplus,
    SigmoidLike,
    KernelProduct { feature_map: KernelFeatureMap },
}

impl ReadoutMap {
    /// Pointwise application for the scalar kinds. Panics on `KernelProduct`,
    /// which has no scalar form; the engine never routes it here.
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            ReadoutMap::Identity => x,
            ReadoutMap::Exponential => x.exp(),
            ReadoutMap::Relu => x.max(0.0),
            ReadoutMap::Softplus => softplus(x),
            ReadoutMap::SigmoidLike => sigmoid(x),
            ReadoutMap::KernelProduct { .. } => {
                panic!("kernel-product readout evaluates on vector pairs, not scalars")
            }
        }
    }

    /// Derivative of the scalar kinds at `x`.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            ReadoutMap::Identity => 1.0,
            ReadoutMap::Exponential => x.exp(),
            ReadoutMap::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ReadoutMap::Softplus => sigmoid(x),
            ReadoutMap::SigmoidLike => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ReadoutMap::KernelProduct { .. } => {
                panic!("kernel-product readout evaluates on vector pairs, not scalars")
            }
        }
    }

    /// Linear in the sense that lets coefficients be aggregated into a
    /// fixed-size recurrent state.
    pub fn is_linear(&self) -> bool {
        matches!(self, ReadoutMap::Identity)
    }

    /// Whether outputs are guaranteed nonnegative for any input.
    pub fn nonnegative(&self) -> bool {
        match self {
            ReadoutMap::Identity => false,
            ReadoutMap::Exponential | ReadoutMap::Relu | ReadoutMap::Softplus | ReadoutMap::SigmoidLike => true,
            ReadoutMap::KernelProduct { feature_map } => feature_map.nonnegative(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ReadoutMap::Identity => "identity".into(),
            ReadoutMap::Exponential => "exponential".into(),
            ReadoutMap::Relu => "relu".into(),
            ReadoutMap::Softplus => "softplus".into(),
            ReadoutMap::SigmoidLike => "sigmoid-like".into(),
            ReadoutMap::KernelProduct { feature_map } => format!("kernel-product({feature_map})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_exp_anchor_points() {
        assert_eq!(ReadoutMap::Identity.apply(0.37), 0.37);
        assert_eq!(ReadoutMap::Exponential.apply(0.0), 1.0);
    }

    #[test]
    fn elu_plus_one_at_zero_is_one() {
        assert_eq!(KernelFeatureMap::EluPlusOne.apply(0.0), 1.0);
    }

    #[test]
    fn relu_feature_map() {
        assert_eq!(KernelFeatureMap::Relu.apply(-3.0), 0.0);
        assert_eq!(KernelFeatureMap::Relu.apply(5.0), 5.0);
    }

    #[test]
    fn feature_maps_nonnegative_on_grid() {
        for map in [
            KernelFeatureMap::EluPlusOne,
            KernelFeatureMap::Relu,
            KernelFeatureMap::Softplus,
            KernelFeatureMap::Exp,
        ] {
            for k in -100..100 {
                let x = k as f64 * 0.1;
                let y = map.apply(x);
                assert!(y >= 0.0 && y.is_finite(), "{map} at {x} gave {y}");
            }
        }
    }
}
