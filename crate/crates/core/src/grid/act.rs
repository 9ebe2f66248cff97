use serde::{Deserialize, Serialize};

use super::{FeatureGrid, Real};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activate<T: Real>(input: &FeatureGrid<T>, kind: Activation) -> FeatureGrid<T> {
    match kind {
        Activation::LeakyRelu { slope } => {
            let s = T::lit(slope);
            input.map(|v| if v >= T::zero() { v } else { v * s })
        }
        Activation::Sigmoid => input.map(sigmoid),
        Activation::Tanh => input.map(|v| v.tanh()),
    }
}

/// Gradient w.r.t. the input given the forward input and output.
pub fn activate_backward<T: Real>(
    input: &FeatureGrid<T>,
    output: &FeatureGrid<T>,
    grad_out: &FeatureGrid<T>,
    kind: Activation,
) -> FeatureGrid<T> {
    let mut g = grad_out.clone();
    match kind {
        Activation::LeakyRelu { slope } => {
            let s = T::lit(slope);
            for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
                if x < T::zero() {
                    *d = *d * s;
                }
            }
        }
        Activation::Sigmoid => {
            for (d, &y) in g.data_mut().iter_mut().zip(output.data()) {
                *d = *d * y * (T::one() - y);
            }
        }
        Activation::Tanh => {
            for (d, &y) in g.data_mut().iter_mut().zip(output.data()) {
                *d = *d * (T::one() - y * y);
            }
        }
    }
    g
}
