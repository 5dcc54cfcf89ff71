//! Named model state.

use crate::Tensor;

/// Whether an entry is updated by gradient steps or maintained by the model itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    /// Running statistics, power-iteration vectors and similar state.
    Buffer,
}

/// A named tensor owned by a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
}

impl Param {
    pub fn weight(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), value, role: ParamRole::Weight }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), value, role: ParamRole::Buffer }
    }

    pub fn is_weight(&self) -> bool {
        self.role == ParamRole::Weight
    }
}
