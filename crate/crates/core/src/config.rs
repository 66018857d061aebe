//! JSON model configuration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DurationKernel, FluidModel, KernelRepr, RawMatrix, StateSpace};

/// On-disk description of a [`FluidModel`].
///
/// ```json
/// {
///   "states": [1.0, -1.0],
///   "alpha": [1.0, 0.0],
///   "gamma": 1.0,
///   "kernel": {"type": "constant", "c": [[-1.0, 0.9], [0.8, -1.0]], "d": [[0.1, 0.0], [0.0, 0.2]]}
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Net revenue rate of each state.
    pub states: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_matrix: Option<RawMatrix>,
    pub alpha: Vec<f64>,
    pub kernel: KernelRepr,
    /// Uniformization bound; defaults to the analytic supremum of the exit rates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn build(&self) -> Result<FluidModel> {
        let p = self.states.len();
        let space = StateSpace::new(self.states.clone())?;
        let kernel = DurationKernel::new(self.kernel.clone(), self.gamma)?;
        let sigma = self.sigma.clone().unwrap_or_else(|| vec![0.0; p]);
        let k_cost = match &self.cost_matrix {
            None => DMatrix::zeros(p, p),
            Some(raw) => {
                if raw.len() != p || raw.iter().any(|r| r.len() != p) {
                    return Err(Error::Structure(format!("cost_matrix must be {p}x{p}")));
                }
                DMatrix::from_fn(p, p, |i, j| raw[i][j])
            }
        };
        FluidModel::new(space, kernel, DVector::from_vec(self.alpha.clone()), sigma, k_cost)
    }
}
