//! Concrete diffusions and their auxiliary processes.

pub mod ou;
pub mod slv;

use std::fmt;
use std::str::FromStr;

use crate::error::MpdError;

pub use ou::{ou_exact_score, ou_exact_transition, AuxRate, OuAuxiliary, OuModel};
pub use slv::{SlvAuxiliary, SlvModel};

/// Registry key for config resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelId {
    Ou,
    Slv,
}

impl ModelId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelId::Ou => "ou",
            ModelId::Slv => "slv",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ModelId::Ou => 1,
            ModelId::Slv => 2,
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            ModelId::Ou => 1,
            ModelId::Slv => 4,
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = MpdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ou" => Ok(ModelId::Ou),
            "slv" | "lv" => Ok(ModelId::Slv),
            other => Err(MpdError::Config(format!("unknown model id `{other}`"))),
        }
    }
}
