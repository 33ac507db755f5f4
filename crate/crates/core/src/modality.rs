use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    He,
    Sim,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::He, Modality::Sim];

    /// Domain-classifier label: 0 for H&E, 1 for SIM.
    pub fn label(self) -> u8 {
        match self {
            Modality::He => 0,
            Modality::Sim => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::He => "he",
            Modality::Sim => "sim",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "he" => Ok(Modality::He),
            "sim" => Ok(Modality::Sim),
            other => Err(input_err!("unknown modality {other:?}")),
        }
    }
}
