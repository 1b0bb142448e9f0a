use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMethod {
    Ctlpe,
    CtlpeNoBias,
    Sinusoidal,
    IrrSinusoidal,
    Uniform,
    TimeFeature,
    Simple,
    SimpleOverlap,
    Ncde,
}

impl PeMethod {
    pub const ALL: [PeMethod; 9] = [
        PeMethod::Ctlpe,
        PeMethod::CtlpeNoBias,
        PeMethod::Sinusoidal,
        PeMethod::IrrSinusoidal,
        PeMethod::Uniform,
        PeMethod::TimeFeature,
        PeMethod::Simple,
        PeMethod::SimpleOverlap,
        PeMethod::Ncde,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PeMethod::Ctlpe => "ctlpe",
            PeMethod::CtlpeNoBias => "ctlpe_no_bias",
            PeMethod::Sinusoidal => "sinusoidal",
            PeMethod::IrrSinusoidal => "irr_sinusoidal",
            PeMethod::Uniform => "uniform",
            PeMethod::TimeFeature => "time_feature",
            PeMethod::Simple => "simple",
            PeMethod::SimpleOverlap => "simple_overlap",
            PeMethod::Ncde => "ncde",
        }
    }

    pub fn needs_grid(self) -> bool {
        self == PeMethod::Simple
    }

    pub fn needs_max_len(self) -> bool {
        matches!(self, PeMethod::Simple | PeMethod::SimpleOverlap | PeMethod::Sinusoidal)
    }

    pub fn needs_time_scale(self) -> bool {
        self == PeMethod::IrrSinusoidal
    }
}

impl fmt::Display for PeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PeMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown PE method `{s}`")))
    }
}

/// Method choice plus the fields that method needs. `simple` also uses
/// `max_len` as its table length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeMethodConfig {
    pub method: PeMethod,
    pub d_model: usize,
    pub grid_resolution: Option<f64>,
    pub max_len: Option<usize>,
    pub time_scale: Option<f64>,
}

impl PeMethodConfig {
    /// Config carrying exactly the fields `method` requires, taken from the
    /// supplied values.
    pub fn with_defaults(method: PeMethod, d_model: usize, max_len: usize, grid_resolution: f64, time_scale: f64) -> Self {
        Self {
            method,
            d_model,
            grid_resolution: method.needs_grid().then_some(grid_resolution),
            max_len: method.needs_max_len().then_some(max_len),
            time_scale: method.needs_time_scale().then_some(time_scale),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::InvalidConfig("d_model must be positive".into()));
        }
        let m = self.method;
        let check = |present: bool, needed: bool, field: &str| {
            if present != needed {
                let verb = if needed { "requires" } else { "does not take" };
                return Err(Error::InvalidConfig(format!("{m} {verb} `{field}`")));
            }
            Ok(())
        };
        check(self.grid_resolution.is_some(), m.needs_grid(), "grid_resolution")?;
        check(self.max_len.is_some(), m.needs_max_len(), "max_len")?;
        check(self.time_scale.is_some(), m.needs_time_scale(), "time_scale")?;
        if self.grid_resolution.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidConfig("grid_resolution must be positive".into()));
        }
        if self.time_scale.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidConfig("time_scale must be positive".into()));
        }
        if self.max_len == Some(0) {
            return Err(Error::InvalidConfig("max_len must be positive".into()));
        }
        Ok(())
    }
}
