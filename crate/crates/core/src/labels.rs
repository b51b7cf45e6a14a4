//! The (weather, light) label taxonomy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weather {
    Clear,
    Rain,
    Snow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Light {
    Bright,
    Moderate,
    Low,
}

impl Weather {
    pub const ALL: [Weather; 3] = [Weather::Clear, Weather::Rain, Weather::Snow];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            Weather::Clear => "clear",
            Weather::Rain => "rain",
            Weather::Snow => "snow",
        }
    }
}

impl Light {
    pub const ALL: [Light; 3] = [Light::Bright, Light::Moderate, Light::Low];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            Light::Bright => "bright",
            Light::Moderate => "moderate",
            Light::Low => "low",
        }
    }
}

impl FromStr for Weather {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Weather::ALL
            .into_iter()
            .find(|w| w.token() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown weather token {s:?}")))
    }
}

impl FromStr for Light {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Light::ALL
            .into_iter()
            .find(|l| l.token() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown light token {s:?}")))
    }
}

impl fmt::Display for Weather {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl fmt::Display for Light {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Both categories of one image; they are always assigned together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelSet {
    pub weather: Weather,
    pub light: Light,
}

impl LabelSet {
    pub fn new(weather: Weather, light: Light) -> Self {
        Self { weather, light }
    }

    /// Index of the (weather, light) stratum in `0..9`, weather-major.
    pub fn stratum(self) -> usize {
        self.weather.index() * 3 + self.light.index()
    }

    pub fn from_stratum(s: usize) -> Option<Self> {
        Some(Self::new(Weather::from_index(s / 3)?, Light::from_index(s % 3)?))
    }

    pub fn all() -> impl Iterator<Item = LabelSet> {
        (0..9).filter_map(LabelSet::from_stratum)
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.weather, self.light)
    }
}

/// Names of the six one-vs-rest labels, in metric order.
pub const LABEL_NAMES: [&str; 6] = ["clear", "rain", "snow", "bright", "moderate", "low"];
