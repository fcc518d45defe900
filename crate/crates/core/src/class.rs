//! Trial classes. "Modulated" doubles as the "Yes" answer and "Baseline" as "No".

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Modulated,
    Baseline,
}

impl Class {
    /// +1 for Modulated, -1 for Baseline.
    pub fn sign(self) -> f64 {
        match self {
            Class::Modulated => 1.0,
            Class::Baseline => -1.0,
        }
    }

    pub fn opposite(self) -> Class {
        match self {
            Class::Modulated => Class::Baseline,
            Class::Baseline => Class::Modulated,
        }
    }

    pub fn answer(self) -> &'static str {
        match self {
            Class::Modulated => "Yes",
            Class::Baseline => "No",
        }
    }

    /// Feedback tone for the class.
    pub fn tone_hz(self) -> f64 {
        match self {
            Class::Modulated => 370.0,
            Class::Baseline => 200.0,
        }
    }
}

/// Ground truth of a trial; assistive questions have no known answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueClass {
    Modulated,
    Baseline,
    Unknown,
}

impl TrueClass {
    pub fn known(self) -> Option<Class> {
        match self {
            TrueClass::Modulated => Some(Class::Modulated),
            TrueClass::Baseline => Some(Class::Baseline),
            TrueClass::Unknown => None,
        }
    }
}

impl From<Class> for TrueClass {
    fn from(c: Class) -> Self {
        match c {
            Class::Modulated => TrueClass::Modulated,
            Class::Baseline => TrueClass::Baseline,
        }
    }
}
