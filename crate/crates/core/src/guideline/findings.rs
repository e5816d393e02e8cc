use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::text::normalize_key;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    PatientStated,
    Sensor,
    InLab,
}

impl Provenance {
    pub const ALL: [Provenance; 3] = [Provenance::PatientStated, Provenance::Sensor, Provenance::InLab];

    /// Higher wins when two sources report the same key.
    fn rank(self) -> u8 {
        match self {
            Provenance::PatientStated => 0,
            Provenance::Sensor => 1,
            Provenance::InLab => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::PatientStated => "patient-stated",
            Provenance::Sensor => "sensor",
            Provenance::InLab => "in-lab",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match normalize_key(s).replace(['_', ' '], "-").as_str() {
            "patient" | "patient-stated" | "stated" => Some(Provenance::PatientStated),
            "sensor" | "wearable" => Some(Provenance::Sensor),
            "in-lab" | "lab" | "inlab" => Some(Provenance::InLab),
            _ => None,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FindingValue {
    Bool { value: bool },
    Number { value: f64, units: String },
    Category { value: String },
}

impl FindingValue {
    pub fn yes() -> Self {
        FindingValue::Bool { value: true }
    }

    pub fn no() -> Self {
        FindingValue::Bool { value: false }
    }

    pub fn number(value: f64, units: impl Into<String>) -> Self {
        FindingValue::Number {
            value,
            units: units.into(),
        }
    }

    pub fn category(value: impl Into<String>) -> Self {
        FindingValue::Category {
            value: value.into(),
        }
    }

    /// Answer label for question nodes: booleans read as yes/no.
    pub fn as_answer(&self) -> Option<String> {
        match self {
            FindingValue::Bool { value: true } => Some("yes".into()),
            FindingValue::Bool { value: false } => Some("no".into()),
            FindingValue::Category { value } => Some(normalize_key(value)),
            FindingValue::Number { .. } => None,
        }
    }

    /// Parses `yes`, `no`, `72 bpm`, `38.5 °C` or a bare category.
    pub fn parse(text: &str) -> Self {
        let t = text.trim();
        match normalize_key(t).as_str() {
            "yes" | "true" | "y" => return FindingValue::yes(),
            "no" | "false" | "n" => return FindingValue::no(),
            _ => {}
        }
        let split = t
            .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+'))
            .unwrap_or(t.len());
        if split > 0 {
            if let Ok(value) = t[..split].parse::<f64>() {
                if value.is_finite() {
                    return FindingValue::number(value, t[split..].trim());
                }
            }
        }
        FindingValue::category(t)
    }
}

impl fmt::Display for FindingValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FindingValue::Bool { value } => f.write_str(if *value { "yes" } else { "no" }),
            FindingValue::Number { value, units } if units.is_empty() => write!(f, "{value}"),
            FindingValue::Number { value, units } => write!(f, "{value} {units}"),
            FindingValue::Category { value } => f.write_str(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub value: FindingValue,
    pub provenance: Provenance,
    /// Sensor record ids or transcript turns backing this value.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub citations: Vec<String>,
}

impl Finding {
    pub fn new(value: FindingValue, provenance: Provenance) -> Self {
        Self {
            value,
            provenance,
            citations: Vec::new(),
        }
    }

    pub fn cited(mut self, citations: Vec<String>) -> Self {
        self.citations = citations;
        self
    }
}

/// One value per normalized key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FindingSet(BTreeMap<String, Finding>);

impl FindingSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a finding. An existing value is only overridden by a source of
    /// equal or higher standing (in-lab > sensor > patient-stated).
    /// Returns whether the set changed.
    pub fn record(&mut self, key: &str, finding: Finding) -> bool {
        let key = normalize_key(key);
        match self.0.get(&key) {
            Some(existing) if existing.provenance.rank() > finding.provenance.rank() => false,
            Some(existing) if existing == &finding => false,
            _ => {
                self.0.insert(key, finding);
                true
            }
        }
    }

    pub fn with(mut self, key: &str, value: FindingValue, provenance: Provenance) -> Self {
        self.record(key, Finding::new(value, provenance));
        self
    }

    pub fn get(&self, key: &str) -> Option<&Finding> {
        self.0.get(&normalize_key(key))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Finding)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn merge(&mut self, other: &FindingSet) -> bool {
        let mut changed = false;
        for (k, f) in other.iter() {
            changed |= self.record(k, f.clone());
        }
        changed
    }
}
