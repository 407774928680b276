//! Evaluation reports as JSON.
//!
//! Top-level keys, all required:
//!
//! | key | type |
//! |---|---|
//! | `config` | object, every config key as a string, schema order |
//! | `seed` | integer |
//! | `variant` | string |
//! | `clean_accuracy` | number |
//! | `robust_accuracy` | object, `"n/255"` → number, config order |
//! | `text_min_distance`, `text_mean_distance` | number |
//! | `teacher_text_min_distance`, `teacher_text_mean_distance` | number |
//! | `text_block_gap`, `teacher_text_block_gap` | number |
//! | `superclass_confusion` | array of per-superclass counts |
//! | `probe` | object: `shift`, `clean_accuracy`, `robust_accuracy` |
//! | `matrices` | array of `{name, csv, pgm}`, paths relative to the output root |
//!
//! Unknown keys are rejected as well as missing ones.

use std::fmt;
use std::fs;
use std::marker::PhantomData;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use tima_core::harness::SuperclassConfusion;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report does not match the schema: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// String-keyed map that keeps insertion order through JSON.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct OrderedMap<V>(pub Vec<(String, V)>);

impl<V> OrderedMap<V> {
    pub fn get(&self, key: &str) -> Option<&V> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<V: Serialize> Serialize for OrderedMap<V> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de, V: Deserialize<'de>> Deserialize<'de> for OrderedMap<V> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct Entries<V>(PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for Entries<V> {
            type Value = OrderedMap<V>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = access.next_entry::<String, V>()? {
                    if out.iter().any(|(seen, _): &(String, V)| *seen == k) {
                        return Err(serde::de::Error::custom(format!("duplicate key {k:?}")));
                    }
                    out.push((k, v));
                }
                Ok(OrderedMap(out))
            }
        }

        d.deserialize_map(Entries(PhantomData))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionRow {
    pub superclass: usize,
    pub samples: usize,
    pub correct: usize,
    pub within_superclass_errors: usize,
    pub cross_superclass_errors: usize,
}

impl From<&SuperclassConfusion> for ConfusionRow {
    fn from(c: &SuperclassConfusion) -> Self {
        Self {
            superclass: c.superclass,
            samples: c.samples,
            correct: c.correct,
            within_superclass_errors: c.within_superclass_errors,
            cross_superclass_errors: c.cross_superclass_errors,
        }
    }
}

/// Accuracy on the shifted probe set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeResult {
    pub shift: f64,
    pub clean_accuracy: f64,
    pub robust_accuracy: OrderedMap<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixFile {
    pub name: String,
    pub csv: String,
    pub pgm: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub config: OrderedMap<String>,
    pub seed: u64,
    pub variant: String,
    pub clean_accuracy: f64,
    pub robust_accuracy: OrderedMap<f64>,
    pub text_min_distance: f64,
    pub text_mean_distance: f64,
    pub teacher_text_min_distance: f64,
    pub teacher_text_mean_distance: f64,
    pub text_block_gap: f64,
    pub teacher_text_block_gap: f64,
    pub superclass_confusion: Vec<ConfusionRow>,
    pub probe: ProbeResult,
    pub matrices: Vec<MatrixFile>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report values serialize");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<(), ReportError> {
    Ok(fs::write(path, report.to_json())?)
}

pub fn read_report(path: &Path) -> Result<EvalReport, ReportError> {
    EvalReport::from_json(&fs::read_to_string(path)?)
}
