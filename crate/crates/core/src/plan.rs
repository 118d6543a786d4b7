//! Persistence plans: which objects to flush, where, and how often.

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::workloads::RegionKind;

/// How often a region persists the critical objects.
///
/// Serialized as `"never"`, `"every_visit"` or a positive integer `x`
/// (persist after every `x`-th inner-loop iteration).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frequency {
    Never,
    EveryVisit,
    Every(u32),
}

impl Frequency {
    pub fn is_never(self) -> bool {
        matches!(self, Frequency::Never)
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Frequency::Never => f.write_str("never"),
            Frequency::EveryVisit => f.write_str("every_visit"),
            Frequency::Every(x) => write!(f, "{x}"),
        }
    }
}

impl Serialize for Frequency {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Frequency::Never => s.serialize_str("never"),
            Frequency::EveryVisit => s.serialize_str("every_visit"),
            Frequency::Every(x) => s.serialize_u32(*x),
        }
    }
}

impl<'de> Deserialize<'de> for Frequency {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Frequency;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"never\", \"every_visit\" or a positive integer")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Frequency, E> {
                match v {
                    "never" => Ok(Frequency::Never),
                    "every_visit" => Ok(Frequency::EveryVisit),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Frequency, E> {
                match u32::try_from(v) {
                    Ok(x) if x > 0 => Ok(Frequency::Every(x)),
                    _ => Err(E::invalid_value(de::Unexpected::Unsigned(v), &self)),
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Frequency, E> {
                if v > 0 {
                    self.visit_u64(v as u64)
                } else {
                    Err(E::invalid_value(de::Unexpected::Signed(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionChoice {
    pub region_id: usize,
    pub kind: RegionKind,
    pub frequency: Frequency,
}

/// Undefined quantities are written as JSON `null` and read back as NaN.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectCorrelation {
    pub name: String,
    #[serde(with = "nan_as_null")]
    pub rho: f64,
    #[serde(with = "nan_as_null")]
    pub p_value: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistencePlan {
    pub critical_objects: Vec<String>,
    pub regions: Vec<RegionChoice>,
    #[serde(rename = "predicted_Y_prime")]
    #[serde(with = "nan_as_null")]
    pub predicted_y_prime: f64,
    #[serde(with = "nan_as_null")]
    pub predicted_loss: f64,
    pub feasible: bool,
    #[serde(default)]
    pub correlations: Vec<ObjectCorrelation>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl PersistencePlan {
    /// Persists `objects` at every inner-loop iteration of every LOOP region
    /// and at the end of every STRAIGHT region.
    pub fn everywhere(objects: &[String], regions: &[(usize, RegionKind)]) -> Self {
        Self {
            critical_objects: objects.to_vec(),
            regions: regions
                .iter()
                .map(|&(region_id, kind)| RegionChoice {
                    region_id,
                    kind,
                    frequency: match kind {
                        RegionKind::Loop => Frequency::Every(1),
                        RegionKind::Straight => Frequency::EveryVisit,
                    },
                })
                .collect(),
            predicted_y_prime: f64::NAN,
            predicted_loss: f64::NAN,
            feasible: true,
            correlations: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Persists `objects` once per main-loop iteration, at the end of the
    /// last region.
    pub fn per_iteration(objects: &[String], regions: &[(usize, RegionKind)]) -> Self {
        let last = regions.len().saturating_sub(1);
        let mut plan = Self::everywhere(objects, regions);
        for (i, r) in plan.regions.iter_mut().enumerate() {
            r.frequency = if i == last {
                Frequency::EveryVisit
            } else {
                Frequency::Never
            };
        }
        plan
    }

    pub fn frequency(&self, region_id: usize) -> Frequency {
        self.regions
            .iter()
            .find(|r| r.region_id == region_id)
            .map(|r| r.frequency)
            .unwrap_or(Frequency::Never)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}
