//! The fixed seven-field schema shared by every memory block.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// One of the seven semantic fields. Declaration order is the serialization order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldId {
    Focus,
    Issue,
    Intent,
    Motivation,
    Commitment,
    Perspective,
    Mood,
}

impl FieldId {
    pub const COUNT: usize = 7;

    pub const ALL: [FieldId; 7] = [
        FieldId::Focus,
        FieldId::Issue,
        FieldId::Intent,
        FieldId::Motivation,
        FieldId::Commitment,
        FieldId::Perspective,
        FieldId::Mood,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FieldId::Focus => "focus",
            FieldId::Issue => "issue",
            FieldId::Intent => "intent",
            FieldId::Motivation => "motivation",
            FieldId::Commitment => "commitment",
            FieldId::Perspective => "perspective",
            FieldId::Mood => "mood",
        }
    }
}

impl fmt::Display for FieldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownField(pub String);

impl fmt::Display for UnknownField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown field `{}`", self.0)
    }
}

impl std::error::Error for UnknownField {}

impl FromStr for FieldId {
    type Err = UnknownField;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FieldId::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| UnknownField(s.to_string()))
    }
}

/// A value for every field, indexed by [`FieldId`].
///
/// Serializes as a map keyed by field name in schema order; deserializing
/// requires all seven keys.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Fields<T>(pub [T; 7]);

impl<T> Fields<T> {
    pub fn from_fn(mut f: impl FnMut(FieldId) -> T) -> Self {
        Fields(FieldId::ALL.map(&mut f))
    }

    pub fn iter(&self) -> impl Iterator<Item = (FieldId, &T)> {
        FieldId::ALL.into_iter().zip(self.0.iter())
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.0.iter()
    }

    pub fn map<U>(&self, mut f: impl FnMut(FieldId, &T) -> U) -> Fields<U> {
        Fields::from_fn(|id| f(id, &self.0[id.index()]))
    }
}

impl<T: Copy> Fields<T> {
    pub fn splat(value: T) -> Self {
        Fields([value; 7])
    }
}

impl<T> Index<FieldId> for Fields<T> {
    type Output = T;

    fn index(&self, id: FieldId) -> &T {
        &self.0[id.index()]
    }
}

impl<T> IndexMut<FieldId> for Fields<T> {
    fn index_mut(&mut self, id: FieldId) -> &mut T {
        &mut self.0[id.index()]
    }
}

impl<T: Serialize> Serialize for Fields<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(FieldId::COUNT))?;
        for (id, value) in self.iter() {
            map.serialize_entry(id.name(), value)?;
        }
        map.end()
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Fields<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let mut raw: BTreeMap<String, T> = BTreeMap::deserialize(deserializer)?;
        if let Some(extra) = raw.keys().find(|k| k.parse::<FieldId>().is_err()) {
            return Err(D::Error::custom(format!("unknown field `{extra}`")));
        }
        let mut out: Vec<T> = Vec::with_capacity(FieldId::COUNT);
        for id in FieldId::ALL {
            match raw.remove(id.name()) {
                Some(v) => out.push(v),
                None => return Err(D::Error::custom(format!("missing field `{id}`"))),
            }
        }
        let arr: [T; 7] = out
            .try_into()
            .map_err(|_| D::Error::custom("expected seven fields"))?;
        Ok(Fields(arr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_fixed() {
        let names: Vec<_> = FieldId::ALL.iter().map(|f| f.name()).collect();
        assert_eq!(
            names,
            ["focus", "issue", "intent", "motivation", "commitment", "perspective", "mood"]
        );
        for (i, f) in FieldId::ALL.iter().enumerate() {
            assert_eq!(f.index(), i);
            assert_eq!(f.name().parse::<FieldId>().unwrap(), *f);
        }
    }

    #[test]
    fn fields_json_requires_all_keys() {
        let f = Fields::from_fn(|id| id.index() as f64);
        let s = serde_json::to_string(&f).unwrap();
        assert!(s.starts_with("{\"focus\":0.0,\"issue\":1.0"));
        let back: Fields<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);

        let missing = r#"{"focus":1,"issue":1,"intent":1,"motivation":1,"commitment":1,"perspective":1}"#;
        assert!(serde_json::from_str::<Fields<f64>>(missing).is_err());
    }
}
