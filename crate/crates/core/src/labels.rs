//! HOI label space: verbs, objects and the (verb, object) classes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoiClass {
    pub id: u32,
    pub verb: String,
    pub object: String,
    pub train_count: usize,
}

/// Serialized as `{verbs, objects, hois: [{id, verb, object, train_count}]}`.
/// HOI ids are `1..=N` in `hois` order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpace {
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    pub hois: Vec<HoiClass>,
}

impl LabelSpace {
    /// Every verb paired with every object; `hoi_id = v·O + o + 1`.
    pub fn product(verbs: &[&str], objects: &[&str]) -> Self {
        let mut hois = Vec::with_capacity(verbs.len() * objects.len());
        for v in verbs {
            for o in objects {
                hois.push(HoiClass {
                    id: hois.len() as u32 + 1,
                    verb: v.to_string(),
                    object: o.to_string(),
                    train_count: 0,
                });
            }
        }
        Self {
            verbs: verbs.iter().map(|s| s.to_string()).collect(),
            objects: objects.iter().map(|s| s.to_string()).collect(),
            hois,
        }
    }

    pub fn len(&self) -> usize {
        self.hois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hois.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, h) in self.hois.iter().enumerate() {
            if h.id as usize != i + 1 {
                return Err(Error::Config(format!("hoi ids must be 1..=N in order, found {} at {}", h.id, i)));
            }
            if !self.verbs.contains(&h.verb) || !self.objects.contains(&h.object) {
                return Err(Error::Config(format!("hoi {} uses an undeclared verb or object", h.id)));
            }
            if !seen.insert((&h.verb, &h.object)) {
                return Err(Error::Config(format!("duplicate hoi ({}, {})", h.verb, h.object)));
            }
        }
        Ok(())
    }

    pub fn get(&self, hoi_id: u32) -> Result<&HoiClass> {
        hoi_id
            .checked_sub(1)
            .and_then(|i| self.hois.get(i as usize))
            .ok_or(Error::UnknownHoi(hoi_id))
    }

    /// Object class id for a detector (`PERSON_CLASS + 1 + object index`).
    pub fn object_class_id(&self, object: &str) -> Option<u32> {
        self.objects.iter().position(|o| o == object).map(|i| crate::geometry::PERSON_CLASS + 1 + i as u32)
    }

    /// `(verb, object)` of every class, in id order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        self.hois.iter().map(|h| (h.verb.clone(), h.object.clone())).collect()
    }
}
