use std::fmt;

use serde::{Deserialize, Serialize};

use super::{GraphError, Tensor};

/// The four sub-network parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// Encoder.
    E,
    /// Memory-updating network.
    U,
    /// Fusion conv + decoder.
    D,
    /// Memory classifier.
    G,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::E, Group::U, Group::D, Group::G];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::E => "E",
            Group::U => "U",
            Group::D => "D",
            Group::G => "G",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub group: Group,
    /// Full `group/layer/param` name.
    pub name: String,
    pub value: Tensor,
}

/// Named graph tensors for every network parameter. A network forward pass
/// looks its weights up here by name, so evaluating a network under
/// substituted values (a lookahead step, a frozen copy) is just passing a
/// different `ParamSet`.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, group: Group, name: impl Into<String>, value: Tensor) -> Result<(), GraphError> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(GraphError::DuplicateLeaf(name));
        }
        self.entries.push(ParamEntry { group, name, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, GraphError> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.value)
            .ok_or_else(|| GraphError::MissingLeaf(name.to_string()))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn group_entries(&self, group: Group) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(move |e| e.group == group)
    }

    /// Tensors of the listed groups, in insertion order.
    pub fn tensors(&self, groups: &[Group]) -> Vec<Tensor> {
        self.entries.iter().filter(|e| groups.contains(&e.group)).map(|e| e.value.clone()).collect()
    }

    pub fn names(&self, groups: &[Group]) -> Vec<String> {
        self.entries.iter().filter(|e| groups.contains(&e.group)).map(|e| e.name.clone()).collect()
    }

    /// New set with `f` applied to every entry of `groups`; other entries are shared.
    pub fn map_groups<F>(&self, groups: &[Group], mut f: F) -> Result<ParamSet, GraphError>
    where
        F: FnMut(&ParamEntry) -> Result<Tensor, GraphError>,
    {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let value = if groups.contains(&e.group) { f(e)? } else { e.value.clone() };
                Ok(ParamEntry { group: e.group, name: e.name.clone(), value })
            })
            .collect::<Result<_, GraphError>>()?;
        Ok(ParamSet { entries })
    }

    /// Stop-gradient on every entry of `groups`.
    pub fn freeze(&self, groups: &[Group]) -> ParamSet {
        self.map_groups(groups, |e| Ok(e.value.stop_gradient())).expect("infallible")
    }

    /// Replace a single entry by name, keeping its group.
    pub fn with_override(&self, name: &str, value: Tensor) -> Result<ParamSet, GraphError> {
        let cur = self.get(name)?;
        if cur.shape() != value.shape() {
            return Err(GraphError::ShapeMismatch {
                op: "override",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        let mut out = self.clone();
        for e in &mut out.entries {
            if e.name == name {
                e.value = value.clone();
            }
        }
        Ok(out)
    }

    /// Detached plain-data copy of every entry.
    pub fn snapshot(&self) -> ParamValues {
        ParamValues {
            records: self
                .entries
                .iter()
                .map(|e| ParamRecord {
                    group: e.group,
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    data: e.value.to_vec(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub group: Group,
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Thread-safe snapshot of parameter values, detached from any graph.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamValues {
    pub records: Vec<ParamRecord>,
}

impl ParamValues {
    /// Trainable leaves for every record.
    pub fn to_leaves(&self) -> ParamSet {
        self.build(true)
    }

    /// Constants for every record.
    pub fn to_constants(&self) -> ParamSet {
        self.build(false)
    }

    fn build(&self, trainable: bool) -> ParamSet {
        let entries = self
            .records
            .iter()
            .map(|r| {
                let value = if trainable {
                    Tensor::param(r.data.clone(), &r.shape)
                } else {
                    Tensor::new(r.data.clone(), &r.shape)
                }
                .expect("record data matches shape");
                ParamEntry { group: r.group, name: r.name.clone(), value }
            })
            .collect();
        ParamSet { entries }
    }

    pub fn get(&self, name: &str) -> Option<&ParamRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamRecord> {
        self.records.iter_mut().find(|r| r.name == name)
    }

    pub fn count(&self, group: Group) -> usize {
        self.records.iter().filter(|r| r.group == group).map(|r| r.data.len()).sum()
    }

    pub fn total(&self) -> usize {
        self.records.iter().map(|r| r.data.len()).sum()
    }

    /// Zeroed copy with identical layout.
    pub fn zeros_like(&self) -> ParamValues {
        ParamValues {
            records: self
                .records
                .iter()
                .map(|r| ParamRecord { data: vec![0.0; r.data.len()], ..r.clone() })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.records.iter().all(|r| r.data.iter().all(|v| v.is_finite()))
    }
}
