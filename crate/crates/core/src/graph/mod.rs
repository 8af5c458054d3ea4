//! Heterogeneous graph container.
//!
//! Nodes are identified by `(type index, id)` with ids dense and 0-based per
//! type. Every relation is kept in both directions: a declared relation
//! `(a, r, b)` with pair `(u, v)` also yields `(v, u)` under `(b, r, a)`.

mod io;
mod pool;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_graph, write_graph, Manifest, NodeTypeSpec, RelationSpec};
pub use pool::assign_pooled_features;
pub use synth::{gen_synthetic, generate, LinkedType, SyntheticConfig, SyntheticDataset};

/// A typed relation `(src type, name, dst type)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationKey {
    pub src: usize,
    pub rel: String,
    pub dst: usize,
}

impl RelationKey {
    pub fn new(src: usize, rel: impl Into<String>, dst: usize) -> Self {
        RelationKey {
            src,
            rel: rel.into(),
            dst,
        }
    }

    pub fn reversed(&self) -> Self {
        RelationKey {
            src: self.dst,
            rel: self.rel.clone(),
            dst: self.src,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Raw ingredients of a [`HeteroGraph`]; [`HeteroGraph::new`] validates
/// them and mirrors every relation.
#[derive(Debug, Clone, Default)]
pub struct GraphParts {
    pub node_types: Vec<String>,
    pub node_counts: Vec<usize>,
    /// Declared relations, one direction each.
    pub relations: Vec<(RelationKey, Vec<(u32, u32)>)>,
    pub features: Vec<Option<Tensor>>,
    pub labeled_type: usize,
    pub num_classes: usize,
    /// `(node id, multi-hot row)` for every labeled node.
    pub labels: Vec<(usize, Vec<u8>)>,
    pub splits: Splits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    node_types: Vec<String>,
    node_counts: Vec<usize>,
    declared: Vec<RelationKey>,
    edges: BTreeMap<RelationKey, Vec<(u32, u32)>>,
    features: Vec<Option<Tensor>>,
    labeled_type: usize,
    num_classes: usize,
    labels: Tensor,
    has_label: Vec<bool>,
    splits: Splits,
}

impl HeteroGraph {
    pub fn new(parts: GraphParts) -> Result<Self> {
        let GraphParts {
            node_types,
            node_counts,
            relations,
            mut features,
            labeled_type,
            num_classes,
            labels,
            mut splits,
        } = parts;

        let n_types = node_types.len();
        if node_counts.len() != n_types {
            return Err(Error::Integrity(format!(
                "{} node types but {} counts",
                n_types,
                node_counts.len()
            )));
        }
        let unique: BTreeSet<&str> = node_types.iter().map(String::as_str).collect();
        if unique.len() != n_types {
            return Err(Error::Integrity("duplicate node type name".into()));
        }
        if labeled_type >= n_types {
            return Err(Error::Integrity(format!(
                "labeled type index {labeled_type} out of range"
            )));
        }
        if features.is_empty() {
            features = vec![None; n_types];
        }
        if features.len() != n_types {
            return Err(Error::Integrity("feature list does not match node types".into()));
        }
        for (t, f) in features.iter().enumerate() {
            if let Some(f) = f {
                if f.rows() != node_counts[t] {
                    return Err(Error::Integrity(format!(
                        "feature matrix for `{}` has {} rows, expected {}",
                        node_types[t],
                        f.rows(),
                        node_counts[t]
                    )));
                }
            }
        }

        let mut declared = Vec::with_capacity(relations.len());
        let mut edges: BTreeMap<RelationKey, Vec<(u32, u32)>> = BTreeMap::new();
        for (key, pairs) in relations {
            if key.src >= n_types || key.dst >= n_types {
                return Err(Error::Integrity(format!(
                    "relation `{}` references an unknown node type",
                    key.rel
                )));
            }
            for &(u, v) in &pairs {
                if u as usize >= node_counts[key.src] || v as usize >= node_counts[key.dst] {
                    return Err(Error::Integrity(format!(
                        "edge ({u}, {v}) of relation ({}, {}, {}) has an endpoint out of range",
                        node_types[key.src], key.rel, node_types[key.dst]
                    )));
                }
            }
            let rev = key.reversed();
            edges.entry(key.clone()).or_default().extend(pairs.iter().copied());
            edges
                .entry(rev)
                .or_default()
                .extend(pairs.iter().map(|&(u, v)| (v, u)));
            if declared.contains(&key) {
                return Err(Error::Integrity(format!("relation `{}` declared twice", key.rel)));
            }
            declared.push(key);
        }
        for pairs in edges.values_mut() {
            pairs.sort_unstable();
            pairs.dedup();
        }

        let n_labeled = node_counts[labeled_type];
        let mut label_matrix = Tensor::zeros(n_labeled, num_classes);
        let mut has_label = vec![false; n_labeled];
        for (id, row) in labels {
            if id >= n_labeled {
                return Err(Error::Integrity(format!(
                    "label row for node {id} but only {n_labeled} `{}` nodes",
                    node_types[labeled_type]
                )));
            }
            if row.len() != num_classes {
                return Err(Error::Integrity(format!(
                    "label row for node {id} has {} classes, expected {num_classes}",
                    row.len()
                )));
            }
            if has_label[id] {
                return Err(Error::Integrity(format!("duplicate label row for node {id}")));
            }
            has_label[id] = true;
            for (c, &y) in row.iter().enumerate() {
                if y > 1 {
                    return Err(Error::Integrity(format!(
                        "label value {y} for node {id} is not 0 or 1"
                    )));
                }
                label_matrix.set(id, c, f64::from(y));
            }
        }

        let mut seen = vec![None::<Split>; n_labeled];
        for split in [Split::Train, Split::Val, Split::Test] {
            let ids = match split {
                Split::Train => &mut splits.train,
                Split::Val => &mut splits.val,
                Split::Test => &mut splits.test,
            };
            ids.sort_unstable();
            ids.dedup();
            for &id in ids.iter() {
                if id >= n_labeled {
                    return Err(Error::Integrity(format!(
                        "{split} split references node {id} out of range"
                    )));
                }
                if let Some(prev) = seen[id] {
                    return Err(Error::Integrity(format!(
                        "node {id} appears in both {prev} and {split} splits"
                    )));
                }
                if !has_label[id] {
                    return Err(Error::Integrity(format!(
                        "{split} node {id} has no label row"
                    )));
                }
                seen[id] = Some(split);
            }
        }

        Ok(HeteroGraph {
            node_types,
            node_counts,
            declared,
            edges,
            features,
            labeled_type,
            num_classes,
            labels: label_matrix,
            has_label,
            splits,
        })
    }

    pub fn node_types(&self) -> &[String] {
        &self.node_types
    }

    pub fn num_types(&self) -> usize {
        self.node_types.len()
    }

    pub fn type_index(&self, name: &str) -> Result<usize> {
        self.node_types
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::Config(format!("unknown node type `{name}`")))
    }

    pub fn type_name(&self, t: usize) -> &str {
        &self.node_types[t]
    }

    pub fn node_count(&self, t: usize) -> usize {
        self.node_counts[t]
    }

    pub fn node_counts(&self) -> &[usize] {
        &self.node_counts
    }

    pub fn total_nodes(&self) -> usize {
        self.node_counts.iter().sum()
    }

    /// Relations as declared in the manifest, one direction each.
    pub fn declared_relations(&self) -> &[RelationKey] {
        &self.declared
    }

    /// Every stored relation, both directions.
    pub fn relations(&self) -> impl Iterator<Item = (&RelationKey, &[(u32, u32)])> {
        self.edges.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Sorted, de-duplicated pairs of a relation, if it exists.
    pub fn edges(&self, key: &RelationKey) -> Option<&[(u32, u32)]> {
        self.edges.get(key).map(Vec::as_slice)
    }

    /// Relations going from type `src` to type `dst`.
    pub fn relations_between(&self, src: usize, dst: usize) -> Vec<&RelationKey> {
        self.edges
            .keys()
            .filter(|k| k.src == src && k.dst == dst)
            .collect()
    }

    /// Number of stored (directed) pairs across all relations.
    pub fn num_directed_edges(&self) -> usize {
        self.edges.values().map(Vec::len).sum()
    }

    pub fn features(&self, t: usize) -> Option<&Tensor> {
        self.features[t].as_ref()
    }

    pub fn feature_dim(&self, t: usize) -> usize {
        self.features[t].as_ref().map_or(0, Tensor::cols)
    }

    pub(crate) fn set_features(&mut self, t: usize, f: Tensor) {
        debug_assert_eq!(f.rows(), self.node_counts[t]);
        self.features[t] = Some(f);
    }

    pub fn labeled_type(&self) -> usize {
        self.labeled_type
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Multi-hot label matrix over every node of the labeled type; rows of
    /// unlabeled nodes are zero.
    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    pub fn has_label(&self, id: usize) -> bool {
        self.has_label[id]
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// All nodes in any split, ascending.
    pub fn labeled_nodes(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
            .copied()
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Sorted neighbor set of node `(t, id)` over every incident relation.
    pub fn neighbors(&self, t: usize, id: u32) -> BTreeSet<(usize, u32)> {
        let mut out = BTreeSet::new();
        for (key, pairs) in &self.edges {
            if key.src != t {
                continue;
            }
            let start = pairs.partition_point(|&(u, _)| u < id);
            for &(u, v) in &pairs[start..] {
                if u != id {
                    break;
                }
                out.insert((key.dst, v));
            }
        }
        out
    }
}
