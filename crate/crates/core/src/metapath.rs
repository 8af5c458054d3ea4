//! Metapath instance enumeration.
//!
//! An instance is a walk whose node types follow the schema, with every
//! intermediate node kept. Walks may revisit nodes and may end on their own
//! source. Instances rooted at each source are listed in lexicographic order
//! of their node-id sequences.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, RelationKey};

/// A node-type pattern `T0 -r1-> T1 -r2-> ... Tk`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetapathSchema {
    pub name: String,
    pub node_types: Vec<String>,
    pub relations: Vec<String>,
}

impl MetapathSchema {
    pub fn new(
        name: impl Into<String>,
        node_types: Vec<String>,
        relations: Vec<String>,
    ) -> Result<Self> {
        if node_types.len() < 2 {
            return Err(Error::Config("a metapath needs at least two node types".into()));
        }
        if relations.len() + 1 != node_types.len() {
            return Err(Error::Config(format!(
                "metapath with {} node types needs {} relations, got {}",
                node_types.len(),
                node_types.len() - 1,
                relations.len()
            )));
        }
        Ok(MetapathSchema {
            name: name.into(),
            node_types,
            relations,
        })
    }

    /// Build a schema from a type sequence, picking the unique relation
    /// between each consecutive pair of types.
    pub fn from_types<S: AsRef<str>>(g: &HeteroGraph, types: &[S]) -> Result<Self> {
        if types.len() < 2 {
            return Err(Error::Config("a metapath needs at least two node types".into()));
        }
        let idx = types
            .iter()
            .map(|t| g.type_index(t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let mut relations = Vec::with_capacity(types.len() - 1);
        for w in idx.windows(2) {
            let rels = g.relations_between(w[0], w[1]);
            match rels.as_slice() {
                [one] => relations.push(one.rel.clone()),
                [] => {
                    return Err(Error::Config(format!(
                        "no relation from `{}` to `{}`",
                        g.type_name(w[0]),
                        g.type_name(w[1])
                    )))
                }
                _ => {
                    return Err(Error::Config(format!(
                        "several relations from `{}` to `{}`; name one explicitly",
                        g.type_name(w[0]),
                        g.type_name(w[1])
                    )))
                }
            }
        }
        let names: Vec<String> = types.iter().map(|t| t.as_ref().to_string()).collect();
        MetapathSchema::new(names.join("-"), names, relations)
    }

    /// Number of hops `k`; instances hold `k + 1` nodes.
    pub fn hops(&self) -> usize {
        self.relations.len()
    }

    /// Type indices and relation keys of each hop, checked against `g`.
    pub fn resolve(&self, g: &HeteroGraph) -> Result<(Vec<usize>, Vec<RelationKey>)> {
        let types = self
            .node_types
            .iter()
            .map(|t| g.type_index(t))
            .collect::<Result<Vec<_>>>()?;
        let mut keys = Vec::with_capacity(self.relations.len());
        for (i, rel) in self.relations.iter().enumerate() {
            let key = RelationKey::new(types[i], rel.clone(), types[i + 1]);
            if g.edges(&key).is_none() {
                return Err(Error::Config(format!(
                    "metapath `{}`: relation ({}, {}, {}) does not exist",
                    self.name, self.node_types[i], rel, self.node_types[i + 1]
                )));
            }
            keys.push(key);
        }
        Ok((types, keys))
    }
}

impl fmt::Display for MetapathSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// One concrete realization of a schema.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct MetapathInstance {
    pub schema: String,
    /// `(type index, node id)` per position.
    pub nodes: Vec<(usize, u32)>,
}

impl MetapathInstance {
    pub fn source(&self) -> u32 {
        self.nodes[0].1
    }

    pub fn terminal(&self) -> u32 {
        self.nodes[self.nodes.len() - 1].1
    }
}

/// Instances of one schema grouped by source node, stored flat.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceTable {
    schema: MetapathSchema,
    types: Vec<usize>,
    offsets: Vec<usize>,
    nodes: Vec<u32>,
}

impl InstanceTable {
    /// Build a table from instances in any order; they are sorted into the
    /// canonical per-source lexicographic order.
    pub fn from_instances(
        schema: MetapathSchema,
        types: Vec<usize>,
        num_sources: usize,
        mut instances: Vec<Vec<u32>>,
    ) -> Result<Self> {
        let width = types.len();
        if let Some(bad) = instances.iter().find(|i| i.len() != width) {
            return Err(Error::dim(
                "instance_table",
                format!("instance of length {} for a {width}-node schema", bad.len()),
            ));
        }
        if let Some(bad) = instances.iter().find(|i| i[0] as usize >= num_sources) {
            return Err(Error::dim(
                "instance_table",
                format!("source {} of {num_sources}", bad[0]),
            ));
        }
        instances.sort_unstable();
        let mut offsets = vec![0usize; num_sources + 1];
        for inst in &instances {
            offsets[inst[0] as usize + 1] += 1;
        }
        for i in 0..num_sources {
            offsets[i + 1] += offsets[i];
        }
        Ok(InstanceTable {
            schema,
            types,
            offsets,
            nodes: instances.concat(),
        })
    }

    pub fn schema(&self) -> &MetapathSchema {
        &self.schema
    }

    /// Type index at each position.
    pub fn types(&self) -> &[usize] {
        &self.types
    }

    /// Nodes per instance (`k + 1`).
    pub fn width(&self) -> usize {
        self.types.len()
    }

    pub fn num_sources(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        self.offsets[self.num_sources()]
    }

    pub fn count(&self, source: usize) -> usize {
        self.offsets[source + 1] - self.offsets[source]
    }

    /// Node-id sequences of the instances rooted at `source`.
    pub fn instances(&self, source: usize) -> impl Iterator<Item = &[u32]> + '_ {
        let w = self.width();
        self.nodes[self.offsets[source] * w..self.offsets[source + 1] * w].chunks_exact(w)
    }

    /// Every instance in table order.
    pub fn iter(&self) -> impl Iterator<Item = &[u32]> + '_ {
        self.nodes.chunks_exact(self.width())
    }

    pub fn instance(&self, source: usize, i: usize) -> MetapathInstance {
        let ids = self.instances(source).nth(i).expect("instance index in range");
        MetapathInstance {
            schema: self.schema.name.clone(),
            nodes: self.types.iter().copied().zip(ids.iter().copied()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerateOptions {
    /// Keep walks that end on their own source node.
    pub include_source_return: bool,
    /// Keep at most this many instances per source (the lexicographically
    /// smallest ones).
    pub max_per_source: Option<usize>,
    /// Enumerate sources on the rayon pool. Output order is unaffected.
    pub parallel: bool,
}

impl Default for EnumerateOptions {
    fn default() -> Self {
        EnumerateOptions {
            include_source_return: true,
            max_per_source: None,
            parallel: true,
        }
    }
}

/// CSR adjacency of one directed relation, neighbors ascending.
struct Adjacency {
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl Adjacency {
    fn new(num_src: usize, pairs: &[(u32, u32)]) -> Self {
        let mut offsets = vec![0usize; num_src + 1];
        for &(u, _) in pairs {
            offsets[u as usize + 1] += 1;
        }
        for i in 0..num_src {
            offsets[i + 1] += offsets[i];
        }
        // pairs are sorted by (u, v), so targets come out grouped and ascending
        let targets = pairs.iter().map(|&(_, v)| v).collect();
        Adjacency { offsets, targets }
    }

    fn neighbors(&self, u: u32) -> &[u32] {
        &self.targets[self.offsets[u as usize]..self.offsets[u as usize + 1]]
    }
}

fn walk(
    adj: &[Adjacency],
    path: &mut Vec<u32>,
    out: &mut Vec<u32>,
    found: &mut usize,
    opts: &EnumerateOptions,
) {
    if opts.max_per_source.is_some_and(|m| *found >= m) {
        return;
    }
    let depth = path.len() - 1;
    if depth == adj.len() {
        if !opts.include_source_return && path[0] == path[depth] {
            return;
        }
        out.extend_from_slice(path);
        *found += 1;
        return;
    }
    for &next in adj[depth].neighbors(path[depth]) {
        path.push(next);
        walk(adj, path, out, found, opts);
        path.pop();
    }
}

pub fn enumerate_instances(g: &HeteroGraph, schema: &MetapathSchema) -> Result<InstanceTable> {
    enumerate_instances_with(g, schema, EnumerateOptions::default())
}

pub fn enumerate_instances_with(
    g: &HeteroGraph,
    schema: &MetapathSchema,
    opts: EnumerateOptions,
) -> Result<InstanceTable> {
    let (types, keys) = schema.resolve(g)?;
    let adj: Vec<Adjacency> = keys
        .iter()
        .map(|k| Adjacency::new(g.node_count(k.src), g.edges(k).unwrap_or(&[])))
        .collect();
    let num_sources = g.node_count(types[0]);
    let from_source = |s: usize| {
        let mut out = Vec::new();
        let mut path = vec![s as u32];
        let mut found = 0;
        walk(&adj, &mut path, &mut out, &mut found, &opts);
        out
    };
    let per_source: Vec<Vec<u32>> = if opts.parallel {
        (0..num_sources).into_par_iter().map(from_source).collect()
    } else {
        (0..num_sources).map(from_source).collect()
    };

    let width = types.len();
    let mut offsets = Vec::with_capacity(num_sources + 1);
    offsets.push(0);
    for chunk in &per_source {
        offsets.push(offsets.last().unwrap() + chunk.len() / width);
    }
    Ok(InstanceTable {
        schema: schema.clone(),
        types,
        offsets,
        nodes: per_source.concat(),
    })
}

/// Terminal nodes of every instance rooted at `v`.
pub fn metapath_neighbors(table: &InstanceTable, v: usize) -> BTreeSet<u32> {
    if v >= table.num_sources() {
        return BTreeSet::new();
    }
    let last = table.width() - 1;
    table.instances(v).map(|inst| inst[last]).collect()
}
