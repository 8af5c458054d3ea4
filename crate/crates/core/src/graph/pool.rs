use std::collections::BTreeSet;

use super::HeteroGraph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Give every node of each `target_types` entry the mean feature row of its
/// 1-hop neighbors whose type already carries features.
///
/// Sources are the types that have features on entry and are not themselves
/// targets, so pooled features never cascade. Nodes with no featured
/// neighbor get an all-zeros row.
pub fn assign_pooled_features(g: &HeteroGraph, target_types: &[&str]) -> Result<HeteroGraph> {
    let targets: BTreeSet<usize> = target_types
        .iter()
        .map(|t| g.type_index(t))
        .collect::<Result<_>>()?;
    let sources: Vec<usize> = (0..g.num_types())
        .filter(|t| !targets.contains(t) && g.features(*t).is_some())
        .collect();

    let mut out = g.clone();
    for &t in &targets {
        let linked: Vec<usize> = sources
            .iter()
            .copied()
            .filter(|&s| !g.relations_between(t, s).is_empty())
            .collect();
        if linked.is_empty() {
            return Err(Error::Config(format!(
                "cannot pool features for `{}`: no relation to a featured type",
                g.type_name(t)
            )));
        }
        let linked_dims: BTreeSet<usize> = linked.iter().map(|&s| g.feature_dim(s)).collect();
        if linked_dims.len() > 1 {
            return Err(Error::Config(format!(
                "cannot pool features for `{}`: neighbor types have differing feature dims {:?}",
                g.type_name(t),
                linked_dims
            )));
        }
        let dim = *linked_dims.iter().next().unwrap();

        let mut pooled = Tensor::zeros(g.node_count(t), dim);
        for id in 0..g.node_count(t) {
            let neigh: Vec<(usize, u32)> = g
                .neighbors(t, id as u32)
                .into_iter()
                .filter(|(s, _)| linked.contains(s))
                .collect();
            if neigh.is_empty() {
                continue;
            }
            let row = pooled.row_mut(id);
            for &(s, v) in &neigh {
                let f = g.features(s).expect("source type has features");
                for (acc, x) in row.iter_mut().zip(f.row(v as usize)) {
                    *acc += x;
                }
            }
            let n = neigh.len() as f64;
            for acc in row.iter_mut() {
                *acc /= n;
            }
        }
        out.set_features(t, pooled);
    }
    Ok(out)
}
