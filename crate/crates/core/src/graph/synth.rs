//! Planted-community datasets shaped like the IMDB benchmark.
//!
//! Every node draws a community uniformly at random. Target-type nodes are
//! labeled by community (`class = community % num_classes`, flipped with
//! probability `label_noise`) and get Gaussian features centered on a
//! per-community mean. Linked-type nodes connect to target nodes with
//! probability `p_intra` inside their community and `p_inter` across, so
//! community membership is recoverable through two-hop metapaths.
//!
//! The defaults give the target type weak features and the linked types strong
//! ones, so most of the label signal sits on the middle node of each
//! instance.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{write_graph, GraphParts, HeteroGraph, RelationKey, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedType {
    pub name: String,
    pub count: usize,
    /// Relation name joining the target type to this type.
    pub relation: String,
    #[serde(default)]
    pub feature_dim: usize,
    /// Overrides [`SyntheticConfig::p_intra`] for this type.
    #[serde(default)]
    pub p_intra: Option<f64>,
    #[serde(default)]
    pub p_inter: Option<f64>,
    /// Overrides [`SyntheticConfig::feature_signal`] for this type.
    #[serde(default)]
    pub feature_signal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub target_type: String,
    pub target_count: usize,
    pub target_feature_dim: usize,
    pub linked: Vec<LinkedType>,
    pub num_classes: usize,
    pub communities: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub label_noise: f64,
    /// Norm of each community's feature mean; per-coordinate noise is N(0, 1).
    pub feature_signal: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            target_type: "movie".into(),
            target_count: 150,
            target_feature_dim: 4,
            linked: vec![
                LinkedType {
                    name: "director".into(),
                    count: 50,
                    relation: "directed_by".into(),
                    feature_dim: 16,
                    p_intra: None,
                    p_inter: None,
                    feature_signal: Some(3.0),
                },
                LinkedType {
                    name: "actor".into(),
                    count: 100,
                    relation: "stars".into(),
                    feature_dim: 16,
                    p_intra: None,
                    p_inter: None,
                    feature_signal: Some(3.0),
                },
            ],
            num_classes: 2,
            communities: 2,
            p_intra: 0.08,
            p_inter: 0.0005,
            label_noise: 0.0,
            feature_signal: 0.3,
            train_frac: 0.4,
            val_frac: 0.3,
            seed: 483,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("p_intra", self.p_intra)?;
        prob("p_inter", self.p_inter)?;
        prob("label_noise", self.label_noise)?;
        prob("train_frac", self.train_frac)?;
        prob("val_frac", self.val_frac)?;
        if self.train_frac + self.val_frac > 1.0 {
            return Err(Error::Config("train_frac + val_frac exceeds 1".into()));
        }
        if self.target_count == 0 || self.num_classes == 0 || self.communities == 0 {
            return Err(Error::Config(
                "target_count, num_classes and communities must be at least 1".into(),
            ));
        }
        if self.target_feature_dim == 0 {
            return Err(Error::Config("target_feature_dim must be at least 1".into()));
        }
        for l in &self.linked {
            if l.count == 0 {
                return Err(Error::Config(format!("linked type `{}` has count 0", l.name)));
            }
            prob("p_intra", l.p_intra.unwrap_or(self.p_intra))?;
            prob("p_inter", l.p_inter.unwrap_or(self.p_inter))?;
            if l.name == self.target_type {
                return Err(Error::Config(format!(
                    "linked type `{}` duplicates the target type",
                    l.name
                )));
            }
        }
        Ok(())
    }
}

/// A generated graph together with the planted community of every node,
/// indexed `[type][id]`.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub graph: HeteroGraph,
    pub communities: Vec<Vec<usize>>,
}

fn community_means(
    rng: &mut ChaCha8Rng,
    communities: usize,
    dim: usize,
    norm: f64,
) -> Vec<Vec<f64>> {
    (0..communities)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * norm / len).collect()
        })
        .collect()
}

fn sample_features(
    rng: &mut ChaCha8Rng,
    comm: &[usize],
    means: &[Vec<f64>],
    dim: usize,
) -> Tensor {
    let mut t = Tensor::zeros(comm.len(), dim);
    for (i, &c) in comm.iter().enumerate() {
        for (j, x) in t.row_mut(i).iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(rng);
            *x = means[c][j] + noise;
        }
    }
    t
}

/// Build the dataset in memory. The same config always yields the same graph.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut node_types = vec![cfg.target_type.clone()];
    let mut node_counts = vec![cfg.target_count];
    node_types.extend(cfg.linked.iter().map(|l| l.name.clone()));
    node_counts.extend(cfg.linked.iter().map(|l| l.count));

    let communities: Vec<Vec<usize>> = node_counts
        .iter()
        .map(|&n| (0..n).map(|_| rng.random_range(0..cfg.communities)).collect())
        .collect();

    let target_means = community_means(
        &mut rng,
        cfg.communities,
        cfg.target_feature_dim,
        cfg.feature_signal,
    );
    let mut features = vec![Some(sample_features(
        &mut rng,
        &communities[0],
        &target_means,
        cfg.target_feature_dim,
    ))];
    for (i, l) in cfg.linked.iter().enumerate() {
        if l.feature_dim == 0 {
            features.push(None);
            continue;
        }
        let signal = l.feature_signal.unwrap_or(cfg.feature_signal);
        let means = community_means(&mut rng, cfg.communities, l.feature_dim, signal);
        features.push(Some(sample_features(
            &mut rng,
            &communities[i + 1],
            &means,
            l.feature_dim,
        )));
    }

    let mut relations = Vec::with_capacity(cfg.linked.len());
    for (i, l) in cfg.linked.iter().enumerate() {
        let (p_in, p_out) = (
            l.p_intra.unwrap_or(cfg.p_intra),
            l.p_inter.unwrap_or(cfg.p_inter),
        );
        let mut pairs = Vec::new();
        for m in 0..cfg.target_count {
            for x in 0..l.count {
                let p = if communities[0][m] == communities[i + 1][x] {
                    p_in
                } else {
                    p_out
                };
                if rng.random_bool(p) {
                    pairs.push((m as u32, x as u32));
                }
            }
        }
        relations.push((RelationKey::new(0, l.relation.clone(), i + 1), pairs));
    }

    let labels: Vec<(usize, Vec<u8>)> = communities[0]
        .iter()
        .enumerate()
        .map(|(id, &c)| {
            let mut class = c % cfg.num_classes;
            if cfg.num_classes > 1 && rng.random_bool(cfg.label_noise) {
                let shift = rng.random_range(1..cfg.num_classes);
                class = (class + shift) % cfg.num_classes;
            }
            let mut row = vec![0u8; cfg.num_classes];
            row[class] = 1;
            (id, row)
        })
        .collect();

    let mut order: Vec<usize> = (0..cfg.target_count).collect();
    order.shuffle(&mut rng);
    let n_train = (cfg.train_frac * cfg.target_count as f64).round() as usize;
    let n_val = (cfg.val_frac * cfg.target_count as f64).round() as usize;
    let n_val = n_val.min(cfg.target_count - n_train);
    let splits = Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };

    let graph = HeteroGraph::new(GraphParts {
        node_types,
        node_counts,
        relations,
        features,
        labeled_type: 0,
        num_classes: cfg.num_classes,
        labels,
        splits,
    })?;
    Ok(SyntheticDataset { graph, communities })
}

/// Generate and write the dataset to `dir`.
pub fn gen_synthetic(cfg: &SyntheticConfig, dir: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let ds = generate(cfg)?;
    write_graph(&ds.graph, dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_graph() {
        let cfg = SyntheticConfig::default();
        assert_eq!(generate(&cfg).unwrap().graph, generate(&cfg).unwrap().graph);
        let other = SyntheticConfig {
            seed: 1,
            ..cfg.clone()
        };
        assert_ne!(generate(&cfg).unwrap().graph, generate(&other).unwrap().graph);
    }

    #[test]
    fn noise_free_labels_follow_community() {
        let ds = generate(&SyntheticConfig::default()).unwrap();
        for (id, &c) in ds.communities[0].iter().enumerate() {
            assert_eq!(ds.graph.labels().get(id, c % 2), 1.0);
        }
    }

    #[test]
    fn splits_partition_targets() {
        let ds = generate(&SyntheticConfig::default()).unwrap();
        let s = ds.graph.splits();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 45, 45));
    }

    #[test]
    fn rejects_bad_probability() {
        let cfg = SyntheticConfig {
            p_intra: 1.5,
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
}
