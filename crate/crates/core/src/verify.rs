//! Self-checks behind `hanme verify`.
//!
//! Each check recomputes a property of the implementation from an
//! independent route: the diffusion series against the closed form,
//! autodiff against central differences, the instance extractor against
//! exhaustive search over node tuples, and training runs against planted
//! labels.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoders::oracle::{chain_matrix, diffusion_oracle, matrix_power};
use crate::encoders::{multihop_encode, one_hop_scores, EncoderKind, MultihopEncoderParams};
use crate::engine::{finite_diff_check, CustomOp, GradCheckOptions, Tape};
use crate::error::{Error, Result};
use crate::graph::{generate, GraphParts, HeteroGraph, RelationKey, Splits, SyntheticConfig};
use crate::metapath::{enumerate_instances_with, EnumerateOptions, MetapathSchema};
use crate::model::{bce_with_logits, build_tables, ForwardPlan, HanMe, ModelConfig, ModelDims};
use crate::tensor::Tensor;
use crate::trainer::{pacing, train_graph, PacingConfig, PacingKind, TrainConfig};

/// Result of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.2}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Skip the training runs.
    pub quick: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 483,
            quick: false,
        }
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, e.to_string()),
    };
    CheckOutcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_suite(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let s = opts.seed;
    let mut out = vec![
        timed("diffusion-equivalence", || {
            let err = diffusion_max_error(1000, s)?;
            Ok((err <= 1e-10, format!("max relative error {err:.3e} over 1000 draws")))
        }),
        timed("nilpotency", || {
            let ok = nilpotency_holds(8, s)?;
            Ok((ok, "A^(k+1) = 0 for k in 0..=8".into()))
        }),
        timed("pacing", || {
            let endpoints = pacing_endpoints_exact()?;
            let (lin, geo) = pacing_midpoints()?;
            let ok = endpoints && (lin - 0.55).abs() <= 1e-12 && (geo - 0.31623).abs() <= 1e-5;
            Ok((
                ok,
                format!("endpoints exact: {endpoints}, linear(T/2) = {lin:.6}, geometric(T/2) = {geo:.6}"),
            ))
        }),
        timed("model-gradient", || {
            let mut worst: f64 = 0.0;
            for kind in [EncoderKind::Multihop, EncoderKind::Direct] {
                worst = worst.max(model_gradient_error(kind, s, false)?);
            }
            let control = model_gradient_error(EncoderKind::Multihop, s, true)?;
            Ok((
                worst < 1e-4 && control > 1e-2,
                format!("max relative error {worst:.3e}, seeded bug {control:.3e}"),
            ))
        }),
        timed("attention-normalization", || {
            let (alpha, beta) = attention_sum_deviation(100, s)?;
            Ok((
                alpha <= 1e-9 && beta <= 1e-12,
                format!("max |sum - 1|: alpha {alpha:.3e}, beta {beta:.3e} over 100 graphs"),
            ))
        }),
        timed("extractor", || {
            let n = extractor_mismatches(20, s)?;
            Ok((n == 0, format!("{n} mismatching (graph, metapath) pairs over 20 graphs")))
        }),
    ];
    if !opts.quick {
        out.push(timed("end-to-end", || {
            let (mh, term) = encoder_comparison(s)?;
            Ok((
                mh >= 0.95 && mh >= term,
                format!("test micro-F1 multihop {mh:.4}, terminal-only {term:.4}"),
            ))
        }));
        out.push(timed("semantic-weights", || {
            let wins = semantic_wins(10)?;
            Ok((wins >= 9, format!("informative metapath weighted higher in {wins}/10 seeds")))
        }));
    }
    out
}

fn random_multihop(d: usize, gamma: f64, rng: &mut ChaCha8Rng) -> MultihopEncoderParams {
    let scale = 1.0 / (d as f64).sqrt();
    MultihopEncoderParams {
        w_h: Tensor::random_uniform(d, d, -scale, scale, rng),
        w_t: Tensor::random_uniform(d, d, -scale, scale, rng),
        v_a: Tensor::random_uniform(2 * d, 1, -1.0, 1.0, rng),
        gamma,
        leaky_slope: 0.2,
    }
}

fn normal_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

/// Largest relative gap between the closed form and the diffusion series
/// over random `k` in 1..=8, `d` in {4, 16, 128}, gamma in {0.1, 0.4, 0.9}.
pub fn diffusion_max_error(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let k = rng.random_range(1..=8);
        let d = [4, 16, 128][rng.random_range(0..3)];
        let gamma = [0.1, 0.4, 0.9][rng.random_range(0..3)];
        let p = random_multihop(d, gamma, &mut rng);
        let h = normal_tensor(k + 1, d, &mut rng);
        let closed = multihop_encode(&h, &p)?;
        let series = diffusion_oracle(&h, &p)?;
        let scale = series.max_abs().max(f64::MIN_POSITIVE);
        let gap = closed
            .data()
            .iter()
            .zip(series.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(gap / scale);
    }
    Ok(worst)
}

/// The chain matrix of a random instance is nilpotent of index at most
/// `k + 1`, for every `k` up to `max_k`.
pub fn nilpotency_holds(max_k: usize, seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..=max_k {
        let p = random_multihop(4, 0.4, &mut rng);
        let h = normal_tensor(k + 1, 4, &mut rng);
        let a = chain_matrix(&one_hop_scores(&h, &p)?);
        if matrix_power(&a, k + 1)?.data().iter().any(|&x| x != 0.0) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn pacing_config(kind: PacingKind) -> PacingConfig {
    PacingConfig {
        kind,
        lambda0: 0.1,
        pace_t: 100,
    }
}

/// Every schedule starts at exactly `lambda0` and reaches exactly 1 at `T`.
pub fn pacing_endpoints_exact() -> Result<bool> {
    let mut ok = true;
    for kind in [PacingKind::Linear, PacingKind::Root, PacingKind::Geometric] {
        let cfg = pacing_config(kind);
        ok &= pacing(&cfg, 0)? == 0.1 && pacing(&cfg, 100)? == 1.0;
    }
    Ok(ok)
}

/// `(linear, geometric)` at `t = T / 2` with `lambda0 = 0.1`, `T = 100`.
pub fn pacing_midpoints() -> Result<(f64, f64)> {
    Ok((
        pacing(&pacing_config(PacingKind::Linear), 50)?,
        pacing(&pacing_config(PacingKind::Geometric), 50)?,
    ))
}

/// Small random heterogeneous graph with three node types, a same-type
/// relation and features on every type; `max_nodes` bounds the total count.
///
/// Type `a` is labeled with `2..=3` classes and split evenly over
/// train/val/test.
pub fn random_graph(seed: u64, max_nodes: usize) -> HeteroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let share = (max_nodes / 3).max(2);
    let counts: Vec<usize> = (0..3).map(|_| rng.random_range(2..=share)).collect();
    let density = rng.random_range(0.15..0.5);
    let pairs = |n: usize, m: usize, same: bool, rng: &mut ChaCha8Rng| {
        let mut e = Vec::new();
        for u in 0..n {
            for v in 0..m {
                if (!same || u < v) && rng.random_bool(density) {
                    e.push((u as u32, v as u32));
                }
            }
        }
        e
    };
    let relations = vec![
        (RelationKey::new(0, "ab", 1), pairs(counts[0], counts[1], false, &mut rng)),
        (RelationKey::new(1, "bc", 2), pairs(counts[1], counts[2], false, &mut rng)),
        (RelationKey::new(0, "aa", 0), pairs(counts[0], counts[0], true, &mut rng)),
    ];
    let features = counts
        .iter()
        .map(|&n| {
            let d = rng.random_range(2..=5);
            Some(normal_tensor(n, d, &mut rng))
        })
        .collect();
    let num_classes = rng.random_range(2..=3);
    let labels = (0..counts[0])
        .map(|id| (id, (0..num_classes).map(|_| rng.random_range(0..=1u8)).collect()))
        .collect();
    let ids: Vec<usize> = (0..counts[0]).collect();
    let splits = Splits {
        train: ids.iter().copied().filter(|i| i % 3 == 0).collect(),
        val: ids.iter().copied().filter(|i| i % 3 == 1).collect(),
        test: ids.iter().copied().filter(|i| i % 3 == 2).collect(),
    };
    HeteroGraph::new(GraphParts {
        node_types: vec!["a".into(), "b".into(), "c".into()],
        node_counts: counts,
        relations,
        features,
        labeled_type: 0,
        num_classes,
        labels,
        splits,
    })
    .expect("random graph is well formed")
}

/// Metapaths over [`random_graph`] covering symmetric, asymmetric and
/// same-type schemas.
pub fn random_graph_metapaths() -> Vec<Vec<String>> {
    [
        vec!["a", "b", "a"],
        vec!["a", "b", "c"],
        vec!["a", "a", "a"],
        vec!["a", "b", "c", "b", "a"],
    ]
    .iter()
    .map(|p| p.iter().map(|s| s.to_string()).collect())
    .collect()
}

/// Every instance of `schema` by testing each node tuple against the edge
/// sets, in lexicographic order per source.
pub fn brute_force_instances(g: &HeteroGraph, schema: &MetapathSchema) -> Result<Vec<Vec<Vec<u32>>>> {
    let (types, keys) = schema.resolve(g)?;
    let edge_sets: Vec<BTreeSet<(u32, u32)>> = keys
        .iter()
        .map(|k| g.edges(k).unwrap_or(&[]).iter().copied().collect())
        .collect();
    let mut per_source = vec![Vec::new(); g.node_count(types[0])];
    let mut tuple = vec![0u32; types.len()];
    loop {
        if (0..keys.len()).all(|j| edge_sets[j].contains(&(tuple[j], tuple[j + 1]))) {
            per_source[tuple[0] as usize].push(tuple.clone());
        }
        // odometer increment, last position fastest, so output is lexicographic
        let mut pos = types.len();
        loop {
            if pos == 0 {
                return Ok(per_source);
            }
            pos -= 1;
            tuple[pos] += 1;
            if (tuple[pos] as usize) < g.node_count(types[pos]) {
                break;
            }
            tuple[pos] = 0;
        }
    }
}

/// Number of `(graph, metapath)` pairs on which the extractor disagrees
/// with [`brute_force_instances`], or on which a symmetric schema yields an
/// asymmetric neighbor relation.
pub fn extractor_mismatches(graphs: u64, seed: u64) -> Result<usize> {
    let mut bad = 0;
    for i in 0..graphs {
        let g = random_graph(seed.wrapping_add(i), 50);
        for types in random_graph_metapaths() {
            let schema = MetapathSchema::from_types(&g, &types)?;
            let table = enumerate_instances_with(&g, &schema, EnumerateOptions::default())?;
            let expect = brute_force_instances(&g, &schema)?;
            let mut same = table.num_sources() == expect.len();
            for (s, want) in expect.iter().enumerate() {
                let got: Vec<Vec<u32>> = table.instances(s).map(<[u32]>::to_vec).collect();
                same &= &got == want;
            }
            let reversed: Vec<&String> = types.iter().rev().collect();
            if types.iter().collect::<Vec<_>>() == reversed {
                let ends: BTreeSet<(u32, u32)> =
                    table.iter().map(|w| (w[0], w[w.len() - 1])).collect();
                same &= ends.iter().all(|&(u, v)| ends.contains(&(v, u)));
            }
            if !same {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

fn small_model_config(kind: EncoderKind) -> ModelConfig {
    ModelConfig {
        encoder: kind,
        heads: 2,
        hidden: 4,
        semantic_hidden: 3,
        dropout: 0.0,
        metapaths: random_graph_metapaths(),
        ..ModelConfig::default()
    }
}

fn model_and_plan(g: &HeteroGraph, cfg: ModelConfig, seed: u64) -> Result<(HanMe, ForwardPlan)> {
    let tables = build_tables(g, &cfg.metapaths, &EnumerateOptions::default())?;
    let model = HanMe::new(cfg, ModelDims::of(g), tables.len(), seed)?;
    let plan = ForwardPlan::new(g, &tables, &g.labeled_nodes())?;
    Ok((model, plan))
}

/// `tanh` whose backward pass uses `1 - y` in place of `1 - y^2`.
struct MisdifferentiatedTanh;

impl CustomOp for MisdifferentiatedTanh {
    fn name(&self) -> &'static str {
        "misdifferentiated_tanh"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(f64::tanh))
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, upstream: &Tensor) -> Vec<Tensor> {
        let mut g = upstream.clone();
        for (gi, &y) in g.data_mut().iter_mut().zip(output.data()) {
            *gi *= 1.0 - y;
        }
        vec![g]
    }
}

/// Worst relative gradient error of the full model on a graph of at most
/// 20 nodes. With `seeded_bug` the logits pass through
/// [`MisdifferentiatedTanh`] and the error is expected to be large.
pub fn model_gradient_error(kind: EncoderKind, seed: u64, seeded_bug: bool) -> Result<f64> {
    let g = random_graph(seed, 20);
    let (model, plan) = model_and_plan(&g, small_model_config(kind), seed)?;
    let rows: Arc<[usize]> = (0..plan.len()).collect();
    let targets = Arc::new(plan.targets().clone());
    let objective = |values: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut m = model.clone();
        m.set_parallel(false);
        m.params_mut().set_values(values.to_vec())?;
        let mut tape = Tape::strict();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut logits = m.record_logits(&mut tape, &plan, false, &mut rng)?;
        logits = tape.gather_rows(logits, rows.clone())?;
        if seeded_bug {
            logits = tape.custom(&[logits], Box::new(MisdifferentiatedTanh))?;
        }
        let loss = bce_with_logits(&mut tape, logits, targets.clone())?;
        let grads = m.param_grads(&tape, loss.mean)?;
        Ok((tape.value(loss.mean).item(), grads))
    };
    let opts = GradCheckOptions {
        eps: 1e-5,
        max_coords_per_param: Some(12),
        seed,
    };
    Ok(finite_diff_check(objective, model.params().values(), opts)?.max_rel_error)
}

/// Largest deviation from 1 of the per-node instance attention sums and of
/// the semantic weight sums, over `graphs` random graphs and both learned
/// encoders.
pub fn attention_sum_deviation(graphs: u64, seed: u64) -> Result<(f64, f64)> {
    let mut worst: f64 = 0.0;
    let mut worst_beta: f64 = 0.0;
    for i in 0..graphs {
        let g = random_graph(seed.wrapping_add(1000 + i), 30);
        let kind = if i % 2 == 0 {
            EncoderKind::Multihop
        } else {
            EncoderKind::Direct
        };
        let (model, plan) = model_and_plan(&g, small_model_config(kind), i)?;
        let out = model.predict(&plan)?;
        worst_beta = worst_beta.max((out.beta.iter().sum::<f64>() - 1.0).abs());
        for m in 0..plan.num_metapaths() {
            for k in 0..model.config().heads {
                for s in out.alpha_sums(&plan, m, k) {
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
    }
    Ok((worst, worst_beta))
}

/// Architecture used by the training checks.
pub fn compact_train_config(kind: EncoderKind, heads: usize, hidden: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        max_epochs: 200,
        ..TrainConfig::default()
    };
    cfg.model.encoder = kind;
    cfg.model.heads = heads;
    cfg.model.hidden = hidden;
    cfg.model.semantic_hidden = hidden;
    cfg.pacing.kind = PacingKind::Off;
    cfg
}

/// Test micro-F1 at the best validation epoch of the multi-hop and
/// terminal-only encoders on the default synthetic dataset, pacing off.
pub fn encoder_comparison(seed: u64) -> Result<(f64, f64)> {
    let g = generate(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })?
    .graph;
    let run = |kind| -> Result<f64> {
        let out = train_graph(&g, &compact_train_config(kind, 2, 16, seed))?;
        out.test
            .map(|t| t.micro)
            .ok_or_else(|| Error::Check("synthetic dataset has no test split".into()))
    };
    Ok((run(EncoderKind::Multihop)?, run(EncoderKind::TerminalOnly)?))
}

/// Synthetic config whose `director` links carry no community signal.
pub fn uninformative_director(seed: u64) -> SyntheticConfig {
    let mut cfg = SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    };
    let director = &mut cfg.linked[0];
    director.p_intra = Some(0.04);
    director.p_inter = Some(0.04);
    director.feature_signal = Some(0.0);
    cfg
}

/// `(beta of movie-actor-movie, beta of movie-director-movie)` after
/// training on [`uninformative_director`].
pub fn semantic_weights(seed: u64) -> Result<(f64, f64)> {
    let g = generate(&uninformative_director(seed))?.graph;
    let out = train_graph(&g, &compact_train_config(EncoderKind::Multihop, 2, 16, seed))?;
    let beta_of = |name: &str| {
        out.train_stats
            .iter()
            .position(|s| s.name == name)
            .map(|i| out.beta[i])
            .ok_or_else(|| Error::Check(format!("metapath `{name}` missing")))
    };
    Ok((beta_of("movie-actor-movie")?, beta_of("movie-director-movie")?))
}

/// Seeds in `1..=seeds` for which the informative metapath gets the larger
/// semantic weight.
pub fn semantic_wins(seeds: u64) -> Result<usize> {
    let mut wins = 0;
    for seed in 1..=seeds {
        let (actor, director) = semantic_weights(seed)?;
        if actor > director {
            wins += 1;
        }
    }
    Ok(wins)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_graphs_respect_the_bound() {
        for seed in 0..20 {
            let g = random_graph(seed, 20);
            assert!(g.total_nodes() <= 20);
            assert!(!g.splits().train.is_empty());
        }
    }

    #[test]
    fn brute_force_matches_a_hand_count() {
        let g = crate::graph::fixtures::two_movies_one_director();
        let schema = MetapathSchema::from_types(&g, &["movie", "director", "movie"]).unwrap();
        let inst = brute_force_instances(&g, &schema).unwrap();
        assert_eq!(inst[0], vec![vec![0, 0, 0], vec![0, 0, 1]]);
        assert_eq!(inst[1], vec![vec![1, 0, 0], vec![1, 0, 1]]);
    }

    #[test]
    fn quick_suite_passes() {
        let out = run_suite(&VerifyOptions {
            seed: 7,
            quick: true,
        });
        assert_eq!(out.len(), 6);
        for o in &out {
            assert!(o.passed, "{}", o.line());
        }
    }
}
