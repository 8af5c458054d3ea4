//! The node classifier: type projection, per-instance encoding, node-level
//! attention over each node's instances, head concatenation, semantic
//! attention across metapaths, a linear classifier and the multi-label loss.
//!
//! A [`ForwardPlan`] fixes everything about a pass that does not depend on the
//! parameters (which nodes take part, instance index columns, segment ids,
//! label rows). It is built once per node set and replayed every epoch.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::batched::{
    direct_batch, multihop_batch, terminal_batch, DirectVars, InstanceBatch, MultihopVars,
};
use crate::encoders::{check_gamma, EncoderKind, DEFAULT_GAMMA, DEFAULT_LEAKY_SLOPE};
use crate::engine::{Axis, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::metapath::{enumerate_instances_with, EnumerateOptions, InstanceTable, MetapathSchema};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub gamma: f64,
    pub leaky_slope: f64,
    pub heads: usize,
    /// Projected width `d`, shared by every head.
    pub hidden: usize,
    pub semantic_hidden: usize,
    pub dropout: f64,
    /// Metapaths as node-type sequences. Empty means one `[L, T, L]` path per
    /// type `T` linked to the labeled type `L`.
    pub metapaths: Vec<Vec<String>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::Multihop,
            gamma: DEFAULT_GAMMA,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            heads: 8,
            hidden: 128,
            semantic_hidden: 128,
            dropout: 0.6,
            metapaths: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder == EncoderKind::Multihop {
            check_gamma(self.gamma)?;
        }
        if self.heads == 0 || self.hidden == 0 || self.semantic_hidden == 0 {
            return Err(Error::Config(
                "heads, hidden and semantic_hidden must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky_slope must be finite".into()));
        }
        Ok(())
    }
}

/// Dataset-dependent shapes a model is built for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub node_types: Vec<String>,
    pub feature_dims: Vec<usize>,
    pub labeled_type: String,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn of(g: &HeteroGraph) -> Self {
        ModelDims {
            node_types: g.node_types().to_vec(),
            feature_dims: (0..g.num_types()).map(|t| g.feature_dim(t)).collect(),
            labeled_type: g.type_name(g.labeled_type()).to_string(),
            num_classes: g.num_classes(),
        }
    }

    /// Errors unless `g` has exactly these shapes.
    pub fn check(&self, g: &HeteroGraph) -> Result<()> {
        let other = ModelDims::of(g);
        if *self != other {
            return Err(Error::Checkpoint(format!(
                "model expects types {:?} with feature dims {:?} and {} classes, \
                 dataset has {:?} with {:?} and {}",
                self.node_types,
                self.feature_dims,
                self.num_classes,
                other.node_types,
                other.feature_dims,
                other.num_classes
            )));
        }
        Ok(())
    }
}

/// `[L, T, L]` for every type `T` sharing a relation with the labeled type
/// `L`, in type order.
pub fn default_metapaths(g: &HeteroGraph) -> Vec<Vec<String>> {
    let l = g.labeled_type();
    (0..g.num_types())
        .filter(|&t| t != l && !g.relations_between(l, t).is_empty())
        .map(|t| {
            let name = g.type_name(l).to_string();
            vec![name.clone(), g.type_name(t).to_string(), name]
        })
        .collect()
}

/// Resolve and enumerate every metapath of `config` (or the defaults).
pub fn build_tables(
    g: &HeteroGraph,
    metapaths: &[Vec<String>],
    opts: &EnumerateOptions,
) -> Result<Vec<InstanceTable>> {
    let owned;
    let metapaths = if metapaths.is_empty() {
        owned = default_metapaths(g);
        &owned
    } else {
        metapaths
    };
    if metapaths.is_empty() {
        return Err(Error::Config(
            "no metapaths configured and the labeled type has no relations".into(),
        ));
    }
    metapaths
        .iter()
        .map(|types| {
            let schema = MetapathSchema::from_types(g, types)?;
            enumerate_instances_with(g, &schema, *opts)
        })
        .collect()
}

#[derive(Debug, Clone)]
struct MetapathPlan {
    name: String,
    /// `None` when no row has an instance.
    batch: Option<InstanceBatch>,
    /// Local index of the node that starts every instance.
    sources: Arc<[usize]>,
    /// Local index of every row with no instance; its own feature stands in.
    fallback: Arc<[usize]>,
    /// Row position per attention entry: instances first, then fallbacks.
    segments: Arc<[usize]>,
    /// Source for every attention entry, aligned with `segments`.
    entry_sources: Arc<[usize]>,
}

/// Instance and fallback counts of one metapath over a plan's rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MetapathStats {
    pub name: String,
    pub instances: usize,
    pub fallback_nodes: usize,
}

/// Parameter-independent layout of a forward pass over a set of
/// labeled-type nodes.
#[derive(Debug, Clone)]
pub struct ForwardPlan {
    rows: Vec<usize>,
    /// Raw features of the participating nodes, per type, in local order.
    blocks: Vec<(usize, Tensor)>,
    local_nodes: usize,
    metapaths: Vec<MetapathPlan>,
    targets: Tensor,
}

impl ForwardPlan {
    /// Plan over the labeled-type nodes `rows`, in the given order.
    pub fn new(g: &HeteroGraph, tables: &[InstanceTable], rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("forward plan over an empty node set".into()));
        }
        if tables.is_empty() {
            return Err(Error::Config("forward plan needs at least one metapath".into()));
        }
        let l = g.labeled_type();
        if let Some(&bad) = rows.iter().find(|&&r| r >= g.node_count(l)) {
            return Err(Error::Config(format!(
                "row {bad} outside {} nodes of type `{}`",
                g.node_count(l),
                g.type_name(l)
            )));
        }
        for t in tables {
            if t.types()[0] != l || t.num_sources() != g.node_count(l) {
                return Err(Error::Config(format!(
                    "metapath `{}` does not start at the labeled type",
                    t.schema().name
                )));
            }
        }
        for t in 0..g.num_types() {
            if g.features(t).is_none() {
                return Err(Error::Config(format!(
                    "type `{}` has no features; assign pooled features first",
                    g.type_name(t)
                )));
            }
        }

        // Every node touched by the plan, per type.
        let mut needed: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); g.num_types()];
        for &r in rows {
            needed[l].insert(r as u32, 0);
        }
        for table in tables {
            let types = table.types();
            for &r in rows {
                for inst in table.instances(r) {
                    for (&t, &id) in types.iter().zip(inst) {
                        needed[t].insert(id, 0);
                    }
                }
            }
        }
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (t, ids) in needed.iter_mut().enumerate() {
            if ids.is_empty() {
                continue;
            }
            let order: Vec<usize> = ids.keys().map(|&id| id as usize).collect();
            for (i, local) in ids.values_mut().enumerate() {
                *local = offset + i;
            }
            offset += order.len();
            let raw = g.features(t).expect("checked above").gather_rows(&order);
            blocks.push((t, raw));
        }
        let local = |t: usize, id: u32| needed[t][&id];

        let mut metapaths = Vec::with_capacity(tables.len());
        for table in tables {
            let types = table.types();
            let mut columns = vec![Vec::new(); table.width()];
            let mut segments = Vec::new();
            let mut fallback = Vec::new();
            let mut fallback_rows = Vec::new();
            for (pos, &r) in rows.iter().enumerate() {
                if table.count(r) == 0 {
                    fallback.push(local(l, r as u32));
                    fallback_rows.push(pos);
                    continue;
                }
                for inst in table.instances(r) {
                    for ((col, &t), &id) in columns.iter_mut().zip(types).zip(inst) {
                        col.push(local(t, id));
                    }
                    segments.push(pos);
                }
            }
            let batch = if segments.is_empty() {
                None
            } else {
                Some(InstanceBatch::new(columns)?)
            };
            let sources: Arc<[usize]> = match &batch {
                Some(b) => b.sources().clone(),
                None => Arc::from(Vec::new()),
            };
            let entry_sources: Vec<usize> = sources.iter().chain(&fallback).copied().collect();
            segments.extend(fallback_rows);
            metapaths.push(MetapathPlan {
                name: table.schema().name.clone(),
                batch,
                sources,
                fallback: fallback.into(),
                segments: segments.into(),
                entry_sources: entry_sources.into(),
            });
        }

        Ok(ForwardPlan {
            rows: rows.to_vec(),
            blocks,
            local_nodes: offset,
            metapaths,
            targets: g.labels().gather_rows(rows),
        })
    }

    /// Labeled-type node ids, one per output row.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Label rows aligned with [`ForwardPlan::rows`].
    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    pub fn num_metapaths(&self) -> usize {
        self.metapaths.len()
    }

    /// Number of distinct nodes whose features the plan reads.
    pub fn local_nodes(&self) -> usize {
        self.local_nodes
    }

    /// Row position of every node-attention entry of metapath `m`.
    pub fn segments(&self, m: usize) -> &Arc<[usize]> {
        &self.metapaths[m].segments
    }

    pub fn stats(&self) -> Vec<MetapathStats> {
        self.metapaths
            .iter()
            .map(|m| MetapathStats {
                name: m.name.clone(),
                instances: m.sources.len(),
                fallback_nodes: m.fallback.len(),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum EncoderIds {
    Multihop { w_h: ParamId, w_t: ParamId, v_a: ParamId },
    Direct { w_t: ParamId, w_h: ParamId },
    Terminal,
}

#[derive(Debug, Clone)]
struct HeadIds {
    att: ParamId,
    encoder: EncoderIds,
}

/// Model parameters together with the architecture they belong to.
#[derive(Debug, Clone)]
pub struct HanMe {
    config: ModelConfig,
    dims: ModelDims,
    params: ParamStore,
    proj: Vec<ParamId>,
    heads: Vec<Vec<HeadIds>>,
    sem_w: ParamId,
    sem_b: ParamId,
    sem_q: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
    parallel: bool,
}

/// Values of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One row of class logits per plan row.
    pub logits: Tensor,
    /// Semantic weight per metapath.
    pub beta: Vec<f64>,
    /// Node-level attention per metapath and head, aligned with
    /// [`ForwardPlan::segments`]. Recorded before dropout.
    pub alpha: Vec<Vec<Vec<f64>>>,
}

impl ForwardOutput {
    /// Sum of node-level attention per plan row.
    pub fn alpha_sums(&self, plan: &ForwardPlan, metapath: usize, head: usize) -> Vec<f64> {
        let mut sums = vec![0.0; plan.len()];
        for (&s, &a) in plan.segments(metapath).iter().zip(&self.alpha[metapath][head]) {
            sums[s] += a;
        }
        sums
    }
}

struct Recorded {
    logits: Var,
    beta: Var,
    alpha: Vec<Vec<Var>>,
}

impl HanMe {
    /// Fresh model with Glorot-uniform weights and zero biases drawn from
    /// `seed`. `num_metapaths` fixes how many metapath blocks exist.
    pub fn new(config: ModelConfig, dims: ModelDims, num_metapaths: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, dims, num_metapaths, |rows, cols, bias| {
            if bias {
                Tensor::zeros(rows, cols)
            } else {
                Tensor::glorot_uniform(rows, cols, &mut rng)
            }
        })
    }

    /// Model holding the given parameters, which must match the architecture
    /// by name and shape.
    pub fn from_params(
        config: ModelConfig,
        dims: ModelDims,
        num_metapaths: usize,
        params: ParamStore,
    ) -> Result<Self> {
        let mut model = Self::build(config, dims, num_metapaths, |r, c, _| Tensor::zeros(r, c))?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                params.len(),
                model.params.len()
            )));
        }
        let mut values = Vec::with_capacity(params.len());
        for (_, name, expected) in model.params.iter() {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor `{name}`")))?;
            let value = params.value(id);
            if value.shape() != expected.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    value.shape(),
                    expected.shape()
                )));
            }
            values.push(value.clone());
        }
        model.params.set_values(values)?;
        Ok(model)
    }

    fn build(
        config: ModelConfig,
        dims: ModelDims,
        num_metapaths: usize,
        mut init: impl FnMut(usize, usize, bool) -> Tensor,
    ) -> Result<Self> {
        config.validate()?;
        if num_metapaths == 0 {
            return Err(Error::Config("model needs at least one metapath".into()));
        }
        if dims.node_types.len() != dims.feature_dims.len() {
            return Err(Error::Config("one feature dim per node type required".into()));
        }
        if let Some(i) = dims.feature_dims.iter().position(|&d| d == 0) {
            return Err(Error::Config(format!(
                "type `{}` has no features",
                dims.node_types[i]
            )));
        }
        let d = config.hidden;
        let width = d * config.heads;
        let mut params = ParamStore::new();

        let mut proj = Vec::new();
        for (name, &raw) in dims.node_types.iter().zip(&dims.feature_dims) {
            proj.push(params.add(format!("proj.{name}"), init(raw, d, false))?);
        }
        let mut heads = Vec::new();
        for m in 0..num_metapaths {
            let mut per_head = Vec::new();
            for k in 0..config.heads {
                let prefix = format!("mp{m}.head{k}");
                let att = params.add(format!("{prefix}.att"), init(2 * d, 1, false))?;
                let encoder = match config.encoder {
                    EncoderKind::Multihop => EncoderIds::Multihop {
                        w_h: params.add(format!("{prefix}.w_h"), init(d, d, false))?,
                        w_t: params.add(format!("{prefix}.w_t"), init(d, d, false))?,
                        v_a: params.add(format!("{prefix}.v_a"), init(2 * d, 1, false))?,
                    },
                    EncoderKind::Direct => EncoderIds::Direct {
                        w_t: params.add(format!("{prefix}.w_t"), init(d, d, false))?,
                        w_h: params.add(format!("{prefix}.w_h"), init(d, d, false))?,
                    },
                    EncoderKind::TerminalOnly => EncoderIds::Terminal,
                };
                per_head.push(HeadIds { att, encoder });
            }
            heads.push(per_head);
        }
        let ds = config.semantic_hidden;
        let sem_w = params.add("sem.w", init(width, ds, false))?;
        let sem_b = params.add("sem.b", init(1, ds, true))?;
        let sem_q = params.add("sem.q", init(ds, 1, false))?;
        let cls_w = params.add("cls.w", init(width, dims.num_classes, false))?;
        let cls_b = params.add("cls.b", init(1, dims.num_classes, true))?;

        Ok(HanMe {
            config,
            dims,
            params,
            proj,
            heads,
            sem_w,
            sem_b,
            sem_q,
            cls_w,
            cls_b,
            parallel: true,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn num_metapaths(&self) -> usize {
        self.heads.len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Disable parallel kernels for bit-reproducible single-threaded runs.
    pub fn set_parallel(&mut self, parallel: bool) {
        self.parallel = parallel;
    }

    fn tape(&self) -> Tape {
        let mut tape = Tape::new();
        tape.set_parallel(self.parallel);
        tape
    }

    fn record<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        plan: &ForwardPlan,
        train: bool,
        rng: &mut R,
    ) -> Result<Recorded> {
        if plan.num_metapaths() != self.num_metapaths() {
            return Err(Error::Config(format!(
                "plan has {} metapaths, model has {}",
                plan.num_metapaths(),
                self.num_metapaths()
            )));
        }
        let p = &self.params;
        let cfg = &self.config;
        let mut projected = Vec::with_capacity(plan.blocks.len());
        for (t, raw) in &plan.blocks {
            let x = tape.constant(raw.clone());
            let m = tape.param(p, self.proj[*t]);
            projected.push(tape.matmul(x, m)?);
        }
        let h = tape.concat_rows(&projected)?;
        let h = tape.dropout(h, cfg.dropout, train, rng)?;

        let n = plan.len();
        let mut per_metapath = Vec::with_capacity(plan.num_metapaths());
        let mut alpha = Vec::with_capacity(plan.num_metapaths());
        for (mp, head_ids) in plan.metapaths.iter().zip(&self.heads) {
            let sources = tape.gather_rows(h, mp.entry_sources.clone())?;
            let fallback = if mp.fallback.is_empty() {
                None
            } else {
                Some(tape.gather_rows(h, mp.fallback.clone())?)
            };
            let mut head_out = Vec::with_capacity(head_ids.len());
            let mut head_alpha = Vec::with_capacity(head_ids.len());
            for ids in head_ids {
                let encoded = match &mp.batch {
                    None => None,
                    Some(batch) => Some(match ids.encoder {
                        EncoderIds::Multihop { w_h, w_t, v_a } => {
                            let vars = MultihopVars {
                                w_h: tape.param(p, w_h),
                                w_t: tape.param(p, w_t),
                                v_a: tape.param(p, v_a),
                                gamma: cfg.gamma,
                                leaky_slope: cfg.leaky_slope,
                            };
                            multihop_batch(tape, h, batch, &vars)?
                        }
                        EncoderIds::Direct { w_t, w_h } => {
                            let vars = DirectVars {
                                w_t: tape.param(p, w_t),
                                w_h: tape.param(p, w_h),
                            };
                            direct_batch(tape, h, batch, &vars)?
                        }
                        EncoderIds::Terminal => terminal_batch(tape, h, batch)?,
                    }),
                };
                let encodings = match (encoded, fallback) {
                    (Some(e), Some(f)) => tape.concat_rows(&[e, f])?,
                    (Some(e), None) => e,
                    (None, Some(f)) => f,
                    (None, None) => unreachable!("plan rows are non-empty"),
                };
                let att = tape.param(p, ids.att);
                let node = instance_attention_aggregate(
                    tape,
                    sources,
                    encodings,
                    att,
                    &mp.segments,
                    n,
                    cfg.leaky_slope,
                    cfg.dropout,
                    train,
                    rng,
                )?;
                head_out.push(node.z);
                head_alpha.push(node.alpha);
            }
            per_metapath.push(multi_head_concat(tape, &head_out)?);
            alpha.push(head_alpha);
        }

        let w = tape.param(p, self.sem_w);
        let b = tape.param(p, self.sem_b);
        let q = tape.param(p, self.sem_q);
        let fused = semantic_fuse(tape, &per_metapath, w, b, q)?;
        let cls_w = tape.param(p, self.cls_w);
        let cls_b = tape.param(p, self.cls_b);
        let logits = tape.matmul(fused.z, cls_w)?;
        let logits = tape.add_row(logits, cls_b)?;
        Ok(Recorded {
            logits,
            beta: fused.beta,
            alpha,
        })
    }

    /// Record the forward pass on `tape` and return the logits, one row per
    /// plan row.
    pub fn record_logits<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        plan: &ForwardPlan,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        Ok(self.record(tape, plan, train, rng)?.logits)
    }

    /// Gradient of the 1 x 1 value `loss` for every parameter, in store order.
    pub fn param_grads(&self, tape: &Tape, loss: Var) -> Result<Vec<Tensor>> {
        Ok(tape.backward(loss)?.for_params(tape, &self.params))
    }

    /// Forward pass without gradients. Dropout is active only when `train`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        plan: &ForwardPlan,
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let mut tape = self.tape();
        let rec = self.record(&mut tape, plan, train, rng)?;
        Ok(ForwardOutput {
            logits: tape.value(rec.logits).clone(),
            beta: tape.value(rec.beta).data().to_vec(),
            alpha: rec
                .alpha
                .iter()
                .map(|heads| heads.iter().map(|&a| tape.value(a).data().to_vec()).collect())
                .collect(),
        })
    }

    /// Evaluation-mode forward pass.
    pub fn predict(&self, plan: &ForwardPlan) -> Result<ForwardOutput> {
        // Dropout is off, so the generator is never drawn from.
        self.forward(plan, false, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Mean loss over the plan rows at `positions` and its gradient for every
    /// parameter, in store order.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        plan: &ForwardPlan,
        positions: &[usize],
        train: bool,
        rng: &mut R,
    ) -> Result<(f64, Vec<Tensor>)> {
        if let Some(&bad) = positions.iter().find(|&&i| i >= plan.len()) {
            return Err(Error::Config(format!("loss row {bad} of {}", plan.len())));
        }
        let mut tape = self.tape();
        let rec = self.record(&mut tape, plan, train, rng)?;
        let idx: Arc<[usize]> = positions.into();
        let logits = tape.gather_rows(rec.logits, idx)?;
        let targets = Arc::new(plan.targets.gather_rows(positions));
        let loss = bce_with_logits(&mut tape, logits, targets)?;
        let grads = tape.backward(loss.mean)?;
        Ok((tape.value(loss.mean).item(), grads.for_params(&tape, &self.params)))
    }
}

/// Project every type's raw features with its matrix: `h = x M`.
pub fn type_project(g: &HeteroGraph, projections: &[Tensor]) -> Result<Vec<Tensor>> {
    if projections.len() != g.num_types() {
        return Err(Error::Config(format!(
            "{} projections for {} node types",
            projections.len(),
            g.num_types()
        )));
    }
    (0..g.num_types())
        .map(|t| {
            let x = g.features(t).ok_or_else(|| {
                Error::Config(format!("type `{}` has no features", g.type_name(t)))
            })?;
            x.matmul(&projections[t])
        })
        .collect()
}

/// Node-level attention of one head.
#[derive(Debug, Clone, Copy)]
pub struct NodeAttention {
    /// One embedding row per segment.
    pub z: Var,
    /// Attention per entry, before dropout.
    pub alpha: Var,
}

/// Node-level attention over instance encodings grouped by `segments`:
/// `e = LeakyReLU(a . [h_source | encoding])`, `alpha` = softmax of `e`
/// within each segment, `z = ELU(sum alpha * encoding)`.
#[allow(clippy::too_many_arguments)]
pub fn instance_attention_aggregate<R: Rng + ?Sized>(
    tape: &mut Tape,
    sources: Var,
    encodings: Var,
    att: Var,
    segments: &Arc<[usize]>,
    n_segments: usize,
    leaky_slope: f64,
    dropout: f64,
    train: bool,
    rng: &mut R,
) -> Result<NodeAttention> {
    let pair = tape.concat_cols(&[sources, encodings])?;
    let e = tape.matmul(pair, att)?;
    let e = tape.leaky_relu(e, leaky_slope);
    let alpha = tape.segment_softmax(e, segments.clone())?;
    let kept = tape.dropout(alpha, dropout, train, rng)?;
    let weighted = tape.mul_col(encodings, kept)?;
    let summed = tape.segment_sum(weighted, segments.clone(), n_segments)?;
    Ok(NodeAttention {
        z: tape.elu(summed),
        alpha,
    })
}

/// Heads side by side, head 0 first.
pub fn multi_head_concat(tape: &mut Tape, heads: &[Var]) -> Result<Var> {
    let Some(&first) = heads.first() else {
        return Err(Error::dim("multi_head_concat", "no heads"));
    };
    let shape = tape.shape(first);
    if let Some(&bad) = heads.iter().find(|&&h| tape.shape(h) != shape) {
        return Err(Error::dim(
            "multi_head_concat",
            format!("head shapes {:?} and {:?}", shape, tape.shape(bad)),
        ));
    }
    if heads.len() == 1 {
        return Ok(first);
    }
    tape.concat_cols(heads)
}

#[derive(Debug, Clone, Copy)]
pub struct SemanticFusion {
    pub z: Var,
    /// `1 x P` weights, one per metapath.
    pub beta: Var,
}

/// `w_P = mean_rows(tanh(Z_P W + b) q)`, `beta = softmax(w)`,
/// `Z = sum beta_P Z_P`.
pub fn semantic_fuse(tape: &mut Tape, zs: &[Var], w: Var, b: Var, q: Var) -> Result<SemanticFusion> {
    let Some(&first) = zs.first() else {
        return Err(Error::dim("semantic_fuse", "no metapaths"));
    };
    let shape = tape.shape(first);
    if let Some(&bad) = zs.iter().find(|&&z| tape.shape(z) != shape) {
        return Err(Error::dim(
            "semantic_fuse",
            format!("embeddings {:?} and {:?}", shape, tape.shape(bad)),
        ));
    }
    let mut scores = Vec::with_capacity(zs.len());
    for &z in zs {
        let s = tape.matmul(z, w)?;
        let s = tape.add_row(s, b)?;
        let s = tape.tanh(s);
        let s = tape.matmul(s, q)?;
        scores.push(tape.mean_rows(s, None)?);
    }
    let scores = tape.concat_cols(&scores)?;
    let beta = tape.softmax(scores, Axis::Row);
    let mut fused = None;
    for (i, &z) in zs.iter().enumerate() {
        let weight = tape.select(beta, 0, i)?;
        let term = tape.mul_scalar(z, weight)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(SemanticFusion {
        z: fused.expect("at least one metapath"),
        beta,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Loss {
    /// Mean over rows of the per-row loss (1 x 1).
    pub mean: Var,
    /// Binary cross-entropy summed over classes, one row per node.
    pub per_node: Var,
}

/// Multi-label binary cross-entropy with logits in the stable form.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, targets: Arc<Tensor>) -> Result<Loss> {
    let n = tape.shape(logits).0;
    if n == 0 {
        return Err(Error::dim("bce_with_logits", "empty node set"));
    }
    let per_node = tape.bce_with_logits(logits, targets)?;
    let total = tape.sum(per_node);
    Ok(Loss {
        mean: tape.scale(total, 1.0 / n as f64),
        per_node,
    })
}

/// Per-row loss values without a tape.
pub fn row_losses(logits: &Tensor, targets: &Tensor) -> Result<Vec<f64>> {
    if logits.shape() != targets.shape() {
        return Err(Error::dim(
            "row_losses",
            format!("logits {:?}, targets {:?}", logits.shape(), targets.shape()),
        ));
    }
    Ok((0..logits.rows())
        .map(|r| crate::engine::bce_row(logits.row(r), targets.row(r)))
        .collect())
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::graph::{assign_pooled_features, generate, LinkedType, SyntheticConfig};

    /// Small two-metapath graph with pooled features on the linked types.
    pub fn small_graph(seed: u64, movies: usize) -> HeteroGraph {
        let cfg = SyntheticConfig {
            target_count: movies,
            target_feature_dim: 5,
            linked: vec![
                LinkedType {
                    name: "director".into(),
                    count: (movies / 3).max(1),
                    relation: "directed_by".into(),
                    feature_dim: 0,
                    p_intra: Some(0.3),
                    p_inter: Some(0.05),
                    feature_signal: None,
                },
                LinkedType {
                    name: "actor".into(),
                    count: (movies / 2).max(1),
                    relation: "stars".into(),
                    feature_dim: 0,
                    p_intra: Some(0.25),
                    p_inter: Some(0.05),
                    feature_signal: None,
                },
            ],
            num_classes: 3,
            communities: 3,
            train_frac: 0.5,
            val_frac: 0.25,
            seed,
            ..SyntheticConfig::default()
        };
        let g = generate(&cfg).unwrap().graph;
        assign_pooled_features(&g, &["director", "actor"]).unwrap()
    }

    pub fn small_config(encoder: EncoderKind) -> ModelConfig {
        ModelConfig {
            encoder,
            heads: 2,
            hidden: 4,
            semantic_hidden: 3,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    pub fn model_and_plan(
        g: &HeteroGraph,
        cfg: ModelConfig,
        seed: u64,
    ) -> (HanMe, ForwardPlan) {
        let tables = build_tables(g, &cfg.metapaths, &EnumerateOptions::default()).unwrap();
        let model = HanMe::new(cfg, ModelDims::of(g), tables.len(), seed).unwrap();
        let rows = g.labeled_nodes();
        let plan = ForwardPlan::new(g, &tables, &rows).unwrap();
        (model, plan)
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::engine::{finite_diff_check, GradCheckOptions};
    use crate::metapath::enumerate_instances;

    fn no_rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn forward_is_deterministic() {
        let g = small_graph(3, 12);
        for kind in [EncoderKind::Multihop, EncoderKind::Direct, EncoderKind::TerminalOnly] {
            let (model, plan) = model_and_plan(&g, small_config(kind), 483);
            let a = model.predict(&plan).unwrap();
            let b = model.predict(&plan).unwrap();
            assert_eq!(a.logits, b.logits);
            assert_eq!(a.logits.shape(), (plan.len(), 3));
            let mut cfg = small_config(kind);
            cfg.dropout = 0.5;
            let (model, plan) = model_and_plan(&g, cfg, 483);
            let a = model.forward(&plan, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let b = model.forward(&plan, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(a.logits, b.logits);
        }
    }

    #[test]
    fn strict_and_parallel_agree() {
        let g = small_graph(4, 30);
        let mut cfg = small_config(EncoderKind::Multihop);
        cfg.hidden = 64;
        let (mut model, plan) = model_and_plan(&g, cfg, 1);
        let a = model.predict(&plan).unwrap();
        model.set_parallel(false);
        let b = model.predict(&plan).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn attention_weights_are_normalized() {
        let g = small_graph(5, 15);
        let (model, plan) = model_and_plan(&g, small_config(EncoderKind::Multihop), 2);
        let out = model.predict(&plan).unwrap();
        assert!((out.beta.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for m in 0..plan.num_metapaths() {
            for k in 0..2 {
                for s in out.alpha_sums(&plan, m, k) {
                    assert!((s - 1.0).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn instance_listing_order_does_not_matter() {
        let g = small_graph(6, 12);
        let cfg = small_config(EncoderKind::Multihop);
        let tables = build_tables(&g, &[], &EnumerateOptions::default()).unwrap();
        let shuffled: Vec<InstanceTable> = tables
            .iter()
            .map(|t| {
                let mut all: Vec<Vec<u32>> = t.iter().map(<[u32]>::to_vec).collect();
                all.reverse();
                InstanceTable::from_instances(t.schema().clone(), t.types().to_vec(), t.num_sources(), all)
                    .unwrap()
            })
            .collect();
        let model = HanMe::new(cfg, ModelDims::of(&g), tables.len(), 7).unwrap();
        let rows = g.labeled_nodes();
        let a = model.predict(&ForwardPlan::new(&g, &tables, &rows).unwrap()).unwrap();
        let b = model.predict(&ForwardPlan::new(&g, &shuffled, &rows).unwrap()).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let g = small_graph(7, 10);
        for kind in [EncoderKind::Multihop, EncoderKind::Direct] {
            let (model, plan) = model_and_plan(&g, small_config(kind), 11);
            let positions: Vec<usize> = (0..plan.len()).collect();
            let report = finite_diff_check(
                |values| {
                    let mut m = model.clone();
                    m.params_mut().set_values(values.to_vec())?;
                    m.loss_and_grads(&plan, &positions, false, &mut no_rng())
                },
                model.params().values(),
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{kind}: {report:?}");
        }
    }

    #[test]
    fn isolated_rows_fall_back_to_own_features() {
        let g = crate::graph::fixtures::two_movies_one_director();
        let mut parts_cfg = small_config(EncoderKind::Multihop);
        parts_cfg.heads = 1;
        let schema = MetapathSchema::from_types(&g, &["movie", "director", "movie"]).unwrap();
        let table = enumerate_instances(&g, &schema).unwrap();
        let empty = InstanceTable::from_instances(
            schema.clone(),
            table.types().to_vec(),
            table.num_sources(),
            Vec::new(),
        )
        .unwrap();
        let g = crate::graph::assign_pooled_features(&g, &["director"]).unwrap();
        let plan = ForwardPlan::new(&g, &[empty], &[0, 1]).unwrap();
        assert_eq!(plan.stats()[0].fallback_nodes, 2);
        let model = HanMe::new(parts_cfg, ModelDims::of(&g), 1, 3).unwrap();
        let out = model.predict(&plan).unwrap();
        assert_eq!(out.alpha[0][0], vec![1.0, 1.0]);
        assert!(out.logits.is_finite());
    }

    #[test]
    fn type_projection_examples() {
        let g = crate::graph::assign_pooled_features(
            &crate::graph::fixtures::two_movies_one_director(),
            &["director"],
        )
        .unwrap();
        let ident: Vec<Tensor> = (0..g.num_types()).map(|t| Tensor::identity(g.feature_dim(t))).collect();
        let out = type_project(&g, &ident).unwrap();
        for t in 0..g.num_types() {
            assert_eq!(&out[t], g.features(t).unwrap());
        }
        let zero: Vec<Tensor> = (0..g.num_types()).map(|t| Tensor::zeros(g.feature_dim(t), 3)).collect();
        assert!(type_project(&g, &zero).unwrap().iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
        assert!(matches!(type_project(&g, &ident[..1]), Err(Error::Config(_))));
    }

    #[test]
    fn node_attention_examples() {
        let mut tape = Tape::strict();
        let src = tape.constant(Tensor::from_rows(&vec![vec![1.0, 0.0]; 4]).unwrap());
        let enc = tape.constant(
            Tensor::from_rows(&[vec![0.5, -1.0], vec![0.3, 0.3], vec![0.3, 0.3], vec![2.0, 1.0]]).unwrap(),
        );
        let att = tape.constant(Tensor::column(vec![0.2, -0.4, 0.7, 1.1]));
        let segments: Arc<[usize]> = vec![0, 1, 1, 2].into();
        let node = instance_attention_aggregate(
            &mut tape, src, enc, att, &segments, 3, 0.2, 0.0, false, &mut no_rng(),
        )
        .unwrap();
        let alpha = tape.value(node.alpha).data().to_vec();
        assert_eq!(alpha[0], 1.0);
        assert_eq!(alpha[1], 0.5);
        assert_eq!(alpha[2], 0.5);
        let z = tape.value(node.z);
        let elu = |x: f64| if x > 0.0 { x } else { x.exp_m1() };
        assert_eq!(z.row(0), &[elu(0.5), elu(-1.0)]);

        // Three instances under one node against a scalar softmax.
        let mut tape = Tape::strict();
        let rows = [vec![0.1, 0.2], vec![-0.3, 0.8], vec![1.5, -0.5]];
        let src = tape.constant(Tensor::from_rows(&vec![vec![0.4, -0.2]; 3]).unwrap());
        let enc = tape.constant(Tensor::from_rows(&rows).unwrap());
        let a = [0.3, -0.6, 0.9, 0.2];
        let att = tape.constant(Tensor::column(a.to_vec()));
        let seg: Arc<[usize]> = vec![0, 0, 0].into();
        let node = instance_attention_aggregate(
            &mut tape, src, enc, att, &seg, 1, 0.2, 0.0, false, &mut no_rng(),
        )
        .unwrap();
        let e: Vec<f64> = rows
            .iter()
            .map(|r| {
                let x = a[0] * 0.4 + a[1] * -0.2 + a[2] * r[0] + a[3] * r[1];
                if x > 0.0 { x } else { 0.2 * x }
            })
            .collect();
        let total: f64 = e.iter().map(|x| x.exp()).sum();
        for (got, x) in tape.value(node.alpha).data().iter().zip(&e) {
            assert!((got - x.exp() / total).abs() < 1e-15);
        }
    }

    #[test]
    fn head_concat_examples() {
        let mut tape = Tape::strict();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        assert_eq!(multi_head_concat(&mut tape, &[a]).unwrap(), a);
        let z = tape.constant(Tensor::zeros(1, 2));
        let both = multi_head_concat(&mut tape, &[z, z]).unwrap();
        assert_eq!(tape.value(both), &Tensor::zeros(1, 4));
        let heads = vec![z; 8];
        let eight = multi_head_concat(&mut tape, &heads).unwrap();
        assert_eq!(tape.shape(eight), (1, 16));
        let wide = tape.constant(Tensor::zeros(1, 3));
        assert!(multi_head_concat(&mut tape, &[z, wide]).is_err());
    }

    #[test]
    fn semantic_fusion_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::strict();
        let z1 = tape.constant(Tensor::random_uniform(5, 4, -1.0, 1.0, &mut r));
        let w = tape.constant(Tensor::random_uniform(4, 3, -1.0, 1.0, &mut r));
        let b = tape.constant(Tensor::random_uniform(1, 3, -1.0, 1.0, &mut r));
        let q = tape.constant(Tensor::random_uniform(3, 1, -1.0, 1.0, &mut r));
        let one = semantic_fuse(&mut tape, &[z1], w, b, q).unwrap();
        assert_eq!(tape.value(one.beta).data(), &[1.0]);
        assert_eq!(tape.value(one.z), tape.value(z1));
        let two = semantic_fuse(&mut tape, &[z1, z1], w, b, q).unwrap();
        assert_eq!(tape.value(two.beta).data(), &[0.5, 0.5]);
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::strict();
        let z = tape.constant(Tensor::zeros(2, 5));
        let y = Arc::new(Tensor::from_rows(&[vec![1.0, 0.0, 1.0, 0.0, 0.0], vec![0.0; 5]]).unwrap());
        let loss = bce_with_logits(&mut tape, z, y).unwrap();
        assert!((tape.value(loss.mean).item() - 5.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let y = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let z = y.map(|v| if v == 1.0 { 50.0 } else { -50.0 });
        let losses = row_losses(&z, &y).unwrap();
        assert!(losses.iter().all(|&l| l.is_finite() && l < 1e-8));

        let mut r = ChaCha8Rng::seed_from_u64(8);
        let z = Tensor::random_uniform(4, 3, -4.0, 4.0, &mut r);
        let y = Tensor::random_uniform(4, 3, 0.0, 1.0, &mut r).map(f64::round);
        let naive = |z: f64, y: f64| {
            let s = 1.0 / (1.0 + (-z).exp());
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        };
        for (i, l) in row_losses(&z, &y).unwrap().iter().enumerate() {
            let want: f64 = (0..3).map(|c| naive(z.get(i, c), y.get(i, c))).sum();
            assert!((l - want).abs() < 1e-12);
        }

        let mut tape = Tape::strict();
        let empty = tape.constant(Tensor::zeros(0, 2));
        assert!(bce_with_logits(&mut tape, empty, Arc::new(Tensor::zeros(0, 2))).is_err());
    }

    #[test]
    fn checkpoint_params_round_trip_and_mismatch() {
        let g = small_graph(9, 10);
        let cfg = small_config(EncoderKind::Direct);
        let (model, plan) = model_and_plan(&g, cfg.clone(), 5);
        let copy = HanMe::from_params(cfg.clone(), model.dims().clone(), 2, model.params().clone()).unwrap();
        assert_eq!(copy.predict(&plan).unwrap().logits, model.predict(&plan).unwrap().logits);
        let mut wider = cfg;
        wider.hidden = 5;
        assert!(matches!(
            HanMe::from_params(wider, model.dims().clone(), 2, model.params().clone()),
            Err(Error::Checkpoint(_))
        ));
    }
}
