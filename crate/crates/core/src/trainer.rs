//! Full-batch training with an optional loss-aware curriculum, early
//! stopping on validation micro F1, and multi-label F1 evaluation.
//!
//! A run directory holds `checkpoint.bin` (best-validation parameters plus a
//! JSON header describing the architecture), `history.csv` (one row per
//! epoch) and `metrics.txt` (`key=value` lines).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{adam_step, load_checkpoint, save_checkpoint, AdamState};
use crate::error::{Error, Result};
use crate::graph::{assign_pooled_features, load_graph, HeteroGraph, Split};
use crate::metapath::{EnumerateOptions, InstanceTable};
use crate::model::{build_tables, row_losses, ForwardPlan, HanMe, MetapathStats, ModelConfig, ModelDims};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const HISTORY_HEADER: &str = "epoch,lambda_t,num_selected,train_loss,val_micro_f1,val_macro_f1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PacingKind {
    #[default]
    Off,
    Linear,
    Root,
    Geometric,
}

impl PacingKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" => Some(PacingKind::Off),
            "linear" => Some(PacingKind::Linear),
            "root" => Some(PacingKind::Root),
            "geometric" => Some(PacingKind::Geometric),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PacingKind::Off => "off",
            PacingKind::Linear => "linear",
            PacingKind::Root => "root",
            PacingKind::Geometric => "geometric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PacingConfig {
    pub kind: PacingKind,
    /// Fraction of the training set used in the first epoch.
    pub lambda0: f64,
    /// Epoch offset at which the whole training set is in use.
    #[serde(rename = "T")]
    pub pace_t: usize,
}

impl Default for PacingConfig {
    fn default() -> Self {
        PacingConfig {
            kind: PacingKind::Off,
            lambda0: 0.1,
            pace_t: 100,
        }
    }
}

impl PacingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0 && self.lambda0 <= 1.0) {
            return Err(Error::Config(format!("lambda0 {} outside (0, 1]", self.lambda0)));
        }
        if self.pace_t == 0 {
            return Err(Error::Config("pacing T must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fraction of the training set in use at epoch offset `t`.
pub fn pacing(cfg: &PacingConfig, t: usize) -> Result<f64> {
    cfg.validate()?;
    if cfg.kind == PacingKind::Off || t >= cfg.pace_t {
        return Ok(1.0);
    }
    let l0 = cfg.lambda0;
    let frac = t as f64 / cfg.pace_t as f64;
    let lambda = match cfg.kind {
        PacingKind::Off => 1.0,
        PacingKind::Linear => l0 + (1.0 - l0) * frac,
        PacingKind::Root => (l0 * l0 + (1.0 - l0 * l0) * frac).sqrt(),
        PacingKind::Geometric => {
            let lg = l0.log2();
            (lg - lg * frac).exp2()
        }
    };
    Ok(lambda.min(1.0))
}

/// Number of nodes kept out of `n` at fraction `lambda`: `ceil(lambda n)`,
/// ignoring rounding noise just above an integer.
pub fn lts_count(lambda: f64, n: usize) -> usize {
    let raw = lambda * n as f64;
    let count = (raw - 1e-9 * raw.max(1.0)).ceil();
    (count.max(0.0) as usize).min(n)
}

/// The `ceil(lambda N)` lowest-loss ids of `train_ids`, ties broken by the
/// smaller id, returned in ascending id order.
pub fn select_nodes_lts(losses: &[f64], lambda: f64, train_ids: &[usize]) -> Result<Vec<usize>> {
    if train_ids.is_empty() {
        return Err(Error::Training("training split is empty".into()));
    }
    if losses.len() != train_ids.len() {
        return Err(Error::dim(
            "select_nodes_lts",
            format!("{} losses for {} nodes", losses.len(), train_ids.len()),
        ));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Config(format!("lambda {lambda} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..train_ids.len()).collect();
    order.sort_by(|&a, &b| {
        losses[a]
            .total_cmp(&losses[b])
            .then(train_ids[a].cmp(&train_ids[b]))
    });
    let mut chosen: Vec<usize> = order[..lts_count(lambda, train_ids.len())]
        .iter()
        .map(|&i| train_ids[i])
        .collect();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_: f64,
}

/// Multi-label micro and macro F1 of `sigmoid(logits) >= threshold`.
/// A class with no positives and no predictions scores 0.
pub fn f1_scores(logits: &Tensor, labels: &Tensor, threshold: f64) -> Result<F1Scores> {
    if logits.shape() != labels.shape() {
        return Err(Error::dim(
            "f1_scores",
            format!("logits {:?}, labels {:?}", logits.shape(), labels.shape()),
        ));
    }
    let classes = logits.cols();
    let (mut tp, mut fp, mut fn_) = (vec![0usize; classes], vec![0usize; classes], vec![0usize; classes]);
    for r in 0..logits.rows() {
        for c in 0..classes {
            let z = logits.get(r, c);
            let predicted = 1.0 / (1.0 + (-z).exp()) >= threshold;
            let actual = labels.get(r, c) >= 0.5;
            match (predicted, actual) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                (false, false) => {}
            }
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let micro = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let macro_ = if classes == 0 {
        0.0
    } else {
        (0..classes).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / classes as f64
    };
    Ok(F1Scores { micro, macro_ })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub pacing: PacingConfig,
    /// Keep metapath walks that return to their source.
    pub include_source_return: bool,
    pub max_instances_per_source: Option<usize>,
    /// Single-threaded, bit-reproducible kernels.
    pub strict: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 0.005,
            weight_decay: 0.001,
            patience: 100,
            seed: 483,
            max_epochs: 1000,
            pacing: PacingConfig::default(),
            include_source_return: true,
            max_instances_per_source: None,
            strict: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pacing.validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience and max_epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn enumerate_options(&self) -> EnumerateOptions {
        EnumerateOptions {
            include_source_return: self.include_source_return,
            max_per_source: self.max_instances_per_source,
            parallel: !self.strict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda_t: f64,
    pub num_selected: usize,
    pub train_loss: f64,
    pub val_micro_f1: f64,
    pub val_macro_f1: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.lambda_t,
            self.num_selected,
            self.train_loss,
            self.val_micro_f1,
            self.val_macro_f1
        )
    }
}

/// Header stored in the checkpoint: enough to rebuild the model and its
/// metapath tables against a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub dims: ModelDims,
    /// Resolved metapaths as node-type sequences.
    pub metapaths: Vec<Vec<String>>,
    pub include_source_return: bool,
    pub max_instances_per_source: Option<usize>,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_micro_f1: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: HanMe,
    pub meta: CheckpointMeta,
    pub history: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub test: Option<F1Scores>,
    /// Semantic weights of the best model over the training nodes.
    pub beta: Vec<f64>,
    pub train_stats: Vec<MetapathStats>,
}

/// Pool features onto every type that has none.
pub fn prepare_graph(g: HeteroGraph) -> Result<HeteroGraph> {
    let missing: Vec<String> = (0..g.num_types())
        .filter(|&t| g.features(t).is_none())
        .map(|t| g.type_name(t).to_string())
        .collect();
    if missing.is_empty() {
        return Ok(g);
    }
    let names: Vec<&str> = missing.iter().map(String::as_str).collect();
    assign_pooled_features(&g, &names)
}

fn resolved_metapaths(g: &HeteroGraph, tables: &[InstanceTable]) -> Vec<Vec<String>> {
    tables
        .iter()
        .map(|t| t.types().iter().map(|&ty| g.type_name(ty).to_string()).collect())
        .collect()
}

fn split_plan(g: &HeteroGraph, tables: &[InstanceTable], split: Split) -> Result<ForwardPlan> {
    let rows = g.splits().get(split);
    if rows.is_empty() {
        return Err(Error::Config(format!("{} split is empty", split.name())));
    }
    ForwardPlan::new(g, tables, rows)
}

fn scores(model: &HanMe, plan: &ForwardPlan) -> Result<F1Scores> {
    let out = model.predict(plan)?;
    f1_scores(&out.logits, plan.targets(), 0.5)
}

fn better(micro: f64, macro_: f64, best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((bm, bma)) => micro > bm || (micro == bm && macro_ > bma),
    }
}

/// Train on an in-memory graph whose types all have features.
pub fn train_graph(g: &HeteroGraph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_graph_with(g, cfg, |_| {})
}

/// [`train_graph`] with a callback after every epoch.
pub fn train_graph_with(
    g: &HeteroGraph,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tables = build_tables(g, &cfg.model.metapaths, &cfg.enumerate_options())?;
    let dims = ModelDims::of(g);
    let mut model = HanMe::new(cfg.model.clone(), dims.clone(), tables.len(), cfg.seed)?;
    model.set_parallel(!cfg.strict);

    let train_ids = g.splits().get(Split::Train).to_vec();
    let train_plan = split_plan(g, &tables, Split::Train)?;
    let val_plan = split_plan(g, &tables, Split::Val)?;
    let all_positions: Vec<usize> = (0..train_plan.len()).collect();

    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut adam = AdamState::new(model.params());
    let mut history = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    let mut best_epoch = 0;
    let mut best_params = model.params().clone();
    let mut since_improvement = 0;
    let mut stopped_epoch = 0;

    for epoch in 1..=cfg.max_epochs {
        let lambda = pacing(&cfg.pacing, epoch - 1)?;
        let positions = if lambda >= 1.0 {
            all_positions.clone()
        } else {
            let out = model.predict(&train_plan)?;
            let losses = row_losses(&out.logits, train_plan.targets())?;
            let chosen = select_nodes_lts(&losses, lambda, &train_ids)?;
            chosen
                .iter()
                .map(|id| train_ids.binary_search(id).expect("selected from train ids"))
                .collect()
        };

        let (loss, grads) = model.loss_and_grads(&train_plan, &positions, true, &mut dropout_rng)?;
        if !loss.is_finite() {
            let culprit = model
                .params()
                .iter()
                .zip(&grads)
                .find(|((_, _, v), g)| !v.is_finite() || !g.is_finite())
                .map_or("none identified".to_string(), |((_, name, _), _)| name.to_string());
            return Err(Error::Training(format!(
                "non-finite loss at epoch {epoch} (parameter: {culprit})"
            )));
        }
        adam_step(model.params_mut(), &grads, &mut adam, cfg.lr, cfg.weight_decay)
            .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;

        let val = scores(&model, &val_plan)?;
        let record = EpochRecord {
            epoch,
            lambda_t: lambda,
            num_selected: positions.len(),
            train_loss: loss,
            val_micro_f1: val.micro,
            val_macro_f1: val.macro_,
        };
        on_epoch(&record);
        history.push(record);
        stopped_epoch = epoch;

        let improved_micro = best.is_none_or(|(m, _)| val.micro > m);
        if better(val.micro, val.macro_, best) {
            best = Some((val.micro, val.macro_));
            best_epoch = epoch;
            best_params = model.params().clone();
        }
        if improved_micro {
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.patience {
                break;
            }
        }
    }

    model.params_mut().set_values(best_params.values().to_vec())?;
    let (val_micro_f1, val_macro_f1) = best.expect("at least one epoch ran");
    let test = match g.splits().get(Split::Test) {
        [] => None,
        _ => Some(scores(&model, &split_plan(g, &tables, Split::Test)?)?),
    };
    let beta = model.predict(&train_plan)?.beta;
    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        dims,
        metapaths: resolved_metapaths(g, &tables),
        include_source_return: cfg.include_source_return,
        max_instances_per_source: cfg.max_instances_per_source,
        seed: cfg.seed,
        best_epoch,
        val_micro_f1,
        val_macro_f1,
    };
    Ok(TrainOutcome {
        model,
        meta,
        history,
        stopped_epoch,
        test,
        beta,
        train_stats: train_plan.stats(),
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Key=value summary of a finished run, as written to [`METRICS_FILE`].
pub fn metrics_text(outcome: &TrainOutcome) -> String {
    let m = &outcome.meta;
    let mut out = String::new();
    let _ = writeln!(out, "encoder={}", m.model.encoder);
    let _ = writeln!(out, "seed={}", m.seed);
    let _ = writeln!(out, "best_epoch={}", m.best_epoch);
    let _ = writeln!(out, "stopped_epoch={}", outcome.stopped_epoch);
    let _ = writeln!(out, "val_micro_f1={}", m.val_micro_f1);
    let _ = writeln!(out, "val_macro_f1={}", m.val_macro_f1);
    if let Some(t) = outcome.test {
        let _ = writeln!(out, "test_micro_f1={}", t.micro);
        let _ = writeln!(out, "test_macro_f1={}", t.macro_);
    }
    for (i, s) in outcome.train_stats.iter().enumerate() {
        let _ = writeln!(out, "metapath.{i}.name={}", s.name);
        let _ = writeln!(out, "metapath.{i}.beta={}", outcome.beta[i]);
        let _ = writeln!(out, "metapath.{i}.train_instances={}", s.instances);
        let _ = writeln!(out, "metapath.{i}.train_fallback_nodes={}", s.fallback_nodes);
    }
    out
}

/// Train on the dataset in `dataset_dir` and write the run files to `out_dir`.
pub fn train(cfg: &TrainConfig, dataset_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let g = prepare_graph(load_graph(dataset_dir)?)?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let outcome = train_graph(&g, cfg)?;
    save_outcome(&outcome, out_dir)?;
    Ok(outcome)
}

/// Write checkpoint, history and metrics for a finished run.
pub fn save_outcome(outcome: &TrainOutcome, out_dir: &Path) -> Result<()> {
    let meta = serde_json::to_string(&outcome.meta)
        .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
    save_checkpoint(out_dir.join(CHECKPOINT_FILE), &meta, outcome.model.params())?;
    write_file(&out_dir.join(HISTORY_FILE), &history_csv(&outcome.history))?;
    write_file(&out_dir.join(METRICS_FILE), &metrics_text(outcome))
}

/// Rebuild a trained model from a checkpoint file.
pub fn load_model(checkpoint: impl AsRef<Path>) -> Result<(HanMe, CheckpointMeta)> {
    let (header, params) = load_checkpoint(checkpoint)?;
    let meta: CheckpointMeta = serde_json::from_str(&header)
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))?;
    let model = HanMe::from_params(meta.model.clone(), meta.dims.clone(), meta.metapaths.len(), params)?;
    Ok((model, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub split: Split,
    pub nodes: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

impl EvalMetrics {
    pub fn to_text(&self) -> String {
        format!(
            "split={}\nnodes={}\nmicro_f1={}\nmacro_f1={}\n",
            self.split.name(),
            self.nodes,
            self.micro_f1,
            self.macro_f1
        )
    }
}

/// Score a trained model on one split of an in-memory graph.
pub fn evaluate_graph(model: &HanMe, meta: &CheckpointMeta, g: &HeteroGraph, split: Split) -> Result<EvalMetrics> {
    meta.dims.check(g)?;
    let opts = EnumerateOptions {
        include_source_return: meta.include_source_return,
        max_per_source: meta.max_instances_per_source,
        parallel: true,
    };
    let tables = build_tables(g, &meta.metapaths, &opts)?;
    let plan = split_plan(g, &tables, split)?;
    let f1 = scores(model, &plan)?;
    Ok(EvalMetrics {
        split,
        nodes: plan.len(),
        micro_f1: f1.micro,
        macro_f1: f1.macro_,
    })
}

/// Score the checkpoint on `split` of the dataset, dropout disabled.
pub fn evaluate(checkpoint: impl AsRef<Path>, dataset_dir: impl AsRef<Path>, split: Split) -> Result<EvalMetrics> {
    let (model, meta) = load_model(checkpoint)?;
    let g = prepare_graph(load_graph(dataset_dir)?)?;
    evaluate_graph(&model, &meta, &g, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderKind;
    use crate::graph::{generate, SyntheticConfig};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    fn cfg(kind: PacingKind) -> PacingConfig {
        PacingConfig {
            kind,
            lambda0: 0.1,
            pace_t: 10,
        }
    }

    #[test]
    fn pacing_endpoints_and_midpoints() {
        for kind in [PacingKind::Linear, PacingKind::Root, PacingKind::Geometric] {
            let c = cfg(kind);
            assert_eq!(pacing(&c, 0).unwrap(), 0.1, "{kind:?}");
            assert_eq!(pacing(&c, 10).unwrap(), 1.0);
            assert_eq!(pacing(&c, 50).unwrap(), 1.0);
        }
        assert!(close(pacing(&cfg(PacingKind::Linear), 5).unwrap(), 0.55));
        assert!((pacing(&cfg(PacingKind::Geometric), 5).unwrap() - 10f64.powf(-0.5)).abs() < 1e-12);
        assert!(close(pacing(&cfg(PacingKind::Root), 5).unwrap(), (0.01f64 + 0.99 * 0.5).sqrt()));
        assert_eq!(pacing(&cfg(PacingKind::Off), 0).unwrap(), 1.0);
    }

    #[test]
    fn pacing_is_nondecreasing() {
        for kind in [PacingKind::Linear, PacingKind::Root, PacingKind::Geometric] {
            for l0 in [0.01, 0.1, 0.5, 1.0] {
                let c = PacingConfig { kind, lambda0: l0, pace_t: 37 };
                let values: Vec<f64> = (0..60).map(|t| pacing(&c, t).unwrap()).collect();
                assert!(values.windows(2).all(|w| w[1] >= w[0]), "{kind:?} {l0}");
            }
        }
    }

    #[test]
    fn pacing_rejects_bad_config() {
        let c = PacingConfig { kind: PacingKind::Linear, lambda0: 0.0, pace_t: 5 };
        assert!(pacing(&c, 1).is_err());
        let c = PacingConfig { kind: PacingKind::Linear, lambda0: 0.5, pace_t: 0 };
        assert!(pacing(&c, 1).is_err());
    }

    #[test]
    fn lts_selection_examples() {
        assert_eq!(select_nodes_lts(&[5.0, 0.1, 3.0], 1.0, &[0, 1, 2]).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_nodes_lts(&[3.0, 1.0, 2.0], 1.0 / 3.0, &[0, 1, 2]).unwrap(), vec![1]);
        assert_eq!(select_nodes_lts(&[1.0, 1.0, 1.0], 2.0 / 3.0, &[5, 2, 9]).unwrap(), vec![2, 5]);
        assert!(select_nodes_lts(&[], 1.0, &[]).is_err());
    }

    #[test]
    fn lts_selection_size_is_exact() {
        for n in 1..40 {
            let ids: Vec<usize> = (0..n).collect();
            let losses: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64).collect();
            for step in 1..=20 {
                let lambda = step as f64 / 20.0;
                let chosen = select_nodes_lts(&losses, lambda, &ids).unwrap();
                let want = (lambda * n as f64 - 1e-9).ceil() as usize;
                assert_eq!(chosen.len(), want);
                assert!(chosen.iter().all(|i| ids.contains(i)));
            }
        }
    }

    #[test]
    fn f1_examples() {
        let labels = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let perfect = labels.map(|y| if y == 1.0 { 3.0 } else { -3.0 });
        let s = f1_scores(&perfect, &labels, 0.5).unwrap();
        assert_eq!((s.micro, s.macro_), (1.0, 1.0));

        let ones = Tensor::full(2, 2, 1.0);
        let s = f1_scores(&Tensor::full(2, 2, -3.0), &ones, 0.5).unwrap();
        assert_eq!((s.micro, s.macro_), (0.0, 0.0));

        // class 0: TP 1, FP 1; class 1: FN 1.
        let labels = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let logits = Tensor::from_rows(&[vec![2.0, -2.0], vec![2.0, -2.0]]).unwrap();
        let s = f1_scores(&logits, &labels, 0.5).unwrap();
        assert!(close(s.micro, 0.5));
        assert!(close(s.macro_, 1.0 / 3.0));
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                heads: 2,
                hidden: 16,
                semantic_hidden: 16,
                ..ModelConfig::default()
            },
            max_epochs: 30,
            strict: true,
            ..TrainConfig::default()
        }
    }

    fn synthetic() -> HeteroGraph {
        prepare_graph(generate(&SyntheticConfig::default()).unwrap().graph).unwrap()
    }

    #[test]
    fn frozen_model_stops_after_patience() {
        let g = synthetic();
        let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, patience: 1, ..quick_config() };
        let out = train_graph(&g, &cfg).unwrap();
        assert_eq!(out.stopped_epoch, 2);
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.meta.best_epoch, 1);
    }

    #[test]
    fn runs_are_reproducible() {
        let g = synthetic();
        let mut cfg = quick_config();
        cfg.max_epochs = 8;
        cfg.pacing = PacingConfig { kind: PacingKind::Linear, lambda0: 0.1, pace_t: 5 };
        let a = train_graph(&g, &cfg).unwrap();
        let b = train_graph(&g, &cfg).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.history[0].num_selected, lts_count(0.1, g.splits().train.len()));
    }

    #[test]
    fn best_checkpoint_never_regresses() {
        let g = synthetic();
        let out = train_graph(&g, &quick_config()).unwrap();
        let best = out.meta.val_micro_f1;
        let first_best = out.history.iter().position(|r| r.val_micro_f1 == best).unwrap();
        assert_eq!(out.meta.best_epoch, out.history[first_best].epoch.max(out.meta.best_epoch));
        assert!(out.history.iter().all(|r| r.val_micro_f1 <= best));
    }

    #[test]
    fn untrained_model_is_near_label_frequency_baseline() {
        let g = synthetic();
        let tables = build_tables(&g, &[], &EnumerateOptions::default()).unwrap();
        let model = HanMe::new(ModelConfig::default(), ModelDims::of(&g), tables.len(), 483).unwrap();
        let plan = ForwardPlan::new(&g, &tables, &g.splits().test).unwrap();
        let f1 = scores(&model, &plan).unwrap();
        // Expected micro F1 of guessing each class with its marginal rate.
        let y = plan.targets();
        let p: Vec<f64> = (0..y.cols())
            .map(|c| (0..y.rows()).map(|r| y.get(r, c)).sum::<f64>() / y.rows() as f64)
            .collect();
        let baseline = p.iter().map(|x| x * x).sum::<f64>() / p.iter().sum::<f64>();
        assert!((f1.micro - baseline).abs() <= 0.15, "{} vs {baseline}", f1.micro);
    }

    #[test]
    fn planted_signal_is_learned_and_evaluation_matches() {
        let g = synthetic();
        let mut cfg = quick_config();
        cfg.model.encoder = EncoderKind::Multihop;
        cfg.max_epochs = 200;
        cfg.patience = 100;
        let out = train_graph(&g, &cfg).unwrap();
        assert!(out.meta.val_micro_f1 >= 0.95, "{:?}", out.meta);
        let again = evaluate_graph(&out.model, &out.meta, &g, Split::Val).unwrap();
        assert_eq!(again.micro_f1, out.meta.val_micro_f1);
        assert_eq!(again.macro_f1, out.meta.val_macro_f1);
    }
}
