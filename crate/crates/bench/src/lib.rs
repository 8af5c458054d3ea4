//! Fixtures shared by the benchmarks.

use hanme_core::encoders::{DirectEncoderParams, MultihopEncoderParams};
use hanme_core::graph::{generate, HeteroGraph, SyntheticConfig};
use hanme_core::model::{build_tables, ForwardPlan, HanMe, ModelConfig, ModelDims};
use hanme_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default synthetic dataset with `movies` target nodes and linked types
/// scaled to match.
pub fn synthetic(movies: usize) -> HeteroGraph {
    let mut cfg = SyntheticConfig {
        target_count: movies,
        ..SyntheticConfig::default()
    };
    let scale = movies as f64 / cfg.target_count.max(1) as f64;
    for l in &mut cfg.linked {
        l.count = ((l.count as f64 * scale).round() as usize).max(1);
    }
    // keep expected degree constant as the graph grows
    cfg.p_intra = (cfg.p_intra * 150.0 / movies as f64).min(1.0);
    generate(&cfg).expect("default config is valid").graph
}

/// One instance of `k + 1` nodes with `d` features, and encoder weights.
pub fn instance(k: usize, d: usize, seed: u64) -> (Tensor, MultihopEncoderParams, DirectEncoderParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = Tensor::random_uniform(k + 1, d, -1.0, 1.0, &mut rng);
    let multihop = MultihopEncoderParams {
        w_h: Tensor::glorot_uniform(d, d, &mut rng),
        w_t: Tensor::glorot_uniform(d, d, &mut rng),
        v_a: Tensor::glorot_uniform(2 * d, 1, &mut rng),
        gamma: 0.4,
        leaky_slope: 0.2,
    };
    let direct = DirectEncoderParams {
        w_t: Tensor::glorot_uniform(d, d, &mut rng),
        w_h: Tensor::glorot_uniform(d, d, &mut rng),
    };
    (h, multihop, direct)
}

/// Model and plan over every labeled node of `g`.
pub fn model_and_plan(g: &HeteroGraph, cfg: ModelConfig) -> (HanMe, ForwardPlan) {
    let tables = build_tables(g, &cfg.metapaths, &Default::default()).expect("tables");
    let model = HanMe::new(cfg, ModelDims::of(g), tables.len(), 483).expect("model");
    let plan = ForwardPlan::new(g, &tables, &g.labeled_nodes()).expect("plan");
    (model, plan)
}
