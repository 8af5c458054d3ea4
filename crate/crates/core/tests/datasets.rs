use std::fs;
use std::path::Path;

use hanme_core::encoders::EncoderKind;
use hanme_core::graph::{
    gen_synthetic, generate, load_graph, write_graph, GraphParts, HeteroGraph, LinkedType,
    RelationKey, Splits, SyntheticConfig,
};
use hanme_core::model::{build_tables, ForwardPlan, HanMe, ModelConfig, ModelDims};
use hanme_core::trainer::prepare_graph;
use hanme_core::Tensor;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn write_load_round_trip() {
    let g = generate(&SyntheticConfig::default()).unwrap().graph;
    let dir = tempfile::tempdir().unwrap();
    write_graph(&g, dir.path()).unwrap();
    assert_eq!(load_graph(dir.path()).unwrap(), g);
}

#[test]
fn gen_synthetic_is_byte_identical() {
    let cfg = SyntheticConfig {
        seed: 17,
        ..SyntheticConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_synthetic(&cfg, a.path()).unwrap();
    gen_synthetic(&cfg, b.path()).unwrap();
    let fa = files(a.path());
    assert!(!fa.is_empty());
    assert_eq!(fa, files(b.path()));
    // rewriting over an existing directory gives the same bytes
    gen_synthetic(&cfg, a.path()).unwrap();
    assert_eq!(files(a.path()), fa);
}

#[test]
fn noise_free_labels_are_the_communities() {
    let cfg = SyntheticConfig {
        label_noise: 0.0,
        seed: 3,
        ..SyntheticConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let g = &ds.graph;
    let t = g.labeled_type();
    for id in 0..g.node_count(t) {
        let row = g.labels().row(id);
        let hot: Vec<usize> = (0..row.len()).filter(|&c| row[c] == 1.0).collect();
        assert_eq!(hot, vec![ds.communities[t][id] % cfg.num_classes]);
    }
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut x = x;
    while parent[x] != r {
        let next = parent[x];
        parent[x] = r;
        x = next;
    }
    r
}

fn components(g: &HeteroGraph) -> usize {
    let offsets: Vec<usize> = g
        .node_counts()
        .iter()
        .scan(0, |acc, &n| {
            let o = *acc;
            *acc += n;
            Some(o)
        })
        .collect();
    let mut parent: Vec<usize> = (0..g.total_nodes()).collect();
    for (key, edges) in g.relations() {
        for &(u, v) in edges {
            let a = find(&mut parent, offsets[key.src] + u as usize);
            let b = find(&mut parent, offsets[key.dst] + v as usize);
            parent[a] = b;
        }
    }
    (0..parent.len())
        .filter(|&x| find(&mut parent, x) == x)
        .count()
}

#[test]
fn no_inter_community_edges_splits_the_graph() {
    let cfg = SyntheticConfig {
        p_inter: 0.0,
        p_intra: 0.3,
        seed: 8,
        ..SyntheticConfig::default()
    };
    let g = generate(&cfg).unwrap().graph;
    assert!(components(&g) >= cfg.communities);
}

#[test]
fn pooled_isolated_nodes_forward_finitely() {
    // movie 2 has no director; director 1 has no movie
    let g = HeteroGraph::new(GraphParts {
        node_types: vec!["movie".into(), "director".into()],
        node_counts: vec![3, 2],
        relations: vec![(RelationKey::new(0, "directed_by", 1), vec![(0, 0), (1, 0)])],
        features: vec![
            Some(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap()),
            None,
        ],
        labeled_type: 0,
        num_classes: 2,
        labels: vec![(0, vec![1, 0]), (1, vec![0, 1]), (2, vec![1, 1])],
        splits: Splits {
            train: vec![0, 1],
            val: vec![2],
            test: vec![],
        },
    })
    .unwrap();
    let g = prepare_graph(g).unwrap();
    let pooled = g.features(1).unwrap();
    assert!(pooled.is_finite());
    assert!(pooled.row(1).iter().all(|&x| x == 0.0));
    for kind in [EncoderKind::Multihop, EncoderKind::Direct, EncoderKind::TerminalOnly] {
        let cfg = ModelConfig {
            encoder: kind,
            heads: 2,
            hidden: 4,
            semantic_hidden: 4,
            ..ModelConfig::default()
        };
        let tables = build_tables(&g, &cfg.metapaths, &Default::default()).unwrap();
        let model = HanMe::new(cfg, ModelDims::of(&g), tables.len(), 1).unwrap();
        let plan = ForwardPlan::new(&g, &tables, &g.labeled_nodes()).unwrap();
        assert_eq!(plan.stats()[0].fallback_nodes, 1);
        assert!(model.predict(&plan).unwrap().logits.is_finite());
    }
}

#[test]
fn per_type_overrides_reach_the_generator() {
    let mut cfg = SyntheticConfig::default();
    cfg.linked.push(LinkedType {
        name: "writer".into(),
        count: 10,
        relation: "written_by".into(),
        feature_dim: 0,
        p_intra: Some(0.0),
        p_inter: Some(0.0),
        feature_signal: None,
    });
    let g = generate(&cfg).unwrap().graph;
    let writer = g.type_index("writer").unwrap();
    assert!(g.features(writer).is_none());
    let rels = g.relations_between(g.labeled_type(), writer);
    assert_eq!(g.edges(rels[0]).unwrap().len(), 0);
}
