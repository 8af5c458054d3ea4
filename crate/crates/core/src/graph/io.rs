//! On-disk dataset directory.
//!
//! ```text
//! manifest.json                  node types, feature dims, relations, labels
//! nodes_<type>.csv               id,f0,f1,...
//! edges_<src>_<rel>_<dst>.csv    src,dst   (one direction, mirrored on load)
//! labels.csv                     id,y0,...,y{C-1}
//! splits.csv                     id,split
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphParts, HeteroGraph, RelationKey, Split, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLITS_FILE: &str = "splits.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTypeSpec {
    pub name: String,
    #[serde(default)]
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub src: String,
    pub rel: String,
    pub dst: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub node_types: Vec<NodeTypeSpec>,
    pub relations: Vec<RelationSpec>,
    pub labeled_type: String,
    pub num_classes: usize,
}

pub fn nodes_file(ty: &str) -> String {
    format!("nodes_{ty}.csv")
}

pub fn edges_file(src: &str, rel: &str, dst: &str) -> String {
    format!("edges_{src}_{rel}_{dst}.csv")
}

fn open_csv(dir: &Path, name: &str) -> Result<csv::Reader<fs::File>> {
    let path = dir.join(name);
    let file = fs::File::open(&path).map_err(|e| Error::format(name, format!("cannot open: {e}")))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn check_header(
    rdr: &mut csv::Reader<fs::File>,
    name: &str,
    expected: &[String],
) -> Result<()> {
    let header = rdr
        .headers()
        .map_err(|e| Error::format(name, e.to_string()))?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::format(
            name,
            format!("header {:?}, expected {:?}", got, expected),
        ));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    col: usize,
    name: &str,
) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec.get(col).unwrap_or("");
    raw.parse().map_err(|_| {
        Error::format(
            name,
            format!("line {line}, column {col}: cannot parse `{raw}`"),
        )
    })
}

fn records(
    rdr: &mut csv::Reader<fs::File>,
    name: &str,
) -> Result<Vec<csv::StringRecord>> {
    rdr.records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(name, e.to_string()))
}

/// Load a dataset directory. Node ids must be `0..n` in file order.
pub fn load_graph(dir: impl AsRef<Path>) -> Result<HeteroGraph> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::format(MANIFEST_FILE, format!("cannot read: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(MANIFEST_FILE, e.to_string()))?;

    let node_types: Vec<String> = manifest.node_types.iter().map(|t| t.name.clone()).collect();
    let type_index = |name: &str| -> Result<usize> {
        node_types.iter().position(|t| t == name).ok_or_else(|| {
            Error::format(MANIFEST_FILE, format!("unknown node type `{name}`"))
        })
    };
    let labeled_type = type_index(&manifest.labeled_type)?;

    let mut node_counts = Vec::with_capacity(node_types.len());
    let mut features = Vec::with_capacity(node_types.len());
    for spec in &manifest.node_types {
        let name = nodes_file(&spec.name);
        let mut rdr = open_csv(dir, &name)?;
        let mut header = vec!["id".to_string()];
        header.extend((0..spec.feature_dim).map(|i| format!("f{i}")));
        check_header(&mut rdr, &name, &header)?;
        let recs = records(&mut rdr, &name)?;
        let mut data = Vec::with_capacity(recs.len() * spec.feature_dim);
        for (row, rec) in recs.iter().enumerate() {
            let id: usize = parse_field(rec, 0, &name)?;
            if id != row {
                return Err(Error::format(
                    &name,
                    format!("row {row} has id {id}; ids must be dense and in order"),
                ));
            }
            for c in 0..spec.feature_dim {
                data.push(parse_field::<f64>(rec, c + 1, &name)?);
            }
        }
        node_counts.push(recs.len());
        features.push(if spec.feature_dim > 0 {
            Some(Tensor::from_vec(recs.len(), spec.feature_dim, data)?)
        } else {
            None
        });
    }

    let mut relations = Vec::with_capacity(manifest.relations.len());
    for rel in &manifest.relations {
        let (s, d) = (type_index(&rel.src)?, type_index(&rel.dst)?);
        let name = edges_file(&rel.src, &rel.rel, &rel.dst);
        let mut rdr = open_csv(dir, &name)?;
        check_header(&mut rdr, &name, &["src".into(), "dst".into()])?;
        let recs = records(&mut rdr, &name)?;
        let mut pairs = Vec::with_capacity(recs.len());
        for rec in &recs {
            let u: u32 = parse_field(rec, 0, &name)?;
            let v: u32 = parse_field(rec, 1, &name)?;
            if u as usize >= node_counts[s] || v as usize >= node_counts[d] {
                let line = rec.position().map_or(0, |p| p.line());
                return Err(Error::Integrity(format!(
                    "{name} line {line}: edge ({}, {}) -> ({}, {}) out of range ({} {} nodes, {} {} nodes)",
                    rel.src, u, rel.dst, v, node_counts[s], rel.src, node_counts[d], rel.dst
                )));
            }
            pairs.push((u, v));
        }
        relations.push((RelationKey::new(s, rel.rel.clone(), d), pairs));
    }

    let c = manifest.num_classes;
    let mut rdr = open_csv(dir, LABELS_FILE)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..c).map(|i| format!("y{i}")));
    check_header(&mut rdr, LABELS_FILE, &header)?;
    let mut labels = Vec::new();
    for rec in records(&mut rdr, LABELS_FILE)? {
        let id: usize = parse_field(&rec, 0, LABELS_FILE)?;
        let row = (0..c)
            .map(|j| parse_field::<u8>(&rec, j + 1, LABELS_FILE))
            .collect::<Result<Vec<_>>>()?;
        labels.push((id, row));
    }

    let mut rdr = open_csv(dir, SPLITS_FILE)?;
    check_header(&mut rdr, SPLITS_FILE, &["id".into(), "split".into()])?;
    let mut splits = Splits::default();
    for rec in records(&mut rdr, SPLITS_FILE)? {
        let id: usize = parse_field(&rec, 0, SPLITS_FILE)?;
        let raw = rec.get(1).unwrap_or("");
        let split = Split::parse(raw).ok_or_else(|| {
            Error::format(SPLITS_FILE, format!("unknown split `{raw}` for node {id}"))
        })?;
        let list = match split {
            Split::Train => &mut splits.train,
            Split::Val => &mut splits.val,
            Split::Test => &mut splits.test,
        };
        if list.contains(&id) {
            return Err(Error::Integrity(format!(
                "{SPLITS_FILE}: node {id} listed twice in {split}"
            )));
        }
        list.push(id);
    }

    HeteroGraph::new(GraphParts {
        node_types,
        node_counts,
        relations,
        features,
        labeled_type,
        num_classes: c,
        labels,
        splits,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    let path = dir.join(name);
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok(BufWriter::new(f))
}

/// Write `g` in the dataset format. Output is a pure function of `g`.
pub fn write_graph(g: &HeteroGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let io_err = |name: &str| {
        let path = dir.join(name);
        move |e: std::io::Error| Error::io(path, e)
    };

    let manifest = Manifest {
        node_types: (0..g.num_types())
            .map(|t| NodeTypeSpec {
                name: g.type_name(t).to_string(),
                feature_dim: g.feature_dim(t),
            })
            .collect(),
        relations: g
            .declared_relations()
            .iter()
            .map(|k| RelationSpec {
                src: g.type_name(k.src).to_string(),
                rel: k.rel.clone(),
                dst: g.type_name(k.dst).to_string(),
            })
            .collect(),
        labeled_type: g.type_name(g.labeled_type()).to_string(),
        num_classes: g.num_classes(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(MANIFEST_FILE, e.to_string()))?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json).map_err(io_err(MANIFEST_FILE))?;

    for t in 0..g.num_types() {
        let name = nodes_file(g.type_name(t));
        let mut w = create(dir, &name)?;
        let dim = g.feature_dim(t);
        let mut line = String::from("id");
        for i in 0..dim {
            line.push_str(&format!(",f{i}"));
        }
        writeln!(w, "{line}").map_err(io_err(&name))?;
        for id in 0..g.node_count(t) {
            line.clear();
            line.push_str(&id.to_string());
            if let Some(f) = g.features(t) {
                for x in f.row(id) {
                    // `Display` for f64 is the shortest string that parses back exactly.
                    line.push_str(&format!(",{x}"));
                }
            }
            writeln!(w, "{line}").map_err(io_err(&name))?;
        }
        w.flush().map_err(io_err(&name))?;
    }

    for key in g.declared_relations() {
        let name = edges_file(g.type_name(key.src), &key.rel, g.type_name(key.dst));
        let mut w = create(dir, &name)?;
        writeln!(w, "src,dst").map_err(io_err(&name))?;
        for &(u, v) in g.edges(key).unwrap_or(&[]) {
            writeln!(w, "{u},{v}").map_err(io_err(&name))?;
        }
        w.flush().map_err(io_err(&name))?;
    }

    let mut w = create(dir, LABELS_FILE)?;
    let mut line = String::from("id");
    for j in 0..g.num_classes() {
        line.push_str(&format!(",y{j}"));
    }
    writeln!(w, "{line}").map_err(io_err(LABELS_FILE))?;
    for id in 0..g.node_count(g.labeled_type()) {
        if !g.has_label(id) {
            continue;
        }
        line.clear();
        line.push_str(&id.to_string());
        for &y in g.labels().row(id) {
            line.push_str(if y > 0.5 { ",1" } else { ",0" });
        }
        writeln!(w, "{line}").map_err(io_err(LABELS_FILE))?;
    }
    w.flush().map_err(io_err(LABELS_FILE))?;

    let mut w = create(dir, SPLITS_FILE)?;
    writeln!(w, "id,split").map_err(io_err(SPLITS_FILE))?;
    for split in [Split::Train, Split::Val, Split::Test] {
        for id in g.splits().get(split) {
            writeln!(w, "{id},{split}").map_err(io_err(SPLITS_FILE))?;
        }
    }
    w.flush().map_err(io_err(SPLITS_FILE))?;
    Ok(())
}
