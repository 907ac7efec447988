//! Seeded synthetic graphs, embeddings and datasets used by the test suites
//! and for smoke runs without external data.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embeddings::{mock_embed, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{write_dataset, DatasetRecord, QaExample};
use crate::kg::{Choice, EntityId, GraphBuilder, KnowledgeGraph, QuestionContext};

const RELATIONS: [&str; 6] = ["at_location", "is_a", "used_for", "part_of", "has_property", "capable_of"];
const LABELS: [&str; 5] = ["A", "B", "C", "D", "E"];

/// Graph, embeddings and (optionally) question vectors plus a dataset.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub graph: KnowledgeGraph,
    pub table: EmbeddingTable,
    pub contexts: Option<EmbeddingTable>,
    pub examples: Vec<QaExample>,
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub graph: PathBuf,
    pub vectors: PathBuf,
    pub vocab: PathBuf,
    pub ctx_vectors: Option<PathBuf>,
    pub ctx_vocab: Option<PathBuf>,
    pub dataset: PathBuf,
}

pub fn graph_tsv(g: &KnowledgeGraph) -> String {
    let mut s = String::new();
    for t in g.triples() {
        let _ = writeln!(
            s,
            "{}\t{}\t{}",
            g.entity_name(t.head),
            g.relation_name(t.rel),
            g.entity_name(t.tail)
        );
    }
    s
}

impl Fixture {
    /// Write graph TSV, KGEB vectors and vocab, and dataset JSONL into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<FixturePaths> {
        let dir = dir.as_ref();
        let graph = dir.join("graph.tsv");
        fs::write(&graph, graph_tsv(&self.graph)).map_err(|e| Error::io(&graph, e))?;
        let (vectors, vocab) = (dir.join("emb.kgeb"), dir.join("emb.vocab"));
        self.table.save(&vectors, &vocab)?;
        let (mut ctx_vectors, mut ctx_vocab) = (None, None);
        if let Some(c) = &self.contexts {
            let (v, w) = (dir.join("ctx.kgeb"), dir.join("ctx.vocab"));
            c.save(&v, &w)?;
            ctx_vectors = Some(v);
            ctx_vocab = Some(w);
        }
        let dataset = dir.join("dataset.jsonl");
        write_dataset(&dataset, &self.examples)?;
        Ok(FixturePaths {
            graph,
            vectors,
            vocab,
            ctx_vectors,
            ctx_vocab,
            dataset,
        })
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn gaussian(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    unit(gaussian(dim, rng))
}

/// `n` random orthonormal vectors (Gram-Schmidt), `n <= dim`.
pub fn orthonormal_axes(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(n);
    while axes.len() < n {
        let mut v = gaussian(dim, rng);
        for a in &axes {
            let d: f64 = v.iter().zip(a).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(a).for_each(|(x, y)| *x -= d * y);
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            axes.push(unit(v));
        }
    }
    axes
}

/// `normalize(center + sigma * g / sqrt(dim))` with `g` standard normal.
pub fn noisy_direction(center: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
    let scale = sigma / (center.len() as f64).sqrt();
    let g = gaussian(center.len(), rng);
    unit(center.iter().zip(g).map(|(c, g)| c + scale * g).collect())
        .into_iter()
        .map(|x| x as f32)
        .collect()
}

/// One context row per id; row `i` is a noisy copy of `centers[cluster[i]]`.
pub fn cluster_contexts(
    ids: &[String],
    cluster: &[usize],
    centers: &[Vec<f64>],
    sigma: f64,
    seed: u64,
) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = centers[0].len();
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &c in cluster {
        data.extend(noisy_direction(&centers[c], sigma, &mut rng));
    }
    EmbeddingTable::new(dim, ids.to_vec(), data).expect("finite context rows")
}

/// Questions whose answer is backed by one planted fact two hops from the
/// topic entity: `topic -> link -> gold option`. Distractor options and the
/// topic also touch a shared pool of concepts.
pub fn injection_fixture(n_questions: usize, dim: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let pool: Vec<String> = (0..50).map(|k| format!("concept_{k:02}")).collect();
    for k in 0..pool.len() {
        let r = RELATIONS[rng.random_range(0..RELATIONS.len())];
        b.add(&pool[k], r, &pool[(k + 1) % pool.len()]);
    }
    let mut records = Vec::with_capacity(n_questions);
    for i in 0..n_questions {
        let topic = format!("topic_{i:04}");
        let link = format!("link_{i:04}");
        let options: Vec<String> = (0..LABELS.len()).map(|j| format!("option_{i:04}_{j}")).collect();
        let gold = rng.random_range(0..LABELS.len());
        let r_in = RELATIONS[rng.random_range(0..RELATIONS.len())];
        let r_gold = RELATIONS[rng.random_range(0..RELATIONS.len())];
        b.add(&topic, r_in, &link);
        b.add(&link, r_gold, &options[gold]);
        for _ in 0..2 {
            let p = &pool[rng.random_range(0..pool.len())];
            b.add(&topic, RELATIONS[rng.random_range(0..RELATIONS.len())], p);
        }
        for (j, o) in options.iter().enumerate() {
            if j != gold {
                let p = &pool[rng.random_range(0..pool.len())];
                b.add(o, RELATIONS[rng.random_range(0..RELATIONS.len())], p);
            }
        }
        let choices = options
            .iter()
            .zip(LABELS)
            .map(|(o, l)| Choice {
                label: l.to_string(),
                text: o.replace('_', " "),
            })
            .collect();
        let target_entities = options
            .iter()
            .zip(LABELS)
            .map(|(o, l)| (l.to_string(), vec![o.clone()]))
            .collect();
        records.push(DatasetRecord {
            id: format!("inj{i:04}"),
            question: format!("Which option is connected to {}?", topic.replace('_', " ")),
            choices,
            answer: LABELS[gold].to_string(),
            source_entities: vec![topic.clone()],
            target_entities,
            gold_fact: Some(format!("({link}, {r_gold}, {})", options[gold])),
        });
    }
    let graph = b.build();
    let names: Vec<&String> = graph.entity_names().iter().chain(graph.relation_names()).collect();
    let table = EmbeddingTable::mock(&names, dim, seed);
    let examples = records.into_iter().map(|r| QaExample::from_record(r, &graph)).collect();
    Fixture {
        graph,
        table,
        contexts: None,
        examples,
    }
}

/// [`injection_fixture`] plus question vectors drawn around `centers`, with
/// example `i` in cluster `i % centers.len()`. Returns the cluster map.
pub fn clustered_fixture(
    n_questions: usize,
    dim: usize,
    centers: &[Vec<f64>],
    sigma: f64,
    seed: u64,
) -> (Fixture, HashMap<String, usize>) {
    let mut f = injection_fixture(n_questions, dim, seed);
    let ids: Vec<String> = f.examples.iter().map(|e| e.id().to_string()).collect();
    let cluster: Vec<usize> = (0..ids.len()).map(|i| i % centers.len()).collect();
    f.contexts = Some(cluster_contexts(&ids, &cluster, centers, sigma, seed ^ 0x5eed));
    let map = ids.into_iter().zip(cluster).collect();
    (f, map)
}

/// Graph plus single-target path-finding queries for policy training.
#[derive(Debug, Clone)]
pub struct PathFixture {
    pub graph: KnowledgeGraph,
    pub table: EmbeddingTable,
    pub train: Vec<QuestionContext>,
    pub test: Vec<QuestionContext>,
}

fn path_query(id: String, source: EntityId, target: EntityId) -> QuestionContext {
    QuestionContext {
        id,
        question_text: String::new(),
        choices: vec![Choice {
            label: "A".into(),
            text: String::new(),
        }],
        gold_label: Some("A".into()),
        source_entities: vec![source],
        target_entities: BTreeMap::from([("A".to_string(), vec![target])]),
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Nodes on a jittered grid over the unit square joined by their shortest
/// pairwise links until the mean degree is `mean_degree`, with a planted
/// three-hop path between query endpoints 0.08 to 0.16 apart. Entity vectors place the square on a
/// patch of a sphere of radius `spread` inside `dim` dimensions, so nearby
/// nodes have large dot products.
pub fn geometric_fixture(
    nodes: usize,
    mean_degree: f64,
    dim: usize,
    n_train: usize,
    n_test: usize,
    spread: f64,
    seed: u64,
) -> PathFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (nodes as f64).sqrt().ceil() as usize;
    let pos: Vec<[f64; 2]> = (0..nodes)
        .map(|i| {
            let (r, c) = ((i / side) as f64, (i % side) as f64);
            let jx = 0.5 * (rng.random::<f64>() - 0.5);
            let jy = 0.5 * (rng.random::<f64>() - 0.5);
            [(c + 0.5 + jx) / side as f64, (r + 0.5 + jy) / side as f64]
        })
        .collect();
    let rels = ["near", "next_to", "linked_to", "borders"];

    let mut edges: HashSet<(usize, usize)> = HashSet::new();
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    let mut queries = Vec::with_capacity(n_train + n_test);
    while queries.len() < n_train + n_test {
        let s = rng.random_range(0..nodes);
        let t = rng.random_range(0..nodes);
        let d = dist(pos[s], pos[t]);
        if s == t || !(0.08..=0.16).contains(&d) {
            continue;
        }
        let mut path = vec![s];
        for frac in [1.0 / 3.0, 2.0 / 3.0] {
            let p = [
                pos[s][0] + frac * (pos[t][0] - pos[s][0]),
                pos[s][1] + frac * (pos[t][1] - pos[s][1]),
            ];
            let m = (0..nodes)
                .filter(|i| !path.contains(i) && *i != t)
                .min_by(|&a, &b| dist(pos[a], p).total_cmp(&dist(pos[b], p)))
                .unwrap();
            path.push(m);
        }
        path.push(t);
        for w in path.windows(2) {
            edges.insert(key(w[0], w[1]));
        }
        queries.push((s, t));
    }
    let target_edges = (nodes as f64 * mean_degree / 2.0).round() as usize;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(nodes * (nodes - 1) / 2);
    for a in 0..nodes {
        for b in a + 1..nodes {
            pairs.push((dist(pos[a], pos[b]), a, b));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    for (_, a, b) in pairs {
        if edges.len() >= target_edges {
            break;
        }
        edges.insert((a, b));
    }

    let mut edges: Vec<(usize, usize)> = edges.into_iter().collect();
    edges.sort_unstable();
    let name = |i: usize| format!("place_{i:03}");
    let mut b = GraphBuilder::new();
    for i in 0..nodes {
        b.entity(&name(i));
    }
    for (x, y) in edges {
        let (h, t) = if rng.random::<bool>() { (x, y) } else { (y, x) };
        b.add(&name(h), rels[rng.random_range(0..rels.len())], &name(t));
    }
    let graph = b.build();

    let axes = orthonormal_axes(3, dim, &mut rng);
    let mut vocab = Vec::new();
    let mut data = Vec::new();
    for (i, p) in pos.iter().enumerate() {
        vocab.push(name(i));
        let lifted = [p[0] - 0.5, p[1] - 0.5, 0.5];
        let v: Vec<f64> = (0..dim)
            .map(|k| {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.002;
                (0..3).map(|a| lifted[a] * axes[a][k]).sum::<f64>() + noise
            })
            .collect();
        data.extend(unit(v).into_iter().map(|x| (spread * x) as f32));
    }
    for r in rels {
        vocab.push(r.to_string());
        data.extend(mock_embed(r, dim, seed).iter().map(|x| x * 0.1));
    }
    let table = EmbeddingTable::new(dim, vocab, data).expect("finite vectors");
    let id = |i: usize| EntityId(graph.entity_id(&name(i)).unwrap().0);
    let mut all: Vec<QuestionContext> = queries
        .iter()
        .enumerate()
        .map(|(k, &(s, t))| path_query(format!("path{k:04}"), id(s), id(t)))
        .collect();
    let test = all.split_off(n_train);
    PathFixture {
        graph,
        table,
        train: all,
        test,
    }
}

/// `gadgets` copies of a source with two routes to its target: a two-hop
/// route and a four-hop route.
pub fn parallel_routes_fixture(gadgets: usize, dim: usize, seed: u64) -> PathFixture {
    let mut b = GraphBuilder::new();
    let mut ends = Vec::new();
    for i in 0..gadgets {
        let s = format!("start_{i}");
        let t = format!("goal_{i}");
        b.add(&s, "short_way", &format!("hub_{i}"));
        b.add(&format!("hub_{i}"), "short_way", &t);
        let long: Vec<String> = (0..3).map(|k| format!("detour_{i}_{k}")).collect();
        b.add(&s, "long_way", &long[0]);
        b.add(&long[0], "long_way", &long[1]);
        b.add(&long[1], "long_way", &long[2]);
        b.add(&long[2], "long_way", &t);
        ends.push((s, t));
    }
    let graph = b.build();
    let names: Vec<&String> = graph.entity_names().iter().chain(graph.relation_names()).collect();
    let table = EmbeddingTable::mock(&names, dim, seed);
    let mut train: Vec<QuestionContext> = ends
        .iter()
        .enumerate()
        .map(|(i, (s, t))| path_query(format!("route{i}"), graph.entity_id(s).unwrap(), graph.entity_id(t).unwrap()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train.shuffle(&mut rng);
    PathFixture {
        graph,
        table,
        test: train.clone(),
        train,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Direction;

    #[test]
    fn injection_fixture_shape() {
        let f = injection_fixture(20, 8, 3);
        assert_eq!(f.examples.len(), 20);
        for ex in &f.examples {
            ex.context.validate(&f.graph).unwrap();
            assert_eq!(ex.context.choices.len(), 5);
            assert_eq!(ex.context.source_entities.len(), 1);
        }
        assert_eq!(f.table.len(), f.graph.entity_count() + f.graph.relation_count());
    }

    #[test]
    fn geometric_fixture_degree_and_paths() {
        let f = geometric_fixture(500, 6.0, 16, 50, 20, 4.0, 1);
        let mean = (0..f.graph.entity_count())
            .map(|i| f.graph.neighbors(EntityId(i as u32), Direction::Both).unwrap().len())
            .sum::<usize>() as f64
            / f.graph.entity_count() as f64;
        assert!((mean - 6.0).abs() < 0.05, "{mean}");
        assert_eq!(f.train.len(), 50);
        assert_eq!(f.test.len(), 20);
    }

    #[test]
    fn clustered_contexts_follow_centers() {
        let centers = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        let (f, map) = clustered_fixture(10, 4, &centers, 0.1, 2);
        let ctx = f.contexts.unwrap();
        for ex in &f.examples {
            let c = map[ex.id()];
            let v = ctx.get(ex.id()).unwrap();
            assert!(v[c] > 0.9);
        }
    }
}
