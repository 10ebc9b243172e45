#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sake_core::config::Resources;
use sake_core::embedding::{EntityIndex, Neighbor, TableEncoder};
use sake_core::kg::{KnowledgeGraph, Triplet, TripletFormat};
use sake_core::policy::ScriptedPolicy;
use sake_core::tools::EntityGroup;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

pub fn toy_resources() -> Resources {
    let kg = KnowledgeGraph::ingest_path(&fixture("toy_kg.tsv"), TripletFormat::Tsv).unwrap();
    let encoder = TableEncoder::from_json_path(&fixture("toy_embeddings.json")).unwrap();
    Resources::build(kg, Arc::new(encoder)).unwrap()
}

pub fn melatonin_policy() -> ScriptedPolicy {
    ScriptedPolicy::from_json_path(&fixture("melatonin_script.json")).unwrap()
}

pub const MELATONIN_QUESTION: &str = "Can melatonin help treat insomnia?";

/// Random graph over `e_{i}` labels with up to `max_nodes` entities and
/// `max_edges` edges drawn from a small relation alphabet.
pub fn random_kg(rng: &mut ChaCha8Rng, max_nodes: usize, max_edges: usize) -> KnowledgeGraph {
    let nodes = rng.random_range(2..=max_nodes);
    let edges = rng.random_range(1..=max_edges);
    let relations = ["r0", "r1", "r2", "r3"];
    let triplets: Vec<Triplet> = (0..edges)
        .map(|_| {
            let h = rng.random_range(0..nodes);
            let t = rng.random_range(0..nodes);
            let r = relations.choose(rng).unwrap();
            Triplet::new(&format!("e{h}"), r, &format!("e{t}"))
        })
        .collect();
    KnowledgeGraph::from_triplets(triplets)
}

/// Random groups over the graph's entities (plus an occasional label that
/// is not in the graph), members unique within each group, overlap allowed.
pub fn random_groups(rng: &mut ChaCha8Rng, kg: &KnowledgeGraph) -> Vec<EntityGroup> {
    let entities: Vec<String> = kg.entities().iter().cloned().collect();
    let count = rng.random_range(0..=5);
    (1..=count)
        .map(|index| {
            let size = rng.random_range(1..=6).min(entities.len());
            let mut members: Vec<String> = Vec::new();
            while members.len() < size {
                let label = if rng.random_bool(0.05) {
                    format!("outside_{}", rng.random_range(0..3))
                } else {
                    entities.choose(rng).unwrap().clone()
                };
                if !members.contains(&label) {
                    members.push(label);
                }
            }
            EntityGroup {
                index,
                seed: members[0].clone(),
                members,
            }
        })
        .collect()
}

pub fn random_selection(rng: &mut ChaCha8Rng, group_count: usize) -> BTreeSet<usize> {
    let k = rng.random_range(0..=group_count + 2);
    (0..k).map(|_| rng.random_range(0..=group_count + 1)).collect()
}

/// Cross-group predicate, checked edge by edge: some ordered pair of
/// distinct selected, existing groups holds the head and the tail.
pub fn tool2_oracle(groups: &[EntityGroup], selected: &BTreeSet<usize>, kg: &KnowledgeGraph) -> Vec<Triplet> {
    let live: Vec<&EntityGroup> = groups.iter().filter(|g| selected.contains(&g.index)).collect();
    let mut out: Vec<Triplet> = kg
        .edges()
        .iter()
        .filter(|e| {
            live.iter().any(|gi| {
                live.iter().any(|gj| {
                    gi.index != gj.index && gi.members.contains(&e.head) && gj.members.contains(&e.tail)
                })
            })
        })
        .cloned()
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Full scan, full sort, truncate.
pub fn top_p_oracle(index: &EntityIndex, query_vector: &[f32], query_label: &str, p: usize) -> Vec<Neighbor> {
    if query_vector.iter().all(|&x| x == 0.0) {
        return Vec::new();
    }
    let mut all: Vec<Neighbor> = Vec::new();
    for (row, label) in index.labels().iter().enumerate() {
        if label == query_label {
            continue;
        }
        let v = index.vector(row);
        let mut dot = 0.0f64;
        for k in 0..v.len() {
            dot += f64::from(query_vector[k]) * f64::from(v[k]);
        }
        all.push(Neighbor {
            label: label.clone(),
            score: dot.clamp(-1.0, 1.0),
        });
    }
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.label.cmp(&b.label)));
    all.truncate(p);
    all
}

/// Scripted policy whose turns are random mixtures of words and tags, so
/// parsing, stop-marker cuts and token budgets all get exercised.
pub fn random_script(rng: &mut ChaCha8Rng, entities: &[String]) -> ScriptedPolicy {
    let word = |rng: &mut ChaCha8Rng| -> String {
        let pool = ["the", "a", "hormone", "maybe", "|", "yes", "no", "(x,", "r,", "y)"];
        pool.choose(rng).unwrap().to_string()
    };
    let filler = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.random_range(0..12);
        (0..n).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
    };
    let picked: Vec<String> = (0..rng.random_range(0..4))
        .map(|_| entities.choose(rng).cloned().unwrap_or_default())
        .collect();
    let t1 = if rng.random_bool(0.8) {
        format!(
            "<think>{}</think>\n<extract_entities> {} </extract_entities> {}",
            filler(rng),
            picked.join(" | "),
            filler(rng)
        )
    } else {
        filler(rng)
    };
    let sel: Vec<String> = (0..rng.random_range(0..4))
        .map(|_| rng.random_range(0..6).to_string())
        .collect();
    let t2 = format!(
        "<think>{}</think>\n<filtered_groups> {} </filtered_groups>",
        filler(rng),
        sel.join(" | ")
    );
    let t3 = if rng.random_bool(0.7) {
        format!(
            "<associative_reasoning> {} </associative_reasoning>\n<answer> {} </answer>",
            filler(rng),
            word(rng)
        )
    } else {
        filler(rng)
    };
    ScriptedPolicy::new([t1, t2, t3])
}

/// Runs an axum router on an ephemeral port in a background runtime. The
/// runtime lives until the process exits.
pub fn spawn_stub(app: axum::Router) -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{addr}")
}
