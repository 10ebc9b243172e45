//! Triplet store with head/tail adjacency indices.
//!
//! The graph is immutable once built. Edges are kept in lexicographic
//! `(head, relation, tail)` order so that an edge id doubles as a sort key:
//! any query that returns ascending edge ids returns sorted triplets.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Normalizes an entity or relation label.
///
/// Lowercases, trims, and collapses every run of internal whitespace into a
/// single underscore, so `" Mental  Disorder "` becomes `"mental_disorder"`.
pub fn normalize_label(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

/// One directed edge `(head, relation, tail)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triplet {
    /// Builds a triplet from raw labels, normalizing each one.
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Self {
            head: normalize_label(head),
            relation: normalize_label(relation),
            tail: normalize_label(tail),
        }
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletFormat {
    #[default]
    Tsv,
    Csv,
}

impl TripletFormat {
    fn delimiter(self) -> u8 {
        match self {
            TripletFormat::Tsv => b'\t',
            TripletFormat::Csv => b',',
        }
    }
}

impl std::str::FromStr for TripletFormat {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(TripletFormat::Tsv),
            "csv" => Ok(TripletFormat::Csv),
            other => Err(KgError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("triplet source contains no records")]
    Empty,
    #[error("unknown triplet format `{0}` (expected tsv or csv)")]
    UnknownFormat(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("index file: {0}")]
    Index(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgStats {
    pub node_count: usize,
    pub edge_count: usize,
    pub relation_count: usize,
}

/// Directed labeled graph `(V, R, E)` with adjacency indices keyed by
/// entity label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: BTreeSet<String>,
    relations: BTreeSet<String>,
    edges: Vec<Triplet>,
    head_index: HashMap<String, Vec<usize>>,
    tail_index: HashMap<String, Vec<usize>>,
}

impl KnowledgeGraph {
    /// Builds a graph from triplets. Duplicates collapse; labels are assumed
    /// to be normalized already (use [`Triplet::new`] for raw input).
    pub fn from_triplets<I: IntoIterator<Item = Triplet>>(triplets: I) -> Self {
        let edges: Vec<Triplet> = triplets
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        let mut entities = BTreeSet::new();
        let mut relations = BTreeSet::new();
        let mut head_index: HashMap<String, Vec<usize>> = HashMap::new();
        let mut tail_index: HashMap<String, Vec<usize>> = HashMap::new();
        for (id, edge) in edges.iter().enumerate() {
            entities.insert(edge.head.clone());
            entities.insert(edge.tail.clone());
            relations.insert(edge.relation.clone());
            head_index.entry(edge.head.clone()).or_default().push(id);
            tail_index.entry(edge.tail.clone()).or_default().push(id);
        }

        Self {
            entities,
            relations,
            edges,
            head_index,
            tail_index,
        }
    }

    /// Reads a triplet file. `#`-prefixed lines and blank lines are skipped.
    pub fn ingest<R: Read>(source: R, format: TripletFormat) -> Result<Self, KgError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .delimiter(format.delimiter())
            .comment(Some(b'#'))
            .flexible(true)
            .quoting(format == TripletFormat::Csv)
            .from_reader(source);

        let mut triplets = Vec::new();
        let mut record = csv::StringRecord::new();
        loop {
            match reader.read_record(&mut record) {
                Ok(false) => break,
                Ok(true) => {}
                Err(err) => {
                    let line = err.position().map(|p| p.line()).unwrap_or(0);
                    return Err(KgError::Malformed {
                        line,
                        reason: err.to_string(),
                    });
                }
            }
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() == 1 && record[0].trim().is_empty() {
                continue;
            }
            if record.len() != 3 {
                return Err(KgError::Malformed {
                    line,
                    reason: format!("expected 3 fields, found {}", record.len()),
                });
            }
            let triplet = Triplet::new(&record[0], &record[1], &record[2]);
            for (name, value) in [
                ("head", &triplet.head),
                ("relation", &triplet.relation),
                ("tail", &triplet.tail),
            ] {
                if value.is_empty() {
                    return Err(KgError::Malformed {
                        line,
                        reason: format!("empty {name} label"),
                    });
                }
            }
            triplets.push(triplet);
        }

        if triplets.is_empty() {
            return Err(KgError::Empty);
        }
        Ok(Self::from_triplets(triplets))
    }

    pub fn ingest_path(path: &Path, format: TripletFormat) -> Result<Self, KgError> {
        let file = std::fs::File::open(path)?;
        Self::ingest(std::io::BufReader::new(file), format)
    }

    /// Writes the graph back out as a triplet file in edge order.
    pub fn write_triplets<W: Write>(&self, sink: W, format: TripletFormat) -> Result<(), KgError> {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .delimiter(format.delimiter())
            .quote_style(match format {
                TripletFormat::Tsv => csv::QuoteStyle::Never,
                TripletFormat::Csv => csv::QuoteStyle::Necessary,
            })
            .from_writer(sink);
        for edge in &self.edges {
            writer
                .write_record([&edge.head, &edge.relation, &edge.tail])
                .map_err(|e| KgError::Io(std::io::Error::other(e)))?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn entities(&self) -> &BTreeSet<String> {
        &self.entities
    }

    pub fn relations(&self) -> &BTreeSet<String> {
        &self.relations
    }

    /// All edges in `(head, relation, tail)` order.
    pub fn edges(&self) -> &[Triplet] {
        &self.edges
    }

    pub fn contains_entity(&self, label: &str) -> bool {
        self.entities.contains(label)
    }

    pub fn outgoing(&self, head: &str) -> &[usize] {
        self.head_index.get(head).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn incoming(&self, tail: &str) -> &[usize] {
        self.tail_index.get(tail).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn stats(&self) -> KgStats {
        KgStats {
            node_count: self.entities.len(),
            edge_count: self.edges.len(),
            relation_count: self.relations.len(),
        }
    }

    /// Every edge whose head is in `heads` and whose tail is in `tails`,
    /// sorted by `(head, relation, tail)`.
    pub fn edges_between<S: AsRef<str>>(&self, heads: &[S], tails: &[S]) -> Vec<Triplet> {
        self.edge_ids_between(heads, tails)
            .into_iter()
            .map(|id| self.edges[id].clone())
            .collect()
    }

    pub(crate) fn edge_ids_between<S: AsRef<str>>(&self, heads: &[S], tails: &[S]) -> Vec<usize> {
        if heads.is_empty() || tails.is_empty() {
            return Vec::new();
        }
        let heads: BTreeSet<&str> = heads.iter().map(AsRef::as_ref).collect();
        let tails: BTreeSet<&str> = tails.iter().map(AsRef::as_ref).collect();

        // Walk whichever side has the smaller adjacency footprint.
        let head_fanout: usize = heads.iter().map(|h| self.outgoing(h).len()).sum();
        let tail_fanin: usize = tails.iter().map(|t| self.incoming(t).len()).sum();
        let mut ids: Vec<usize> = if head_fanout <= tail_fanin {
            heads
                .iter()
                .flat_map(|h| self.outgoing(h))
                .copied()
                .filter(|&id| tails.contains(self.edges[id].tail.as_str()))
                .collect()
        } else {
            tails
                .iter()
                .flat_map(|t| self.incoming(t))
                .copied()
                .filter(|&id| heads.contains(self.edges[id].head.as_str()))
                .collect()
        };
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// On-disk form of a graph: the sorted triplet list. The adjacency indices
/// are rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KgSnapshot {
    pub triplets: Vec<[String; 3]>,
}

impl From<&KnowledgeGraph> for KgSnapshot {
    fn from(kg: &KnowledgeGraph) -> Self {
        Self {
            triplets: kg
                .edges
                .iter()
                .map(|e| [e.head.clone(), e.relation.clone(), e.tail.clone()])
                .collect(),
        }
    }
}

impl From<KgSnapshot> for KnowledgeGraph {
    fn from(snapshot: KgSnapshot) -> Self {
        KnowledgeGraph::from_triplets(snapshot.triplets.into_iter().map(|[head, relation, tail]| {
            Triplet {
                head,
                relation,
                tail,
            }
        }))
    }
}
