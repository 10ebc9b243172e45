//! The two deterministic KG tools and the tagged text blocks they inject.
//!
//! Block grammar (bytes are fixed, the policy conditions on them):
//!
//! ```text
//! <entity_groups>
//! Group 1 (seed): seed | neighbor | neighbor
//! </entity_groups>
//!
//! <kg_triplets>
//! (head, relation, tail)
//! </kg_triplets>
//! ```
//!
//! Every interior line ends with `\n`; an empty payload renders as the open
//! tag, a newline, and the close tag. Labels are normalized and therefore
//! contain no whitespace, which keeps the `", "` and `" | "` separators
//! unambiguous.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embedding::{EncodeError, Encoder, EntityIndex};
use crate::kg::{normalize_label, KnowledgeGraph, Triplet};

pub const ENTITY_GROUPS_OPEN: &str = "<entity_groups>";
pub const ENTITY_GROUPS_CLOSE: &str = "</entity_groups>";
pub const KG_TRIPLETS_OPEN: &str = "<kg_triplets>";
pub const KG_TRIPLETS_CLOSE: &str = "</kg_triplets>";

/// A query entity plus its nearest KG entities. `members[0]` is the seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityGroup {
    /// 1-based.
    pub index: usize,
    pub seed: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    EntityGroups,
    KgTriplets,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ToolPayload {
    EntityGroups(Vec<EntityGroup>),
    KgTriplets(Vec<Triplet>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolOutput {
    pub kind: ToolKind,
    pub rendered: String,
    pub payload: ToolPayload,
}

impl ToolOutput {
    pub fn groups(&self) -> &[EntityGroup] {
        match &self.payload {
            ToolPayload::EntityGroups(g) => g,
            ToolPayload::KgTriplets(_) => &[],
        }
    }

    pub fn triplets(&self) -> &[Triplet] {
        match &self.payload {
            ToolPayload::KgTriplets(t) => t,
            ToolPayload::EntityGroups(_) => &[],
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BlockParseError {
    #[error("missing `{0}`")]
    MissingTag(&'static str),
    #[error("bad line {line}: `{text}`")]
    BadLine { line: usize, text: String },
}

pub fn render_entity_groups(groups: &[EntityGroup]) -> String {
    let mut out = String::from(ENTITY_GROUPS_OPEN);
    out.push('\n');
    for g in groups {
        out.push_str(&format!("Group {} ({}): {}\n", g.index, g.seed, g.members.join(" | ")));
    }
    out.push_str(ENTITY_GROUPS_CLOSE);
    out
}

pub fn render_kg_triplets(triplets: &[Triplet]) -> String {
    let mut out = String::from(KG_TRIPLETS_OPEN);
    out.push('\n');
    for t in triplets {
        out.push_str(&t.to_string());
        out.push('\n');
    }
    out.push_str(KG_TRIPLETS_CLOSE);
    out
}

fn block_lines<'a>(
    text: &'a str,
    open: &'static str,
    close: &'static str,
) -> Result<impl Iterator<Item = (usize, &'a str)>, BlockParseError> {
    let start = text.find(open).ok_or(BlockParseError::MissingTag(open))? + open.len();
    let len = text[start..]
        .find(close)
        .ok_or(BlockParseError::MissingTag(close))?;
    Ok(text[start..start + len]
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty()))
}

/// Inverse of [`render_entity_groups`].
pub fn parse_entity_groups(text: &str) -> Result<Vec<EntityGroup>, BlockParseError> {
    let mut groups = Vec::new();
    for (line_no, line) in block_lines(text, ENTITY_GROUPS_OPEN, ENTITY_GROUPS_CLOSE)? {
        let bad = || BlockParseError::BadLine {
            line: line_no,
            text: line.to_string(),
        };
        let rest = line.strip_prefix("Group ").ok_or_else(bad)?;
        let (index, rest) = rest.split_once(" (").ok_or_else(bad)?;
        let index: usize = index.parse().map_err(|_| bad())?;
        let (seed, members) = rest.split_once("): ").ok_or_else(bad)?;
        groups.push(EntityGroup {
            index,
            seed: seed.to_string(),
            members: members.split(" | ").map(str::to_string).collect(),
        });
    }
    Ok(groups)
}

/// Inverse of [`render_kg_triplets`].
pub fn parse_kg_triplets(text: &str) -> Result<Vec<Triplet>, BlockParseError> {
    let mut triplets = Vec::new();
    for (line_no, line) in block_lines(text, KG_TRIPLETS_OPEN, KG_TRIPLETS_CLOSE)? {
        let bad = || BlockParseError::BadLine {
            line: line_no,
            text: line.to_string(),
        };
        let inner = line
            .strip_prefix('(')
            .and_then(|l| l.strip_suffix(')'))
            .ok_or_else(bad)?;
        let parts: Vec<&str> = inner.split(", ").collect();
        let [head, relation, tail] = parts.as_slice() else {
            return Err(bad());
        };
        triplets.push(Triplet {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
        });
    }
    Ok(triplets)
}

/// Tool 1: links each extracted entity to the KG and returns its group of
/// `p` nearest KG entities, one group per entity in input order.
pub fn construct_groups(
    entities: &[String],
    index: &EntityIndex,
    encoder: &dyn Encoder,
    p: usize,
) -> Result<ToolOutput, EncodeError> {
    let mut groups = Vec::with_capacity(entities.len());
    for (i, raw) in entities.iter().enumerate() {
        let seed = normalize_label(raw);
        let mut members = vec![seed.clone()];
        if !seed.is_empty() {
            members.extend(
                index
                    .top_p_similar(&seed, encoder, p)?
                    .into_iter()
                    .map(|n| n.label),
            );
        }
        groups.push(EntityGroup {
            index: i + 1,
            seed,
            members,
        });
    }
    Ok(ToolOutput {
        kind: ToolKind::EntityGroups,
        rendered: render_entity_groups(&groups),
        payload: ToolPayload::EntityGroups(groups),
    })
}

/// Keeps only selection indices that name a group; reports the rest.
pub fn valid_selection(
    groups: &[EntityGroup],
    selected: &BTreeSet<usize>,
) -> (BTreeSet<usize>, Vec<usize>) {
    let known: BTreeSet<usize> = groups.iter().map(|g| g.index).collect();
    let (kept, dropped): (Vec<usize>, Vec<usize>) =
        selected.iter().partition(|i| known.contains(i));
    (kept.into_iter().collect(), dropped)
}

/// Tool 2: every KG edge whose head and tail fall in two different selected
/// groups, forward and reverse, deduplicated and sorted.
pub fn retrieve_triplets(
    groups: &[EntityGroup],
    selected: &BTreeSet<usize>,
    kg: &KnowledgeGraph,
) -> ToolOutput {
    let (kept, dropped) = valid_selection(groups, selected);
    if !dropped.is_empty() {
        tracing::warn!(?dropped, "ignoring out-of-range group selections");
    }
    let chosen: Vec<&EntityGroup> = groups.iter().filter(|g| kept.contains(&g.index)).collect();

    let mut ids = BTreeSet::new();
    for (a, gi) in chosen.iter().enumerate() {
        for gj in &chosen[a + 1..] {
            ids.extend(kg.edge_ids_between(&gi.members, &gj.members));
            ids.extend(kg.edge_ids_between(&gj.members, &gi.members));
        }
    }
    let triplets: Vec<Triplet> = ids.into_iter().map(|id| kg.edges()[id].clone()).collect();
    ToolOutput {
        kind: ToolKind::KgTriplets,
        rendered: render_kg_triplets(&triplets),
        payload: ToolPayload::KgTriplets(triplets),
    }
}
