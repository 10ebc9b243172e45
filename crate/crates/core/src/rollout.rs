//! Three-turn rollout: extract entities, filter groups, reason and answer,
//! with the two tool calls injected between turns.
//!
//! Every byte the policy sees is recorded as a segment. The context handed
//! to the policy at turn `t` is the rendered prompt followed by the text of
//! every earlier segment, concatenated with no separators. Tool segments wrap
//! the rendered block in a leading and trailing newline.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embedding::{EncodeError, Encoder, EntityIndex};
use crate::kg::{normalize_label, KnowledgeGraph, Triplet};
use crate::policy::{FinishReason, GenerationRequest, Policy, PolicyError};
use crate::tags::{self, EXTRACT_CLOSE, FILTER_CLOSE};
use crate::tools::{self, EntityGroup, ToolOutput};
use crate::{prompt, DEFAULT_P};

pub const DEFAULT_MAX_TOKENS_PER_TURN: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Every group from Tool 1 goes straight to Tool 2; no Turn 2.
    NoFiltering,
    /// Groups and triplets computed from a fixed entity list, then a single
    /// model turn.
    PrecomputedRetrieval,
    /// Turn 3 answers directly, without the associative-reasoning block.
    NoExtrapolation,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoFiltering,
        Variant::PrecomputedRetrieval,
        Variant::NoExtrapolation,
    ];
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Variant::Full),
            "no_filtering" => Ok(Variant::NoFiltering),
            "precomputed_retrieval" => Ok(Variant::PrecomputedRetrieval),
            "no_extrapolation" => Ok(Variant::NoExtrapolation),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopMarkers {
    pub turn1: Vec<String>,
    pub turn2: Vec<String>,
    /// Empty means run to end-of-sequence.
    pub turn3: Vec<String>,
}

impl Default for StopMarkers {
    fn default() -> Self {
        Self {
            turn1: vec![EXTRACT_CLOSE.to_string()],
            turn2: vec![FILTER_CLOSE.to_string()],
            turn3: Vec::new(),
        }
    }
}

impl StopMarkers {
    pub fn for_turn(&self, turn: u8) -> &[String] {
        match turn {
            1 => &self.turn1,
            2 => &self.turn2,
            _ => &self.turn3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub p: usize,
    pub max_tokens_per_turn: usize,
    pub variant: Variant,
    pub stop_markers: StopMarkers,
    /// Entity list used by [`Variant::PrecomputedRetrieval`].
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub precomputed_entities: Vec<String>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            p: DEFAULT_P,
            max_tokens_per_turn: DEFAULT_MAX_TOKENS_PER_TURN,
            variant: Variant::Full,
            stop_markers: StopMarkers::default(),
            precomputed_entities: Vec::new(),
        }
    }
}

impl RolloutConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_tokens_per_turn == 0 {
            return Err("max_tokens_per_turn must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    ModelTurn,
    ToolOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Turn number (1-3) for model turns, tool number (1-2) for tool output.
    pub id: u8,
    pub text: String,
    pub token_count: usize,
    pub tokens: Vec<String>,
    /// Behavior-policy log-probabilities, model turns only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish: Option<FinishReason>,
}

/// A finished (or partial) rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub query: String,
    /// Token count of the rendered prompt (system prompt plus question).
    pub prompt_tokens: usize,
    pub segments: Vec<Segment>,
    /// 1 on model-turn tokens, 0 on tool-output tokens.
    pub mask: Vec<u8>,
    pub parsed_entities: Vec<String>,
    pub parsed_group_selection: BTreeSet<usize>,
    pub groups: Vec<EntityGroup>,
    pub triplets: Vec<Triplet>,
    pub answer: Option<String>,
    pub config: RolloutConfig,
    /// Context length in tokens for each policy call, in order.
    pub call_context_tokens: Vec<usize>,
}

impl Trajectory {
    fn new(query: &str, prompt_tokens: usize, config: &RolloutConfig) -> Self {
        Self {
            id: None,
            query: query.to_string(),
            prompt_tokens,
            segments: Vec::new(),
            mask: Vec::new(),
            parsed_entities: Vec::new(),
            parsed_group_selection: BTreeSet::new(),
            groups: Vec::new(),
            triplets: Vec::new(),
            answer: None,
            config: config.clone(),
            call_context_tokens: Vec::new(),
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.token_count).sum()
    }

    pub fn model_tokens(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::ModelTurn)
            .map(|s| s.token_count)
            .sum()
    }

    pub fn policy_calls(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::ModelTurn)
            .count()
    }

    /// Every segment's text in order: the rollout `y` that rewards score.
    pub fn text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }

    /// Checks the mask against the segment layout.
    pub fn mask_is_consistent(&self) -> bool {
        if self.mask.len() != self.total_tokens() {
            return false;
        }
        let mut at = 0;
        for seg in &self.segments {
            let want = u8::from(seg.kind == SegmentKind::ModelTurn);
            if self.mask[at..at + seg.token_count].iter().any(|&m| m != want) {
                return false;
            }
            at += seg.token_count;
        }
        true
    }

    fn push(&mut self, segment: Segment) {
        let bit = u8::from(segment.kind == SegmentKind::ModelTurn);
        self.mask.extend(std::iter::repeat_n(bit, segment.token_count));
        self.segments.push(segment);
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("policy failed on turn {turn}: {source}")]
    Policy {
        turn: u8,
        #[source]
        source: PolicyError,
        partial: Box<Trajectory>,
    },
    #[error("tool {tool} failed: {source}")]
    Tool {
        tool: u8,
        #[source]
        source: EncodeError,
        partial: Box<Trajectory>,
    },
}

impl RolloutError {
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            RolloutError::Config(_) => None,
            RolloutError::Policy { partial, .. } | RolloutError::Tool { partial, .. } => Some(partial),
        }
    }
}

/// Read-only graph state shared by every rollout.
#[derive(Clone, Copy)]
pub struct KgView<'a> {
    pub kg: &'a KnowledgeGraph,
    pub index: &'a EntityIndex,
    pub encoder: &'a dyn Encoder,
}

struct Run<'a> {
    policy: &'a dyn Policy,
    view: KgView<'a>,
    config: &'a RolloutConfig,
    context: String,
    traj: Trajectory,
}

impl Run<'_> {
    fn model_turn(&mut self, turn: u8) -> Result<String, RolloutError> {
        self.traj
            .call_context_tokens
            .push(self.traj.prompt_tokens + self.traj.total_tokens());
        let request = GenerationRequest {
            query: &self.traj.query,
            turn,
            context: &self.context,
            stop: self.config.stop_markers.for_turn(turn),
            max_tokens: self.config.max_tokens_per_turn,
        };
        let generation = match self.policy.generate(&request) {
            Ok(g) => g,
            Err(source) => {
                self.traj.call_context_tokens.pop();
                return Err(RolloutError::Policy {
                    turn,
                    source,
                    partial: Box::new(self.traj.clone()),
                });
            }
        };
        self.context.push_str(&generation.text);
        self.traj.push(Segment {
            kind: SegmentKind::ModelTurn,
            id: turn,
            text: generation.text.clone(),
            token_count: generation.tokens.len(),
            tokens: generation.tokens,
            logprobs: Some(generation.logprobs),
            finish: Some(generation.finish),
        });
        Ok(generation.text)
    }

    fn inject(&mut self, tool: u8, output: &ToolOutput) {
        let text = format!("\n{}\n", output.rendered);
        let tokens = self.policy.tokenize(&text);
        self.context.push_str(&text);
        self.traj.push(Segment {
            kind: SegmentKind::ToolOutput,
            id: tool,
            text,
            token_count: tokens.len(),
            tokens,
            logprobs: None,
            finish: None,
        });
    }

    fn tool1(&mut self, entities: Vec<String>) -> Result<(), RolloutError> {
        let view = self.view;
        let output = tools::construct_groups(&entities, view.index, view.encoder, self.config.p).map_err(
            |source| RolloutError::Tool {
                tool: 1,
                source,
                partial: Box::new(self.traj.clone()),
            },
        )?;
        self.traj.parsed_entities = entities;
        self.traj.groups = output.groups().to_vec();
        self.inject(1, &output);
        Ok(())
    }

    fn tool2(&mut self, selected: BTreeSet<usize>) {
        let output = tools::retrieve_triplets(&self.traj.groups, &selected, self.view.kg);
        self.traj.parsed_group_selection = selected;
        self.traj.triplets = output.triplets().to_vec();
        self.inject(2, &output);
    }

    fn all_groups(&self) -> BTreeSet<usize> {
        self.traj.groups.iter().map(|g| g.index).collect()
    }
}

/// Runs one rollout for `query`.
pub fn run_rollout(
    policy: &dyn Policy,
    query: &str,
    view: KgView<'_>,
    config: &RolloutConfig,
) -> Result<Trajectory, RolloutError> {
    config.validate().map_err(RolloutError::Config)?;
    let prompt = prompt::render(config.variant, query);
    let prompt_tokens = policy.tokenize(&prompt).len();
    let mut run = Run {
        policy,
        view,
        config,
        context: prompt,
        traj: Trajectory::new(query, prompt_tokens, config),
    };

    match config.variant {
        Variant::Full | Variant::NoExtrapolation => {
            let turn1 = run.model_turn(1)?;
            run.tool1(tags::parse_entities(&turn1))?;
            let turn2 = run.model_turn(2)?;
            let selected = tags::parse_group_selection(&turn2, run.traj.groups.len());
            run.tool2(selected);
            run.model_turn(3)?;
        }
        Variant::NoFiltering => {
            let turn1 = run.model_turn(1)?;
            run.tool1(tags::parse_entities(&turn1))?;
            let all = run.all_groups();
            run.tool2(all);
            run.model_turn(3)?;
        }
        Variant::PrecomputedRetrieval => {
            let entities = config
                .precomputed_entities
                .iter()
                .map(|e| normalize_label(e))
                .filter(|e| !e.is_empty())
                .collect();
            run.tool1(entities)?;
            let all = run.all_groups();
            run.tool2(all);
            run.model_turn(3)?;
        }
    }

    run.traj.answer = tags::extract_answer(&run.traj.text());
    Ok(run.traj)
}
