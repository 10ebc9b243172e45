//! Group-relative advantages and the clipped, KL-penalized GRPO objective
//! over masked trajectories.
//!
//! For a group of rollouts sharing one query, with per-token log-probs under
//! the current, behavior ("old") and reference policies:
//!
//! ```text
//! A_k     = (r_k - mean(r)) / max(std(r), floor)
//! rho     = exp(lp_cur - lp_old)
//! term    = min(rho * A_k, clip(rho, 1 - eps, 1 + eps) * A_k)
//! kl      = exp(d) - d - 1,  d = lp_ref - lp_cur          (k3 estimator)
//! loss    = -mean(term) + beta * mean(kl)
//! ```
//!
//! Means run over mask-1 (model-generated) tokens only. Values at mask-0
//! positions are never read.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::rollout::{SegmentKind, Trajectory};

pub const DEFAULT_CLIP_EPSILON: f64 = 0.2;
pub const DEFAULT_KL_BETA: f64 = 0.001;
pub const DEFAULT_STD_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GrpoError {
    #[error("a group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite reward {value} at member {member}")]
    NonFiniteReward { member: usize, value: f64 },
    #[error("member {member}: {which} log-probs have {got} entries, trajectory has {expected} tokens")]
    Misaligned {
        member: usize,
        which: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("member {member}: non-finite {which} log-prob at token {position}")]
    NonFinite {
        member: usize,
        which: &'static str,
        position: usize,
    },
    #[error("member {member} has query `{got}`, group query is `{expected}`")]
    QueryMismatch {
        member: usize,
        expected: String,
        got: String,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("batch has {trajectories} trajectories but {records} log-prob records")]
    BatchLength { trajectories: usize, records: usize },
    #[error("record {index}: id `{record}` does not match trajectory id `{trajectory}`")]
    IdMismatch {
        index: usize,
        record: String,
        trajectory: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over every mask-1 token in the group.
    #[default]
    TokenMean,
    /// Mean over members of each member's token mean.
    SequenceMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub advantage_std_floor: f64,
    pub aggregation: Aggregation,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: DEFAULT_CLIP_EPSILON,
            kl_beta: DEFAULT_KL_BETA,
            advantage_std_floor: DEFAULT_STD_FLOOR,
            aggregation: Aggregation::TokenMean,
        }
    }
}

impl GrpoConfig {
    // Negated comparisons so NaN fails too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.clip_epsilon > 0.0) {
            return Err(GrpoError::Config("clip_epsilon must be > 0".into()));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(GrpoError::Config("kl_beta must be >= 0".into()));
        }
        if !(self.advantage_std_floor > 0.0) {
            return Err(GrpoError::Config("advantage_std_floor must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMember {
    pub trajectory: Trajectory,
    pub reward: f64,
    pub logprobs_current: Vec<f64>,
    pub logprobs_old: Vec<f64>,
    pub logprobs_ref: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub query: String,
    pub members: Vec<GroupMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub loss: f64,
    /// The clipped-surrogate part of `loss` (without the KL penalty).
    pub policy_loss: f64,
    pub kl: f64,
    pub advantages: Vec<f64>,
    /// One term per mask-1 token, members in order.
    pub per_token_terms: Vec<f64>,
    pub masked_tokens: usize,
}

/// Population mean/std normalization of rewards within one group.
pub fn group_advantages(rewards: &[f64], floor: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if let Some((member, &value)) = rewards.iter().enumerate().find(|(_, r)| !r.is_finite()) {
        return Err(GrpoError::NonFiniteReward { member, value });
    }
    // The float mean of identical values need not equal them exactly.
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

pub fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Clipped surrogate term for one token.
pub fn surrogate_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// k3 estimate of KL(current || reference) from one sampled token.
pub fn k3(logprob_ref: f64, logprob_current: f64) -> f64 {
    let d = logprob_ref - logprob_current;
    d.exp() - d - 1.0
}

fn check_member(index: usize, member: &GroupMember, query: &str) -> Result<(), GrpoError> {
    if member.trajectory.query != query {
        return Err(GrpoError::QueryMismatch {
            member: index,
            expected: query.to_string(),
            got: member.trajectory.query.clone(),
        });
    }
    let expected = member.trajectory.mask.len();
    for (which, values) in [
        ("current", &member.logprobs_current),
        ("old", &member.logprobs_old),
        ("reference", &member.logprobs_ref),
    ] {
        if values.len() != expected {
            return Err(GrpoError::Misaligned {
                member: index,
                which,
                expected,
                got: values.len(),
            });
        }
        for (position, (&v, &m)) in values.iter().zip(&member.trajectory.mask).enumerate() {
            if m == 1 && !v.is_finite() {
                return Err(GrpoError::NonFinite {
                    member: index,
                    which,
                    position,
                });
            }
        }
    }
    Ok(())
}

pub fn clipped_objective(group: &RolloutGroup, config: &GrpoConfig) -> Result<ObjectiveValue, GrpoError> {
    config.validate()?;
    for (i, member) in group.members.iter().enumerate() {
        check_member(i, member, &group.query)?;
    }
    let rewards: Vec<f64> = group.members.iter().map(|m| m.reward).collect();
    let advantages = group_advantages(&rewards, config.advantage_std_floor)?;

    let mut per_token_terms = Vec::new();
    // (surrogate sum, kl sum, token count) per member
    let mut sums = Vec::with_capacity(group.members.len());
    for (member, &advantage) in group.members.iter().zip(&advantages) {
        let (mut term_sum, mut kl_sum, mut count) = (0.0, 0.0, 0usize);
        for (i, &m) in member.trajectory.mask.iter().enumerate() {
            if m != 1 {
                continue;
            }
            let current = member.logprobs_current[i];
            let ratio = (current - member.logprobs_old[i]).exp();
            let term = surrogate_term(ratio, advantage, config.clip_epsilon);
            per_token_terms.push(term);
            term_sum += term;
            kl_sum += k3(member.logprobs_ref[i], current);
            count += 1;
        }
        sums.push((term_sum, kl_sum, count));
    }

    let masked_tokens: usize = sums.iter().map(|s| s.2).sum();
    let (mean_term, kl) = match config.aggregation {
        Aggregation::TokenMean => {
            if masked_tokens == 0 {
                (0.0, 0.0)
            } else {
                let n = masked_tokens as f64;
                (
                    sums.iter().map(|s| s.0).sum::<f64>() / n,
                    sums.iter().map(|s| s.1).sum::<f64>() / n,
                )
            }
        }
        Aggregation::SequenceMean => {
            let live: Vec<_> = sums.iter().filter(|s| s.2 > 0).collect();
            if live.is_empty() {
                (0.0, 0.0)
            } else {
                let n = live.len() as f64;
                (
                    live.iter().map(|s| s.0 / s.2 as f64).sum::<f64>() / n,
                    live.iter().map(|s| s.1 / s.2 as f64).sum::<f64>() / n,
                )
            }
        }
    };

    let policy_loss = -mean_term;
    Ok(ObjectiveValue {
        loss: policy_loss + config.kl_beta * kl,
        policy_loss,
        kl,
        advantages,
        per_token_terms,
        masked_tokens,
    })
}

/// One line of a log-prob batch file, aligned with the trajectory on the
/// same line of the trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub reward: f64,
    pub logprobs_current: Vec<f64>,
    /// Defaults to the behavior log-probs recorded in the trajectory, with
    /// 0.0 at tool-output positions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs_old: Option<Vec<f64>>,
    pub logprobs_ref: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub query: String,
    pub size: usize,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub loss: f64,
    pub policy_loss: f64,
    pub kl: f64,
    pub masked_tokens: usize,
}

/// Behavior log-probs laid out over every token of the trajectory.
pub fn recorded_logprobs(trajectory: &Trajectory) -> Vec<f64> {
    let mut out = Vec::with_capacity(trajectory.mask.len());
    for seg in &trajectory.segments {
        match (&seg.kind, &seg.logprobs) {
            (SegmentKind::ModelTurn, Some(lp)) if lp.len() == seg.token_count => out.extend(lp),
            _ => out.extend(std::iter::repeat_n(0.0, seg.token_count)),
        }
    }
    out
}

/// Pairs trajectories with log-prob records line by line, groups them by
/// query in order of first appearance, and evaluates each group.
pub fn evaluate_batch(
    trajectories: Vec<Trajectory>,
    records: Vec<LogprobRecord>,
    config: &GrpoConfig,
) -> Result<Vec<GroupReport>, GrpoError> {
    if trajectories.len() != records.len() {
        return Err(GrpoError::BatchLength {
            trajectories: trajectories.len(),
            records: records.len(),
        });
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<GroupMember>> = HashMap::new();
    for (index, (trajectory, record)) in trajectories.into_iter().zip(records).enumerate() {
        if let (Some(rid), Some(tid)) = (&record.id, &trajectory.id) {
            if rid != tid {
                return Err(GrpoError::IdMismatch {
                    index,
                    record: rid.clone(),
                    trajectory: tid.clone(),
                });
            }
        }
        let logprobs_old = record
            .logprobs_old
            .unwrap_or_else(|| recorded_logprobs(&trajectory));
        let member = GroupMember {
            reward: record.reward,
            logprobs_current: record.logprobs_current,
            logprobs_old,
            logprobs_ref: record.logprobs_ref,
            trajectory,
        };
        let query = member.trajectory.query.clone();
        if !groups.contains_key(&query) {
            order.push(query.clone());
        }
        groups.entry(query).or_default().push(member);
    }

    order
        .into_iter()
        .map(|query| {
            let members = groups.remove(&query).unwrap_or_default();
            let group = RolloutGroup { query, members };
            let value = clipped_objective(&group, config)?;
            Ok(GroupReport {
                size: group.members.len(),
                rewards: group.members.iter().map(|m| m.reward).collect(),
                query: group.query,
                advantages: value.advantages,
                loss: value.loss,
                policy_loss: value.policy_loss,
                kl: value.kl,
                masked_tokens: value.masked_tokens,
            })
        })
        .collect()
}
