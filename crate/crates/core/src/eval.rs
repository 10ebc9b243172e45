//! QA datasets, accuracy reports and input-token accounting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::reward::{accuracy_reward, normalize_gold};
use crate::rollout::{SegmentKind, Trajectory};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),
    #[error("item `{0}` has an empty gold answer")]
    EmptyGold(String),
    #[error("need at least 2 items to split, got {0}")]
    TooSmall(usize),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    Fraction(f64),
    #[error("more than one trajectory for item `{0}`")]
    DuplicateTrajectory(String),
    #[error("trajectory id `{0}` is not in the dataset")]
    UnknownTrajectory(String),
    #[error("trajectory for query `{0}` has no id")]
    MissingId(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub question: String,
    #[serde(rename = "answer")]
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaDataset {
    pub name: String,
    pub items: Vec<QaItem>,
}

impl QaDataset {
    /// Validates ids and normalizes gold answers.
    pub fn new(name: impl Into<String>, items: Vec<QaItem>) -> Result<Self, EvalError> {
        let mut seen = HashSet::new();
        let mut normalized = Vec::with_capacity(items.len());
        for mut item in items {
            if !seen.insert(item.id.clone()) {
                return Err(EvalError::DuplicateItem(item.id));
            }
            item.gold = normalize_gold(&item.gold);
            if item.gold.is_empty() {
                return Err(EvalError::EmptyGold(item.id));
            }
            normalized.push(item);
        }
        Ok(Self {
            name: name.into(),
            items: normalized,
        })
    }

    /// Reads newline-delimited `{id, question, answer, choices?}` records.
    pub fn from_jsonl<R: BufRead>(name: impl Into<String>, reader: R) -> Result<Self, EvalError> {
        let mut items = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let item: QaItem = serde_json::from_str(&line).map_err(|e| EvalError::Line {
                line: i + 1,
                reason: e.to_string(),
            })?;
            items.push(item);
        }
        Self::new(name, items)
    }

    pub fn from_path(path: &Path) -> Result<Self, EvalError> {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        let file = std::fs::File::open(path)?;
        Self::from_jsonl(name, std::io::BufReader::new(file))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Seeded shuffle, then the first `round(n * train_fraction)` items (kept
/// within `1..n`) form the training split.
pub fn split_dataset(ds: &QaDataset, train_fraction: f64, seed: u64) -> Result<(QaDataset, QaDataset), EvalError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(EvalError::Fraction(train_fraction));
    }
    let n = ds.items.len();
    if n < 2 {
        return Err(EvalError::TooSmall(n));
    }
    let mut items = ds.items.clone();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_len = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let test = items.split_off(train_len);
    Ok((
        QaDataset {
            name: format!("{}-train", ds.name),
            items,
        },
        QaDataset {
            name: format!("{}-test", ds.name),
            items: test,
        },
    ))
}

/// Input-token totals for one trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub calls: usize,
    /// Context length of each policy call.
    pub per_call: Vec<usize>,
    /// Sum of every call's context length.
    pub total_input_tokens: usize,
    /// Context length of the last call alone.
    pub final_context_tokens: usize,
}

impl TokenUsage {
    fn from_contexts(per_call: Vec<usize>) -> Self {
        Self {
            calls: per_call.len(),
            total_input_tokens: per_call.iter().sum(),
            final_context_tokens: per_call.last().copied().unwrap_or(0),
            per_call,
        }
    }
}

/// Each policy call sees the prompt plus every segment before it; the total
/// is the sum of those context lengths.
pub fn token_accounting(trajectory: &Trajectory, prompt_tokens: usize) -> TokenUsage {
    let mut per_call = Vec::new();
    let mut context = prompt_tokens;
    for seg in &trajectory.segments {
        if seg.kind == SegmentKind::ModelTurn {
            per_call.push(context);
        }
        context += seg.token_count;
    }
    TokenUsage::from_contexts(per_call)
}

/// Usage of a multi-call pipeline where call `k` re-reads the prompt plus the
/// outputs of calls `0..k` (`step_tokens[j]` tokens each).
pub fn iterative_usage(prompt_tokens: usize, step_tokens: &[usize]) -> TokenUsage {
    let mut per_call = Vec::with_capacity(step_tokens.len());
    let mut context = prompt_tokens;
    for &step in step_tokens {
        per_call.push(context);
        context += step;
    }
    TokenUsage::from_contexts(per_call)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTokens {
    pub id: String,
    pub total_input_tokens: usize,
    pub final_context_tokens: usize,
    pub calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub mean_total_input_tokens: f64,
    pub mean_final_context_tokens: f64,
    pub per_question: Vec<QuestionTokens>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_dataset: BTreeMap<String, DatasetScore>,
    pub weighted_average: f64,
    pub token_stats: TokenStats,
}

fn ratio(correct: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        correct as f64 / n as f64
    }
}

impl EvalReport {
    /// Combines single-dataset reports; the weighted average is pooled
    /// correct answers over pooled item counts.
    pub fn merge(reports: impl IntoIterator<Item = EvalReport>) -> EvalReport {
        let mut per_dataset = BTreeMap::new();
        let mut per_question = Vec::new();
        for r in reports {
            per_dataset.extend(r.per_dataset);
            per_question.extend(r.token_stats.per_question);
        }
        let correct: usize = per_dataset.values().map(|d| d.correct).sum();
        let n: usize = per_dataset.values().map(|d| d.n).sum();
        EvalReport {
            weighted_average: ratio(correct, n),
            token_stats: token_stats(per_question),
            per_dataset,
        }
    }
}

fn token_stats(per_question: Vec<QuestionTokens>) -> TokenStats {
    let count = per_question.len();
    let mean = |f: fn(&QuestionTokens) -> usize| {
        if count == 0 {
            0.0
        } else {
            per_question.iter().map(f).sum::<usize>() as f64 / count as f64
        }
    };
    TokenStats {
        mean_total_input_tokens: mean(|q| q.total_input_tokens),
        mean_final_context_tokens: mean(|q| q.final_context_tokens),
        per_question,
    }
}

/// Scores trajectories against a dataset by item id. Items without a
/// trajectory count as wrong.
pub fn evaluate(trajectories: &[Trajectory], ds: &QaDataset) -> Result<EvalReport, EvalError> {
    let items: HashMap<&str, &QaItem> = ds.items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut by_id: HashMap<&str, &Trajectory> = HashMap::new();
    for t in trajectories {
        let id = t
            .id
            .as_deref()
            .ok_or_else(|| EvalError::MissingId(t.query.clone()))?;
        if !items.contains_key(id) {
            return Err(EvalError::UnknownTrajectory(id.to_string()));
        }
        if by_id.insert(id, t).is_some() {
            return Err(EvalError::DuplicateTrajectory(id.to_string()));
        }
    }

    let mut correct = 0;
    let mut per_question = Vec::new();
    for item in &ds.items {
        let Some(t) = by_id.get(item.id.as_str()) else {
            continue;
        };
        correct += usize::from(accuracy_reward(&t.text(), &item.gold));
        let usage = token_accounting(t, t.prompt_tokens);
        per_question.push(QuestionTokens {
            id: item.id.clone(),
            total_input_tokens: usage.total_input_tokens,
            final_context_tokens: usage.final_context_tokens,
            calls: usage.calls,
        });
    }

    let n = ds.items.len();
    let score = DatasetScore {
        accuracy: ratio(correct, n),
        correct,
        n,
    };
    Ok(EvalReport {
        weighted_average: score.accuracy,
        per_dataset: BTreeMap::from([(ds.name.clone(), score)]),
        token_stats: token_stats(per_question),
    })
}
