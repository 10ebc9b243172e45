//! Three-phase curriculum reward: format only, then format times accuracy,
//! then accuracy only.

use serde::{Deserialize, Serialize};

use crate::tags::{extract_answer, REQUIRED_CLOSING_TAGS};

pub const DEFAULT_S1: u64 = 100;
pub const DEFAULT_S2: u64 = 300;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("invalid reward schedule: need 0 < s1 < s2, got s1={s1}, s2={s2}")]
pub struct ScheduleError {
    pub s1: u64,
    pub s2: u64,
}

/// Phase boundaries in training steps. Phase 1 is `[0, s1)`, phase 2 is
/// `[s1, s2)`, phase 3 is `[s2, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RewardSchedule {
    s1: u64,
    s2: u64,
}

impl RewardSchedule {
    pub fn new(s1: u64, s2: u64) -> Result<Self, ScheduleError> {
        if s1 == 0 || s1 >= s2 {
            return Err(ScheduleError { s1, s2 });
        }
        Ok(Self { s1, s2 })
    }

    pub fn s1(&self) -> u64 {
        self.s1
    }

    pub fn s2(&self) -> u64 {
        self.s2
    }

    pub fn phase(&self, step: u64) -> u8 {
        if step < self.s1 {
            1
        } else if step < self.s2 {
            2
        } else {
            3
        }
    }
}

impl Default for RewardSchedule {
    fn default() -> Self {
        Self {
            s1: DEFAULT_S1,
            s2: DEFAULT_S2,
        }
    }
}

impl<'de> Deserialize<'de> for RewardSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            s1: u64,
            s2: u64,
        }
        let raw = Raw::deserialize(deserializer)?;
        RewardSchedule::new(raw.s1, raw.s2).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: u8,
    pub accuracy: u8,
    pub phase: u8,
    pub total: u8,
}

/// 1 iff all four closing tags appear somewhere in the text.
pub fn format_reward(rollout_text: &str) -> u8 {
    REQUIRED_CLOSING_TAGS
        .iter()
        .map(|tag| u8::from(rollout_text.contains(tag)))
        .product()
}

/// 1 iff the extracted answer equals `gold` exactly. `gold` is expected to
/// be normalized already.
pub fn accuracy_reward(rollout_text: &str, gold: &str) -> u8 {
    u8::from(extract_answer(rollout_text).is_some_and(|a| a == gold))
}

pub fn curriculum_reward(rollout_text: &str, gold: &str, step: u64, schedule: &RewardSchedule) -> RewardBreakdown {
    let format = format_reward(rollout_text);
    let accuracy = accuracy_reward(rollout_text, gold);
    let phase = schedule.phase(step);
    let total = match phase {
        1 => format,
        2 => format * accuracy,
        _ => accuracy,
    };
    RewardBreakdown {
        format,
        accuracy,
        phase,
        total,
    }
}

/// Lowercases and trims a gold label the way answers are normalized.
pub fn normalize_gold(gold: &str) -> String {
    gold.trim().to_lowercase()
}
