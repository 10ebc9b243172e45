//! Structural tags emitted by the policy and the lenient parsers that read
//! them. Parsers never fail: malformed output yields empty results and the
//! format reward does the punishing.

use std::collections::BTreeSet;

use crate::kg::normalize_label;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const EXTRACT_OPEN: &str = "<extract_entities>";
pub const EXTRACT_CLOSE: &str = "</extract_entities>";
pub const FILTER_OPEN: &str = "<filtered_groups>";
pub const FILTER_CLOSE: &str = "</filtered_groups>";
pub const REASONING_OPEN: &str = "<associative_reasoning>";
pub const REASONING_CLOSE: &str = "</associative_reasoning>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// The four closing tags the format reward requires.
pub const REQUIRED_CLOSING_TAGS: [&str; 4] =
    [EXTRACT_CLOSE, FILTER_CLOSE, REASONING_CLOSE, ANSWER_CLOSE];

/// Content between the first `open` and the first `close` after it.
fn first_span<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let len = text[start..].find(close)?;
    Some(&text[start..start + len])
}

/// Entities listed in the first `<extract_entities>` block, split on `|`
/// and normalized. Empty pieces are dropped.
pub fn parse_entities(turn_text: &str) -> Vec<String> {
    first_span(turn_text, EXTRACT_OPEN, EXTRACT_CLOSE)
        .map(|inner| {
            inner
                .split('|')
                .map(normalize_label)
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default()
}

/// Group indices listed in the first `<filtered_groups>` block. Pieces that
/// are not integers in `1..=group_count` are dropped.
pub fn parse_group_selection(turn_text: &str, group_count: usize) -> BTreeSet<usize> {
    first_span(turn_text, FILTER_OPEN, FILTER_CLOSE)
        .map(|inner| {
            inner
                .split('|')
                .filter_map(|piece| piece.trim().parse::<usize>().ok())
                .filter(|&i| (1..=group_count).contains(&i))
                .collect()
        })
        .unwrap_or_default()
}

/// Content of the last `<answer>...</answer>` pair, lowercased and trimmed.
pub fn extract_answer(text: &str) -> Option<String> {
    let close = text.rfind(ANSWER_CLOSE)?;
    let open = text[..close].rfind(ANSWER_OPEN)? + ANSWER_OPEN.len();
    Some(text[open..close].trim().to_lowercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entities_from_turn_one() {
        let text = "<think>melatonin is a hormone</think>\n<extract_entities> melatonin | insomnia </extract_entities>";
        assert_eq!(parse_entities(text), ["melatonin", "insomnia"]);
    }

    #[test]
    fn entities_missing_tags() {
        assert!(parse_entities("no tags at all").is_empty());
        assert!(parse_entities("<extract_entities> a | b").is_empty());
    }

    #[test]
    fn entities_drop_empty_pieces() {
        assert_eq!(parse_entities("<extract_entities>a||b |</extract_entities>"), ["a", "b"]);
    }

    #[test]
    fn entities_normalize_whitespace() {
        assert_eq!(
            parse_entities("<extract_entities> Mental Disorder | Sleep\tQuality</extract_entities>"),
            ["mental_disorder", "sleep_quality"]
        );
    }

    #[test]
    fn entities_only_first_block() {
        let text = "<extract_entities>a</extract_entities><extract_entities>b</extract_entities>";
        assert_eq!(parse_entities(text), ["a"]);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(parse_group_selection("<filtered_groups> 1 | 2 </filtered_groups>", 3), [1, 2].into());
        assert!(parse_group_selection("<filtered_groups> 5 </filtered_groups>", 2).is_empty());
        assert_eq!(parse_group_selection("<filtered_groups>2|2|1</filtered_groups>", 2), [1, 2].into());
        assert_eq!(
            parse_group_selection("<filtered_groups> 0 | x | -1 | 2.5 | 3 </filtered_groups>", 3),
            [3].into()
        );
        assert!(parse_group_selection("nothing", 3).is_empty());
        assert!(parse_group_selection("<filtered_groups>1</filtered_groups>", 0).is_empty());
    }

    #[test]
    fn answer_examples() {
        assert_eq!(extract_answer("...<answer> Yes </answer>").as_deref(), Some("yes"));
        assert_eq!(extract_answer("no answer here"), None);
        assert_eq!(extract_answer("<answer>a</answer> then <answer>b</answer>").as_deref(), Some("b"));
        assert_eq!(extract_answer("<answer>unterminated"), None);
        assert_eq!(extract_answer("</answer> stray close"), None);
        assert_eq!(extract_answer("<answer>\n MAYBE\n</answer>").as_deref(), Some("maybe"));
    }
}
