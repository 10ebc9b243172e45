//! System prompt templates, one per pipeline variant.

use crate::rollout::Variant;

const PREAMBLE: &str = "You are a biomedical reasoning assistant. To answer questions, you follow a structured retrieval and reasoning process using a knowledge graph. Follow these steps exactly.\n\n";

const STEP_EXTRACT: &str = "--- STEP 1: Entity Extraction ---\n\
Think about the question. Identify the key substantive biomedical concepts --- these are specific biological entities, diseases, molecules, or processes. Do NOT extract relational or intent words (for example, do not extract \"treatment\", \"cause\", \"effect\", \"role\", \"relationship\", \"association\", \"mechanism\", \"involvement\", \"function\").\n\n\
Format your response as:\n\n\
<think> [your reasoning about which concepts are substantive] </think>\n\n\
<extract_entities> concept_1 | concept_2 | ... </extract_entities>\n\n";

const STEP_FILTER: &str = "--- STEP 2: Group Filtering ---\n\
You will receive entity groups: for each concept you extracted, a set of semantically related terms from the knowledge graph.\n\n\
Review the groups. Keep the groups that are relevant to answering the question. Reference groups by their number.\n\n\
Format your response as:\n\n\
<think> [your reasoning about which groups to keep and why] </think>\n\n\
<filtered_groups> 1 | 2 | ... </filtered_groups>\n\n";

const STEP_GROUPS_UNFILTERED: &str = "--- STEP 2: Entity Groups ---\n\
You will receive entity groups: for each concept you extracted, a set of semantically related terms from the knowledge graph. All groups are kept.\n\n";

const STEP_REASON: &str = "--- STEP 3: Associative Reasoning ---\n\
You will receive knowledge graph triplets connecting terms across your selected groups.\n\n\
Use these triplets to reason associatively:\n\
- Identify which triplet relationships are relevant to the question\n\
- If a direct answer is not present, construct new triplets by substituting semantically similar terms from the entity groups into existing triplet patterns. For example: if (hormone, treats, mental_disorder) is retrieved and melatonin is in the hormone group and insomnia is in the mental_disorder group, construct (melatonin, treats, insomnia) by analogy.\n\
- Build a rationale connecting the retrieved knowledge to the question\n\n\
Your answer must be a single word: yes, no, maybe, a, or b.\n\n\
Format your response as:\n\n\
<associative_reasoning> your reasoning </associative_reasoning>\n\n\
<answer> your answer </answer>\n\n";

const STEP_ANSWER_DIRECT: &str = "--- STEP 3: Answer ---\n\
You will receive knowledge graph triplets connecting terms across your selected groups. Use them to answer the question directly.\n\n\
Your answer must be a single word: yes, no, maybe, a, or b.\n\n\
Format your response as:\n\n\
<answer> your answer </answer>\n\n";

const PRECOMPUTED: &str = "You are a biomedical reasoning assistant. Entity groups and knowledge graph triplets relevant to the question are provided below.\n\n\
Use these triplets to reason associatively:\n\
- Identify which triplet relationships are relevant to the question\n\
- If a direct answer is not present, construct new triplets by substituting semantically similar terms from the entity groups into existing triplet patterns. For example: if (hormone, treats, mental_disorder) is retrieved and melatonin is in the hormone group and insomnia is in the mental_disorder group, construct (melatonin, treats, insomnia) by analogy.\n\
- Build a rationale connecting the retrieved knowledge to the question\n\n\
Your answer must be a single word: yes, no, maybe, a, or b.\n\n\
Format your response as:\n\n\
<associative_reasoning> your reasoning </associative_reasoning>\n\n\
<answer> your answer </answer>\n\n";

const FALLBACK: &str = "If no knowledge graph triplets are found, reason using the entity groups alone combined with your general knowledge.\n\n";

/// The prompt template for `variant`, with a literal `{question}` slot.
pub fn template(variant: Variant) -> String {
    let body = match variant {
        Variant::Full => [PREAMBLE, STEP_EXTRACT, STEP_FILTER, STEP_REASON].concat(),
        Variant::NoFiltering => [PREAMBLE, STEP_EXTRACT, STEP_GROUPS_UNFILTERED, STEP_REASON].concat(),
        Variant::NoExtrapolation => [PREAMBLE, STEP_EXTRACT, STEP_FILTER, STEP_ANSWER_DIRECT].concat(),
        Variant::PrecomputedRetrieval => PRECOMPUTED.to_string(),
    };
    format!("{body}{FALLBACK}Question: {{question}}\n")
}

/// The full text the policy sees before its first turn.
pub fn render(variant: Variant, question: &str) -> String {
    template(variant).replace("{question}", question)
}
