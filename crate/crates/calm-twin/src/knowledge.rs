//! Knowledge extraction: selecting the entries relevant to a history.

use crate::model::{KnowledgeEntry, Trajectory, VariableSchema};

/// Selects the relevant knowledge base for a history: every `general`
/// entry (insertion order), then every entry keyed by a variable that
/// appears in the history, in schema order. Matching is exact and
/// case-sensitive since keys are schema identifiers.
pub fn extract_relevant(
    knowledge: &[KnowledgeEntry],
    history: &Trajectory,
    schemas: &[VariableSchema],
) -> Vec<KnowledgeEntry> {
    let present = history.variable_names();
    let mut relevant: Vec<KnowledgeEntry> = knowledge
        .iter()
        .filter(|e| e.is_general())
        .cloned()
        .collect();
    for schema in schemas {
        if !present.contains(&schema.name) {
            continue;
        }
        relevant.extend(
            knowledge
                .iter()
                .filter(|e| e.key == schema.name)
                .cloned(),
        );
    }
    relevant
}
