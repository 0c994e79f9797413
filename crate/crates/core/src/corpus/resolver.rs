//! Oracle resolution of indirect instructions. Every generated record carries
//! its semantics explicitly, so resolution is registry lookup plus scene
//! matching, never text parsing.

use super::vlait::VlaItRecord;
use super::CorpusError;
use crate::env::{EnvState, TaskSpec, TaskType};
use crate::registry::AttributeRegistry;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Semantics {
    /// Target named by its registered kind.
    Direct { kind: String },
    /// Color plus category, e.g. "the red fruit".
    AttributeRef { color: String, category: String },
    /// Extremum of a registered scalar over matching scene objects.
    Superlative { scalar: String, maximize: bool },
    /// Unique holder of a registry tag.
    TagRequest { tag: String },
    /// Category member that does not carry the excluded color.
    Negation { category: String, excluded_color: String },
    /// Letter tile identified by its printed glyph.
    Glyph { glyph: String },
    /// Drawer tasks; no scene object involved.
    Fixture { task: String },
}

/// Resolves semantics to a unique object id in the scene. Ambiguous or empty
/// matches are errors; generators only emit records that pass this.
pub fn resolve_target(
    sem: &Semantics,
    state: &EnvState,
    registry: &AttributeRegistry,
) -> Result<String, CorpusError> {
    if let Semantics::Fixture { .. } = sem {
        return Ok("drawer".to_string());
    }
    let mut matches: Vec<&str> = Vec::new();
    for obj in &state.objects {
        let kind = registry
            .get(&obj.kind)
            .map_err(|e| CorpusError::Resolution(e.to_string()))?;
        let hit = match sem {
            Semantics::Direct { kind: k } => &obj.kind == k,
            Semantics::AttributeRef { color, category } => {
                kind.color.word() == color && kind.category.word() == category
            }
            Semantics::Superlative { scalar, .. } => kind.scalars.contains_key(scalar),
            Semantics::TagRequest { tag } => kind.has_tag(tag),
            Semantics::Negation {
                category,
                excluded_color,
            } => kind.category.word() == category && kind.color.word() != excluded_color,
            Semantics::Glyph { glyph } => {
                kind.glyph.map(|g| g.to_string()).as_deref() == Some(glyph.as_str())
            }
            Semantics::Fixture { .. } => unreachable!(),
        };
        if hit {
            matches.push(&obj.id);
        }
    }
    if let Semantics::Superlative { scalar, maximize } = sem {
        // Reduce the candidate set to the scalar extremum; ties stay ambiguous.
        let mut best: Option<(i32, Vec<&str>)> = None;
        for id in matches {
            let obj = state.object(id).unwrap();
            let v = registry.get(&obj.kind).unwrap().scalars[scalar];
            let key = if *maximize { v } else { -v };
            match &mut best {
                None => best = Some((key, vec![id])),
                Some((bk, ids)) => {
                    if key > *bk {
                        *bk = key;
                        *ids = vec![id];
                    } else if key == *bk {
                        ids.push(id);
                    }
                }
            }
        }
        matches = best.map(|(_, ids)| ids).unwrap_or_default();
    }
    match matches.as_slice() {
        [one] => Ok(one.to_string()),
        [] => Err(CorpusError::Resolution(format!("no object matches {sem:?}"))),
        many => Err(CorpusError::Resolution(format!(
            "ambiguous: {} objects match {sem:?}",
            many.len()
        ))),
    }
}

/// Resolves a rewrite or indirect record back to a full task, for comparison
/// against the source episode's task.
pub fn resolve_record(
    record: &VlaItRecord,
    state: &EnvState,
    registry: &AttributeRegistry,
) -> Result<TaskSpec, CorpusError> {
    let sem = record
        .semantics
        .as_ref()
        .ok_or_else(|| CorpusError::Resolution("record carries no semantics".into()))?;
    let source = record
        .source_task
        .as_ref()
        .ok_or_else(|| CorpusError::Resolution("record carries no source task".into()))?;
    let task_type = match sem {
        Semantics::Fixture { task } => match task.as_str() {
            "open_drawer" => TaskType::OpenDrawer,
            "close_drawer" => TaskType::CloseDrawer,
            other => {
                return Err(CorpusError::Resolution(format!(
                    "fixture semantics with non-drawer task {other}"
                )))
            }
        },
        _ => source.task_type,
    };
    let target = resolve_target(sem, state, registry)?;
    Ok(TaskSpec::new(task_type, &target, source.reference_id.as_deref()))
}
