//! Template banks for rewrites, indirect instructions, captions and the
//! benchmark-only synonym set. Held-out entries never enter training data.

use super::resolver::Semantics;
use super::CorpusError;
use crate::env::TaskType;
use serde::Deserialize;
use std::collections::BTreeMap;

#[derive(Clone, Debug, Deserialize)]
pub struct RewriteBank {
    pub train: Vec<String>,
    pub held_out: Vec<String>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct ContextBank {
    pub task: String,
    pub semantics: SemanticsSpec,
    pub train: Vec<String>,
    pub held_out: Vec<String>,
}

/// Declarative semantics attached to a context template. Glyph and
/// attribute_ref leave their slots open; they are bound per scene.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SemanticsSpec {
    Superlative { scalar: String, maximize: bool },
    TagRequest { tag: String },
    Negation { category: String, excluded_color: String },
    Glyph,
    AttributeRef,
    Fixture,
}

#[derive(Clone, Debug, Deserialize)]
struct CaptionBank {
    prompts: Vec<String>,
}

#[derive(Clone, Debug, Deserialize)]
struct RawBank {
    caption: CaptionBank,
    rewrite: BTreeMap<String, RewriteBank>,
    context: Vec<ContextBank>,
    held_out_synonyms: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct TemplateBank {
    pub caption_prompts: Vec<String>,
    pub rewrites: BTreeMap<String, RewriteBank>,
    pub contexts: Vec<ContextBank>,
    pub held_out_synonyms: BTreeMap<String, String>,
}

impl TemplateBank {
    pub fn builtin() -> Self {
        Self::parse(include_str!("../../assets/templates.toml"))
            .expect("builtin template bank must parse")
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let raw: RawBank =
            toml::from_str(text).map_err(|e| CorpusError::Template(e.to_string()))?;
        let bank = TemplateBank {
            caption_prompts: raw.caption.prompts,
            rewrites: raw.rewrite,
            contexts: raw.context,
            held_out_synonyms: raw.held_out_synonyms,
        };
        for t in [
            "pick",
            "move_near",
            "put_on",
            "put_in_drawer",
            "open_drawer",
            "close_drawer",
        ] {
            if !bank.rewrites.contains_key(t) {
                return Err(CorpusError::Template(format!("missing rewrite bank for {t}")));
            }
        }
        Ok(bank)
    }

    pub fn rewrite_bank(&self, task: TaskType) -> &RewriteBank {
        &self.rewrites[task_key(task)]
    }

    pub fn contexts_for(&self, task: TaskType) -> impl Iterator<Item = &ContextBank> {
        let key = task_key(task);
        self.contexts.iter().filter(move |c| c.task == key)
    }
}

pub fn task_key(task: TaskType) -> &'static str {
    match task {
        TaskType::Pick => "pick",
        TaskType::MoveNear => "move_near",
        TaskType::PutOn => "put_on",
        TaskType::PutInDrawer => "put_in_drawer",
        TaskType::OpenDrawer => "open_drawer",
        TaskType::CloseDrawer => "close_drawer",
    }
}

impl SemanticsSpec {
    /// Binds the open slots of this spec against a concrete target kind.
    pub fn bind(&self, glyph: Option<char>, color: &str, category: &str, task: TaskType) -> Semantics {
        match self {
            SemanticsSpec::Superlative { scalar, maximize } => Semantics::Superlative {
                scalar: scalar.clone(),
                maximize: *maximize,
            },
            SemanticsSpec::TagRequest { tag } => Semantics::TagRequest { tag: tag.clone() },
            SemanticsSpec::Negation {
                category,
                excluded_color,
            } => Semantics::Negation {
                category: category.clone(),
                excluded_color: excluded_color.clone(),
            },
            SemanticsSpec::Glyph => Semantics::Glyph {
                glyph: glyph.map(|g| g.to_string()).unwrap_or_default(),
            },
            SemanticsSpec::AttributeRef => Semantics::AttributeRef {
                color: color.to_string(),
                category: category.to_string(),
            },
            SemanticsSpec::Fixture => Semantics::Fixture {
                task: task_key(task).to_string(),
            },
        }
    }
}
