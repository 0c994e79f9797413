//! Dataset construction: motion-phrase labels from proprioception, the
//! template-driven instruction corpus, the caption/QA corpus, dialogue
//! assembly and the word-level tokenizer.

pub mod dialogue;
pub mod motion;
pub mod multimodal;
pub mod resolver;
pub mod templates;
pub mod tokenizer;
pub mod vlait;

pub use dialogue::{
    assemble_dialogue, ActionSource, DialogueMode, DialogueSample, ImageSource, Role, Turn,
    ACTION_QUESTION_PREFIX, THINK_SUFFIX,
};
pub use motion::{annotate_language_motion, MotionAnnotatorConfig};
pub use multimodal::generate_multimodal_corpus;
pub use resolver::{resolve_record, resolve_target, Semantics};
pub use templates::TemplateBank;
pub use tokenizer::{build_tokenizer, Tokenizer, ACT, BOS, EOS, IMG, PAD, UNK};
pub use vlait::{generate_vla_it, RecordKind, VlaItRecord};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("annotation error: {0}")]
    Annotation(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("dialogue assembly error: {0}")]
    Assembly(String),
    #[error("tokenizer built from empty corpora")]
    EmptyCorpora,
    #[error("template bank error: {0}")]
    Template(String),
}
