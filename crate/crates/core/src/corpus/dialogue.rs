//! Dialogue assembly: turns every record into the chat layout the backbone
//! trains on, and encodes turns to token ids with a loss mask over assistant
//! text.

use super::tokenizer::{Tokenizer, ACT, BOS, EOS, IMG};
use super::vlait::{RecordKind, VlaItRecord};
use super::CorpusError;
use crate::env::SceneConfig;
use serde::{Deserialize, Serialize};

pub const ACTION_QUESTION_PREFIX: &str = "What action should the robot take to";
pub const THINK_SUFFIX: &str = "First answer my question.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    /// Re-render a stored episode frame.
    Episode { episode_id: String, frame: usize },
    /// Re-render a freshly sampled scene.
    Scene { config: SceneConfig, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    pub image: Option<ImageSource>,
}

/// Where the supervising action chunk starts, for samples that train the
/// action head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSource {
    pub episode_id: String,
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub turns: Vec<Turn>,
    pub has_action_tail: bool,
    pub token_ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub action_source: Option<ActionSource>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogueMode {
    ActionOnly,
    QaThenAction,
    RespondThenAct,
}

pub fn action_question(instruction: &str) -> String {
    let trimmed = instruction.trim_end_matches(['.', '!', '?']);
    format!("{ACTION_QUESTION_PREFIX} {trimmed}?")
}

impl DialogueSample {
    fn new(turns: Vec<Turn>, has_action_tail: bool, action_source: Option<ActionSource>) -> Self {
        DialogueSample {
            turns,
            has_action_tail,
            token_ids: Vec::new(),
            loss_mask: Vec::new(),
            action_source,
        }
    }

    /// Fills token_ids and loss_mask. Layout per turn: a role marker word,
    /// then the text. Assistant text is supervised; an action tail ends the
    /// sequence with a single <ACT> and no <EOS> after it.
    pub fn encode(&mut self, tok: &Tokenizer) {
        let mut ids: Vec<u32> = vec![BOS];
        let mut mask: Vec<bool> = vec![false];
        let last = self.turns.len() - 1;
        for (i, turn) in self.turns.iter().enumerate() {
            let marker = match turn.role {
                Role::System => "system:",
                Role::User => "user:",
                Role::Assistant => "assistant:",
            };
            ids.push(tok.id(marker));
            mask.push(false);
            if turn.image.is_some() {
                ids.push(IMG);
                mask.push(false);
            }
            let supervised = turn.role == Role::Assistant;
            for id in tok.tokenize(&turn.text) {
                ids.push(id);
                mask.push(supervised);
            }
            if supervised {
                if i == last && self.has_action_tail {
                    ids.push(ACT);
                    mask.push(true);
                } else {
                    ids.push(EOS);
                    mask.push(true);
                }
            }
        }
        self.token_ids = ids;
        self.loss_mask = mask;
    }
}

/// Assembles an instruction-bearing record into a training dialogue.
/// QA and caption records always produce a plain language exchange with no
/// action tail, whatever mode is requested.
pub fn assemble_dialogue(
    record: &VlaItRecord,
    mode: DialogueMode,
    image: Option<ImageSource>,
    action_source: Option<ActionSource>,
) -> Result<DialogueSample, CorpusError> {
    match record.kind {
        RecordKind::Qa | RecordKind::Caption => {
            if action_source.is_some() {
                return Err(CorpusError::Assembly(
                    "qa and caption records never carry action tails".into(),
                ));
            }
            let turns = vec![
                Turn {
                    role: Role::User,
                    text: record.instruction_text.clone(),
                    image,
                },
                Turn {
                    role: Role::Assistant,
                    text: record.response_text.clone(),
                    image: None,
                },
            ];
            return Ok(DialogueSample::new(turns, false, None));
        }
        RecordKind::CommandRewrite | RecordKind::ContextCreate => {}
    }
    if record.instruction_text.trim().is_empty() {
        return Err(CorpusError::Assembly("record has no instruction".into()));
    }
    let q = action_question(&record.instruction_text);
    let turns = match mode {
        DialogueMode::ActionOnly => vec![
            Turn {
                role: Role::User,
                text: q,
                image,
            },
            Turn {
                role: Role::Assistant,
                text: String::new(),
                image: None,
            },
        ],
        DialogueMode::RespondThenAct => vec![
            Turn {
                role: Role::User,
                text: format!("{q} {THINK_SUFFIX}"),
                image,
            },
            Turn {
                role: Role::Assistant,
                text: record.response_text.clone(),
                image: None,
            },
        ],
        DialogueMode::QaThenAction => vec![
            Turn {
                role: Role::User,
                text: record.instruction_text.clone(),
                image,
            },
            Turn {
                role: Role::Assistant,
                text: record.response_text.clone(),
                image: None,
            },
            Turn {
                role: Role::User,
                text: q,
                image: None,
            },
            Turn {
                role: Role::Assistant,
                text: String::new(),
                image: None,
            },
        ],
    };
    Ok(DialogueSample::new(turns, true, action_source))
}
