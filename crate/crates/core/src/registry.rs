//! Attribute registry: the closed catalogue of object kinds, their semantic
//! tags and scalar attributes. Situated instructions are resolvable by oracle
//! exactly because every tag and scalar lives here.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Can,
    Fruit,
    Block,
    Sponge,
    LetterTile,
    Drawer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Orange,
    Purple,
    White,
    Gray,
}

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [210, 40, 40],
            Color::Green => [40, 190, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 210, 40],
            Color::Orange => [240, 140, 30],
            Color::Purple => [150, 50, 200],
            Color::White => [245, 245, 245],
            Color::Gray => [120, 120, 120],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Orange => "orange",
            Color::Purple => "purple",
            Color::White => "white",
            Color::Gray => "gray",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Round,
    Square,
    Triangle,
    Tile,
}

impl Category {
    pub fn word(self) -> &'static str {
        match self {
            Category::Can => "can",
            Category::Fruit => "fruit",
            Category::Block => "block",
            Category::Sponge => "sponge",
            Category::LetterTile => "tile",
            Category::Drawer => "drawer",
        }
    }
}

/// One registered object kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectKind {
    pub kind: String,
    /// Human name used in instructions, e.g. "coke can".
    pub name: String,
    pub category: Category,
    pub color: Color,
    pub shape: Shape,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Scalar attributes, e.g. sourness ranks for superlative references.
    #[serde(default)]
    pub scalars: BTreeMap<String, i32>,
    /// Letter-tile glyph, when the kind is a tile.
    #[serde(default)]
    pub glyph: Option<char>,
    /// Reserved for the benchmark; never sampled into training scenes.
    #[serde(default)]
    pub held_out: bool,
}

impl ObjectKind {
    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributeRegistry {
    pub kinds: Vec<ObjectKind>,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("unknown object kind: {0}")]
    UnknownKind(String),
    #[error("failed to parse registry: {0}")]
    Parse(String),
}

impl AttributeRegistry {
    /// The built-in registry shipped with the crate.
    pub fn builtin() -> Self {
        toml::from_str(include_str!("../assets/registry.toml"))
            .expect("builtin registry must parse")
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RegistryError::Parse(e.to_string()))?;
        toml::from_str(&text).map_err(|e| RegistryError::Parse(e.to_string()))
    }

    pub fn get(&self, kind: &str) -> Result<&ObjectKind, RegistryError> {
        self.kinds
            .iter()
            .find(|k| k.kind == kind)
            .ok_or_else(|| RegistryError::UnknownKind(kind.to_string()))
    }

    pub fn training_kinds(&self) -> impl Iterator<Item = &ObjectKind> {
        self.kinds.iter().filter(|k| !k.held_out)
    }

    /// Every word the registry can contribute to instructions; fed to the
    /// tokenizer so held-out names are in-vocabulary (their embeddings stay
    /// untrained unless seen in a corpus).
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        for k in &self.kinds {
            words.extend(k.name.split_whitespace().map(|s| s.to_string()));
            words.push(k.category.word().to_string());
            words.push(k.color.word().to_string());
            for t in &k.tags {
                words.extend(t.split('_').map(|s| s.to_string()));
            }
        }
        words.sort();
        words.dedup();
        words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_registry_parses_and_is_closed() {
        let reg = AttributeRegistry::builtin();
        assert!(reg.kinds.len() >= 10);
        assert!(reg.get("lemon").is_ok());
        assert!(reg.get("unobtanium").is_err());
        // Unique kind keys.
        let mut keys: Vec<_> = reg.kinds.iter().map(|k| &k.kind).collect();
        keys.sort();
        let n = keys.len();
        keys.dedup();
        assert_eq!(n, keys.len());
        // Superlative resolution target exists.
        let lemon = reg.get("lemon").unwrap();
        assert!(lemon.scalars.get("sourness").copied().unwrap_or(0) > 0);
        // Held-out kinds exist for the benchmark.
        assert!(reg.kinds.iter().any(|k| k.held_out));
    }
}
