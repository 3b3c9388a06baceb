//! Identifier newtypes.
//!
//! Unit identifiers are minted by the engine from per-session counters, so a
//! replayed session reproduces the same ids as the live one.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(value: impl Into<String>) -> Self {
                Self(value.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(value: &str) -> Self {
                Self(value.to_owned())
            }
        }
    };
}

id_type!(SessionId);
id_type!(DocumentId);
id_type!(QuestionId);
id_type!(ChunkId);
id_type!(
    /// Open code identifier (`code-N`).
    CodeId
);
id_type!(SubthemeId);
id_type!(ThemeId);
id_type!(MemoId);
id_type!(PromptId);
id_type!(VersionId);

/// Per-session counters used to mint hierarchy unit identifiers. Memo,
/// prompt and version ids are positional, since those lists only grow.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdCounters {
    pub chunk: u64,
    pub code: u64,
    pub subtheme: u64,
    pub theme: u64,
}

impl IdCounters {
    pub fn next_chunk(&mut self) -> ChunkId {
        self.chunk += 1;
        ChunkId(format!("chunk-{}", self.chunk))
    }

    pub fn next_code(&mut self) -> CodeId {
        self.code += 1;
        CodeId(format!("code-{}", self.code))
    }

    pub fn next_subtheme(&mut self) -> SubthemeId {
        self.subtheme += 1;
        SubthemeId(format!("subtheme-{}", self.subtheme))
    }

    pub fn next_theme(&mut self) -> ThemeId {
        self.theme += 1;
        ThemeId(format!("theme-{}", self.theme))
    }
}
