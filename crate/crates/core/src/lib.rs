//! Workflow engine for LLM-assisted thematic analysis.
//!
//! A session moves raw documents through four model-assisted stages (open
//! codes, subthemes, themes, key findings). Every stage output is checked
//! against the source text, every change is recorded in a digest-chained
//! audit trail, and a saved version can be exported as a codebook.

pub mod audit;
pub mod chain;
pub mod clock;
pub mod codebook;
pub mod digest;
pub mod engine;
pub mod error;
pub mod gateway;
pub mod hierarchy;
pub mod ids;
pub mod model;
pub mod store;
pub mod theme_map;
pub mod validation;

pub use chain::StageParameters;
pub use clock::{Clock, SteppingClock, SystemClock, Timestamp};
pub use engine::{Engine, Reservation, StageRun};
pub use error::{Error, Result};
pub use gateway::{Gateway, ProviderConfig};
pub use model::{AnalysisSession, ResearchQuestion, SourceDocument, Stage};
