//! Tokenization, a small configurable autoregressive transformer, and the
//! loss/decoding surface shared by every other module.

pub mod loss;
pub mod model;
pub mod vocab;

use serde::{Deserialize, Serialize};

pub use loss::{
    conditional_nll, doc_ids, greedy_decode, mean_nll, per_token_nll, prefix_distributions,
    prefix_logits, qa_ids, weighted_nll,
};
pub use model::{forward_hidden, forward_logits, init_params, LmConfig};
pub use vocab::{detokenize, tokenize, tokenize_with_categories, Vocabulary};

/// Ground-truth token categories on synthetic data; a coarse stand-in for
/// part of speech.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "ENTITY")]
    Entity,
    #[serde(rename = "RELATION")]
    Relation,
    #[serde(rename = "VALUE")]
    Value,
    #[serde(rename = "FILLER")]
    Filler,
    #[serde(rename = "NUM")]
    Num,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Entity => "ENTITY",
            Category::Relation => "RELATION",
            Category::Value => "VALUE",
            Category::Filler => "FILLER",
            Category::Num => "NUM",
        }
    }
}

/// Token ids with optional per-token category labels and word indices
/// (the whitespace-word each token came from).
#[derive(Clone, Debug, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub categories: Option<Vec<Category>>,
    pub word_index: Option<Vec<usize>>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>) -> TokenSequence {
        TokenSequence {
            ids,
            categories: None,
            word_index: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of predicted positions when the sequence is scored as a
    /// document (`BOS` prepended): one per token.
    pub fn predicted_positions(&self) -> usize {
        self.ids.len()
    }
}
