//! Tokenization, word error rate, and the fusion language model.

pub mod lm;
pub mod tokenizer;
pub mod wer;

pub use lm::{lm_score, log_perplexity, train_lm, LanguageModel, LmConfig, LmState, LmTrainConfig};
pub use tokenizer::{train_wpm, TokenizerModel, BLANK, UNK};
pub use wer::{corpus_wer, edit_distance, wer, wer_str};
