//! Desk-scale substrate: a synthetic two-attribute review grammar, its
//! rule-based attribute oracle, and denoiser training.

mod corpus;
mod grammar;
mod train;

pub use corpus::{
    gen_corpus, make_references, oracle_classify, read_corpus, write_corpus, LabeledSeq, Oracle,
    Verdict,
};
pub use grammar::{Attribute, Grammar, Piece, Template, DEFAULT_GRAMMAR};
pub use train::{
    batch_loss_and_grad, example_loss_and_grad, gradient_check, train_denoiser, train_on_grammar,
    MaskedExample, TrainConfig, TrainOutput, DEFAULT_CORPUS_SIZE,
};
