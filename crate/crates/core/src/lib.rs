//! Concept extraction, normalization and agreement for mathematical text.
//!
//! The guide in `book/` walks through the modules; its code blocks run as
//! doctests of this crate.

pub mod agreement;
pub mod annotation;
pub mod concepts;
pub mod corpus;
pub mod gateway;
pub mod pipeline;
pub mod prompting;
pub mod store;

// Each chapter is its own module so a failing snippet names its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/normalizing.md")]
    mod normalizing {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/prompting.md")]
    mod prompting {}
    #[doc = include_str!("../../../book/src/extraction.md")]
    mod extraction {}
    #[doc = include_str!("../../../book/src/agreement.md")]
    mod agreement {}
    #[doc = include_str!("../../../book/src/adjudication.md")]
    mod adjudication {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
