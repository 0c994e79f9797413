//! Desk-scale vision-language-action stack.
//!
//! A synthetic 2.5-D tabletop world with a scripted expert feeds an
//! instruction-corpus generator; a small decoder-only VLM with latent action
//! queries and mixture-of-LoRA adaptation hands conditioning to a
//! flow-matching action expert; staged training recipes, a cached dual
//! frequency control loop and a held-out instruction benchmark close the
//! loop.

pub mod bench;
pub mod config;
pub mod corpus;
pub mod env;
pub mod expert;
pub mod infer;
pub mod moe;
pub mod nn;
pub mod recipes;
pub mod registry;
pub mod tensor;
pub mod vlm;
