//! Reinforcement-learning fine-tuning of a conditional diffusion image
//! generator with comparative multi-reward feedback, on procedurally
//! generated chest phantoms.

pub mod numcore;

mod fsio;
pub mod phantom;
pub mod textcond;
pub mod diffusion;
pub mod rewards;
pub mod evalkit;
pub mod rlcf;
pub mod cli;
