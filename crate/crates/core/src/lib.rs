//! Dynamic modular networks for grid-world question answering.
//!
//! A layout policy reads a question and emits a postfix program over a
//! fixed module inventory. The program is assembled into a network of
//! attention modules and executed over a scene's feature map. The policy is
//! trained by cloning expert layouts, then by REINFORCE on the answer loss.

pub mod answer;
pub mod dataset;
pub mod error;
pub mod executor;
pub mod layout;
pub mod model;
pub mod modules;
pub mod policy;
pub mod questions;
pub mod scene;
pub mod trainer;

pub use answer::{Answer, ANSWER_VOCAB_SIZE};
pub use error::{Error, Result};
