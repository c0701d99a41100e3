//! Open-set sequential diagnosis.
//!
//! A visit starts from base information; the engine scores it, decides
//! whether a known diagnosis or an unknown referral is confident enough, and
//! otherwise asks for the next examination the institution can perform.

pub mod backbone;
pub mod bench;
pub mod cohort;
pub mod domain;
pub mod error;
pub mod indicators;
pub mod labeler;
pub mod openmax;
pub mod pipeline;
pub mod policy;
pub mod seed;

pub use error::{Error, Result};
