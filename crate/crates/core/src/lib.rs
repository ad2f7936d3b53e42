//! Score-based black-box attack that models block-wise loss differences with
//! a Gaussian process and picks blocks by expected improvement, refining the
//! block grid from coarse to fine.

pub mod acquisition;
pub mod attack;
pub mod bandit;
pub mod error;
pub mod gp;
pub mod image;
pub mod oracle;

pub use attack::{
    hierarchical_attack, hierarchical_diff, hierarchical_flip, AttackConfig, AttackMode,
    AttackResult, Selection,
};
pub use error::{Error, Result};
pub use image::{BlockGrid, BlockIndex, Image, Shape};
pub use oracle::{CountingOracle, LogitsModel, LogitsOracle, LossSpec};
