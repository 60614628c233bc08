//! Countermeasure toolkit for crypto terminals: bijective-MAC remote
//! attestation, duplicated code-shard analysis, SRAM PUF fingerprinting,
//! wallet key-leak attacks and a simulated secure element.

pub mod bmac;
pub mod devsim;
pub mod numlib;
pub mod pufsim;
pub mod scard;
pub mod shardlib;
pub mod walletsec;
