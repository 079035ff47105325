//! Emulated software-defined QKD network.
//!
//! The crate models a small quantum-key-distribution network under SDN
//! control: per-node key managers serve quantum keys to the SDN controller
//! and agents, which protect their XML control messages with selective
//! field encryption (one-time pad and/or AES-256-GCM) to keep key-material
//! consumption low. A deterministic scenario runner reproduces a 4-node
//! failover experiment at desk scale and emits monitoring/accounting data.

pub mod agent;
pub mod channel;
pub mod codec;
pub mod controller;
pub mod emulator;
pub mod kme;
pub mod scenario;
pub mod xml;

pub use codec::{CipherSuite, EncryptionLevel, EncryptionPolicy, KeyCost, PadLedger};
pub use kme::{KeyBlock, Kme, KmeHandle, PoolStatus, SaeIdentity, SaeRole};
pub use xml::{Element, XmlNode, XmlTree};
