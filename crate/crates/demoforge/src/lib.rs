//! demoforge: demonstration-collection service around the deterministic
//! `demoforge-core` world.
//!
//! - [`catalog`]: robot and scene documents, scene digests.
//! - [`store`]: episode persistence, validation, replay, export, media and annotations.
//! - [`service`]: HTTP API, WebSocket streaming and the per-session real-time loop.
//! - [`client`]: headless scripted client, latency probe and stream observer.
//! - [`script`], [`config`]: command schedules and service configuration.

pub mod catalog;
pub mod client;
pub mod config;
pub mod script;
pub mod service;
pub mod store;

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Wall-clock UTC milliseconds, used only for `created_at` metadata.
pub fn now_ms() -> i64 {
    chrono::Utc::now().timestamp_millis()
}
