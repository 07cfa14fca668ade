//! JSON-lines report records.
//!
//! Each line carries the deterministic `record`, its SHA-256 `digest`, and an
//! optional `timing` object that is excluded from the digest.

use std::io::Write as _;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// One report line. `record` must not contain wall-clock values.
pub fn line(command: &str, record: Value, wall_seconds: Option<f64>) -> String {
    let digest = sha256_hex(&serde_json::to_vec(&record).expect("json values serialize"));
    let mut out = json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "record": record,
        "digest": digest,
    });
    if let Some(s) = wall_seconds {
        out["timing"] = json!({ "wall_seconds": s });
    }
    serde_json::to_string(&out).expect("json values serialize")
}

/// Prints `line` and appends it to `path` when given.
pub fn emit(line: &str, path: Option<&Path>) -> std::io::Result<()> {
    println!("{line}");
    if let Some(p) = path {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}
