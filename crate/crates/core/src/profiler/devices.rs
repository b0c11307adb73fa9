//! Target device table.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::assets;

pub const DEFAULT_MACS_PER_CYCLE: f64 = 0.5;
pub const DEFAULT_JOULES_PER_MAC: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub clock_hz: u64,
    pub flash_bytes: u64,
    pub ram_bytes: u64,
    #[serde(default = "default_mpc")]
    pub macs_per_cycle: f64,
    #[serde(default = "default_jpm")]
    pub joules_per_mac: f64,
    /// Where the numbers come from: "reference", "datasheet" or "repo default".
    #[serde(default)]
    pub source: String,
}

fn default_mpc() -> f64 {
    DEFAULT_MACS_PER_CYCLE
}

fn default_jpm() -> f64 {
    DEFAULT_JOULES_PER_MAC
}

#[derive(Debug, Clone, Deserialize)]
struct Entry {
    #[serde(flatten)]
    spec: DeviceSpec,
    #[serde(default)]
    aliases: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct Table {
    default: String,
    generic: DeviceSpec,
    devices: Vec<Entry>,
}

fn table() -> &'static Table {
    static TABLE: OnceLock<Table> = OnceLock::new();
    TABLE.get_or_init(|| serde_json::from_str(assets::DEVICES_JSON).expect("devices.json is valid"))
}

fn key(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

pub fn known_devices() -> Vec<DeviceSpec> {
    table().devices.iter().map(|e| e.spec.clone()).collect()
}

pub fn generic_device() -> DeviceSpec {
    table().generic.clone()
}

pub fn default_device() -> DeviceSpec {
    lookup_device(&table().default).0
}

/// Case-insensitive lookup by name or alias, then by substring. Unknown names
/// give the generic device and a warning.
pub fn lookup_device(name: &str) -> (DeviceSpec, Option<String>) {
    let q = key(name);
    let t = table();
    let names = |e: &Entry| -> Vec<String> {
        std::iter::once(&e.spec.name)
            .chain(e.aliases.iter())
            .map(|n| key(n))
            .collect()
    };
    if !q.is_empty() {
        if let Some(e) = t.devices.iter().find(|e| names(e).contains(&q)) {
            return (e.spec.clone(), None);
        }
        let mut best: Option<(usize, &Entry)> = None;
        for e in &t.devices {
            for n in names(e) {
                let hit = (n.len() >= 3 && q.contains(&n)) || (q.len() >= 3 && n.contains(&q));
                if hit && best.is_none_or(|(len, _)| n.len() > len) {
                    best = Some((n.len(), e));
                }
            }
        }
        if let Some((_, e)) = best {
            return (e.spec.clone(), None);
        }
    }
    let warning = format!(
        "unknown device {name:?}; using {} ({} Hz, {} B flash, {} B RAM)",
        t.generic.name, t.generic.clock_hz, t.generic.flash_bytes, t.generic.ram_bytes
    );
    (t.generic.clone(), Some(warning))
}
