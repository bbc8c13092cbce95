//! Checkpoint serialization: a plain-text manifest header followed by the
//! raw little-endian float64 array payload. The embedded config makes a
//! checkpoint self-describing, so a run can resume from the file alone.
//!
//! Layout:
//! ```text
//! vqssl-ckpt v1
//! step=<n>
//! epoch=<n>
//! config_hash=<hex>
//! ppl=<c>,<m>,<f>
//! cfg.<key>=<value>        (one line per config key)
//! array=<name>|<dims csv>|<offset>|<len>
//! payload_bytes=<n>
//! checksum=<fnv1a64 hex of payload>
//! ==payload==
//! <raw bytes>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::TrainConfig;
use crate::encoder::ParamStore;
use crate::error::{Error, Result};
use crate::rng::fnv1a64;
use crate::trainer::{AuxParams, TrainState};
use crate::vq::Codebook;

pub const CHECKPOINT_MAGIC: &str = "vqssl-ckpt v1";
const PAYLOAD_MARKER: &str = "==payload==";

struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn push_store(prefix: &str, store: &ParamStore, arrays: &mut Vec<ArrayEntry>, payload: &mut Vec<u8>) {
    for p in &store.params {
        push_array(&format!("{prefix}/{}", p.name), &p.shape, &p.data, arrays, payload);
    }
}

fn push_array(name: &str, shape: &[usize], data: &[f64], arrays: &mut Vec<ArrayEntry>, payload: &mut Vec<u8>) {
    let offset = payload.len();
    for &v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    arrays.push(ArrayEntry {
        name: name.to_string(),
        shape: shape.to_vec(),
        offset,
        len: data.len(),
    });
}

fn push_codebook(tag: &str, book: &Codebook, arrays: &mut Vec<ArrayEntry>, payload: &mut Vec<u8>) {
    push_array(&format!("codebook_{tag}/entries"), &[book.n, book.d], &book.entries, arrays, payload);
    push_array(&format!("codebook_{tag}/ema_count"), &[book.n], &book.ema_count, arrays, payload);
    push_array(&format!("codebook_{tag}/ema_sum"), &[book.n, book.d], &book.ema_sum, arrays, payload);
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    push_store("theta", &state.theta, &mut arrays, &mut payload);
    push_store("phi", &state.phi, &mut arrays, &mut payload);
    push_store("aux", &state.aux.to_store(), &mut arrays, &mut payload);
    push_store("vel_theta", &state.vel_theta, &mut arrays, &mut payload);
    push_store("vel_aux", &state.vel_aux, &mut arrays, &mut payload);
    for (tag, book) in ["c", "m", "f"].iter().zip(&state.codebooks) {
        push_codebook(tag, book, &mut arrays, &mut payload);
    }

    let mut header = String::new();
    header += CHECKPOINT_MAGIC;
    header.push('\n');
    header += &format!("step={}\n", state.step);
    header += &format!("epoch={}\n", state.epoch);
    header += &format!("config_hash={:016x}\n", state.config.hash());
    header += &format!("ppl={},{},{}\n", state.last_ppl[0], state.last_ppl[1], state.last_ppl[2]);
    for line in state.config.to_text().lines() {
        header += &format!("cfg.{line}\n");
    }
    for a in &arrays {
        let dims: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
        header += &format!("array={}|{}|{}|{}\n", a.name, dims.join(","), a.offset, a.len);
    }
    header += &format!("payload_bytes={}\n", payload.len());
    header += &format!("checksum={:016x}\n", fnv1a64(&payload));
    header += PAYLOAD_MARKER;
    header.push('\n');

    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(&payload))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct RawCheckpoint {
    step: usize,
    epoch: usize,
    ppl: [f64; 3],
    config: TrainConfig,
    arrays: Vec<ArrayEntry>,
    payload: Vec<u8>,
}

fn parse_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let marker = format!("{PAYLOAD_MARKER}\n");
    let split = find_subsequence(&bytes, marker.as_bytes())
        .ok_or_else(|| Error::CheckpointCorrupt("missing payload marker".into()))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::CheckpointCorrupt("header is not utf-8".into()))?;
    let payload = bytes[split + marker.len()..].to_vec();

    let mut lines = header.lines();
    let magic = lines.next().unwrap_or("");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointVersion {
            found: magic.to_string(),
            expected: CHECKPOINT_MAGIC.to_string(),
        });
    }
    let mut step = None;
    let mut epoch = None;
    let mut ppl = [0.0; 3];
    let mut cfg_text = String::new();
    let mut arrays = Vec::new();
    let mut payload_bytes = None;
    let mut checksum = None;
    for line in lines {
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::CheckpointCorrupt(format!("bad header line: {line}")));
        };
        match key {
            "step" => step = value.parse().ok(),
            "epoch" => epoch = value.parse().ok(),
            "config_hash" => {}
            "ppl" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() == 3 {
                    for (slot, part) in ppl.iter_mut().zip(&parts) {
                        *slot = part.parse().map_err(|_| {
                            Error::CheckpointCorrupt(format!("bad ppl value: {part}"))
                        })?;
                    }
                }
            }
            k if k.starts_with("cfg.") => {
                cfg_text += &format!("{}={}\n", &k[4..], value);
            }
            "array" => {
                let parts: Vec<&str> = value.split('|').collect();
                if parts.len() != 4 {
                    return Err(Error::CheckpointCorrupt(format!("bad array line: {line}")));
                }
                let shape: Vec<usize> = if parts[1].is_empty() {
                    Vec::new()
                } else {
                    parts[1]
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::CheckpointCorrupt(format!("bad shape: {line}")))?
                };
                arrays.push(ArrayEntry {
                    name: parts[0].to_string(),
                    shape,
                    offset: parts[2]
                        .parse()
                        .map_err(|_| Error::CheckpointCorrupt("bad offset".into()))?,
                    len: parts[3]
                        .parse()
                        .map_err(|_| Error::CheckpointCorrupt("bad len".into()))?,
                });
            }
            "payload_bytes" => payload_bytes = value.parse::<usize>().ok(),
            "checksum" => checksum = u64::from_str_radix(value, 16).ok(),
            other => return Err(Error::CheckpointCorrupt(format!("unknown header key `{other}`"))),
        }
    }
    let expected_bytes =
        payload_bytes.ok_or_else(|| Error::CheckpointCorrupt("missing payload_bytes".into()))?;
    if payload.len() != expected_bytes {
        return Err(Error::CheckpointCorrupt(format!(
            "truncated payload: expected {expected_bytes} bytes, found {}",
            payload.len()
        )));
    }
    let expected_sum = checksum.ok_or_else(|| Error::CheckpointCorrupt("missing checksum".into()))?;
    let actual = fnv1a64(&payload);
    if actual != expected_sum {
        return Err(Error::CheckpointCorrupt(format!(
            "checksum mismatch: header {expected_sum:016x}, payload {actual:016x}"
        )));
    }
    let config = TrainConfig::parse(&cfg_text)?;
    Ok(RawCheckpoint {
        step: step.ok_or_else(|| Error::CheckpointCorrupt("missing step".into()))?,
        epoch: epoch.ok_or_else(|| Error::CheckpointCorrupt("missing epoch".into()))?,
        ppl,
        config,
        arrays,
        payload,
    })
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn read_array(raw: &RawCheckpoint, entry: &ArrayEntry) -> Result<Vec<f64>> {
    let start = entry.offset;
    let end = start + entry.len * 8;
    if end > raw.payload.len() {
        return Err(Error::CheckpointCorrupt(format!("array {} out of bounds", entry.name)));
    }
    Ok(raw.payload[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn collect_store(raw: &RawCheckpoint, prefix: &str) -> Result<ParamStore> {
    let mut store = ParamStore::default();
    let pat = format!("{prefix}/");
    for entry in raw.arrays.iter().filter(|a| a.name.starts_with(&pat)) {
        let name = &entry.name[pat.len()..];
        let data = read_array(raw, entry)?;
        store.push(name, entry.shape.clone(), data);
    }
    if store.params.is_empty() {
        return Err(Error::CheckpointCorrupt(format!("no arrays under `{prefix}/`")));
    }
    Ok(store)
}

fn collect_codebook(raw: &RawCheckpoint, tag: &str, n: usize, d: usize) -> Result<Codebook> {
    let cfg = &raw.config.vq;
    let mut entries = None;
    let mut ema_count = None;
    let mut ema_sum = None;
    let prefix = format!("codebook_{tag}/");
    for entry in raw.arrays.iter().filter(|a| a.name.starts_with(&prefix)) {
        let data = read_array(raw, entry)?;
        match &entry.name[prefix.len()..] {
            "entries" => entries = Some(data),
            "ema_count" => ema_count = Some(data),
            "ema_sum" => ema_sum = Some(data),
            other => {
                return Err(Error::CheckpointCorrupt(format!("unknown codebook field `{other}`")))
            }
        }
    }
    let entries =
        entries.ok_or_else(|| Error::CheckpointCorrupt(format!("codebook {tag} missing entries")))?;
    if entries.len() != n * d {
        return Err(Error::CheckpointCorrupt(format!(
            "codebook {tag}: expected {}x{d} entries, found {}",
            n,
            entries.len()
        )));
    }
    Ok(Codebook {
        n,
        d,
        entries,
        decay: cfg.decay,
        epsilon: cfg.epsilon,
        mode: cfg.mode,
        ema_count: ema_count
            .ok_or_else(|| Error::CheckpointCorrupt(format!("codebook {tag} missing ema_count")))?,
        ema_sum: ema_sum
            .ok_or_else(|| Error::CheckpointCorrupt(format!("codebook {tag} missing ema_sum")))?,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let raw = parse_checkpoint(path)?;
    let config = raw.config.clone();
    let theta = collect_store(&raw, "theta")?;
    let phi = collect_store(&raw, "phi")?;
    theta.congruent_with(&phi)?;
    let aux_store = collect_store(&raw, "aux")?;
    let mut aux = AuxParams::init(&config);
    aux.load_store(&aux_store)?;
    let vel_theta = collect_store(&raw, "vel_theta")?;
    let vel_aux = collect_store(&raw, "vel_aux")?;
    theta.congruent_with(&vel_theta)?;
    let d = config.encoder.embed_dim;
    let codebooks = [
        collect_codebook(&raw, "c", config.vq.entries[0], d)?,
        collect_codebook(&raw, "m", config.vq.entries[1], d)?,
        collect_codebook(&raw, "f", config.vq.entries[2], d)?,
    ];
    Ok(TrainState {
        config,
        theta,
        phi,
        aux,
        codebooks,
        vel_theta,
        vel_aux,
        step: raw.step,
        epoch: raw.epoch,
        last_ppl: raw.ppl,
    })
}

/// Manifest fields of a checkpoint without loading arrays into a state.
pub struct CheckpointSummary {
    pub step: usize,
    pub epoch: usize,
    pub config_hash: u64,
    pub ppl: [f64; 3],
    pub arrays: Vec<(String, Vec<usize>)>,
    pub payload_bytes: usize,
    pub config_text: String,
}

pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointSummary> {
    let raw = parse_checkpoint(path)?;
    Ok(CheckpointSummary {
        step: raw.step,
        epoch: raw.epoch,
        config_hash: raw.config.hash(),
        ppl: raw.ppl,
        arrays: raw.arrays.iter().map(|a| (a.name.clone(), a.shape.clone())).collect(),
        payload_bytes: raw.payload.len(),
        config_text: raw.config.to_text(),
    })
}

/// The payload region of a checkpoint file, for byte-identity checks.
pub fn payload_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = parse_checkpoint(path)?;
    Ok(raw.payload)
}
