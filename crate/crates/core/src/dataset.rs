//! On-disk dataset format: a manifest, per-frame JSON, and binary point files.
//!
//! Layout:
//! ```text
//! out/
//!   manifest.json            scenario kind, seeds, agent metadata, checksums
//!   frame_000000/
//!     frame.json             poses, boxes, agent specs
//!     agent_00.bin           magic "HPLC", u32 LE point count, then
//!     ...                    4 x f32 LE per point (x, y, z, intensity)
//! ```
//! Reads re-hash every file against the manifest; any mismatch or truncation
//! is a corrupt-dataset error.

use crate::error::{Error, Result};
use crate::scenario::{
    sample_world, simulate_lidar, frame_seed, PointCloud, ScenarioConfig, ScenarioKind, WorldFrame,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const POINT_FILE_MAGIC: &[u8; 4] = b"HPLC";

/// One simulated frame: the world plus a cloud per agent (same order).
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub world: WorldFrame,
    pub clouds: Vec<PointCloud>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentMeta {
    pub agent_id: u32,
    pub lidar: String,
    pub frequency_hz: u32,
    pub is_ego: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEntry {
    pub dir: String,
    pub frame_seed: u64,
    pub agents: Vec<AgentMeta>,
    /// file name -> sha256 hex of its contents
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario_kind: ScenarioKind,
    pub seed: u64,
    pub frame_count: usize,
    pub frames: Vec<FrameEntry>,
}

fn sha256_hex(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.points.len() * 16);
    out.extend_from_slice(POINT_FILE_MAGIC);
    out.extend_from_slice(&(cloud.points.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for &v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(data: &[u8]) -> Result<PointCloud> {
    if data.len() < 8 || &data[0..4] != POINT_FILE_MAGIC {
        return Err(Error::CorruptDataset("bad point file header".into()));
    }
    let count = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    if data.len() != 8 + count * 16 {
        return Err(Error::CorruptDataset(format!(
            "point file length {} does not match count {count}",
            data.len()
        )));
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let base = 8 + i * 16;
        let mut p = [0f32; 4];
        for (j, v) in p.iter_mut().enumerate() {
            *v = f32::from_le_bytes(data[base + 4 * j..base + 4 * j + 4].try_into().unwrap());
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

/// Simulate `n_frames` reproducible frames for a scenario configuration.
pub fn generate_frames(config: &ScenarioConfig, n_frames: usize, base_seed: u64) -> Result<Vec<FrameRecord>> {
    let mut records: Vec<Result<FrameRecord>> = Vec::with_capacity(n_frames);
    (0..n_frames)
        .into_par_iter()
        .map(|idx| {
            let seed = frame_seed(base_seed, idx as u64);
            let mut world = sample_world(config, seed)?;
            world.frame_id = idx as u64;
            let clouds = world
                .agents
                .iter()
                .map(|a| simulate_lidar(&world, a))
                .collect::<Result<Vec<_>>>()?;
            Ok(FrameRecord { world, clouds })
        })
        .collect_into_vec(&mut records);
    records.into_iter().collect()
}

/// Write frames and clouds under `path`, returning the manifest.
pub fn write_dataset(
    frames: &[FrameRecord],
    scenario_kind: ScenarioKind,
    seed: u64,
    path: &Path,
) -> Result<Manifest> {
    std::fs::create_dir_all(path)?;
    let mut entries = Vec::with_capacity(frames.len());
    for (idx, rec) in frames.iter().enumerate() {
        let dir_name = format!("frame_{idx:06}");
        let dir = path.join(&dir_name);
        std::fs::create_dir_all(&dir)?;
        let mut checksums = BTreeMap::new();

        let frame_json = serde_json::to_vec_pretty(&rec.world)?;
        std::fs::File::create(dir.join("frame.json"))?.write_all(&frame_json)?;
        checksums.insert("frame.json".to_string(), sha256_hex(&frame_json));

        for (ai, cloud) in rec.clouds.iter().enumerate() {
            let bin = encode_cloud(cloud);
            let name = format!("agent_{ai:02}.bin");
            std::fs::File::create(dir.join(&name))?.write_all(&bin)?;
            checksums.insert(name, sha256_hex(&bin));
        }

        entries.push(FrameEntry {
            dir: dir_name,
            frame_seed: rec.world.rng_seed,
            agents: rec
                .world
                .agents
                .iter()
                .map(|a| AgentMeta {
                    agent_id: a.agent_id,
                    lidar: a.lidar.kind.name().to_string(),
                    frequency_hz: a.frequency_hz,
                    is_ego: a.is_ego,
                })
                .collect(),
            checksums,
        });
    }
    let manifest = Manifest {
        scenario_kind,
        seed,
        frame_count: frames.len(),
        frames: entries,
    };
    let manifest_json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::File::create(path.join("manifest.json"))?.write_all(&manifest_json)?;
    Ok(manifest)
}

/// Read a dataset back, verifying every checksum recorded in the manifest.
pub fn read_dataset(path: &Path) -> Result<(Manifest, Vec<FrameRecord>)> {
    let manifest_path = path.join("manifest.json");
    let mut buf = Vec::new();
    std::fs::File::open(&manifest_path)
        .map_err(|e| Error::CorruptDataset(format!("missing manifest: {e}")))?
        .read_to_end(&mut buf)?;
    let manifest: Manifest =
        serde_json::from_slice(&buf).map_err(|e| Error::CorruptDataset(format!("bad manifest: {e}")))?;

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for entry in &manifest.frames {
        let dir = path.join(&entry.dir);
        let read_checked = |name: &str| -> Result<Vec<u8>> {
            let mut data = Vec::new();
            std::fs::File::open(dir.join(name))
                .map_err(|e| Error::CorruptDataset(format!("{}/{name}: {e}", entry.dir)))?
                .read_to_end(&mut data)?;
            let expect = entry.checksums.get(name).ok_or_else(|| {
                Error::CorruptDataset(format!("{}/{name} not in manifest", entry.dir))
            })?;
            let got = sha256_hex(&data);
            if &got != expect {
                return Err(Error::CorruptDataset(format!(
                    "checksum mismatch for {}/{name}",
                    entry.dir
                )));
            }
            Ok(data)
        };

        let world: WorldFrame = serde_json::from_slice(&read_checked("frame.json")?)
            .map_err(|e| Error::CorruptDataset(format!("bad frame.json: {e}")))?;
        let mut clouds = Vec::with_capacity(world.agents.len());
        for ai in 0..world.agents.len() {
            let data = read_checked(&format!("agent_{ai:02}.bin"))?;
            clouds.push(decode_cloud(&data)?);
        }
        frames.push(FrameRecord { world, clouds });
    }
    Ok((manifest, frames))
}
