//! Synthetic multi-agent driving frames and analytic spinning-LiDAR simulation.
//!
//! Scenes are laid out on a lane lattice around the ego vehicle; spinning
//! LiDARs are modeled as an (elevation x azimuth) ray grid cast against
//! oriented object boxes and the ground plane. Everything is a pure function
//! of (config, seed), so frames and clouds are reproducible byte for byte.

use crate::error::{Error, Result};
use crate::evaluation::{rotated_iou, BevRect};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const BOX_INTENSITY: f32 = 1.0;
pub const GROUND_INTENSITY: f32 = 0.3;

/// Supported spinning-LiDAR models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LidarKind {
    Panda64,
    Hdl64,
    Vlp32,
    Vlp16,
}

impl LidarKind {
    pub const ALL: [LidarKind; 4] = [LidarKind::Panda64, LidarKind::Hdl64, LidarKind::Vlp32, LidarKind::Vlp16];

    pub fn nominal_beams(self) -> usize {
        match self {
            LidarKind::Panda64 | LidarKind::Hdl64 => 64,
            LidarKind::Vlp32 => 32,
            LidarKind::Vlp16 => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LidarKind::Panda64 => "Panda64",
            LidarKind::Hdl64 => "HDL64",
            LidarKind::Vlp32 => "VLP32",
            LidarKind::Vlp16 => "VLP16",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "panda64" => Ok(LidarKind::Panda64),
            "hdl64" => Ok(LidarKind::Hdl64),
            "vlp32" => Ok(LidarKind::Vlp32),
            "vlp16" => Ok(LidarKind::Vlp16),
            _ => Err(Error::config(format!("unknown LiDAR model '{s}'"))),
        }
    }
}

/// Velodyne VLP-32C style non-uniform elevation table (degrees).
const VLP32_ELEVATIONS: [f64; 32] = [
    -25.0, -15.639, -11.31, -8.843, -7.254, -6.148, -5.333, -4.667, -4.0, -3.667, -3.333, -3.0,
    -2.667, -2.333, -2.0, -1.667, -1.333, -1.0, -0.667, -0.333, 0.0, 0.333, 0.667, 1.0, 1.333,
    1.667, 2.333, 3.333, 4.667, 7.0, 10.333, 15.0,
];

/// A spinning LiDAR: beam table, azimuth resolution per rotation frequency,
/// range limit, and mount height above the vehicle origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LidarModel {
    pub kind: LidarKind,
    /// Beam elevations in degrees, strictly increasing.
    pub beam_elevations: Vec<f64>,
    /// Rotation frequency (Hz) -> azimuth increment (degrees).
    pub azimuth_step_by_freq: BTreeMap<u32, f64>,
    pub max_range: f64,
    pub mount_height: f64,
}

impl LidarModel {
    /// Nominal datasheet-style model; azimuth steps scale with spin rate.
    pub fn standard(kind: LidarKind) -> Self {
        Self::with_azimuth_step(kind, 0.2)
    }

    /// Nominal beam table with a custom 10 Hz azimuth step (20 Hz doubles it).
    pub fn with_azimuth_step(kind: LidarKind, step_10hz: f64) -> Self {
        let beam_elevations = match kind {
            LidarKind::Vlp16 => (0..16).map(|i| -15.0 + 2.0 * i as f64).collect(),
            LidarKind::Vlp32 => VLP32_ELEVATIONS.to_vec(),
            LidarKind::Hdl64 => (0..64).map(|i| -24.8 + 26.8 * i as f64 / 63.0).collect(),
            LidarKind::Panda64 => (0..64).map(|i| -25.0 + 40.0 * i as f64 / 63.0).collect(),
        };
        let max_range = match kind {
            LidarKind::Panda64 | LidarKind::Vlp32 => 200.0,
            LidarKind::Hdl64 => 120.0,
            LidarKind::Vlp16 => 100.0,
        };
        let mut azimuth_step_by_freq = BTreeMap::new();
        azimuth_step_by_freq.insert(10, step_10hz);
        azimuth_step_by_freq.insert(20, step_10hz * 2.0);
        Self { kind, beam_elevations, azimuth_step_by_freq, max_range, mount_height: 1.73 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_elevations.len() != self.kind.nominal_beams() {
            return Err(Error::config(format!(
                "{} expects {} beams, got {}",
                self.kind.name(),
                self.kind.nominal_beams(),
                self.beam_elevations.len()
            )));
        }
        for w in self.beam_elevations.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::config("beam elevations must be strictly increasing"));
            }
        }
        if self
            .beam_elevations
            .iter()
            .any(|&e| e <= -90.0 || e >= 90.0)
        {
            return Err(Error::config("beam elevations must lie in (-90, 90) degrees"));
        }
        if self.max_range <= 0.0 {
            return Err(Error::config("max_range must be positive"));
        }
        let s10 = self.azimuth_step_by_freq.get(&10);
        let s20 = self.azimuth_step_by_freq.get(&20);
        match (s10, s20) {
            (Some(&a), Some(&b)) => {
                if (b - 2.0 * a).abs() > 1e-9 {
                    return Err(Error::config(
                        "azimuth step at 20 Hz must be twice the 10 Hz step",
                    ));
                }
            }
            _ => return Err(Error::config("azimuth_step_by_freq must cover 10 and 20 Hz")),
        }
        Ok(())
    }

    /// Azimuth samples (degrees) for a frequency. The 20 Hz grid is the
    /// stride-2 subsample of the 10 Hz grid, so per-ring sample counts obey
    /// `count_20 = ceil(count_10 / 2)` exactly.
    pub fn azimuths(&self, freq_hz: u32) -> Result<Vec<f64>> {
        let step10 = *self
            .azimuth_step_by_freq
            .get(&10)
            .ok_or_else(|| Error::config("missing 10 Hz azimuth step"))?;
        let n10 = (360.0 / step10).floor() as usize;
        let base = (0..n10).map(|k| k as f64 * step10);
        match freq_hz {
            10 => Ok(base.collect()),
            20 => Ok(base.step_by(2).collect()),
            f => Err(Error::config(format!("unsupported rotation frequency {f} Hz"))),
        }
    }
}

/// Vehicle pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: u32,
    pub pose: Pose,
    pub lidar: LidarModel,
    pub frequency_hz: u32,
    pub is_ego: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObjectClass {
    Vehicle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: ObjectClass,
}

impl GroundTruthBox {
    pub fn bev(&self) -> BevRect {
        BevRect::new(self.center[0], self.center[1], self.size[0], self.size[1], self.yaw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("box sizes must be positive"));
        }
        if !(-std::f64::consts::PI..std::f64::consts::PI).contains(&self.yaw) {
            return Err(Error::config("box yaw must lie in [-pi, pi)"));
        }
        Ok(())
    }
}

/// Point cloud in the agent (sensor) frame, f32 to match the wire format.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f32; 4]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldFrame {
    pub frame_id: u64,
    pub agents: Vec<AgentSpec>,
    pub objects: Vec<GroundTruthBox>,
    pub rng_seed: u64,
}

impl WorldFrame {
    pub fn ego(&self) -> &AgentSpec {
        self.agents.iter().find(|a| a.is_ego).expect("frame has no ego agent")
    }

    pub fn validate(&self, comm_range: f64) -> Result<()> {
        let egos = self.agents.iter().filter(|a| a.is_ego).count();
        if egos != 1 {
            return Err(Error::config(format!("expected exactly one ego, found {egos}")));
        }
        for b in &self.objects {
            b.validate()?;
        }
        for i in 0..self.objects.len() {
            for j in i + 1..self.objects.len() {
                let iou = rotated_iou(&self.objects[i].bev(), &self.objects[j].bev())?;
                if iou > 0.05 {
                    return Err(Error::config(format!("objects {i} and {j} overlap (IoU {iou:.3})")));
                }
            }
        }
        if self.agents.len() > 1 {
            for a in &self.agents {
                let connected = self.agents.iter().any(|b| {
                    b.agent_id != a.agent_id
                        && ((b.pose.x - a.pose.x).powi(2) + (b.pose.y - a.pose.y).powi(2)).sqrt()
                            <= comm_range
                });
                if !connected {
                    return Err(Error::config(format!(
                        "agent {} is outside every other agent's range",
                        a.agent_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The three evaluation scenarios: homogeneous fleet, category-only
/// heterogeneity at a fixed 20 Hz, and full category + frequency heterogeneity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Normal,
    Hetero1,
    Hetero2,
}

impl ScenarioKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(ScenarioKind::Normal),
            "hetero1" => Ok(ScenarioKind::Hetero1),
            "hetero2" => Ok(ScenarioKind::Hetero2),
            _ => Err(Error::config(format!("unknown scenario kind '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Normal => "normal",
            ScenarioKind::Hetero1 => "hetero1",
            ScenarioKind::Hetero2 => "hetero2",
        }
    }
}

/// Scene layout and LiDAR assignment policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario_kind: ScenarioKind,
    pub n_agents: (usize, usize),
    pub n_objects: (usize, usize),
    /// Half-extent of the square map around the ego (meters).
    pub map_extent: f64,
    pub lane_spacing: f64,
    pub slot_spacing: f64,
    /// Communication / placement radius around the ego for collaborators.
    pub comm_range: f64,
    /// Override for the ego LiDAR, e.g. for ego-generalization sweeps.
    pub ego_override: Option<(LidarKind, u32)>,
    /// Fraction of collaborators forced to the ego's (Panda64, 20 Hz) setup;
    /// the rest draw from the scenario-kind distribution.
    pub same_ratio: Option<f64>,
    /// Base azimuth step at 10 Hz, degrees (doubled at 20 Hz).
    pub azimuth_step_10hz: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario_kind: ScenarioKind::Hetero2,
            n_agents: (2, 5),
            n_objects: (8, 20),
            map_extent: 28.8,
            lane_spacing: 7.2,
            slot_spacing: 7.0,
            comm_range: 30.0,
            ego_override: None,
            same_ratio: None,
            azimuth_step_10hz: 0.2,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents.0 < 1 || self.n_agents.0 > self.n_agents.1 {
            return Err(Error::config("agent count range must satisfy 1 <= min <= max"));
        }
        if self.n_objects.0 > self.n_objects.1 {
            return Err(Error::config("object count range must satisfy min <= max"));
        }
        if let Some(r) = self.same_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config("same_ratio must lie in [0, 1]"));
            }
        }
        if self.map_extent <= 0.0 || self.lane_spacing <= 0.0 || self.slot_spacing <= 0.0 {
            return Err(Error::config("map extents and spacings must be positive"));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic per-frame seed derived from a run seed and frame index.
pub fn frame_seed(base: u64, frame_idx: u64) -> u64 {
    splitmix64(base ^ frame_idx.wrapping_mul(0xA24B_AED4_963E_E407))
}

/// Candidate lattice position: lane direction, lane offset, slot along the lane.
fn lattice_position(rng: &mut ChaCha8Rng, extent: f64, lane_spacing: f64, slot_spacing: f64) -> (f64, f64, f64) {
    let horizontal = rng.gen_bool(0.5);
    let n_lanes = ((2.0 * extent / lane_spacing).floor() as i64).max(1);
    let lane = rng.gen_range(0..n_lanes) - n_lanes / 2;
    let lane_coord = lane as f64 * lane_spacing + rng.gen_range(-0.4..0.4);
    let n_slots = ((2.0 * extent / slot_spacing).floor() as i64).max(1);
    let slot = rng.gen_range(0..n_slots) - n_slots / 2;
    let slot_coord = slot as f64 * slot_spacing + rng.gen_range(-1.5..1.5);
    let dir = if rng.gen_bool(0.5) { 0.0 } else { std::f64::consts::PI };
    if horizontal {
        (slot_coord, lane_coord, dir)
    } else {
        (lane_coord, slot_coord, wrap_angle(dir + std::f64::consts::FRAC_PI_2))
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI);
    if x < 0.0 {
        x += 2.0 * std::f64::consts::PI;
    }
    x - std::f64::consts::PI
}

/// Sample one reproducible frame: ego at the origin, collaborators and objects
/// on the lane lattice, layout invariants enforced with bounded retries.
pub fn sample_world(config: &ScenarioConfig, seed: u64) -> Result<WorldFrame> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_agents = rng.gen_range(config.n_agents.0..=config.n_agents.1);
    let n_objects = rng.gen_range(config.n_objects.0..=config.n_objects.1);

    let placeholder = LidarModel::with_azimuth_step(LidarKind::Panda64, config.azimuth_step_10hz);
    let mut agents = vec![AgentSpec {
        agent_id: 0,
        pose: Pose { x: 0.0, y: 0.0, yaw: 0.0 },
        lidar: placeholder.clone(),
        frequency_hz: 20,
        is_ego: true,
    }];

    let max_tries = 200usize;
    for i in 1..n_agents {
        let mut placed = false;
        for _ in 0..max_tries {
            let (x, y, yaw) = lattice_position(&mut rng, config.map_extent, config.lane_spacing, config.slot_spacing);
            let r = (x * x + y * y).sqrt();
            if r < 6.0 || r > config.comm_range.min(config.map_extent) {
                continue;
            }
            if agents.iter().any(|a| ((a.pose.x - x).powi(2) + (a.pose.y - y).powi(2)).sqrt() < 5.0) {
                continue;
            }
            agents.push(AgentSpec {
                agent_id: i as u32,
                pose: Pose { x, y, yaw },
                lidar: placeholder.clone(),
                frequency_hz: 20,
                is_ego: false,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::SceneInfeasible(format!(
                "could not place collaborator {i} after {max_tries} tries"
            )));
        }
    }

    let mut objects: Vec<GroundTruthBox> = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let mut placed = false;
        for _ in 0..max_tries {
            let (x, y, dir) = lattice_position(&mut rng, config.map_extent, config.lane_spacing, config.slot_spacing);
            if x.abs() > config.map_extent || y.abs() > config.map_extent {
                continue;
            }
            let l = rng.gen_range(4.2..4.8);
            let w = rng.gen_range(1.8..2.1);
            let h = rng.gen_range(1.5..1.8);
            let yaw = wrap_angle(dir + rng.gen_range(-0.05..0.05));
            let cand = GroundTruthBox {
                center: [x, y, h / 2.0],
                size: [l, w, h],
                yaw,
                class: ObjectClass::Vehicle,
            };
            // keep sensors outside boxes and boxes essentially disjoint
            if agents
                .iter()
                .any(|a| ((a.pose.x - x).powi(2) + (a.pose.y - y).powi(2)).sqrt() < 4.0)
            {
                continue;
            }
            let mut ok = true;
            for existing in &objects {
                if rotated_iou(&existing.bev(), &cand.bev())? > 0.05 {
                    ok = false;
                    break;
                }
            }
            if !ok {
                continue;
            }
            objects.push(cand);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::SceneInfeasible(format!(
                "could not place object {i} after {max_tries} tries"
            )));
        }
    }

    let mut frame = WorldFrame { frame_id: 0, agents, objects, rng_seed: seed };
    assign_lidars(
        config.scenario_kind,
        &mut frame.agents,
        splitmix64(seed ^ 0x5EED_11DA_u64),
        config.ego_override,
        config.same_ratio,
        config.azimuth_step_10hz,
    )?;
    frame.validate(config.comm_range)?;
    Ok(frame)
}

/// Assign LiDAR category and rotation frequency per the scenario policy.
///
/// The ego always receives (Panda64, 20 Hz) unless `ego_override` is given.
/// `same_ratio`, when set, forces that fraction of collaborators to the ego
/// setup before sampling the remainder from the scenario distribution.
pub fn assign_lidars(
    scenario_kind: ScenarioKind,
    agents: &mut [AgentSpec],
    seed: u64,
    ego_override: Option<(LidarKind, u32)>,
    same_ratio: Option<f64>,
    azimuth_step_10hz: f64,
) -> Result<()> {
    if !agents.iter().any(|a| a.is_ego) {
        return Err(Error::config("assign_lidars requires an ego agent"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for agent in agents.iter_mut() {
        let (kind, freq) = if agent.is_ego {
            ego_override.unwrap_or((LidarKind::Panda64, 20))
        } else if same_ratio.map(|r| rng.gen_bool(r)).unwrap_or(false) {
            (LidarKind::Panda64, 20)
        } else {
            match scenario_kind {
                ScenarioKind::Normal => (LidarKind::Panda64, 20),
                ScenarioKind::Hetero1 => (LidarKind::ALL[rng.gen_range(0..4)], 20),
                ScenarioKind::Hetero2 => (
                    LidarKind::ALL[rng.gen_range(0..4)],
                    if rng.gen_bool(0.5) { 10 } else { 20 },
                ),
            }
        };
        agent.lidar = LidarModel::with_azimuth_step(kind, azimuth_step_10hz);
        agent.lidar.validate()?;
        agent.frequency_hz = freq;
        if !agent.lidar.azimuth_step_by_freq.contains_key(&freq) {
            return Err(Error::config(format!("frequency {freq} not in azimuth table")));
        }
    }
    Ok(())
}

/// Ray / oriented-box intersection: returns the entry distance if the ray hits.
fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &GroundTruthBox) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    let ox = origin[0] - b.center[0];
    let oy = origin[1] - b.center[1];
    let oz = origin[2] - b.center[2];
    // rotate into the box frame (inverse yaw)
    let lox = c * ox + s * oy;
    let loy = -s * ox + c * oy;
    let ldx = c * dir[0] + s * dir[1];
    let ldy = -s * dir[0] + c * dir[1];
    let half = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
    let o = [lox, loy, oz];
    let d = [ldx, ldy, dir[2]];
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for ax in 0..3 {
        if d[ax].abs() < 1e-12 {
            if o[ax].abs() > half[ax] {
                return None;
            }
            continue;
        }
        let t1 = (-half[ax] - o[ax]) / d[ax];
        let t2 = (half[ax] - o[ax]) / d[ax];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
        if t_enter > t_exit {
            return None;
        }
    }
    if t_enter > 1e-9 && t_enter <= t_exit {
        Some(t_enter)
    } else {
        None
    }
}

/// Cast the full beam grid of `agent`'s LiDAR against the scene.
///
/// Returns points in the agent (sensor) frame; each beam keeps only the
/// nearest intersection among object boxes and the ground plane z = 0, within
/// `max_range`. Box hits carry intensity 1.0, ground hits 0.3.
pub fn simulate_lidar(world: &WorldFrame, agent: &AgentSpec) -> Result<PointCloud> {
    if !world.agents.iter().any(|a| a.agent_id == agent.agent_id) {
        return Err(Error::config(format!("agent {} not part of the frame", agent.agent_id)));
    }
    agent.lidar.validate()?;
    let azimuths = agent.lidar.azimuths(agent.frequency_hz)?;
    let origin = [agent.pose.x, agent.pose.y, agent.lidar.mount_height];
    let (sy, cy) = agent.pose.yaw.sin_cos();
    let max_range = agent.lidar.max_range;

    let mut points = Vec::with_capacity(agent.lidar.beam_elevations.len() * azimuths.len() / 4);
    for &elev_deg in &agent.lidar.beam_elevations {
        let elev = elev_deg.to_radians();
        let (se, ce) = elev.sin_cos();
        for &az_deg in &azimuths {
            let az = az_deg.to_radians();
            let (sa, ca) = az.sin_cos();
            // direction in the agent frame, then rotated to world by agent yaw
            let da = [ce * ca, ce * sa, se];
            let dw = [cy * da[0] - sy * da[1], sy * da[0] + cy * da[1], da[2]];

            let mut best_t = f64::INFINITY;
            let mut best_intensity = 0.0f32;
            if dw[2] < -1e-12 {
                let t_ground = -origin[2] / dw[2];
                if t_ground > 1e-9 {
                    best_t = t_ground;
                    best_intensity = GROUND_INTENSITY;
                }
            }
            for b in &world.objects {
                if let Some(t) = ray_box(origin, dw, b) {
                    if t < best_t {
                        best_t = t;
                        best_intensity = BOX_INTENSITY;
                    }
                }
            }
            if best_t <= max_range {
                let pw = [
                    origin[0] + best_t * dw[0],
                    origin[1] + best_t * dw[1],
                    origin[2] + best_t * dw[2],
                ];
                // back into the agent frame (origin at the sensor)
                let rx = pw[0] - agent.pose.x;
                let ry = pw[1] - agent.pose.y;
                let px = cy * rx + sy * ry;
                let py = -sy * rx + cy * ry;
                let pz = pw[2] - agent.lidar.mount_height;
                points.push([px as f32, py as f32, pz as f32, best_intensity]);
            }
        }
    }
    Ok(PointCloud { points })
}

/// Group returned points into elevation rings of the model's beam table.
pub fn ring_counts(cloud: &PointCloud, model: &LidarModel) -> Vec<usize> {
    let mut counts = vec![0usize; model.beam_elevations.len()];
    for p in &cloud.points {
        let range_xy = ((p[0] as f64).powi(2) + (p[1] as f64).powi(2)).sqrt();
        let elev = (p[2] as f64).atan2(range_xy).to_degrees();
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, &e) in model.beam_elevations.iter().enumerate() {
            let d = (e - elev).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        counts[best] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_world(agent: AgentSpec) -> WorldFrame {
        WorldFrame { frame_id: 0, agents: vec![agent], objects: vec![], rng_seed: 0 }
    }

    fn ego_with(kind: LidarKind, freq: u32) -> AgentSpec {
        AgentSpec {
            agent_id: 0,
            pose: Pose { x: 0.0, y: 0.0, yaw: 0.0 },
            lidar: LidarModel::standard(kind),
            frequency_hz: freq,
            is_ego: true,
        }
    }

    #[test]
    fn standard_models_validate() {
        for kind in LidarKind::ALL {
            LidarModel::standard(kind).validate().unwrap();
        }
    }

    #[test]
    fn azimuth_counts_halve_at_20hz() {
        let m = LidarModel::standard(LidarKind::Vlp16);
        let a10 = m.azimuths(10).unwrap();
        let a20 = m.azimuths(20).unwrap();
        assert_eq!(a10.len(), 1800);
        assert_eq!(a20.len(), 900);
        assert_eq!(a20.len(), a10.len().div_ceil(2));
        // 20 Hz grid is a subsample of the 10 Hz grid
        assert_eq!(a20[3], a10[6]);
    }

    #[test]
    fn azimuth_ceil_relation_holds_for_odd_counts() {
        let mut m = LidarModel::standard(LidarKind::Vlp16);
        // 360 / 0.53 = 679.2... -> 679 samples at 10 Hz (odd)
        m.azimuth_step_by_freq.insert(10, 0.53);
        m.azimuth_step_by_freq.insert(20, 1.06);
        let a10 = m.azimuths(10).unwrap();
        let a20 = m.azimuths(20).unwrap();
        assert_eq!(a10.len(), 679);
        assert_eq!(a20.len(), 340);
        assert_eq!(a20.len(), a10.len().div_ceil(2));
    }

    #[test]
    fn ground_return_matches_trigonometry() {
        // beam at -15 deg from 1.73 m: slant range 1.73 / sin(15 deg)
        let ego = ego_with(LidarKind::Vlp16, 20);
        let world = empty_world(ego.clone());
        let cloud = simulate_lidar(&world, &ego).unwrap();
        let expected_range = 1.73 / (15.0f64.to_radians().sin());
        let mut checked = 0;
        for p in &cloud.points {
            let elev = (p[2] as f64).atan2(((p[0] as f64).powi(2) + (p[1] as f64).powi(2)).sqrt());
            if (elev.to_degrees() + 15.0).abs() < 0.01 {
                let range = ((p[0] as f64).powi(2) + (p[1] as f64).powi(2) + (p[2] as f64).powi(2)).sqrt();
                assert!(
                    (range - expected_range).abs() < 1e-6,
                    "range {range} vs {expected_range}"
                );
                assert!((p[2] as f64 + 1.73).abs() < 1e-6, "ground z should be -1.73");
                assert_eq!(p[3], GROUND_INTENSITY);
                checked += 1;
            }
        }
        assert!(checked > 0, "no -15 degree returns found");
    }

    #[test]
    fn vlp16_has_16_rings() {
        let ego = ego_with(LidarKind::Vlp16, 20);
        let world = empty_world(ego.clone());
        let cloud = simulate_lidar(&world, &ego).unwrap();
        let counts = ring_counts(&cloud, &ego.lidar);
        // downward beams return off the ground (-15..-1 deg, all within the
        // 100 m range: 1.73/sin(1 deg) = 99.1 m); upward beams return nothing
        let distinct = counts.iter().filter(|&&c| c > 0).count();
        assert_eq!(distinct, 8, "VLP16 flat-ground rings within range");
        // with a surrounding wall every ring returns
        let mut world = world;
        for k in 0..36 {
            let a = k as f64 * 10.0f64.to_radians();
            world.objects.push(GroundTruthBox {
                center: [30.0 * a.cos(), 30.0 * a.sin(), 10.0],
                size: [4.0, 4.0, 40.0],
                yaw: wrap_angle(a),
                class: ObjectClass::Vehicle,
            });
        }
        let cloud = simulate_lidar(&world, world.ego()).unwrap();
        let counts = ring_counts(&cloud, &world.ego().lidar);
        assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 16);
    }

    #[test]
    fn per_ring_counts_halve_with_frequency() {
        // wall ring guarantees a return at every azimuth
        let mut world = empty_world(ego_with(LidarKind::Vlp16, 10));
        for k in 0..36 {
            let a = k as f64 * 10.0f64.to_radians();
            world.objects.push(GroundTruthBox {
                center: [25.0 * a.cos(), 25.0 * a.sin(), 10.0],
                size: [5.0, 5.0, 40.0],
                yaw: wrap_angle(a),
                class: ObjectClass::Vehicle,
            });
        }
        let agent10 = world.agents[0].clone();
        let mut agent20 = agent10.clone();
        agent20.frequency_hz = 20;
        let c10 = ring_counts(&simulate_lidar(&world, &agent10).unwrap(), &agent10.lidar);
        let c20 = ring_counts(&simulate_lidar(&world, &agent20).unwrap(), &agent20.lidar);
        for (r, (&a, &b)) in c10.iter().zip(c20.iter()).enumerate() {
            if a > 0 {
                assert_eq!(b, a.div_ceil(2), "ring {r}: 10 Hz {a} vs 20 Hz {b}");
            }
        }
    }

    #[test]
    fn occlusion_keeps_nearest_hit_only() {
        let ego = ego_with(LidarKind::Hdl64, 20);
        let mut world = empty_world(ego.clone());
        // two boxes stacked along +x from the ego
        world.objects.push(GroundTruthBox {
            center: [10.0, 0.0, 0.8],
            size: [4.0, 2.0, 1.6],
            yaw: 0.0,
            class: ObjectClass::Vehicle,
        });
        world.objects.push(GroundTruthBox {
            center: [18.0, 0.0, 0.8],
            size: [4.0, 2.0, 1.6],
            yaw: 0.0,
            class: ObjectClass::Vehicle,
        });
        let cloud = simulate_lidar(&world, &ego).unwrap();
        // brute-force re-intersection: no point may lie strictly behind
        // another surface along its own ray
        for p in cloud.points.iter().step_by(17) {
            let range = ((p[0] as f64).powi(2) + (p[1] as f64).powi(2) + (p[2] as f64).powi(2)).sqrt();
            let dir = [p[0] as f64 / range, p[1] as f64 / range, p[2] as f64 / range];
            let origin = [0.0, 0.0, 1.73];
            let mut nearest = f64::INFINITY;
            if dir[2] < -1e-12 {
                nearest = nearest.min(-origin[2] / dir[2]);
            }
            for b in &world.objects {
                if let Some(t) = ray_box(origin, dir, b) {
                    nearest = nearest.min(t);
                }
            }
            assert!(
                range <= nearest + 1e-4,
                "point at {range} lies behind nearest surface {nearest}"
            );
        }
        // and both boxes still receive points (partial occlusion, not total)
        let near_hits = cloud
            .points
            .iter()
            .filter(|p| p[3] == BOX_INTENSITY && (p[0] as f64) < 14.0)
            .count();
        assert!(near_hits > 0);
    }

    #[test]
    fn beam_count_monotonicity_within_shared_span() {
        // shared elevation span of all four models is [-15, +2] degrees;
        // a surrounding wall guarantees returns for every beam in the span
        let mut world = empty_world(ego_with(LidarKind::Vlp16, 20));
        for k in 0..36 {
            let a = k as f64 * 10.0f64.to_radians();
            world.objects.push(GroundTruthBox {
                center: [30.0 * a.cos(), 30.0 * a.sin(), 15.0],
                size: [5.0, 6.0, 60.0],
                yaw: wrap_angle(a),
                class: ObjectClass::Vehicle,
            });
        }
        let count_in_span = |kind: LidarKind| -> usize {
            let mut agent = ego_with(kind, 20);
            agent.lidar.max_range = 200.0;
            let mut w = world.clone();
            w.agents[0] = agent.clone();
            let cloud = simulate_lidar(&w, &agent).unwrap();
            cloud
                .points
                .iter()
                .filter(|p| {
                    let elev = (p[2] as f64)
                        .atan2(((p[0] as f64).powi(2) + (p[1] as f64).powi(2)).sqrt())
                        .to_degrees();
                    (-15.0 - 1e-6..=2.0 + 1e-6).contains(&elev)
                })
                .count()
        };
        let v16 = count_in_span(LidarKind::Vlp16);
        let v32 = count_in_span(LidarKind::Vlp32);
        let h64 = count_in_span(LidarKind::Hdl64);
        assert!(v16 <= v32, "VLP16 {v16} > VLP32 {v32}");
        assert!(v32 <= h64, "VLP32 {v32} > HDL64 {h64}");
    }

    #[test]
    fn degenerate_scene_single_ego() {
        let cfg = ScenarioConfig {
            n_agents: (1, 1),
            n_objects: (0, 0),
            ..ScenarioConfig::default()
        };
        let frame = sample_world(&cfg, 7).unwrap();
        assert_eq!(frame.agents.len(), 1);
        assert!(frame.agents[0].is_ego);
        assert_eq!(frame.agents[0].pose.x, 0.0);
        assert!(frame.objects.is_empty());
    }

    #[test]
    fn sample_world_deterministic() {
        let cfg = ScenarioConfig {
            n_agents: (3, 3),
            n_objects: (10, 10),
            ..ScenarioConfig::default()
        };
        let a = sample_world(&cfg, 7).unwrap();
        let b = sample_world(&cfg, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = ScenarioConfig {
            n_agents: (3, 3),
            n_objects: (10, 10),
            ..ScenarioConfig::default()
        };
        let a = sample_world(&cfg, 7).unwrap();
        let b = sample_world(&cfg, 8).unwrap();
        assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn normal_scenario_all_panda_20() {
        let cfg = ScenarioConfig {
            scenario_kind: ScenarioKind::Normal,
            n_agents: (5, 5),
            n_objects: (0, 0),
            ..ScenarioConfig::default()
        };
        let frame = sample_world(&cfg, 3).unwrap();
        assert_eq!(frame.agents.len(), 5);
        for a in &frame.agents {
            assert_eq!(a.lidar.kind, LidarKind::Panda64);
            assert_eq!(a.frequency_hz, 20);
        }
    }

    #[test]
    fn hetero1_uniform_frequency() {
        let cfg = ScenarioConfig {
            scenario_kind: ScenarioKind::Hetero1,
            n_agents: (5, 5),
            n_objects: (0, 0),
            ..ScenarioConfig::default()
        };
        for seed in 0..10 {
            let frame = sample_world(&cfg, seed).unwrap();
            for a in &frame.agents {
                assert_eq!(a.frequency_hz, 20);
            }
        }
    }

    #[test]
    fn hetero2_category_frequencies_near_uniform() {
        // 4000 collaborator assignments; each category should land in [0.22, 0.28]
        let mut agents: Vec<AgentSpec> = (0..4001)
            .map(|i| AgentSpec {
                agent_id: i as u32,
                pose: Pose { x: i as f64, y: 0.0, yaw: 0.0 },
                lidar: LidarModel::standard(LidarKind::Panda64),
                frequency_hz: 20,
                is_ego: i == 0,
            })
            .collect();
        assign_lidars(ScenarioKind::Hetero2, &mut agents, 42, None, None, 0.2).unwrap();
        let mut counts = std::collections::HashMap::new();
        let mut freq10 = 0usize;
        for a in agents.iter().filter(|a| !a.is_ego) {
            *counts.entry(a.lidar.kind).or_insert(0usize) += 1;
            if a.frequency_hz == 10 {
                freq10 += 1;
            }
        }
        for kind in LidarKind::ALL {
            let frac = counts[&kind] as f64 / 4000.0;
            assert!((0.22..=0.28).contains(&frac), "{:?} frac {frac}", kind);
        }
        let f10 = freq10 as f64 / 4000.0;
        assert!((0.45..=0.55).contains(&f10), "10 Hz fraction {f10}");
    }

    #[test]
    fn ego_override_applies() {
        let cfg = ScenarioConfig {
            scenario_kind: ScenarioKind::Hetero2,
            n_agents: (2, 2),
            n_objects: (0, 0),
            ego_override: Some((LidarKind::Vlp16, 20)),
            ..ScenarioConfig::default()
        };
        let frame = sample_world(&cfg, 5).unwrap();
        assert_eq!(frame.ego().lidar.kind, LidarKind::Vlp16);
    }

    #[test]
    fn same_ratio_one_matches_normal() {
        let cfg = ScenarioConfig {
            scenario_kind: ScenarioKind::Hetero2,
            n_agents: (4, 4),
            n_objects: (0, 0),
            same_ratio: Some(1.0),
            ..ScenarioConfig::default()
        };
        let frame = sample_world(&cfg, 9).unwrap();
        for a in &frame.agents {
            assert_eq!(a.lidar.kind, LidarKind::Panda64);
            assert_eq!(a.frequency_hz, 20);
        }
    }

    #[test]
    fn assign_lidars_requires_ego() {
        let mut agents = vec![AgentSpec {
            agent_id: 0,
            pose: Pose { x: 0.0, y: 0.0, yaw: 0.0 },
            lidar: LidarModel::standard(LidarKind::Panda64),
            frequency_hz: 20,
            is_ego: false,
        }];
        assert!(assign_lidars(ScenarioKind::Normal, &mut agents, 1, None, None, 0.2).is_err());
    }

    #[test]
    fn simulate_rejects_foreign_agent() {
        let ego = ego_with(LidarKind::Vlp16, 20);
        let world = empty_world(ego);
        let stranger = AgentSpec {
            agent_id: 99,
            pose: Pose { x: 0.0, y: 0.0, yaw: 0.0 },
            lidar: LidarModel::standard(LidarKind::Vlp16),
            frequency_hz: 20,
            is_ego: false,
        };
        assert!(simulate_lidar(&world, &stranger).is_err());
    }

    #[test]
    fn cloud_respects_max_range() {
        let mut ego = ego_with(LidarKind::Hdl64, 20);
        ego.lidar.max_range = 20.0;
        let world = empty_world(ego.clone());
        let cloud = simulate_lidar(&world, &ego).unwrap();
        for p in &cloud.points {
            let r = ((p[0] as f64).powi(2) + (p[1] as f64).powi(2) + (p[2] as f64).powi(2)).sqrt();
            assert!(r <= 20.0 + 1e-4);
        }
    }
}
