//! Pillar-based BEV feature extraction and payload compression.
//!
//! A point cloud is binned into vertical pillars on the BEV grid, each pillar
//! is embedded by a shared per-point MLP with max pooling, the pooled features
//! are scattered into a pseudo image, and a three-stage stride-2 CNN with
//! per-stage transposed-convolution upsampling produces the final H x W x C
//! map. A pointwise channel map compresses C -> C0 for transmission and
//! expands back on the receiver.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, Linear, ParamStore};
use crate::scenario::{LidarKind, PointCloud};
use crate::tensor::{Arr, Tape, Var};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// BEV grid geometry. Rows index y, columns index x, half-open bins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PillarGridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub pillar_size: f64,
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
}

impl Default for PillarGridConfig {
    fn default() -> Self {
        Self {
            x_range: (-70.4, 70.4),
            y_range: (-38.4, 38.4),
            pillar_size: 0.8,
            max_points_per_pillar: 24,
            max_pillars: 8192,
        }
    }
}

impl PillarGridConfig {
    pub fn validate(&self) -> Result<()> {
        let wx = (self.x_range.1 - self.x_range.0) / self.pillar_size;
        let wy = (self.y_range.1 - self.y_range.0) / self.pillar_size;
        if (wx - wx.round()).abs() > 1e-9 || (wy - wy.round()).abs() > 1e-9 {
            return Err(Error::config(format!(
                "grid extents must be integer multiples of pillar_size (got {wx} x {wy} cells)"
            )));
        }
        if wx < 1.0 || wy < 1.0 {
            return Err(Error::config("grid must contain at least one pillar"));
        }
        if self.max_points_per_pillar < 1 {
            return Err(Error::config("max_points_per_pillar must be >= 1"));
        }
        Ok(())
    }

    /// Rows (y bins).
    pub fn h(&self) -> usize {
        ((self.y_range.1 - self.y_range.0) / self.pillar_size).round() as usize
    }

    /// Columns (x bins).
    pub fn w(&self) -> usize {
        ((self.x_range.1 - self.x_range.0) / self.pillar_size).round() as usize
    }

    /// Center of cell (row, col) in metric coordinates.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range.0 + (col as f64 + 0.5) * self.pillar_size,
            self.y_range.0 + (row as f64 + 0.5) * self.pillar_size,
        )
    }
}

/// Per-pillar point buffers: features `[P, K, 9]`, valid counts, grid coords.
#[derive(Debug, Clone)]
pub struct PillarBuffers {
    pub features: Arr,
    pub counts: Vec<usize>,
    pub coords: Vec<(usize, usize)>,
}

pub const POINT_FEATURE_DIM: usize = 9;

/// Bin a cloud into pillars with the PointPillars 9-vector per point:
/// (x, y, z, intensity, offsets to the pillar mean, offsets to the cell center).
///
/// Out-of-range points are dropped (half-open bins), pillars beyond
/// `max_pillars` are dropped by descending point count, and points beyond
/// `max_points_per_pillar` are subsampled with the frame seed.
pub fn pillarize(cloud: &PointCloud, grid: &PillarGridConfig, seed: u64) -> Result<PillarBuffers> {
    grid.validate()?;
    let (h, w, s) = (grid.h(), grid.w(), grid.pillar_size);
    let mut bins: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let (x, y) = (p[0] as f64, p[1] as f64);
        if x < grid.x_range.0 || x >= grid.x_range.1 || y < grid.y_range.0 || y >= grid.y_range.1 {
            continue;
        }
        let row = ((y - grid.y_range.0) / s).floor() as usize;
        let col = ((x - grid.x_range.0) / s).floor() as usize;
        debug_assert!(row < h && col < w);
        bins.entry((row, col)).or_default().push(i);
    }

    let mut pillars: Vec<((usize, usize), Vec<usize>)> = bins.into_iter().collect();
    // deterministic priority: most points first, then grid order
    pillars.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    pillars.truncate(grid.max_pillars);
    // scatter order is grid order so downstream layout is stable
    pillars.sort_by_key(|(rc, _)| *rc);

    let k = grid.max_points_per_pillar;
    let p_count = pillars.len();
    let mut features = Arr::zeros(IxDyn(&[p_count.max(1), k, POINT_FEATURE_DIM]));
    let mut counts = Vec::with_capacity(p_count);
    let mut coords = Vec::with_capacity(p_count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for (pi, ((row, col), mut idxs)) in pillars.into_iter().enumerate() {
        if idxs.len() > k {
            let picked = rand::seq::index::sample(&mut rng, idxs.len(), k);
            let mut chosen: Vec<usize> = picked.iter().map(|j| idxs[j]).collect();
            chosen.sort_unstable();
            idxs = chosen;
        }
        let n = idxs.len();
        let (cx, cy) = grid.cell_center(row, col);
        let mut mean = [0.0f64; 3];
        for &i in &idxs {
            for ax in 0..3 {
                mean[ax] += cloud.points[i][ax] as f64;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        for (ki, &i) in idxs.iter().enumerate() {
            let p = cloud.points[i];
            let row_feat = [
                p[0] as f64,
                p[1] as f64,
                p[2] as f64,
                p[3] as f64,
                p[0] as f64 - mean[0],
                p[1] as f64 - mean[1],
                p[2] as f64 - mean[2],
                p[0] as f64 - cx,
                p[1] as f64 - cy,
            ];
            for (fi, &v) in row_feat.iter().enumerate() {
                features[[pi, ki, fi]] = v;
            }
        }
        counts.push(n);
        coords.push((row, col));
    }
    if p_count == 0 {
        features = Arr::zeros(IxDyn(&[0, k, POINT_FEATURE_DIM]));
    }
    Ok(PillarBuffers { features, counts, coords })
}

/// Shared per-point MLP plus per-pillar max pooling, scattered to the grid.
pub struct PillarEncoder {
    fc1: Linear,
    fc2: Linear,
    pub out_channels: usize,
}

impl PillarEncoder {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, out_channels: usize) -> Self {
        Self {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), POINT_FEATURE_DIM, out_channels),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), out_channels, out_channels),
            out_channels,
        }
    }

    /// `buffers -> [c_p, h, w]` pseudo image. Empty pillars stay zero.
    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, buffers: &PillarBuffers, h: usize, w: usize) -> Var {
        let p = buffers.counts.len();
        if p == 0 {
            return t.constant(Arr::zeros(IxDyn(&[self.out_channels, h, w])));
        }
        let k = buffers.features.shape()[1];
        let feats = t.constant(buffers.features.clone());
        let flat = t.reshape(feats, &[p * k, POINT_FEATURE_DIM]);
        let e = self.fc1.forward(t, ps, flat);
        let e = t.relu(e);
        let e = self.fc2.forward(t, ps, e);
        let e = t.relu(e);
        let per_point = t.reshape(e, &[p, k, self.out_channels]);
        let pooled = t.masked_max_pool(per_point, &buffers.counts);
        t.scatter_pillars(pooled, &buffers.coords, h, w)
    }
}

/// Channel widths of the CNN backbone; output channels are `3 * upsample_channels`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 3],
    pub upsample_channels: usize,
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        3 * self.upsample_channels
    }
}

/// Three stride-2 stages, each upsampled back to full resolution and concatenated.
pub struct Backbone {
    downs: Vec<(Conv2d, Conv2d)>,
    ups: Vec<ConvTranspose2d>,
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: BackboneConfig,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::config(format!(
                "backbone needs H and W divisible by 8, got {h} x {w}"
            )));
        }
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut cin = config.in_channels;
        for (i, &cout) in config.stage_channels.iter().enumerate() {
            downs.push((
                Conv2d::new(ps, rng, &format!("{name}.stage{i}.down"), cin, cout, 3, 2, 1),
                Conv2d::new(ps, rng, &format!("{name}.stage{i}.conv"), cout, cout, 3, 1, 1),
            ));
            ups.push(ConvTranspose2d::new(
                ps,
                rng,
                &format!("{name}.stage{i}.up"),
                cout,
                config.upsample_channels,
                1 << (i + 1),
            ));
            cin = cout;
        }
        Ok(Self { downs, ups, config })
    }

    /// `[c_p, h, w] -> [3u, h, w]`
    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        let mut cur = x;
        let mut upsampled = Vec::with_capacity(3);
        for (stage, up) in self.downs.iter().zip(&self.ups) {
            let d = stage.0.forward(t, ps, cur);
            let d = t.relu(d);
            let d2 = stage.1.forward(t, ps, d);
            cur = t.relu(d2);
            let u = up.forward(t, ps, cur);
            upsampled.push(t.relu(u));
        }
        t.concat(&upsampled, 0)
    }
}

/// Metadata that travels with a feature map through fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMeta {
    pub agent_id: u32,
    pub category: LidarKind,
    pub frequency_hz: u32,
    pub is_ego: bool,
}

/// A BEV feature map on the tape: `[l, c]` rows in grid order plus metadata.
#[derive(Debug, Clone, Copy)]
pub struct BevFeatureMap {
    pub data: Var,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub meta: FeatureMeta,
}

/// Pointwise (1x1) channel compression C -> C0 and its receiver-side inverse.
pub struct Compressor {
    enc: Linear,
    dec: Linear,
    pub c: usize,
    pub c0: usize,
}

impl Compressor {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, c0: usize) -> Result<Self> {
        if c0 >= c {
            return Err(Error::config(format!(
                "compressed channels must satisfy C0 < C, got C0={c0}, C={c}"
            )));
        }
        Ok(Self {
            enc: Linear::new(ps, rng, &format!("{name}.enc"), c, c0),
            dec: Linear::new(ps, rng, &format!("{name}.dec"), c0, c),
            c,
            c0,
        })
    }

    /// `[l, c] -> [l, c0]`
    pub fn compress(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        self.enc.forward(t, ps, x)
    }

    /// `[l, c0] -> [l, c]`
    pub fn decompress(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        self.dec.forward(t, ps, x)
    }

    /// Transmitted payload for one map: f32 wire format over the full grid.
    pub fn payload_bytes(&self, h: usize, w: usize) -> usize {
        h * w * self.c0 * 4
    }

    pub fn compression_ratio(&self) -> f64 {
        self.c as f64 / self.c0 as f64
    }
}

/// Full per-agent encoder: pillars -> pseudo image -> backbone -> `[l, c]`.
pub struct BevEncoder {
    pub grid: PillarGridConfig,
    pub pillar: PillarEncoder,
    pub backbone: Backbone,
}

impl BevEncoder {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        grid: PillarGridConfig,
        pseudo_channels: usize,
        backbone_cfg: BackboneConfig,
    ) -> Result<Self> {
        grid.validate()?;
        let (h, w) = (grid.h(), grid.w());
        let pillar = PillarEncoder::new(ps, rng, &format!("{name}.pillar"), pseudo_channels);
        let backbone = Backbone::new(ps, rng, &format!("{name}.backbone"), backbone_cfg, h, w)?;
        Ok(Self { grid, pillar, backbone })
    }

    pub fn out_channels(&self) -> usize {
        self.backbone.config.out_channels()
    }

    /// Encode one agent cloud into `[l, c]` grid-order features.
    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, cloud: &PointCloud, seed: u64) -> Result<Var> {
        let buffers = pillarize(cloud, &self.grid, seed)?;
        let (h, w) = (self.grid.h(), self.grid.w());
        let image = self.pillar.forward(t, ps, &buffers, h, w);
        let fmap = self.backbone.forward(t, ps, image);
        let c = self.out_channels();
        let hwc = t.permute(fmap, &[1, 2, 0]);
        Ok(t.reshape(hwc, &[h * w, c]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_params;
    use rand::Rng;

    fn tiny_grid() -> PillarGridConfig {
        PillarGridConfig {
            x_range: (-1.0, 1.0),
            y_range: (-1.0, 1.0),
            pillar_size: 1.0,
            max_points_per_pillar: 4,
            max_pillars: 16,
        }
    }

    #[test]
    fn binning_matches_hand_oracle() {
        // row = floor((y - y_lo)/s), col = floor((x - x_lo)/s)
        let cloud = PointCloud { points: vec![[0.5, -0.5, 0.0, 1.0]] };
        let b = pillarize(&cloud, &tiny_grid(), 0).unwrap();
        assert_eq!(b.coords, vec![(0, 1)]);
        assert_eq!(b.counts, vec![1]);
    }

    #[test]
    fn upper_bound_point_excluded() {
        let cloud = PointCloud { points: vec![[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 1.0]] };
        let b = pillarize(&cloud, &tiny_grid(), 0).unwrap();
        assert_eq!(b.counts.len(), 0, "points on the upper bound must be excluded");
    }

    #[test]
    fn point_at_cell_center_has_zero_offsets() {
        // cell (0, 1) center is (0.5, -0.5)
        let cloud = PointCloud { points: vec![[0.5, -0.5, 0.3, 1.0]] };
        let b = pillarize(&cloud, &tiny_grid(), 0).unwrap();
        for fi in 4..9 {
            assert!(
                b.features[[0, 0, fi]].abs() < 1e-9,
                "offset feature {fi} = {}",
                b.features[[0, 0, fi]]
            );
        }
        assert!((b.features[[0, 0, 2]] - 0.3f32 as f64).abs() < 1e-9);
    }

    #[test]
    fn empty_cloud_gives_zero_pillars() {
        let b = pillarize(&PointCloud::default(), &tiny_grid(), 0).unwrap();
        assert_eq!(b.counts.len(), 0);
        assert_eq!(b.coords.len(), 0);
    }

    #[test]
    fn max_pillars_drops_sparsest() {
        let mut grid = tiny_grid();
        grid.max_pillars = 1;
        let cloud = PointCloud {
            points: vec![
                [0.5, 0.5, 0.0, 1.0],
                [0.6, 0.6, 0.0, 1.0],
                [-0.5, -0.5, 0.0, 1.0],
            ],
        };
        let b = pillarize(&cloud, &grid, 0).unwrap();
        assert_eq!(b.coords, vec![(1, 1)], "denser pillar must survive");
        assert_eq!(b.counts, vec![2]);
    }

    #[test]
    fn subsampling_is_seed_deterministic() {
        let mut grid = tiny_grid();
        grid.max_points_per_pillar = 2;
        let cloud = PointCloud {
            points: (0..10).map(|i| [0.5, 0.5, i as f32 * 0.1, 1.0]).collect(),
        };
        let a = pillarize(&cloud, &grid, 42).unwrap();
        let b = pillarize(&cloud, &grid, 42).unwrap();
        let c = pillarize(&cloud, &grid, 43).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.counts, vec![2]);
        assert_ne!(a.features, c.features, "different seed should pick different points");
    }

    #[test]
    fn pillar_encode_max_is_idempotent_under_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let enc = PillarEncoder::new(&mut ps, &mut rng, "pe", 8);
        let single = PointCloud { points: vec![[0.5, -0.5, 0.2, 1.0]] };
        let dup = PointCloud { points: vec![[0.5, -0.5, 0.2, 1.0], [0.5, -0.5, 0.2, 1.0]] };
        let mut t = Tape::new();
        let b1 = pillarize(&single, &tiny_grid(), 0).unwrap();
        let y1 = enc.forward(&mut t, &ps, &b1, 2, 2);
        let b2 = pillarize(&dup, &tiny_grid(), 0).unwrap();
        let y2 = enc.forward(&mut t, &ps, &b2, 2, 2);
        let (v1, v2) = (t.value(y1).clone(), t.value(y2).clone());
        for (a, b) in v1.iter().zip(v2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pillar_encode_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        let enc = PillarEncoder::new(&mut ps, &mut rng, "pe", 8);
        let fwd = PointCloud {
            points: vec![[0.4, -0.5, 0.2, 1.0], [0.6, -0.4, 0.1, 0.3], [0.5, -0.6, 0.0, 1.0]],
        };
        let rev = PointCloud { points: fwd.points.iter().rev().cloned().collect() };
        let mut t = Tape::new();
        let y1 = enc.forward(&mut t, &ps, &pillarize(&fwd, &tiny_grid(), 0).unwrap(), 2, 2);
        let y2 = enc.forward(&mut t, &ps, &pillarize(&rev, &tiny_grid(), 0).unwrap(), 2, 2);
        for (a, b) in t.value(y1).iter().zip(t.value(y2).iter()) {
            assert!((a - b).abs() < 1e-12, "max pooling must ignore point order");
        }
    }

    #[test]
    fn empty_pillar_cell_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let enc = PillarEncoder::new(&mut ps, &mut rng, "pe", 4);
        let cloud = PointCloud { points: vec![[0.5, 0.5, 0.0, 1.0]] };
        let mut t = Tape::new();
        let y = enc.forward(&mut t, &ps, &pillarize(&cloud, &tiny_grid(), 0).unwrap(), 2, 2);
        let v = t.value(y);
        // occupied cell (1,1); all others zero
        for ci in 0..4 {
            assert_eq!(v[[ci, 0, 0]], 0.0);
            assert_eq!(v[[ci, 0, 1]], 0.0);
            assert_eq!(v[[ci, 1, 0]], 0.0);
        }
    }

    fn small_backbone(ps: &mut ParamStore, rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<Backbone> {
        Backbone::new(
            ps,
            rng,
            "bb",
            BackboneConfig { in_channels: 4, stage_channels: [4, 6, 8], upsample_channels: 3 },
            h,
            w,
        )
    }

    #[test]
    fn backbone_output_is_three_times_per_stage_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new();
        let bb = small_backbone(&mut ps, &mut rng, 16, 16).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Arr::from_shape_simple_fn(IxDyn(&[4, 16, 16]), || rng.gen_range(-1.0..1.0)));
        let y = bb.forward(&mut t, &ps, x);
        assert_eq!(t.shape(y), &[9, 16, 16]); // C = 3 * upsample_channels
        assert_eq!(bb.config.out_channels(), 9);
    }

    #[test]
    fn backbone_rejects_non_divisible_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        assert!(small_backbone(&mut ps, &mut rng, 12, 16).is_err());
    }

    #[test]
    fn backbone_zero_input_zero_biases_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamStore::new();
        let bb = small_backbone(&mut ps, &mut rng, 16, 16).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Arr::zeros(IxDyn(&[4, 16, 16])));
        let y = bb.forward(&mut t, &ps, x);
        for &v in t.value(y).iter() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn backbone_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamStore::new();
        let bb = small_backbone(&mut ps, &mut rng, 16, 16).unwrap();
        let x0 = Arr::from_shape_simple_fn(IxDyn(&[4, 16, 16]), || rng.gen_range(-1.0..1.0));
        // random but fixed projection makes the scalar loss sensitive everywhere
        let proj = Arr::from_shape_simple_fn(IxDyn(&[9, 16, 16]), || rng.gen_range(-1.0..1.0));

        let mut t = Tape::new();
        let x = t.input(x0.clone());
        let y = bb.forward(&mut t, &ps, x);
        let pv = t.constant(proj.clone());
        let prod = t.mul(y, pv);
        let loss = t.sum_all(prod);
        let grads = t.backward(loss);
        let analytic = grads.wrt(x).unwrap().clone();

        let eps = 1e-5;
        for probe in 0..10 {
            let j = (probe * 97) % x0.len();
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[j] += delta;
                let mut t2 = Tape::new();
                let xv = t2.input(xp);
                let y2 = bb.forward(&mut t2, &ps, xv);
                let pv2 = t2.constant(proj.clone());
                let prod2 = t2.mul(y2, pv2);
                let l2 = t2.sum_all(prod2);
                *t2.value(l2).iter().next().unwrap()
            };
            let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let ana = analytic.as_slice().unwrap()[j];
            let rel = (ana - num).abs() / (ana.abs() + num.abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {j}: {ana} vs {num} (rel {rel})");
        }
    }

    #[test]
    fn compressor_payload_and_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamStore::new();
        let comp = Compressor::new(&mut ps, &mut rng, "comp", 64, 16).unwrap();
        assert_eq!(comp.payload_bytes(96, 96), 589_824);
        assert!((comp.compression_ratio() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn compressor_rejects_expanding_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamStore::new();
        assert!(Compressor::new(&mut ps, &mut rng, "c", 16, 16).is_err());
        assert!(Compressor::new(&mut ps, &mut rng, "c2", 16, 32).is_err());
    }

    #[test]
    fn compress_decompress_preserves_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ps = ParamStore::new();
        let comp = Compressor::new(&mut ps, &mut rng, "comp", 12, 4).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Arr::from_shape_simple_fn(IxDyn(&[30, 12]), || rng.gen_range(-1.0..1.0)));
        let z = comp.compress(&mut t, &ps, x);
        assert_eq!(t.shape(z), &[30, 4]);
        let y = comp.decompress(&mut t, &ps, z);
        assert_eq!(t.shape(y), &[30, 12]);
    }

    #[test]
    fn compress_commutes_with_spatial_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamStore::new();
        let comp = Compressor::new(&mut ps, &mut rng, "comp", 6, 2).unwrap();
        let x0 = Arr::from_shape_simple_fn(IxDyn(&[10, 6]), || rng.gen_range(-1.0..1.0));
        let perm: Vec<usize> = vec![3, 1, 4, 0, 2, 9, 8, 7, 5, 6];
        let mut xp = x0.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..6 {
                xp[[dst, c]] = x0[[src, c]];
            }
        }
        let mut t = Tape::new();
        let a = t.constant(x0);
        let b = t.constant(xp);
        let za = comp.compress(&mut t, &ps, a);
        let zb = comp.compress(&mut t, &ps, b);
        let (va, vb) = (t.value(za).clone(), t.value(zb).clone());
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..2 {
                assert!((vb[[dst, c]] - va[[src, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pillar_encoder_param_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ps = ParamStore::new();
        let enc = PillarEncoder::new(&mut ps, &mut rng, "pe", 6);
        let cloud = PointCloud {
            points: vec![
                [0.4, -0.5, 0.2, 1.0],
                [0.6, -0.4, 0.1, 0.3],
                [-0.5, 0.5, 0.0, 1.0],
                [-0.4, 0.6, 0.7, 0.3],
            ],
        };
        let buffers = pillarize(&cloud, &tiny_grid(), 3).unwrap();
        let slots: Vec<usize> = (0..ps.len()).collect();
        let mut rng2 = ChaCha8Rng::seed_from_u64(13);
        let proj = Arr::from_shape_simple_fn(IxDyn(&[6, 2, 2]), || rng2.gen_range(-1.0..1.0));
        let worst = grad_check_params(&mut ps, &slots, 4, &mut rng2, &mut |t, ps| {
            let y = enc.forward(t, ps, &buffers, 2, 2);
            let pv = t.constant(proj.clone());
            let prod = t.mul(y, pv);
            t.sum_all(prod)
        });
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn compressor_param_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut ps = ParamStore::new();
        let comp = Compressor::new(&mut ps, &mut rng, "comp", 8, 3).unwrap();
        let x = Arr::from_shape_simple_fn(IxDyn(&[12, 8]), || rng.gen_range(-1.0..1.0));
        let slots: Vec<usize> = (0..ps.len()).collect();
        let worst = grad_check_params(&mut ps, &slots, 4, &mut rng, &mut |t, ps| {
            let xv = t.constant(x.clone());
            let z = comp.compress(t, ps, xv);
            let y = comp.decompress(t, ps, z);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        });
        assert!(worst < 1e-4, "worst rel err {worst}");
    }
}
