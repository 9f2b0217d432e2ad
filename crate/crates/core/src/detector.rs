//! A frozen, geometry-driven stand-in for a trained LiDAR detector. It
//! provides the three things the OOD head consumes: a BEV feature map,
//! per-object class logits, and noisy detections.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3D, PointCloud};
use crate::rng::Rng;
use crate::scene::{Catalog, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Cell edge length in meters.
    pub cell: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_min: -30.0,
            x_max: 30.0,
            y_min: -30.0,
            y_max: 30.0,
            cell: 0.5,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > self.x_min && self.y_max > self.y_min && self.cell > 0.0) {
            return Err(Error::InvalidConfig("grid bounds or cell size invalid".into()));
        }
        Ok(())
    }

    /// Rows (along y).
    pub fn height(&self) -> usize {
        ((self.y_max - self.y_min) / self.cell).ceil() as usize
    }

    /// Columns (along x).
    pub fn width(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell).ceil() as usize
    }

    /// `(col, row)` of the cell containing `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        let gx = ((x - self.x_min) / self.cell).floor() as usize;
        let gy = ((y - self.y_min) / self.cell).floor() as usize;
        (gx < self.width() && gy < self.height()).then_some((gx, gy))
    }

    pub fn cell_center(&self, gx: usize, gy: usize) -> (f64, f64) {
        (
            self.x_min + (gx as f64 + 0.5) * self.cell,
            self.y_min + (gy as f64 + 0.5) * self.cell,
        )
    }
}

/// Which rasterization stage to expose, from rawest to most aggregated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMapKind {
    /// (1) per-cell point statistics.
    Raw,
    /// (2) one 3x3 box filter pass over (1).
    Smoothed,
    /// (3) two passes.
    TwiceSmoothed,
    /// (4) (2) and (3) stacked along channels.
    #[default]
    Neck,
}

impl FeatureMapKind {
    pub const ALL: [FeatureMapKind; 4] = [
        FeatureMapKind::Raw,
        FeatureMapKind::Smoothed,
        FeatureMapKind::TwiceSmoothed,
        FeatureMapKind::Neck,
    ];

    pub fn channels(self) -> usize {
        match self {
            FeatureMapKind::Neck => 2 * BASE_CHANNELS,
            _ => BASE_CHANNELS,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FeatureMapKind::Raw => "(1) raw",
            FeatureMapKind::Smoothed => "(2) smoothed",
            FeatureMapKind::TwiceSmoothed => "(3) twice smoothed",
            FeatureMapKind::Neck => "(4) neck",
        }
    }
}

/// log(1+count), mean z, max z, mean intensity, z variance, mean |dx|, mean |dy|.
pub const BASE_CHANNELS: usize = 7;

/// Row-major `H x W x C` grid of features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: GridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        let n = grid.height() * grid.width() * channels;
        Self {
            grid,
            channels,
            data: vec![0.0; n],
        }
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    #[inline]
    pub fn cell(&self, gx: usize, gy: usize) -> &[f64] {
        let start = (gy * self.width() + gx) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, gx: usize, gy: usize) -> &mut [f64] {
        let c = self.channels;
        let start = (gy * self.width() + gx) * c;
        &mut self.data[start..start + c]
    }
}

fn raw_statistics(cloud: &PointCloud, grid: &GridSpec) -> FeatureMap {
    let (h, w) = (grid.height(), grid.width());
    // count, sum z, max z, sum intensity, sum z^2, sum |dx|, sum |dy|
    let mut acc = vec![[0.0f64; 7]; h * w];
    for p in &cloud.points {
        let Some((gx, gy)) = grid.cell_of(p.x, p.y) else {
            continue;
        };
        let (ccx, ccy) = grid.cell_center(gx, gy);
        let a = &mut acc[gy * w + gx];
        a[2] = if a[0] == 0.0 { p.z } else { a[2].max(p.z) };
        a[0] += 1.0;
        a[1] += p.z;
        a[3] += p.intensity;
        a[4] += p.z * p.z;
        a[5] += (p.x - ccx).abs();
        a[6] += (p.y - ccy).abs();
    }
    let mut map = FeatureMap::zeros(grid.clone(), BASE_CHANNELS);
    for (cell, a) in map.data.chunks_exact_mut(BASE_CHANNELS).zip(&acc) {
        let n = a[0];
        if n == 0.0 {
            continue;
        }
        let mean_z = a[1] / n;
        cell[0] = n.ln_1p();
        cell[1] = mean_z;
        cell[2] = a[2];
        cell[3] = a[3] / n;
        cell[4] = (a[4] / n - mean_z * mean_z).max(0.0);
        cell[5] = a[5] / n;
        cell[6] = a[6] / n;
    }
    map
}

/// 3x3 mean filter with zero padding.
pub fn box_filter(map: &FeatureMap) -> FeatureMap {
    let (h, w, c) = (map.height(), map.width(), map.channels);
    let mut out = FeatureMap::zeros(map.grid.clone(), c);
    for gy in 0..h {
        for gx in 0..w {
            let dst = (gy * w + gx) * c;
            for ny in gy.saturating_sub(1)..=(gy + 1).min(h - 1) {
                for nx in gx.saturating_sub(1)..=(gx + 1).min(w - 1) {
                    let src = (ny * w + nx) * c;
                    for k in 0..c {
                        out.data[dst + k] += map.data[src + k];
                    }
                }
            }
            for k in 0..c {
                out.data[dst + k] /= 9.0;
            }
        }
    }
    out
}

fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let c = a.channels + b.channels;
    let mut out = FeatureMap::zeros(a.grid.clone(), c);
    for ((dst, x), y) in out
        .data
        .chunks_exact_mut(c)
        .zip(a.data.chunks_exact(a.channels))
        .zip(b.data.chunks_exact(b.channels))
    {
        dst[..a.channels].copy_from_slice(x);
        dst[a.channels..].copy_from_slice(y);
    }
    out
}

/// The same map as [`rasterize_bev`], with smoothing evaluated only at the
/// cells that are read. Values are bit-identical to the full map.
#[derive(Debug, Clone, PartialEq)]
pub struct LazyFeatureMap {
    raw: FeatureMap,
    kind: FeatureMapKind,
}

impl LazyFeatureMap {
    pub fn new(cloud: &PointCloud, grid: &GridSpec, kind: FeatureMapKind) -> Self {
        Self {
            raw: raw_statistics(cloud, grid),
            kind,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.raw.grid
    }

    pub fn channels(&self) -> usize {
        self.kind.channels()
    }

    fn smoothed(&self, gx: usize, gy: usize, passes: usize, out: &mut [f64]) {
        out.fill(0.0);
        let (h, w) = (self.raw.height(), self.raw.width());
        let mut tmp = [0.0; BASE_CHANNELS];
        for ny in gy.saturating_sub(1)..=(gy + 1).min(h - 1) {
            for nx in gx.saturating_sub(1)..=(gx + 1).min(w - 1) {
                let src: &[f64] = if passes == 1 {
                    self.raw.cell(nx, ny)
                } else {
                    self.smoothed(nx, ny, passes - 1, &mut tmp);
                    &tmp
                };
                for k in 0..BASE_CHANNELS {
                    out[k] += src[k];
                }
            }
        }
        for v in out.iter_mut() {
            *v /= 9.0;
        }
    }

    /// Feature vector of cell `(gx, gy)`.
    pub fn cell(&self, gx: usize, gy: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.channels()];
        match self.kind {
            FeatureMapKind::Raw => out.copy_from_slice(self.raw.cell(gx, gy)),
            FeatureMapKind::Smoothed => self.smoothed(gx, gy, 1, &mut out),
            FeatureMapKind::TwiceSmoothed => self.smoothed(gx, gy, 2, &mut out),
            FeatureMapKind::Neck => {
                let (a, b) = out.split_at_mut(BASE_CHANNELS);
                self.smoothed(gx, gy, 1, a);
                self.smoothed(gx, gy, 2, b);
            }
        }
        out
    }
}

/// Rasterizes `cloud` onto `grid`. Points outside the grid are dropped.
pub fn rasterize_bev(cloud: &PointCloud, grid: &GridSpec, kind: FeatureMapKind) -> FeatureMap {
    let raw = raw_statistics(cloud, grid);
    match kind {
        FeatureMapKind::Raw => raw,
        FeatureMapKind::Smoothed => box_filter(&raw),
        FeatureMapKind::TwiceSmoothed => box_filter(&box_filter(&raw)),
        FeatureMapKind::Neck => {
            let s1 = box_filter(&raw);
            let s2 = box_filter(&s1);
            concat_channels(&s1, &s2)
        }
    }
}

/// Logit assigned to every class when a box holds no points.
pub const EMPTY_BOX_LOGIT: f64 = -10.0;

/// Per-class mean and spread of the shape descriptor
/// `(l, w, h, point count, mean intensity)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

/// Geometric surrogate detector built from the ID part of a catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateDetector {
    pub prototypes: Vec<Prototype>,
    id_dims: Vec<[f64; 3]>,
}

/// Relative floor on the descriptor spread of each box dimension.
const DIM_SPREAD_FLOOR: f64 = 0.25;

impl SurrogateDetector {
    pub fn new(catalog: &Catalog) -> Self {
        let ids = catalog.id_classes();
        let prototypes = ids
            .iter()
            .map(|c| {
                let [lo, hi] = c.intensity_range;
                let mut std = [0.0; 5];
                for k in 0..3 {
                    std[k] = c.dim_std[k].max(DIM_SPREAD_FLOOR * c.dim_mean[k]);
                }
                std[3] = c.points_mean.sqrt();
                std[4] = ((hi - lo) / 12f64.sqrt()).max(0.05);
                Prototype {
                    mean: [
                        c.dim_mean[0],
                        c.dim_mean[1],
                        c.dim_mean[2],
                        c.points_mean,
                        0.5 * (lo + hi),
                    ],
                    std,
                }
            })
            .collect();
        Self {
            prototypes,
            id_dims: ids.iter().map(|c| c.dim_mean).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    /// Shape descriptor of the returns inside `b`, or `None` if the box is empty.
    pub fn descriptor(cloud: &PointCloud, b: &Box3D) -> Option<[f64; 5]> {
        let (mut n, mut sum_i) = (0usize, 0.0);
        for p in cloud.points.iter().filter(|p| b.contains(p)) {
            n += 1;
            sum_i += p.intensity;
        }
        (n > 0).then(|| [b.l, b.w, b.h, n as f64, sum_i / n as f64])
    }

    pub fn logits_from_descriptor(&self, d: &[f64; 5]) -> Vec<f64> {
        self.prototypes
            .iter()
            .map(|p| {
                let sq: f64 = (0..5)
                    .map(|k| {
                        let z = (d[k] - p.mean[k]) / p.std[k];
                        z * z
                    })
                    .sum();
                -0.5 * sq
            })
            .collect()
    }

    /// Negative half squared normalized distance to each class prototype.
    pub fn object_logits(&self, cloud: &PointCloud, b: &Box3D) -> Vec<f64> {
        match Self::descriptor(cloud, b) {
            Some(d) => self.logits_from_descriptor(&d),
            None => vec![EMPTY_BOX_LOGIT; self.num_classes()],
        }
    }

    fn make_detection(&self, cloud: &PointCloud, truth: &Box3D, reported: Box3D) -> Detection {
        let logits = self.object_logits(cloud, truth);
        let predicted_class = argmax(&logits);
        let score = max_softmax(&logits);
        Detection {
            bbox: reported,
            logits,
            predicted_class,
            score,
        }
    }

    /// Emits one jittered detection per annotation that survives the miss
    /// draw, followed by `Poisson(fp_rate)` false positives on clutter.
    pub fn detect(&self, scene: &Scene, noise: &DetectionNoiseConfig, rng: &mut Rng) -> Vec<Detection> {
        let center = Normal::new(0.0, noise.center_sigma).expect("validated sigma");
        let dim = Normal::new(0.0, noise.dim_jitter).expect("validated jitter");
        let mut out = Vec::with_capacity(scene.annotations.len() + 2);
        for ann in &scene.annotations {
            if noise.miss_rate > 0.0 && rng.random_bool(noise.miss_rate) {
                continue;
            }
            let b = &ann.bbox;
            let jittered = Box3D {
                cx: b.cx + center.sample(rng),
                cy: b.cy + center.sample(rng),
                cz: b.cz + center.sample(rng),
                l: b.l * dim.sample(rng).exp(),
                w: b.w * dim.sample(rng).exp(),
                h: b.h * dim.sample(rng).exp(),
                yaw: b.yaw,
            };
            out.push(self.make_detection(&scene.cloud, b, jittered));
        }
        if noise.fp_rate > 0.0 && !scene.cloud.is_empty() && !self.id_dims.is_empty() {
            let n_fp = Poisson::new(noise.fp_rate)
                .map(|d| d.sample(rng) as usize)
                .unwrap_or(0);
            let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for p in &scene.cloud.points {
                x0 = x0.min(p.x);
                x1 = x1.max(p.x);
                y0 = y0.min(p.y);
                y1 = y1.max(p.y);
            }
            for _ in 0..n_fp {
                let dims = self.id_dims[rng.random_range(0..self.id_dims.len())];
                let cx = if x1 > x0 { rng.random_range(x0..x1) } else { x0 };
                let cy = if y1 > y0 { rng.random_range(y0..y1) } else { y0 };
                let b = Box3D::new([cx, cy, 0.5 * dims[2]], dims, rng.random_range(-PI..PI))
                    .expect("catalog dims are positive");
                out.push(self.make_detection(&scene.cloud, &b, b));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionNoiseConfig {
    /// Std of the additive center jitter, meters.
    pub center_sigma: f64,
    /// Std of the log-normal multiplicative dimension jitter.
    pub dim_jitter: f64,
    /// Mean false positives per scene.
    pub fp_rate: f64,
    pub miss_rate: f64,
}

impl Default for DetectionNoiseConfig {
    fn default() -> Self {
        Self {
            center_sigma: 0.1,
            dim_jitter: 0.05,
            fp_rate: 0.5,
            miss_rate: 0.05,
        }
    }
}

impl DetectionNoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            center_sigma: 0.0,
            dim_jitter: 0.0,
            fp_rate: 0.0,
            miss_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.center_sigma >= 0.0
            && self.dim_jitter >= 0.0
            && self.fp_rate >= 0.0
            && (0.0..=1.0).contains(&self.miss_rate)
            && [self.center_sigma, self.dim_jitter, self.fp_rate].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::InvalidConfig("detection noise parameters out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub logits: Vec<f64>,
    pub predicted_class: usize,
    pub score: f64,
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn max_softmax(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    1.0 / z
}
