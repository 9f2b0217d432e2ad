//! Synthetic annotated scenes: object point sampling, scene layout, and the
//! train/val/test split in which the rare classes only show up outside train.

use std::f64::consts::PI;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_center_distance, Box3D, Point4, PointCloud};
use crate::rng::{self, Rng};

/// How returns are spread over an object's box.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLayout {
    /// Top face and the four side faces.
    #[default]
    Surface,
    /// Two adjacent side faces only (+x and +y), no roof.
    LShaped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Mean `(l, w, h)` in meters.
    pub dim_mean: [f64; 3],
    pub dim_std: [f64; 3],
    /// Expected return count at or inside the reference range.
    pub points_mean: f64,
    pub intensity_range: [f64; 2],
    #[serde(default)]
    pub is_ood_class: bool,
    #[serde(default)]
    pub layout: PointLayout,
}

impl ClassSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("class `{}`: {msg}", self.name)));
        if self.dim_mean.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return bad("dim_mean must be positive");
        }
        if self.dim_std.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return bad("dim_std must be non-negative");
        }
        if !(self.points_mean >= 1.0) {
            return bad("points_mean must be >= 1");
        }
        let [lo, hi] = self.intensity_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("intensity_range must satisfy 0 <= lo <= hi <= 1");
        }
        Ok(())
    }
}

/// Ordered class list. ID classes are numbered `0..K` in the order they
/// appear; every OOD class shares the label `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Catalog {
    pub classes: Vec<ClassSpec>,
}

impl Catalog {
    pub fn new(classes: Vec<ClassSpec>) -> Self {
        Self { classes }
    }

    pub fn id_classes(&self) -> Vec<&ClassSpec> {
        self.classes.iter().filter(|c| !c.is_ood_class).collect()
    }

    pub fn ood_classes(&self) -> Vec<&ClassSpec> {
        self.classes.iter().filter(|c| c.is_ood_class).collect()
    }

    /// `K`, the number of ID classes.
    pub fn num_id(&self) -> usize {
        self.classes.iter().filter(|c| !c.is_ood_class).count()
    }

    pub fn without_ood(&self) -> Catalog {
        Catalog::new(self.classes.iter().filter(|c| !c.is_ood_class).cloned().collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidConfig("catalog is empty".into()));
        }
        self.classes.iter().try_for_each(ClassSpec::validate)
    }

    /// A small road-scene catalog: six ID classes plus two rare families
    /// whose shapes no ID class produces.
    pub fn default_road() -> Self {
        let c = |name: &str, m: [f64; 3], s: [f64; 3], pts: f64, int: [f64; 2]| ClassSpec {
            name: name.into(),
            dim_mean: m,
            dim_std: s,
            points_mean: pts,
            intensity_range: int,
            is_ood_class: false,
            layout: PointLayout::Surface,
        };
        // Rare families outside every ID shape: a very flat car-footprint
        // object and a very tall, thin one. Each still lies nearest a single
        // ID prototype, so the detector labels it confidently.
        let mut flatbed = c("flatbed", [4.4, 1.9, 0.5], [0.4, 0.1, 0.08], 70.0, [0.2, 0.6]);
        flatbed.is_ood_class = true;
        let mut pole = c("pole", [0.35, 0.35, 3.0], [0.05, 0.05, 0.3], 25.0, [0.1, 0.4]);
        pole.is_ood_class = true;
        Self::new(vec![
            c("car", [4.6, 1.95, 1.7], [0.3, 0.1, 0.1], 80.0, [0.2, 0.6]),
            c("truck", [8.5, 2.6, 3.2], [1.2, 0.2, 0.3], 160.0, [0.3, 0.7]),
            c("pedestrian", [0.75, 0.7, 1.75], [0.1, 0.1, 0.12], 25.0, [0.1, 0.4]),
            c("bicycle", [1.8, 0.65, 1.5], [0.15, 0.08, 0.1], 30.0, [0.2, 0.5]),
            c("traffic_cone", [0.45, 0.45, 0.9], [0.05, 0.05, 0.1], 12.0, [0.6, 0.9]),
            c("barrier", [2.2, 0.55, 1.0], [0.3, 0.08, 0.08], 30.0, [0.4, 0.8]),
            flatbed,
            pole,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub class_id: usize,
    pub is_ood: bool,
    /// Class of the ID object a synthesized outlier was made from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_factors: Option<[f64; 3]>,
}

impl Annotation {
    pub fn id(bbox: Box3D, class_id: usize) -> Self {
        Self {
            bbox,
            class_id,
            is_ood: false,
            original_class: None,
            scale_factors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    #[serde(rename = "points")]
    pub cloud: PointCloud,
    pub annotations: Vec<Annotation>,
}

impl Scene {
    pub fn num_ood(&self) -> usize {
        self.annotations.iter().filter(|a| a.is_ood).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub config_digest: String,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    /// `[x_min, x_max, y_min, y_max]` in meters; the sensor sits at the origin.
    pub extent: [f64; 4],
    /// Inclusive range of requested objects per scene.
    pub objects: [usize; 2],
    /// Ground returns per square meter.
    pub clutter_density: f64,
    /// Objects within this distance of the sensor get the full `points_mean`.
    pub range_ref: f64,
    /// Point density decays as `(range_ref / r)^range_falloff` beyond `range_ref`.
    pub range_falloff: f64,
    /// Probability that a placed object comes from a rare (OOD) class.
    pub ood_rate: f64,
    pub max_placement_tries: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            extent: [-30.0, 30.0, -30.0, 30.0],
            objects: [8, 16],
            clutter_density: 0.4,
            range_ref: 10.0,
            range_falloff: 1.5,
            ood_rate: 0.02,
            max_placement_tries: 50,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let [x0, x1, y0, y1] = self.extent;
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::InvalidConfig("scene extent is empty".into()));
        }
        if self.objects[0] > self.objects[1] {
            return Err(Error::InvalidConfig("objects range is inverted".into()));
        }
        if !(0.0..=1.0).contains(&self.ood_rate) {
            return Err(Error::InvalidConfig("ood_rate must lie in [0, 1]".into()));
        }
        if !(self.clutter_density >= 0.0 && self.range_ref > 0.0 && self.range_falloff >= 0.0) {
            return Err(Error::InvalidConfig("invalid clutter/range parameters".into()));
        }
        Ok(())
    }

    fn point_density_factor(&self, range: f64) -> f64 {
        if range <= self.range_ref {
            1.0
        } else {
            (self.range_ref / range).powf(self.range_falloff)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

// Keeps surface samples strictly inside the closed box after the
// world-frame round trip.
const FACE_INSET: f64 = 1.0 - 1e-7;

/// Draws a LiDAR-like return set on the surfaces of `b`.
pub fn sample_object_points(b: &Box3D, spec: &ClassSpec, rng: &mut Rng) -> PointCloud {
    let n = Poisson::new(spec.points_mean)
        .map(|d| d.sample(rng) as usize)
        .unwrap_or(1)
        .max(1);
    let (hl, hw, hh) = (
        0.5 * b.l * FACE_INSET,
        0.5 * b.w * FACE_INSET,
        0.5 * b.h * FACE_INSET,
    );
    let [ilo, ihi] = spec.intensity_range;
    // face areas: top, +x, -x, +y, -y
    let areas = match spec.layout {
        PointLayout::Surface => [b.l * b.w, b.w * b.h, b.w * b.h, b.l * b.h, b.l * b.h],
        PointLayout::LShaped => [0.0, b.w * b.h, 0.0, b.l * b.h, 0.0],
    };
    let total: f64 = areas.iter().sum();
    let points = (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut face = 0;
            while face < 4 && (pick >= areas[face] || areas[face] == 0.0) {
                pick -= areas[face];
                face += 1;
            }
            let a: f64 = rng.random_range(-1.0..=1.0);
            let c: f64 = rng.random_range(-1.0..=1.0);
            let local = match face {
                0 => [a * hl, c * hw, hh],
                1 => [hl, a * hw, c * hh],
                2 => [-hl, a * hw, c * hh],
                3 => [a * hl, hw, c * hh],
                _ => [a * hl, -hw, c * hh],
            };
            let intensity = if ihi > ilo { rng.random_range(ilo..=ihi) } else { ilo };
            b.from_box_frame(local, intensity)
        })
        .collect();
    PointCloud::new(points)
}

fn sample_dims(spec: &ClassSpec, rng: &mut Rng) -> [f64; 3] {
    let mut dims = [0.0; 3];
    for k in 0..3 {
        let d = Normal::new(spec.dim_mean[k], spec.dim_std[k])
            .map(|n| n.sample(rng))
            .unwrap_or(spec.dim_mean[k]);
        dims[k] = d.max(0.2 * spec.dim_mean[k]);
    }
    dims
}

/// Lays out one scene. Objects that cannot be placed without overlapping a
/// previous one are dropped after `max_placement_tries` attempts.
pub fn sample_scene(
    id: impl Into<String>,
    catalog: &Catalog,
    params: &SceneParams,
    rng: &mut Rng,
) -> Scene {
    let k = catalog.num_id();
    let id_specs: Vec<(usize, &ClassSpec)> = catalog.id_classes().into_iter().enumerate().collect();
    let ood_specs = catalog.ood_classes();
    let [x0, x1, y0, y1] = params.extent;

    let n_objects = rng.random_range(params.objects[0]..=params.objects[1]);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(n_objects);
    let mut points = Vec::new();

    for _ in 0..n_objects {
        let draw_ood = !ood_specs.is_empty()
            && params.ood_rate > 0.0
            && rng.random_bool(params.ood_rate)
            || id_specs.is_empty();
        let (class_id, spec) = if draw_ood {
            (k, *ood_specs.choose(rng).expect("catalog has classes"))
        } else {
            *id_specs.choose(rng).expect("catalog has ID classes")
        };
        let dims = sample_dims(spec, rng);
        let mut placed = None;
        for _ in 0..params.max_placement_tries {
            let r = 0.5 * dims[0].hypot(dims[1]);
            let cx = rng.random_range((x0 + r).min(x1)..=(x1 - r).max(x0));
            let cy = rng.random_range((y0 + r).min(y1)..=(y1 - r).max(y0));
            let yaw = rng.random_range(-PI..PI);
            let candidate = Box3D::new([cx, cy, 0.5 * dims[2]], dims, yaw)
                .expect("sampled dims are positive");
            let clear = annotations.iter().all(|a| {
                let d = bev_center_distance(&a.bbox, &candidate);
                d >= 0.5 && d >= a.bbox.footprint_radius() + r
            });
            if clear {
                placed = Some(candidate);
                break;
            }
        }
        let Some(bbox) = placed else { continue };
        let range = bbox.cx.hypot(bbox.cy);
        let mut local = spec.clone();
        local.points_mean = (spec.points_mean * params.point_density_factor(range)).max(1.0);
        points.extend(sample_object_points(&bbox, &local, rng).points);
        let mut ann = Annotation::id(bbox, class_id);
        ann.is_ood = class_id == k;
        annotations.push(ann);
    }

    let area = (x1 - x0) * (y1 - y0);
    let n_clutter = if params.clutter_density > 0.0 {
        Poisson::new(params.clutter_density * area)
            .map(|d| d.sample(rng) as usize)
            .unwrap_or(0)
    } else {
        0
    };
    for _ in 0..n_clutter {
        let p = Point4::new(
            rng.random_range(x0..x1),
            rng.random_range(y0..y1),
            rng.random_range(-0.1..0.1),
            rng.random_range(0.0..0.4),
        );
        if annotations.iter().all(|a| !a.bbox.contains(&p)) {
            points.push(p);
        }
    }

    Scene {
        id: id.into(),
        cloud: PointCloud::new(points),
        annotations,
    }
}

fn sample_many(
    tag: &str,
    n: usize,
    catalog: &Catalog,
    params: &SceneParams,
    master_seed: u64,
) -> Vec<Scene> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(master_seed, &[rng::tag(tag), i as u64]);
            sample_scene(format!("{tag}-{i:05}"), catalog, params, &mut r)
        })
        .collect()
}

/// Train scenes never see the rare classes; val/test draw them at
/// `params.ood_rate` per object.
pub fn build_splits(
    catalog: &Catalog,
    counts: SplitCounts,
    params: &SceneParams,
    master_seed: u64,
) -> Result<DatasetSplit> {
    catalog.validate()?;
    params.validate()?;
    if catalog.ood_classes().is_empty() {
        return Err(Error::InvalidConfig("catalog has no OOD class".into()));
    }
    if catalog.num_id() < 2 {
        return Err(Error::InvalidConfig("catalog needs at least two ID classes".into()));
    }
    let id_only = catalog.without_ood();
    Ok(DatasetSplit {
        seed: master_seed,
        config_digest: String::new(),
        train: sample_many("train", counts.train, &id_only, params, master_seed),
        val: sample_many("val", counts.val, catalog, params, master_seed),
        test: sample_many("test", counts.test, catalog, params, master_seed),
    })
}
