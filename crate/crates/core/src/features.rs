//! Per-object inputs for the OOD head: map features sampled at the object
//! center plus the box, the class logits, and the one-hot class.

use serde::{Deserialize, Serialize};

use crate::detector::{
    rasterize_bev, Detection, DetectionNoiseConfig, FeatureMap, FeatureMapKind, GridSpec,
    LazyFeatureMap, SurrogateDetector,
};
use crate::rng::Rng;
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInput {
    pub f_feat: Vec<f64>,
    pub box_vec: [f64; 7],
    pub logits: Vec<f64>,
    pub onehot: Vec<f64>,
    /// `Some(true)` for OOD training samples; `None` at inference.
    pub label: Option<bool>,
}

pub fn one_hot(k: usize, class: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[class] = 1.0;
    v
}

/// Bilinear read of every channel at world `(x, y)`. Cell centers are the
/// interpolation nodes; queries beyond the outermost centers are clamped.
pub fn bilinear_sample(map: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    bilinear_with(&map.grid, map.channels, |gx, gy| map.cell(gx, gy).to_vec(), x, y)
}

/// [`bilinear_sample`] on a lazily evaluated map.
pub fn bilinear_sample_lazy(map: &LazyFeatureMap, x: f64, y: f64) -> Vec<f64> {
    bilinear_with(map.grid(), map.channels(), |gx, gy| map.cell(gx, gy), x, y)
}

fn bilinear_with(
    g: &GridSpec,
    channels: usize,
    cell: impl Fn(usize, usize) -> Vec<f64>,
    x: f64,
    y: f64,
) -> Vec<f64> {
    let (w, h) = (g.width(), g.height());
    let gx = ((x - g.x_min) / g.cell - 0.5).clamp(0.0, (w - 1) as f64);
    let gy = ((y - g.y_min) / g.cell - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = (gx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (gy.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = gx - x0 as f64;
    let ty = gy - y0 as f64;
    let (f00, f10, f01, f11) = (cell(x0, y0), cell(x1, y0), cell(x0, y1), cell(x1, y1));
    let (w00, w10, w01, w11) = (
        (1.0 - tx) * (1.0 - ty),
        tx * (1.0 - ty),
        (1.0 - tx) * ty,
        tx * ty,
    );
    (0..channels)
        .map(|c| w00 * f00[c] + w10 * f10[c] + w01 * f01[c] + w11 * f11[c])
        .collect()
}

/// One labelled input per ground-truth annotation. Scaled outliers carry the
/// one-hot of the class they were made from.
pub fn make_training_inputs(
    scene: &Scene,
    map: &LazyFeatureMap,
    detector: &SurrogateDetector,
) -> Vec<RawInput> {
    let k = detector.num_classes();
    scene
        .annotations
        .iter()
        .map(|a| {
            let b = &a.bbox;
            let class = if a.is_ood {
                a.original_class.unwrap_or(0)
            } else {
                a.class_id
            };
            RawInput {
                f_feat: bilinear_sample_lazy(map, b.cx, b.cy),
                box_vec: b.to_array(),
                logits: detector.object_logits(&scene.cloud, b),
                onehot: one_hot(k, class.min(k - 1)),
                label: Some(a.is_ood),
            }
        })
        .collect()
}

pub fn make_inference_inputs(detections: &[Detection], map: &LazyFeatureMap) -> Vec<RawInput> {
    detections
        .iter()
        .map(|d| RawInput {
            f_feat: bilinear_sample_lazy(map, d.bbox.cx, d.bbox.cy),
            box_vec: d.bbox.to_array(),
            logits: d.logits.clone(),
            onehot: one_hot(d.logits.len(), d.predicted_class),
            label: None,
        })
        .collect()
}

/// The frozen detector together with the map it exposes to the head.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub detector: SurrogateDetector,
    pub grid: GridSpec,
    pub kind: FeatureMapKind,
}

impl FeatureExtractor {
    pub fn feature_dim(&self) -> usize {
        self.kind.channels()
    }

    pub fn num_classes(&self) -> usize {
        self.detector.num_classes()
    }

    pub fn map(&self, scene: &Scene) -> FeatureMap {
        rasterize_bev(&scene.cloud, &self.grid, self.kind)
    }

    pub fn lazy_map(&self, scene: &Scene) -> LazyFeatureMap {
        LazyFeatureMap::new(&scene.cloud, &self.grid, self.kind)
    }

    pub fn training_inputs(&self, scene: &Scene) -> Vec<RawInput> {
        make_training_inputs(scene, &self.lazy_map(scene), &self.detector)
    }

    /// Runs the detector and returns its detections with their head inputs.
    pub fn infer(
        &self,
        scene: &Scene,
        noise: &DetectionNoiseConfig,
        rng: &mut Rng,
    ) -> (Vec<Detection>, Vec<RawInput>) {
        let detections = self.detector.detect(scene, noise, rng);
        let inputs = make_inference_inputs(&detections, &self.lazy_map(scene));
        (detections, inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::outlier::{synthesize_outliers, ScalingConfig};
    use crate::scene::{Annotation, Catalog};
    use crate::geometry::{Box3D, Point4, PointCloud};
    use rand::{Rng as _, SeedableRng};

    fn grid() -> GridSpec {
        GridSpec {
            x_min: -3.0,
            x_max: 3.0,
            y_min: -2.0,
            y_max: 2.5,
            cell: 0.5,
        }
    }

    fn random_map(seed: u64, channels: usize) -> FeatureMap {
        let mut r = Rng::seed_from_u64(seed);
        let mut m = FeatureMap::zeros(grid(), channels);
        m.data.iter_mut().for_each(|v| *v = r.random_range(-2.0..2.0));
        m
    }

    #[test]
    fn exact_at_cell_centers() {
        let m = random_map(1, 3);
        for gy in 0..m.height() {
            for gx in 0..m.width() {
                let (x, y) = m.grid.cell_center(gx, gy);
                assert_eq!(bilinear_sample(&m, x, y), m.cell(gx, gy));
            }
        }
    }

    #[test]
    fn reproduces_affine_fields() {
        let mut m = FeatureMap::zeros(grid(), 2);
        let (a, b, c) = (0.7, -1.3, 2.5);
        for gy in 0..m.height() {
            for gx in 0..m.width() {
                let v = a * gx as f64 + b * gy as f64 + c;
                m.cell_mut(gx, gy).copy_from_slice(&[v, -v]);
            }
        }
        let mut r = Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x = r.random_range(-2.75..2.75);
            let y = r.random_range(-1.75..2.25);
            let gx = (x + 3.0) / 0.5 - 0.5;
            let gy = (y + 2.0) / 0.5 - 0.5;
            let expect = a * gx + b * gy + c;
            let got = bilinear_sample(&m, x, y);
            assert!((got[0] - expect).abs() < 1e-10);
            assert!((got[1] + expect).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_four_corner_formula() {
        let m = random_map(3, 4);
        let mut r = Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let x = r.random_range(-2.75..2.75);
            let y = r.random_range(-1.75..2.25);
            let gx = (x - m.grid.x_min) / m.grid.cell - 0.5;
            let gy = (y - m.grid.y_min) / m.grid.cell - 0.5;
            let (i, j) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (gx - i as f64, gy - j as f64);
            let got = bilinear_sample(&m, x, y);
            for ch in 0..4 {
                let top = m.cell(i, j)[ch] + fx * (m.cell(i + 1, j)[ch] - m.cell(i, j)[ch]);
                let bottom =
                    m.cell(i, j + 1)[ch] + fx * (m.cell(i + 1, j + 1)[ch] - m.cell(i, j + 1)[ch]);
                let expect = top + fy * (bottom - top);
                assert!((got[ch] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_in_the_map() {
        let (a, b) = (random_map(5, 2), random_map(6, 2));
        let (alpha, beta) = (0.3, -1.7);
        let mut mix = a.clone();
        for (m, (x, y)) in mix.data.iter_mut().zip(a.data.iter().zip(&b.data)) {
            *m = alpha * x + beta * y;
        }
        let mut r = Rng::seed_from_u64(7);
        for _ in 0..200 {
            let (x, y) = (r.random_range(-4.0..4.0), r.random_range(-3.0..3.0));
            let sa = bilinear_sample(&a, x, y);
            let sb = bilinear_sample(&b, x, y);
            let sm = bilinear_sample(&mix, x, y);
            for c in 0..2 {
                assert!((sm[c] - (alpha * sa[c] + beta * sb[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn continuity() {
        let m = random_map(8, 1);
        // largest neighbouring-cell difference per meter bounds the slope
        let mut lip: f64 = 0.0;
        for gy in 0..m.height() {
            for gx in 0..m.width() {
                if gx + 1 < m.width() {
                    lip = lip.max((m.cell(gx + 1, gy)[0] - m.cell(gx, gy)[0]).abs());
                }
                if gy + 1 < m.height() {
                    lip = lip.max((m.cell(gx, gy + 1)[0] - m.cell(gx, gy)[0]).abs());
                }
            }
        }
        lip *= 2.0 / m.grid.cell;
        let mut r = Rng::seed_from_u64(9);
        let eps = 1e-6;
        for _ in 0..500 {
            let (x, y) = (r.random_range(-2.7..2.7), r.random_range(-1.7..2.2));
            let d = (bilinear_sample(&m, x, y)[0] - bilinear_sample(&m, x + eps, y + eps)[0]).abs();
            assert!(d <= lip * eps * 2f64.sqrt() + 1e-12);
        }
    }

    #[test]
    fn clamps_far_queries_to_edge_cells() {
        let m = random_map(10, 2);
        let (w, h) = (m.width(), m.height());
        assert_eq!(bilinear_sample(&m, -100.0, -100.0), m.cell(0, 0));
        assert_eq!(bilinear_sample(&m, 100.0, 100.0), m.cell(w - 1, h - 1));
        assert_eq!(bilinear_sample(&m, 100.0, -100.0), m.cell(w - 1, 0));
        let (_, cy) = m.grid.cell_center(0, 3);
        assert_eq!(bilinear_sample(&m, -50.0, cy), m.cell(0, 3));
    }

    fn tiny_scene() -> Scene {
        let cat = Catalog::default_road();
        let spec = &cat.classes[0];
        let b = Box3D::new([0.25, 0.25, 0.85], spec.dim_mean, 0.2).unwrap();
        let b2 = Box3D::new([-20.0, 10.0, 0.85], spec.dim_mean, 1.0).unwrap();
        let mut pts = crate::scene::sample_object_points(&b, spec, &mut Rng::seed_from_u64(0)).points;
        pts.extend(crate::scene::sample_object_points(&b2, spec, &mut Rng::seed_from_u64(1)).points);
        pts.push(Point4::new(9.0, 9.0, 0.0, 0.1));
        Scene {
            id: "tiny".into(),
            cloud: PointCloud::new(pts),
            annotations: vec![Annotation::id(b, 0), Annotation::id(b2, 0)],
        }
    }

    #[test]
    fn training_inputs_for_id_scene() {
        let det = SurrogateDetector::new(&Catalog::default_road());
        let s = tiny_scene();
        let map = rasterize_bev(&s.cloud, &GridSpec::default(), FeatureMapKind::Raw);
        let lazy = LazyFeatureMap::new(&s.cloud, &GridSpec::default(), FeatureMapKind::Raw);
        let inputs = make_training_inputs(&s, &lazy, &det);
        assert_eq!(inputs.len(), 2);
        assert!(inputs.iter().all(|i| i.label == Some(false)));
        // the first object sits on a cell center
        let (gx, gy) = map.grid.cell_of(0.25, 0.25).unwrap();
        assert_eq!(inputs[0].f_feat, map.cell(gx, gy));
        assert_eq!(inputs[0].onehot, one_hot(6, 0));
    }

    #[test]
    fn labels_follow_synthesis() {
        let cat = Catalog::default_road();
        let det = SurrogateDetector::new(&cat);
        let mut s = tiny_scene();
        let spec = &cat.classes[2];
        let mut pts = s.cloud.points.clone();
        let mut anns = s.annotations.clone();
        for i in 0..8 {
            let b = Box3D::new([10.0, -25.0 + 5.0 * i as f64, 0.9], spec.dim_mean, 0.0).unwrap();
            let mut dense = spec.clone();
            dense.points_mean = 40.0;
            pts.extend(crate::scene::sample_object_points(&b, &dense, &mut Rng::seed_from_u64(i)).points);
            anns.push(Annotation::id(b, 2));
        }
        s.cloud = PointCloud::new(pts);
        s.annotations = anns;
        let aug = synthesize_outliers(&s, 6, &ScalingConfig::default(), &mut Rng::seed_from_u64(3));
        assert_eq!(aug.num_ood(), 5);
        let map = LazyFeatureMap::new(&aug.cloud, &GridSpec::default(), FeatureMapKind::Neck);
        let inputs = make_training_inputs(&aug, &map, &det);
        assert_eq!(inputs.iter().filter(|i| i.label == Some(true)).count(), 5);
        for (inp, ann) in inputs.iter().zip(&aug.annotations) {
            let cls = ann.original_class.unwrap_or(ann.class_id);
            assert_eq!(inp.onehot, one_hot(6, cls));
        }
    }

    #[test]
    fn lazy_sampling_matches_full_map() {
        let s = tiny_scene();
        let mut r = Rng::seed_from_u64(4);
        for kind in FeatureMapKind::ALL {
            let full = rasterize_bev(&s.cloud, &GridSpec::default(), kind);
            let lazy = LazyFeatureMap::new(&s.cloud, &GridSpec::default(), kind);
            for _ in 0..50 {
                let (x, y) = (r.random_range(-32.0..32.0), r.random_range(-32.0..32.0));
                assert_eq!(bilinear_sample(&full, x, y), bilinear_sample_lazy(&lazy, x, y));
            }
            for a in &s.annotations {
                let (x, y) = (a.bbox.cx, a.bbox.cy);
                assert_eq!(bilinear_sample(&full, x, y), bilinear_sample_lazy(&lazy, x, y));
            }
        }
    }

    #[test]
    fn inference_inputs_match_training_inputs_without_noise() {
        let det = SurrogateDetector::new(&Catalog::default_road());
        let s = tiny_scene();
        let map = LazyFeatureMap::new(&s.cloud, &GridSpec::default(), FeatureMapKind::Neck);
        let dets = det.detect(&s, &DetectionNoiseConfig::noiseless(), &mut Rng::seed_from_u64(0));
        let inf = make_inference_inputs(&dets, &map);
        let train = make_training_inputs(&s, &map, &det);
        for (a, b) in inf.iter().zip(&train) {
            assert_eq!(a.f_feat, b.f_feat);
            assert_eq!(a.box_vec, b.box_vec);
            assert_eq!(a.logits, b.logits);
            assert_eq!(a.onehot, b.onehot);
            assert_eq!(a.label, None);
        }
        assert!(make_inference_inputs(&[], &map).is_empty());
        for (i, d) in inf.iter().zip(&dets) {
            assert_eq!(i.onehot[d.predicted_class], 1.0);
        }
    }
}
