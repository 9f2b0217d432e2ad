//! Training-time outliers: shrink or stretch a random half of the well-observed
//! ID objects along their own axes and relabel them as OOD.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{count_points_in_box, scale_box_and_points};
use crate::rng::Rng;
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub small_range: [f64; 2],
    pub large_range: [f64; 2],
    /// Probability of drawing from `small_range`.
    pub p_small: f64,
    /// Objects with fewer in-box points than this are never scaled.
    pub min_points: usize,
    pub select_fraction: f64,
    /// Draw a separate factor per axis; otherwise one factor for all three.
    pub independent_axes: bool,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            small_range: [0.1, 0.5],
            large_range: [1.5, 3.0],
            p_small: 0.8,
            min_points: 5,
            select_fraction: 0.5,
            independent_axes: true,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        let [slo, shi] = self.small_range;
        let [llo, lhi] = self.large_range;
        if !(0.0 < slo && slo <= shi && shi < 1.0 && 1.0 < llo && llo <= lhi) {
            return Err(Error::InvalidConfig(
                "scaling ranges must satisfy 0 < small.lo <= small.hi < 1 < large.lo <= large.hi"
                    .into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_small) || !(0.0..=1.0).contains(&self.select_fraction) {
            return Err(Error::InvalidConfig(
                "p_small and select_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Non-OOD annotations with at least `min_points` returns in their box.
pub fn eligible_objects(scene: &Scene, config: &ScalingConfig) -> Vec<usize> {
    scene
        .annotations
        .iter()
        .enumerate()
        .filter(|(_, a)| !a.is_ood && count_points_in_box(&scene.cloud, &a.bbox) >= config.min_points)
        .map(|(i, _)| i)
        .collect()
}

fn draw_factor(config: &ScalingConfig, rng: &mut Rng) -> f64 {
    let [lo, hi] = if rng.random_bool(config.p_small) {
        config.small_range
    } else {
        config.large_range
    };
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

pub fn sample_scale_factors(config: &ScalingConfig, rng: &mut Rng) -> [f64; 3] {
    if config.independent_axes {
        [
            draw_factor(config, rng),
            draw_factor(config, rng),
            draw_factor(config, rng),
        ]
    } else {
        let f = draw_factor(config, rng);
        [f, f, f]
    }
}

/// Number of objects to scale out of `eligible`, rounding half up.
pub fn selection_count(eligible: usize, fraction: f64) -> usize {
    ((fraction * eligible as f64) + 0.5).floor() as usize
}

/// Returns a copy of `scene` in which a random subset of eligible objects has
/// been scaled and labelled OOD. Scaled annotations take class label `K`
/// (`num_id`) and keep their source class in `original_class`.
pub fn synthesize_outliers(
    scene: &Scene,
    num_id: usize,
    config: &ScalingConfig,
    rng: &mut Rng,
) -> Scene {
    let mut out = scene.clone();
    let eligible = eligible_objects(scene, config);
    let n = selection_count(eligible.len(), config.select_fraction).min(eligible.len());
    if n == 0 {
        return out;
    }
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    chosen.sort_unstable();
    for idx in chosen {
        let factors = sample_scale_factors(config, rng);
        let ann = &mut out.annotations[idx];
        let (cloud, bbox) = scale_box_and_points(&out.cloud, &ann.bbox, factors)
            .expect("configured factors are positive");
        out.cloud = cloud;
        ann.original_class = Some(ann.class_id);
        ann.class_id = num_id;
        ann.bbox = bbox;
        ann.is_ood = true;
        ann.scale_factors = Some(factors);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Box3D, Point4, PointCloud};
    use crate::scene::{sample_scene, Annotation, Catalog, SceneParams};
    use rand::SeedableRng;

    fn scene_with_counts(counts: &[usize]) -> Scene {
        let mut points = Vec::new();
        let mut annotations = Vec::new();
        for (i, &n) in counts.iter().enumerate() {
            let cx = 10.0 * i as f64;
            let b = Box3D::new([cx, 0.0, 0.5], [2.0, 1.0, 1.0], 0.0).unwrap();
            for j in 0..n {
                points.push(Point4::new(cx - 0.5 + 0.05 * j as f64, 0.1, 0.5, 0.3));
            }
            annotations.push(Annotation::id(b, i % 2));
        }
        Scene {
            id: "t".into(),
            cloud: PointCloud::new(points),
            annotations,
        }
    }

    #[test]
    fn eligibility_filters_sparse_objects() {
        let cfg = ScalingConfig::default();
        assert_eq!(eligible_objects(&scene_with_counts(&[3, 10, 20]), &cfg), vec![1, 2]);
        assert_eq!(eligible_objects(&scene_with_counts(&[5, 4]), &cfg), vec![0]);
        let empty = Scene {
            id: "e".into(),
            cloud: PointCloud::default(),
            annotations: vec![],
        };
        assert!(eligible_objects(&empty, &cfg).is_empty());
    }

    #[test]
    fn factor_ranges_and_branch_frequency() {
        let cfg = ScalingConfig::default();
        let mut rng = Rng::seed_from_u64(0);
        let mut small = [0usize; 3];
        let draws = 100_000;
        for _ in 0..draws {
            let f = sample_scale_factors(&cfg, &mut rng);
            for k in 0..3 {
                let in_small = (0.1..=0.5).contains(&f[k]);
                assert!(in_small || (1.5..=3.0).contains(&f[k]), "{}", f[k]);
                small[k] += in_small as usize;
            }
        }
        for s in small {
            let freq = s as f64 / draws as f64;
            assert!((0.79..=0.81).contains(&freq), "{freq}");
        }
    }

    #[test]
    fn equal_axes_share_one_factor() {
        let cfg = ScalingConfig {
            independent_axes: false,
            ..ScalingConfig::default()
        };
        let mut rng = Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let [a, b, c] = sample_scale_factors(&cfg, &mut rng);
            assert!(a == b && b == c);
        }
    }

    #[test]
    fn selection_rounds_half_up() {
        assert_eq!(selection_count(10, 0.5), 5);
        assert_eq!(selection_count(3, 0.5), 2);
        assert_eq!(selection_count(1, 0.5), 1);
        assert_eq!(selection_count(0, 0.5), 0);
    }

    #[test]
    fn no_eligible_objects_returns_copy() {
        let s = scene_with_counts(&[1, 2, 3]);
        let out = synthesize_outliers(&s, 2, &ScalingConfig::default(), &mut Rng::seed_from_u64(1));
        assert_eq!(out, s);
    }

    #[test]
    fn half_of_ten_objects_become_ood() {
        let s = scene_with_counts(&[8; 10]);
        let out = synthesize_outliers(&s, 2, &ScalingConfig::default(), &mut Rng::seed_from_u64(4));
        assert_eq!(out.num_ood(), 5);
        for (a, b) in s.annotations.iter().zip(&out.annotations) {
            if b.is_ood {
                assert_eq!(b.original_class, Some(a.class_id));
                assert_eq!(b.class_id, 2);
                let f = b.scale_factors.unwrap();
                let ratio = b.bbox.volume() / a.bbox.volume();
                assert!((ratio - f[0] * f[1] * f[2]).abs() < 1e-9);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn synthesis_invariants_on_generated_scenes() {
        let cat = Catalog::default_road().without_ood();
        let params = SceneParams::default();
        let cfg = ScalingConfig::default();
        for seed in 0..30 {
            let s = sample_scene("s", &cat, &params, &mut Rng::seed_from_u64(seed));
            let out = synthesize_outliers(&s, cat.num_id(), &cfg, &mut Rng::seed_from_u64(seed + 100));
            let again = synthesize_outliers(&s, cat.num_id(), &cfg, &mut Rng::seed_from_u64(seed + 100));
            assert_eq!(out, again);
            assert_eq!(out.cloud.len(), s.cloud.len());
            let eligible = eligible_objects(&s, &cfg);
            assert_eq!(out.num_ood(), selection_count(eligible.len(), 0.5));
            for (i, (a, b)) in s.annotations.iter().zip(&out.annotations).enumerate() {
                if b.is_ood {
                    assert!(eligible.contains(&i));
                    // an enlarged box may also swallow nearby clutter
                    assert!(
                        count_points_in_box(&out.cloud, &b.bbox)
                            >= count_points_in_box(&s.cloud, &a.bbox)
                    );
                } else {
                    assert_eq!(a, b);
                }
            }
        }
    }
}
