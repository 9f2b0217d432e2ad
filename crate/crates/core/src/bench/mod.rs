//! Benchmark orchestration: generate → train → detect → score → match →
//! metrics, repeated over head seeds and aggregated.

mod commands;
mod config;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::detector::SurrogateDetector;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::head::{self, calibrate_threshold, Checkpoint, OodHeadParams, TrainLog};
use crate::metrics::{evaluate_method, match_detections, EvalReport, Sample};
use crate::rng;
use crate::scene::{build_splits, DatasetSplit, Scene};

pub use commands::{
    checkpoint_path, cmd_ablate, cmd_eval, cmd_gen_data, cmd_report, cmd_train, AblationAxis, AblationRow,
    AblationTable, Manifest, SeedTrainRecord, TrainRecord,
};
pub use config::{DatasetSection, DetectorSection, EvalSection, HeadSection, RunConfig};

pub const DEFAULT_METHODS: [&str; 6] = ["ours", "msp", "odin", "max_logit", "energy", "default"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    Msp,
    Odin,
    MaxLogit,
    Energy,
    Default,
    /// Emits the ground-truth label; a harness self-check.
    Oracle,
}

impl Method {
    pub fn parse(name: &str) -> Result<Method> {
        Ok(match name {
            "ours" => Method::Ours,
            "msp" => Method::Msp,
            "odin" => Method::Odin,
            "max_logit" => Method::MaxLogit,
            "energy" => Method::Energy,
            "default" => Method::Default,
            "oracle" => Method::Oracle,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown method `{other}` (expected one of ours, msp, odin, max_logit, energy, default, oracle)"
                )))
            }
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Ours => "Ours",
            Method::Msp => "MSP",
            Method::Odin => "ODIN",
            Method::MaxLogit => "MaxLogit",
            Method::Energy => "Energy",
            Method::Default => "Default score",
            Method::Oracle => "Oracle",
        }
    }
}

pub fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    names.iter().map(|n| Method::parse(n)).collect()
}

pub fn extractor(cfg: &RunConfig) -> FeatureExtractor {
    FeatureExtractor {
        detector: SurrogateDetector::new(&cfg.dataset.catalog()),
        grid: cfg.detector.grid.clone(),
        kind: cfg.detector.feature_map,
    }
}

pub fn generate(cfg: &RunConfig) -> Result<DatasetSplit> {
    let d = &cfg.dataset;
    let mut split = build_splits(&d.catalog(), d.counts(), &d.scene, d.seed)?;
    split.config_digest = cfg.dataset_digest();
    Ok(split)
}

/// Matched detections of one split, scored by every requested method.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSplit {
    pub methods: Vec<Method>,
    /// `samples[m]` holds method `m`'s scores in match order.
    pub samples: Vec<Vec<Sample>>,
    pub unmatched: usize,
}

/// Seed of the detection-noise realization used with head seed `seed`.
pub fn noise_seed(cfg: &RunConfig, seed: u64) -> u64 {
    if cfg.detector.freeze_noise {
        0
    } else {
        seed
    }
}

/// Runs the detector over `scenes`, matches, and scores every match.
/// Scenes are processed in parallel; results are reassembled in scene order.
pub fn score_split(
    cfg: &RunConfig,
    scenes: &[Scene],
    split_name: &str,
    seed: u64,
    head: Option<&OodHeadParams>,
    methods: &[Method],
) -> Result<ScoredSplit> {
    if methods.contains(&Method::Ours) && head.is_none() {
        return Err(Error::InvalidArgument("method `ours` needs a trained head".into()));
    }
    let extractor = extractor(cfg);
    let noise = &cfg.detector.noise;
    let (master_seed, noise_seed) = (cfg.dataset.seed, noise_seed(cfg, seed));
    let per_scene: Vec<Result<(Vec<Vec<Sample>>, usize)>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut r = rng::stream(
                master_seed,
                &[rng::tag("detect"), noise_seed, rng::tag(split_name), i as u64],
            );
            let (dets, inputs) = extractor.infer(scene, noise, &mut r);
            let matching = match_detections(&dets, &scene.annotations);
            let mut cols = vec![Vec::with_capacity(matching.matches.len()); methods.len()];
            for m in &matching.matches {
                let d = &dets[m.detection];
                for (col, method) in cols.iter_mut().zip(methods) {
                    let v = match method {
                        Method::Ours => head::score(head.expect("checked"), &inputs[m.detection])?,
                        Method::Msp => baselines::msp(&d.logits),
                        Method::Odin => baselines::odin(&d.logits),
                        Method::MaxLogit => baselines::max_logit(&d.logits),
                        Method::Energy => baselines::energy(&d.logits),
                        Method::Default => baselines::default_score(d),
                        Method::Oracle => f64::from(u8::from(m.truth_is_ood)),
                    };
                    col.push(Sample::new(v, m.truth_is_ood));
                }
            }
            Ok((cols, matching.unmatched_detections))
        })
        .collect();
    let mut out = ScoredSplit {
        methods: methods.to_vec(),
        samples: vec![Vec::new(); methods.len()],
        unmatched: 0,
    };
    for res in per_scene {
        let (cols, unmatched) = res?;
        for (dst, src) in out.samples.iter_mut().zip(cols) {
            dst.extend(src);
        }
        out.unmatched += unmatched;
    }
    Ok(out)
}

/// Threshold fitted on the val split and its achieved ID rate there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub val_id_count: usize,
    /// Fraction of val ID detections with `g ≤ δ`.
    pub val_tpr: f64,
}

pub fn calibrate_on_val(
    cfg: &RunConfig,
    split: &DatasetSplit,
    params: &OodHeadParams,
    seed: u64,
) -> Result<Calibration> {
    let scored = score_split(cfg, &split.val, "val", seed, Some(params), &[Method::Ours])?;
    let id_scores: Vec<f64> = scored.samples[0]
        .iter()
        .filter(|s| !s.is_ood)
        .map(|s| s.ood_ness)
        .collect();
    let threshold = calibrate_threshold(&id_scores)?;
    let ok = id_scores.iter().filter(|s| **s <= threshold).count();
    Ok(Calibration {
        threshold,
        val_id_count: id_scores.len(),
        val_tpr: ok as f64 / id_scores.len() as f64,
    })
}

/// Trains the head for one seed and calibrates its threshold on val.
pub fn train_seed(
    cfg: &RunConfig,
    split: &DatasetSplit,
    seed: u64,
) -> Result<(Checkpoint, TrainLog, Calibration)> {
    let (params, log) = head::train(
        &split.train,
        &extractor(cfg),
        &cfg.head.scaling,
        &cfg.head.model(),
        &cfg.head.train,
        seed,
    )?;
    let cal = calibrate_on_val(cfg, split, &params, seed)?;
    let ckpt = Checkpoint::new(
        params,
        cfg.head.train.clone(),
        seed,
        cfg.digest(),
        Some(cal.threshold),
    );
    Ok((ckpt, log, cal))
}

/// Evaluates every method on the test split for one seed.
pub fn eval_seed(
    cfg: &RunConfig,
    split: &DatasetSplit,
    methods: &[Method],
    params: Option<&OodHeadParams>,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let scored = score_split(cfg, &split.test, "test", seed, params, methods)?;
    methods
        .iter()
        .zip(&scored.samples)
        .map(|(m, s)| evaluate_method(m.label(), s, scored.unmatched))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr_s: f64,
    pub aupr_e: f64,
}

impl MetricSet {
    fn of(r: &EvalReport) -> Self {
        Self {
            fpr95: r.fpr95,
            auroc: r.auroc,
            aupr_s: r.aupr_s,
            aupr_e: r.aupr_e,
        }
    }

    fn to_array(self) -> [f64; 4] {
        [self.fpr95, self.auroc, self.aupr_s, self.aupr_e]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self {
            fpr95: a[0],
            auroc: a[1],
            aupr_s: a[2],
            aupr_e: a[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean: MetricSet,
    /// Population standard deviation over seeds.
    pub std: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReports {
    pub seed: u64,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub config_digest: String,
    pub summary: Vec<MethodSummary>,
    pub per_seed: Vec<SeedReports>,
}

/// Mean and population std of `values`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-method mean/std over seeds; methods keep the order of the first seed.
pub fn aggregate(config_digest: &str, per_seed: Vec<SeedReports>) -> Result<BenchmarkResult> {
    let first = per_seed
        .first()
        .ok_or_else(|| Error::InvalidArgument("no seed reports to aggregate".into()))?;
    let mut summary = Vec::with_capacity(first.reports.len());
    for (mi, r0) in first.reports.iter().enumerate() {
        let mut cols: [Vec<f64>; 4] = Default::default();
        for s in &per_seed {
            let r = s.reports.get(mi).filter(|r| r.method == r0.method).ok_or_else(|| {
                Error::InvalidArgument(format!("seed {} lacks a report for {}", s.seed, r0.method))
            })?;
            for (c, v) in cols.iter_mut().zip(MetricSet::of(r).to_array()) {
                c.push(v);
            }
        }
        let ms: Vec<(f64, f64)> = cols.iter().map(|c| mean_std(c)).collect();
        summary.push(MethodSummary {
            method: r0.method.clone(),
            mean: MetricSet::from_array(std::array::from_fn(|i| ms[i].0)),
            std: MetricSet::from_array(std::array::from_fn(|i| ms[i].1)),
        });
    }
    Ok(BenchmarkResult {
        config_digest: config_digest.to_string(),
        summary,
        per_seed,
    })
}

pub const TABLE_HEADER: [&str; 4] = ["FPR-95 ↓", "AUROC ↑", "AUPR-S ↑", "AUPR-E ↑"];

fn cell(mean: f64, std: f64) -> String {
    format!("{mean:6.2} ± {std:5.2}")
}

/// Plain-text table: a leading label column set, then the four metrics.
pub fn format_table(label_headers: &[&str], rows: &[(Vec<String>, MetricSet, MetricSet)]) -> String {
    let mut widths: Vec<usize> = label_headers.iter().map(|h| h.chars().count()).collect();
    for (labels, _, _) in rows {
        for (w, l) in widths.iter_mut().zip(labels) {
            *w = (*w).max(l.chars().count());
        }
    }
    let metric_w = 15;
    let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));
    let mut out = String::new();
    let mut header: Vec<String> = label_headers.iter().zip(&widths).map(|(h, w)| pad(h, *w)).collect();
    header.extend(TABLE_HEADER.iter().map(|h| pad(h, metric_w)));
    out.push_str(header.join("  ").trim_end());
    out.push('\n');
    let total: usize = widths.iter().sum::<usize>() + 4 * metric_w + 2 * (widths.len() + 3);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for (labels, mean, std) in rows {
        let mut line: Vec<String> = labels.iter().zip(&widths).map(|(l, w)| pad(l, *w)).collect();
        for (m, s) in mean.to_array().into_iter().zip(std.to_array()) {
            line.push(pad(&cell(m, s), metric_w));
        }
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn result_table(result: &BenchmarkResult) -> String {
    let rows: Vec<_> = result
        .summary
        .iter()
        .map(|s| (vec![s.method.clone()], s.mean, s.std))
        .collect();
    format_table(&["Method"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, v: f64) -> EvalReport {
        EvalReport {
            method: method.into(),
            fpr95: v,
            auroc: 100.0 - v,
            aupr_s: 50.0,
            aupr_e: v / 2.0,
            n_id: 10,
            n_ood: 1,
            n_unmatched: 0,
        }
    }

    #[test]
    fn aggregation_matches_direct_recomputation() {
        let vals = [10.0, 12.5, 11.0, 30.0, 9.25];
        let per_seed: Vec<_> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| SeedReports {
                seed: i as u64,
                reports: vec![report("Ours", *v), report("MSP", 40.0)],
            })
            .collect();
        let res = aggregate("d", per_seed).unwrap();
        let mean = vals.iter().sum::<f64>() / 5.0;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
        assert!((res.summary[0].mean.fpr95 - mean).abs() < 1e-12);
        assert!((res.summary[0].std.fpr95 - std).abs() < 1e-12);
        assert!((res.summary[0].mean.aupr_e - mean / 2.0).abs() < 1e-12);
        assert_eq!(res.summary[1].std, MetricSet::default());
        assert_eq!(res.summary[1].mean.fpr95, 40.0);
    }

    #[test]
    fn single_seed_has_zero_std() {
        let res = aggregate(
            "d",
            vec![SeedReports {
                seed: 0,
                reports: vec![report("Ours", 3.0)],
            }],
        )
        .unwrap();
        assert_eq!(res.summary[0].std, MetricSet::default());
    }

    #[test]
    fn mismatched_reports_rejected() {
        let per_seed = vec![
            SeedReports {
                seed: 0,
                reports: vec![report("Ours", 1.0)],
            },
            SeedReports {
                seed: 1,
                reports: vec![report("MSP", 1.0)],
            },
        ];
        assert!(aggregate("d", per_seed).is_err());
        assert!(aggregate("d", vec![]).is_err());
    }

    #[test]
    fn table_has_arrows_and_rows() {
        let res = aggregate(
            "d",
            vec![SeedReports {
                seed: 0,
                reports: vec![report("Ours", 3.0), report("Default score", 8.0)],
            }],
        )
        .unwrap();
        let t = result_table(&res);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        for h in TABLE_HEADER {
            assert!(lines[0].contains(h));
        }
        assert!(lines[2].starts_with("Ours"));
        assert!(lines[3].contains(" 92.00 ±  0.00"));
    }

    #[test]
    fn methods_parse() {
        for m in DEFAULT_METHODS {
            Method::parse(m).unwrap();
        }
        assert_eq!(Method::parse("oracle").unwrap(), Method::Oracle);
        assert!(Method::parse("Ours").is_err());
    }
}
