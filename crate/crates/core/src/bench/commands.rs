use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    aggregate, eval_seed, format_table, generate, parse_methods, result_table, train_seed,
    BenchmarkResult, Calibration, Method, MethodSummary, RunConfig, SeedReports,
};
use crate::dataset::{read_dataset, write_dataset, FORMAT_VERSION};
use crate::detector::FeatureMapKind;
use crate::error::{Error, Result};
use crate::head::{load_checkpoint, save_checkpoint, Checkpoint, TrainLog};
use crate::metrics::EvalReport;
use crate::scene::DatasetSplit;

/// Refuses to write into a non-empty directory unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::WouldOverwrite(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("record serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config_digest: String,
    pub scenes: [usize; 3],
    pub objects: [usize; 3],
    pub ood_objects: [usize; 3],
}

impl Manifest {
    fn of(split: &DatasetSplit) -> Self {
        let parts = [&split.train, &split.val, &split.test];
        Self {
            format_version: FORMAT_VERSION,
            seed: split.seed,
            config_digest: split.config_digest.clone(),
            scenes: parts.map(|p| p.len()),
            objects: parts.map(|p| p.iter().map(|s| s.annotations.len()).sum()),
            ood_objects: parts.map(|p| p.iter().map(|s| s.num_ood()).sum()),
        }
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    prepare_out_dir(out, force)?;
    let split = generate(cfg)?;
    write_dataset(&split, out)?;
    let manifest = Manifest::of(&split);
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Loads a dataset and checks it was generated from `cfg`'s dataset section.
fn load_matching_dataset(cfg: &RunConfig, data: &Path) -> Result<DatasetSplit> {
    let split = read_dataset(data)?;
    let want = cfg.dataset_digest();
    if split.config_digest != want {
        return Err(Error::InvalidConfig(format!(
            "dataset at {} was generated from a different dataset config (digest {} , config gives {want}); regenerate it with gen-data",
            data.display(),
            split.config_digest
        )));
    }
    if split.train.iter().any(|s| s.num_ood() > 0) {
        return Err(Error::InvalidConfig(format!(
            "train split at {} contains OOD annotations",
            data.display()
        )));
    }
    Ok(split)
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTrainRecord {
    pub log: TrainLog,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub config_digest: String,
    pub seeds: Vec<SeedTrainRecord>,
}

/// Trains every seed independently (in parallel) and writes one checkpoint
/// per seed plus `train_log.json`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> Result<TrainRecord> {
    let split = load_matching_dataset(cfg, data)?;
    prepare_out_dir(out, force)?;
    let trained: Vec<(Checkpoint, SeedTrainRecord)> = cfg
        .head
        .seeds
        .par_iter()
        .map(|&seed| {
            let (ckpt, log, calibration) = train_seed(cfg, &split, seed)?;
            Ok((ckpt, SeedTrainRecord { log, calibration }))
        })
        .collect::<Result<_>>()?;
    let mut record = TrainRecord {
        config_digest: cfg.digest(),
        seeds: Vec::with_capacity(trained.len()),
    };
    for (ckpt, rec) in trained {
        save_checkpoint(&ckpt, &checkpoint_path(out, ckpt.seed))?;
        record.seeds.push(rec);
    }
    write_json(&out.join("train_log.json"), &record)?;
    Ok(record)
}

fn load_seed_checkpoint(cfg: &RunConfig, dir: &Path, seed: u64) -> Result<Checkpoint> {
    let path = checkpoint_path(dir, seed);
    if !path.exists() {
        return Err(Error::MissingCheckpoint { seed, path });
    }
    let ckpt = load_checkpoint(&path)?;
    let ex = super::extractor(cfg);
    if ckpt.params.feat_dim != ex.feature_dim() || ckpt.params.num_classes != ex.num_classes() {
        return Err(Error::InvalidConfig(format!(
            "{}: head expects C = {}, K = {} but the config yields C = {}, K = {}",
            path.display(),
            ckpt.params.feat_dim,
            ckpt.params.num_classes,
            ex.feature_dim(),
            ex.num_classes()
        )));
    }
    Ok(ckpt)
}

fn seed_reports_path(out: &Path, seed: u64) -> PathBuf {
    out.join("reports").join(format!("seed-{seed}.json"))
}

/// Scores the test split with every configured method for every seed and
/// writes `results.json`, `table.txt` and per-seed reports.
pub fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    checkpoints: &Path,
    out: &Path,
    force: bool,
) -> Result<BenchmarkResult> {
    let methods = parse_methods(&cfg.eval.methods)?;
    let split = load_matching_dataset(cfg, data)?;
    let heads: Vec<Option<Checkpoint>> = cfg
        .head
        .seeds
        .iter()
        .map(|&s| {
            methods
                .contains(&Method::Ours)
                .then(|| load_seed_checkpoint(cfg, checkpoints, s))
                .transpose()
        })
        .collect::<Result<_>>()?;
    prepare_out_dir(out, force)?;
    let per_seed: Vec<SeedReports> = cfg
        .head
        .seeds
        .par_iter()
        .zip(&heads)
        .map(|(&seed, ckpt)| {
            let reports = eval_seed(cfg, &split, &methods, ckpt.as_ref().map(|c| &c.params), seed)?;
            Ok(SeedReports { seed, reports })
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(out.join("reports")).map_err(|e| Error::io(out, e))?;
    for s in &per_seed {
        write_json(&seed_reports_path(out, s.seed), s)?;
    }
    let result = aggregate(&cfg.digest(), per_seed)?;
    write_json(&out.join("results.json"), &result)?;
    write_text(&out.join("table.txt"), &result_table(&result))?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    FeatureMap,
    Fusion,
    Scaling,
}

impl AblationAxis {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "feature_map" | "feature-map" => Ok(Self::FeatureMap),
            "fusion" => Ok(Self::Fusion),
            "scaling" => Ok(Self::Scaling),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation axis `{other}` (expected feature_map, fusion or scaling)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FeatureMap => "feature_map",
            Self::Fusion => "fusion",
            Self::Scaling => "scaling",
        }
    }

    fn label_headers(self) -> &'static [&'static str] {
        match self {
            Self::FeatureMap => &["Feature map"],
            Self::Fusion => &["F_feat", "F_box", "F_cls"],
            Self::Scaling => &["Scaling"],
        }
    }

    /// One `(labels, config)` pair per table row.
    pub fn variants(self, base: &RunConfig) -> Vec<(Vec<String>, RunConfig)> {
        let mark = |on: bool| if on { "✓" } else { "" }.to_string();
        match self {
            Self::FeatureMap => FeatureMapKind::ALL
                .iter()
                .map(|&kind| {
                    let mut c = base.clone();
                    c.detector.feature_map = kind;
                    (vec![kind.label().to_string()], c)
                })
                .collect(),
            Self::Fusion => [(false, false), (true, false), (false, true), (true, true)]
                .iter()
                .map(|&(b, k)| {
                    let mut c = base.clone();
                    c.head.use_box = b;
                    c.head.use_cls = k;
                    (vec![mark(true), mark(b), mark(k)], c)
                })
                .collect(),
            Self::Scaling => [("Equal", false), ("Independent", true)]
                .iter()
                .map(|&(name, independent)| {
                    let mut c = base.clone();
                    c.head.scaling.independent_axes = independent;
                    (vec![name.to_string()], c)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub labels: Vec<String>,
    pub config_digest: String,
    pub summary: MethodSummary,
    pub per_seed: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub label_headers: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let headers: Vec<&str> = self.label_headers.iter().map(String::as_str).collect();
        let rows: Vec<_> = self
            .rows
            .iter()
            .map(|r| (r.labels.clone(), r.summary.mean, r.summary.std))
            .collect();
        format_table(&headers, &rows)
    }
}

/// Trains and evaluates the head under each setting of `axis`, reusing the
/// dataset at `data`.
pub fn run_ablation(cfg: &RunConfig, axis: AblationAxis, split: &DatasetSplit) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (labels, variant) in axis.variants(cfg) {
        let per_seed: Vec<SeedReports> = variant
            .head
            .seeds
            .par_iter()
            .map(|&seed| {
                let (ckpt, _, _) = train_seed(&variant, split, seed)?;
                let reports = eval_seed(&variant, split, &[Method::Ours], Some(&ckpt.params), seed)?;
                Ok(SeedReports { seed, reports })
            })
            .collect::<Result<_>>()?;
        let digest = variant.digest();
        let mut result = aggregate(&digest, per_seed)?;
        rows.push(AblationRow {
            labels,
            config_digest: digest,
            summary: result.summary.remove(0),
            per_seed: result.per_seed.into_iter().flat_map(|s| s.reports).collect(),
        });
    }
    Ok(AblationTable {
        axis,
        label_headers: axis.label_headers().iter().map(|s| s.to_string()).collect(),
        rows,
    })
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    axis: AblationAxis,
    data: &Path,
    out: &Path,
    force: bool,
) -> Result<AblationTable> {
    let split = load_matching_dataset(cfg, data)?;
    let json = out.join(format!("ablation-{}.json", axis.name()));
    if json.exists() && !force {
        return Err(Error::WouldOverwrite(json));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let table = run_ablation(cfg, axis, &split)?;
    write_json(&json, &table)?;
    write_text(&out.join(format!("ablation-{}.txt", axis.name())), &table.to_text())?;
    Ok(table)
}

/// Renders every result file found in `dir`.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let mut out = String::new();
    let results = dir.join("results.json");
    if results.exists() {
        let r: BenchmarkResult = read_json(&results)?;
        out.push_str(&format!("Benchmark ({} seeds, config {})\n", r.per_seed.len(), &r.config_digest[..12.min(r.config_digest.len())]));
        out.push_str(&result_table(&r));
    }
    for axis in [AblationAxis::FeatureMap, AblationAxis::Fusion, AblationAxis::Scaling] {
        let path = dir.join(format!("ablation-{}.json", axis.name()));
        if path.exists() {
            let t: AblationTable = read_json(&path)?;
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("Ablation: {}\n", axis.name()));
            out.push_str(&t.to_text());
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no results.json or ablation-*.json in {}",
            dir.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_axes_have_expected_rows() {
        let cfg = RunConfig::default();
        let fusion = AblationAxis::Fusion.variants(&cfg);
        assert_eq!(fusion.len(), 4);
        let flags: Vec<_> = fusion.iter().map(|(_, c)| (c.head.use_box, c.head.use_cls)).collect();
        assert_eq!(flags, vec![(false, false), (true, false), (false, true), (true, true)]);
        let scaling = AblationAxis::Scaling.variants(&cfg);
        assert_eq!(scaling.len(), 2);
        assert_eq!(scaling[0].0, vec!["Equal"]);
        assert!(!scaling[0].1.head.scaling.independent_axes);
        assert!(scaling[1].1.head.scaling.independent_axes);
        assert_eq!(AblationAxis::FeatureMap.variants(&cfg).len(), 4);
        assert!(AblationAxis::parse("bogus").is_err());
    }

    #[test]
    fn out_dir_guard() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("x");
        prepare_out_dir(&sub, false).unwrap();
        prepare_out_dir(&sub, false).unwrap();
        fs::write(sub.join("f"), "1").unwrap();
        assert!(matches!(prepare_out_dir(&sub, false), Err(Error::WouldOverwrite(_))));
        prepare_out_dir(&sub, true).unwrap();
    }
}
