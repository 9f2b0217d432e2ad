//! Newline-delimited JSON dataset files, one per split.
//!
//! Line 1 is a header record carrying the format version, the split name,
//! the master seed, the config digest, and the number of scene records that
//! follow. Every subsequent line is one [`Scene`]. Floats are written in
//! shortest round-trip form, so coordinates read back bit-exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{DatasetSplit, Scene};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitHeader {
    pub format_version: u32,
    pub split: String,
    pub seed: u64,
    pub config_digest: String,
    pub scene_count: usize,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

pub fn split_path(dir: &Path, split: &str) -> std::path::PathBuf {
    dir.join(format!("{split}.jsonl"))
}

pub fn write_scenes(
    path: &Path,
    split: &str,
    seed: u64,
    config_digest: &str,
    scenes: &[Scene],
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = SplitHeader {
        format_version: FORMAT_VERSION,
        split: split.to_string(),
        seed,
        config_digest: config_digest.to_string(),
        scene_count: scenes.len(),
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut out, &header).map_err(|e| io(e.into()))?;
    out.write_all(b"\n").map_err(io)?;
    for scene in scenes {
        serde_json::to_writer(&mut out, scene).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_scenes(path: &Path) -> Result<(SplitHeader, Vec<Scene>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header record".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: SplitHeader =
        serde_json::from_str(&first).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported format_version {}", header.format_version),
        ));
    }
    let mut scenes = Vec::with_capacity(header.scene_count);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let scene: Scene =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        scenes.push(scene);
    }
    if scenes.len() != header.scene_count {
        return Err(parse_err(
            scenes.len() + 1,
            format!(
                "header announces {} scenes but {} were found (truncated file?)",
                header.scene_count,
                scenes.len()
            ),
        ));
    }
    Ok((header, scenes))
}

/// Writes `train.jsonl`, `val.jsonl` and `test.jsonl` under `dir`.
pub fn write_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, scenes) in SPLIT_NAMES.iter().zip([&split.train, &split.val, &split.test]) {
        write_scenes(
            &split_path(dir, name),
            name,
            split.seed,
            &split.config_digest,
            scenes,
        )?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let mut out = DatasetSplit::default();
    for (i, name) in SPLIT_NAMES.iter().enumerate() {
        let path = split_path(dir, name);
        let (header, scenes) = read_scenes(&path)?;
        if header.split != *name {
            return Err(Error::Parse {
                path,
                line: 1,
                message: format!("expected split `{name}`, header says `{}`", header.split),
            });
        }
        if i == 0 {
            out.seed = header.seed;
            out.config_digest = header.config_digest.clone();
        } else if header.seed != out.seed || header.config_digest != out.config_digest {
            return Err(Error::Parse {
                path,
                line: 1,
                message: "split headers disagree on seed or config digest".into(),
            });
        }
        match i {
            0 => out.train = scenes,
            1 => out.val = scenes,
            _ => out.test = scenes,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_splits, Catalog, SceneParams, SplitCounts};

    fn small_split() -> DatasetSplit {
        let mut s = build_splits(
            &Catalog::default_road(),
            SplitCounts {
                train: 3,
                val: 2,
                test: 2,
            },
            &SceneParams::default(),
            5,
        )
        .unwrap();
        s.config_digest = "abc".into();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let split = small_split();
        write_dataset(&split, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, split);

        let first = fs::read(split_path(dir.path(), "train")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(&back, dir2.path()).unwrap();
        assert_eq!(first, fs::read(split_path(dir2.path(), "train")).unwrap());
    }

    #[test]
    fn empty_split_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let split = DatasetSplit::default();
        write_dataset(&split, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), split);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&small_split(), dir.path()).unwrap();
        let path = split_path(dir.path(), "val");
        let bytes = fs::read(&path).unwrap();

        // cut mid-record
        fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");

        // cut at a record boundary
        let text = String::from_utf8(bytes).unwrap();
        let keep: Vec<&str> = text.lines().take(2).collect();
        fs::write(&path, keep.join("\n") + "\n").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn garbage_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&small_split(), dir.path()).unwrap();
        let path = split_path(dir.path(), "test");
        let mut text = fs::read_to_string(&path).unwrap();
        text = text.replacen("\"annotations\"", "\"annotationz\"", 1);
        fs::write(&path, text).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
