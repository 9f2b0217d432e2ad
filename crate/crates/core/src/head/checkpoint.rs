use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layer_shapes, Layers, OodHeadParams};
use super::train::TrainConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained head plus what is needed to reproduce and apply it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub config_digest: String,
    pub train: TrainConfig,
    /// `(in, out)` per layer: box encoder, class encoder, three MLP layers.
    pub shapes: Vec<(usize, usize)>,
    pub params: OodHeadParams,
    /// Calibrated decision threshold, if one was fitted.
    pub threshold: Option<f64>,
}

impl Checkpoint {
    pub fn new(
        params: OodHeadParams,
        train: TrainConfig,
        seed: u64,
        config_digest: String,
        threshold: Option<f64>,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            seed,
            config_digest,
            train,
            shapes: shapes_of(&params.layers),
            params,
            threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("checkpoint: {m}")));
        if self.format_version != CHECKPOINT_VERSION {
            return bad(format!("unsupported format_version {}", self.format_version));
        }
        let p = &self.params;
        let expected = layer_shapes(p.feat_dim, p.num_classes, &p.config);
        if self.shapes != expected || shapes_of(&p.layers) != expected {
            return bad(format!("layer shapes {:?} do not match C = {}, K = {}", self.shapes, p.feat_dim, p.num_classes));
        }
        if !p.norm.dims_ok(p.feat_dim, p.num_classes) {
            return bad("input standardization has the wrong length".into());
        }
        for l in p.layers.iter() {
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return bad("weight array length disagrees with its shape".into());
            }
            if !l.weight.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return bad("non-finite weight".into());
            }
        }
        Ok(())
    }
}

fn shapes_of(layers: &Layers) -> Vec<(usize, usize)> {
    layers.iter().map(|l| (l.in_dim, l.out_dim)).collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let text = serde_json::to_string(ckpt).expect("checkpoint serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    ckpt.validate()?;
    Ok(ckpt)
}
