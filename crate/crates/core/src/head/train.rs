use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    backward_into, bce_loss, forward, init_params, HeadConfig, InputNorm, Layers, Mode, OodHeadParams,
};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, RawInput};
use crate::outlier::{synthesize_outliers, ScalingConfig};
use crate::rng;
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            lr0: 1e-3,
            lr_min: 1e-5,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr_min > 0.0
            && self.lr_min < self.lr0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.poly_power > 0;
        if !ok {
            return Err(Error::InvalidConfig(
                "train config needs positive epochs/batch/power, 0 < lr_min < lr0, momentum in [0, 1)"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    /// Mean train-mode BCE over each epoch's samples.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    pub samples_per_epoch: Vec<usize>,
    pub ood_per_epoch: Vec<usize>,
}

/// Polynomial decay from `lr0` at step 0 to `lr_min` at `total`.
pub fn poly_lr(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    if total == 0 {
        return cfg.lr0;
    }
    let frac = 1.0 - step.min(total) as f64 / total as f64;
    (cfg.lr0 - cfg.lr_min) * frac.powi(cfg.poly_power as i32) + cfg.lr_min
}

/// Momentum SGD with decoupled-from-bias L2: `v ← μv + g + λw`, `w ← w − lr·v`.
pub fn sgd_step(params: &mut Layers, grads: &Layers, velocity: &mut Layers, lr: f64, cfg: &TrainConfig) {
    for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(velocity.iter_mut()) {
        for ((w, gw), vw) in p.weight.iter_mut().zip(&g.weight).zip(v.weight.iter_mut()) {
            *vw = cfg.momentum * *vw + gw + cfg.weight_decay * *w;
            *w -= lr * *vw;
        }
        for ((b, gb), vb) in p.bias.iter_mut().zip(&g.bias).zip(v.bias.iter_mut()) {
            *vb = cfg.momentum * *vb + gb;
            *b -= lr * *vb;
        }
    }
}

/// One epoch of labelled inputs: every scene is re-augmented from its own
/// stream, so the result does not depend on scheduling.
pub fn training_inputs(
    scenes: &[Scene],
    extractor: &FeatureExtractor,
    scaling: &ScalingConfig,
    seed: u64,
    epoch: usize,
) -> Vec<RawInput> {
    let k = extractor.num_classes();
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut r = rng::stream(seed, &[rng::tag("augment"), epoch as u64, i as u64]);
            let augmented = synthesize_outliers(scene, k, scaling, &mut r);
            extractor.training_inputs(&augmented)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Trains `params` on pre-built per-epoch input sets. Sequential and
/// deterministic given `seed`.
pub fn fit(
    params: &mut OodHeadParams,
    epochs: &[Vec<RawInput>],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    if epochs.is_empty() || epochs.iter().any(Vec::is_empty) {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    for x in epochs.iter().flatten() {
        params.check_input(x)?;
        if x.label.is_none() {
            return Err(Error::InvalidArgument("training input without label".into()));
        }
    }
    let total: usize = epochs.iter().map(|e| e.len().div_ceil(cfg.batch_size)).sum();
    let mut velocity = params.layers.zeros_like();
    let mut grads = params.layers.zeros_like();
    let mut dropout_rng = rng::stream(seed, &[rng::tag("head-dropout")]);
    let mut step = 0;
    let mut log = TrainLog {
        seed,
        epoch_loss: Vec::with_capacity(epochs.len()),
        steps: total,
        samples_per_epoch: Vec::with_capacity(epochs.len()),
        ood_per_epoch: Vec::with_capacity(epochs.len()),
    };
    for (e, inputs) in epochs.iter().enumerate() {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::tag("head-shuffle"), e as u64]));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.scale(0.0);
            for &i in batch {
                let x = &inputs[i];
                let label = x.label.expect("checked above");
                let cache = forward(params, x, Mode::Train, &mut dropout_rng)?;
                loss_sum += bce_loss(cache.score, label);
                backward_into(params, &cache, label, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            let lr = poly_lr(step, total, cfg);
            sgd_step(&mut params.layers, &grads, &mut velocity, lr, cfg);
            step += 1;
        }
        log.epoch_loss.push(loss_sum / inputs.len() as f64);
        log.samples_per_epoch.push(inputs.len());
        log.ood_per_epoch
            .push(inputs.iter().filter(|x| x.label == Some(true)).count());
    }
    Ok(log)
}

/// Initializes and trains a head on `scenes`, which must not contain OOD
/// annotations; outliers are synthesized afresh every epoch.
pub fn train(
    scenes: &[Scene],
    extractor: &FeatureExtractor,
    scaling: &ScalingConfig,
    head: &HeadConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(OodHeadParams, TrainLog)> {
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("train split is empty".into()));
    }
    if scenes.iter().any(|s| s.num_ood() > 0) {
        return Err(Error::InvalidConfig("train split contains OOD annotations".into()));
    }
    cfg.validate()?;
    scaling.validate()?;
    let mut params = init_params(extractor.feature_dim(), extractor.num_classes(), head, seed)?;
    let epochs: Vec<Vec<RawInput>> = (0..cfg.epochs)
        .map(|e| training_inputs(scenes, extractor, scaling, seed, e))
        .collect();
    params.norm = InputNorm::fit(&epochs[0], params.feat_dim, params.num_classes);
    let log = fit(&mut params, &epochs, cfg, seed)?;
    Ok((params, log))
}

/// Fraction of ID objects that must fall at or below the threshold.
pub const CALIBRATION_TPR: f64 = 0.95;
pub const MIN_CALIBRATION_SCORES: usize = 20;

/// Smallest `δ` with at least 95 % of `id_scores` satisfying `g ≤ δ`.
pub fn calibrate_threshold(id_scores: &[f64]) -> Result<f64> {
    if id_scores.len() < MIN_CALIBRATION_SCORES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_CALIBRATION_SCORES} ID scores to calibrate, got {}",
            id_scores.len()
        )));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let need = (CALIBRATION_TPR * sorted.len() as f64 - 1e-9).ceil() as usize;
    Ok(sorted[need.max(1) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Id,
    Ood,
}

pub fn classify(score: f64, threshold: f64) -> Decision {
    if score <= threshold {
        Decision::Id
    } else {
        Decision::Ood
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::one_hot;
    use crate::head::{score, Linear};
    use crate::rng::Rng;
    use rand::{Rng as _, SeedableRng};

    #[test]
    fn poly_lr_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(poly_lr(0, 1000, &cfg), 1e-3);
        assert!((poly_lr(1000, 1000, &cfg) - 1e-5).abs() < 1e-20);
        assert!((poly_lr(500, 1000, &cfg) - 1.3375e-4).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 0..=1000 {
            let lr = poly_lr(s, 1000, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn scalar(v: f64) -> Layers {
        let mut l = Linear::zeros(1, 1);
        l.weight[0] = v;
        let empty = Linear::zeros(0, 0);
        Layers {
            w_box: empty.clone(),
            w_cls: empty,
            mlp: [l, Linear::zeros(0, 0), Linear::zeros(0, 0)],
        }
    }

    #[test]
    fn sgd_hand_computation() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar(1.0);
        let mut v = scalar(0.0);
        let g = scalar(1.0);
        sgd_step(&mut p, &g, &mut v, 0.1, &cfg);
        assert!((p.mlp[0].weight[0] - 0.9).abs() < 1e-15);
        assert_eq!(v.mlp[0].weight[0], 1.0);
        sgd_step(&mut p, &g, &mut v, 0.1, &cfg);
        assert!((v.mlp[0].weight[0] - 1.9).abs() < 1e-15);

        let mut p = scalar(0.7);
        let mut v = scalar(0.0);
        sgd_step(&mut p, &scalar(0.0), &mut v, 0.1, &cfg);
        assert_eq!(p.mlp[0].weight[0], 0.7);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let cfg = TrainConfig {
            weight_decay: 0.5,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar(2.0);
        p.mlp[0].bias[0] = 2.0;
        let mut v = p.zeros_like();
        let g = p.zeros_like();
        sgd_step(&mut p, &g, &mut v, 0.1, &cfg);
        assert!((p.mlp[0].weight[0] - 1.9).abs() < 1e-15);
        assert_eq!(p.mlp[0].bias[0], 2.0);
    }

    fn toy_set(n: usize, seed: u64) -> Vec<RawInput> {
        let mut r = Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let ood = i % 2 == 1;
                let class = r.random_range(0..3);
                RawInput {
                    f_feat: one_hot(2, ood as usize),
                    box_vec: std::array::from_fn(|_| r.random_range(-1.0..1.0)),
                    logits: (0..3).map(|_| r.random_range(-2.0..0.0)).collect(),
                    onehot: one_hot(3, class),
                    label: Some(ood),
                }
            })
            .collect()
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let cfg = TrainConfig::default();
        let mut p = init_params(2, 3, &HeadConfig::default(), 0).unwrap();
        let epochs: Vec<_> = (0..cfg.epochs).map(|e| toy_set(20_000, e as u64)).collect();
        let log = fit(&mut p, &epochs, &cfg, 0).unwrap();
        assert!(log.epoch_loss.iter().all(|l| l.is_finite()));
        let last = *log.epoch_loss.last().unwrap();
        assert!(last < 0.1, "{:?}", log.epoch_loss);
        let test = toy_set(200, 99);
        let eval_loss: f64 = test
            .iter()
            .map(|x| bce_loss(score(&p, x).unwrap(), x.label.unwrap()))
            .sum::<f64>()
            / 200.0;
        assert!(eval_loss < 0.1, "{eval_loss}");
    }

    #[test]
    fn fit_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let epochs: Vec<_> = (0..2).map(|e| toy_set(100, e)).collect();
        let run = || {
            let mut p = init_params(2, 3, &HeadConfig::default(), 5).unwrap();
            let log = fit(&mut p, &epochs, &cfg, 5).unwrap();
            (p, log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fit_rejects_empty_and_unlabelled() {
        let cfg = TrainConfig::default();
        let mut p = init_params(2, 3, &HeadConfig::default(), 0).unwrap();
        assert!(matches!(fit(&mut p, &[vec![]], &cfg, 0), Err(Error::InvalidConfig(_))));
        let mut x = toy_set(3, 0);
        x[1].label = None;
        assert!(fit(&mut p, &[x], &cfg, 0).is_err());
    }

    #[test]
    fn calibration_examples() {
        let ten: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let mut twenty = ten.clone();
        twenty.extend(&ten);
        assert_eq!(calibrate_threshold(&twenty).unwrap(), 1.0);
        assert_eq!(calibrate_threshold(&[0.37; 25]).unwrap(), 0.37);
        assert_eq!(calibrate_threshold(&[0.0; 40]).unwrap(), 0.0);
        assert!(matches!(calibrate_threshold(&ten), Err(Error::InvalidArgument(_))));

        let hundred: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(calibrate_threshold(&hundred).unwrap(), 94.0);
    }

    /// Exhaustive sweep over candidate thresholds.
    #[test]
    fn calibration_matches_sweep() {
        let mut r = Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = r.random_range(20..120);
            let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..30) as f64) / 30.0).collect();
            let best = scores
                .iter()
                .copied()
                .filter(|d| {
                    let ok = scores.iter().filter(|s| *s <= d).count();
                    ok as f64 >= 0.95 * n as f64 - 1e-9
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(calibrate_threshold(&scores).unwrap(), best);
        }
    }

    #[test]
    fn decision_rule() {
        assert_eq!(classify(0.4, 0.4), Decision::Id);
        assert_eq!(classify(0.0, 0.0), Decision::Id);
        assert_eq!(classify(1.0, 0.5), Decision::Ood);
        assert_eq!(classify(0.5 + 1e-12, 0.5), Decision::Ood);
    }
}
