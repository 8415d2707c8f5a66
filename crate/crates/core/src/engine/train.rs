//! Single-threaded SGD training loop.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::weights::save_weights;
use super::{anchors_for, EngineError};
use crate::anchorer::assign;
use crate::autodiff::{sgd_step, AutodiffError, Graph, Param, SgdConfig};
use crate::data::{augment, images_to_tensor, sample_seed, AugmentConfig, Sample};
use crate::loss::{total_loss, LossBreakdown, LossWeights};
use crate::net::{Model, NetConfig, NetError};

const SHUFFLE_STREAM: u64 = 0x7368_7566_666c_6521;
const AUGMENT_STREAM: u64 = 0x6175_676d_656e_7421;

/// File name of the per-epoch checkpoint.
pub const CHECKPOINT_FILE: &str = "checkpoint.stlpdw";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Floor of the cosine schedule.
    pub min_lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub shuffle: bool,
    /// Rescales the global gradient norm down to this value when larger.
    pub grad_clip: Option<f32>,
    pub augment: Option<AugmentConfig>,
    /// Directory receiving a checkpoint after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            epochs: 10,
            batch_size: 8,
            lr: 0.01,
            min_lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            loss_weights: LossWeights::default(),
            shuffle: true,
            grad_clip: Some(5.0),
            augment: Some(AugmentConfig::default()),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("min_lr", self.min_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum = {} must lie in [0, 1)", self.momentum));
        }
        let w = self.loss_weights;
        if [w.cls, w.bbox, w.corner].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            problems.push("loss weights must be finite and non-negative".to_string());
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                problems.push(format!("grad_clip = {c} must be finite and positive"));
            }
        }
        if let Some(a) = self.augment {
            if !(0.0..=1.0).contains(&a.flip_prob) || !(0.0..1.0).contains(&a.jitter) {
                problems.push("augment flip_prob must lie in [0, 1] and jitter in [0, 1)".to_string());
            }
        }
        self.net.validate()?;
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EngineError::Config(problems.join("; ")))
        }
    }
}

/// Cosine decay from `lr` at step 0 towards `min(min_lr, lr)` at `total`.
pub fn cosine_lr(lr: f32, min_lr: f32, step: usize, total: usize) -> f32 {
    let lo = min_lr.min(lr);
    if total == 0 {
        return lr;
    }
    let t = step.min(total) as f64 / total as f64;
    (lo as f64 + (lr - lo) as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    /// 1-based.
    pub step: usize,
    pub epoch: usize,
    pub lr: f32,
    pub loss: LossBreakdown,
}

/// `step<TAB>cls<TAB>box<TAB>corner<TAB>total`, one line per step.
pub fn format_log(log: &[StepLog]) -> String {
    let mut out = String::new();
    for s in log {
        let l = &s.loss;
        let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", s.step, l.cls, l.bbox, l.corner, l.total);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub log: Vec<StepLog>,
}

fn fault(step: usize, e: EngineError) -> EngineError {
    match e {
        EngineError::Autodiff(AutodiffError::NumericFault { op })
        | EngineError::Net(NetError::Autodiff(AutodiffError::NumericFault { op })) => EngineError::NumericFault {
            step,
            component: op.to_string(),
        },
        other => other,
    }
}

/// Scales every gradient by `max / norm` when the global norm exceeds
/// `max`. Returns the norm before clipping.
pub fn clip_gradients(params: &mut [Param], max: f32) -> f32 {
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter().map(|&v| v as f64 * v as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max {
        let k = max / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.tensor.grad() {
                let scaled = g.iter().map(|v| v * k).collect();
                p.tensor.set_grad(Some(scaled)).expect("same length");
            }
        }
    }
    norm
}

/// Trains a freshly initialized model seeded by `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    data: &[Sample],
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutput, EngineError> {
    cfg.validate()?;
    let model = Model::build(&cfg.net, cfg.seed)?;
    train_from(model, cfg, data, on_step)
}

/// Continues training `model`. Its architecture takes precedence over
/// `cfg.net`.
pub fn train_from(
    mut model: Model,
    cfg: &TrainConfig,
    data: &[Sample],
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutput, EngineError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    let size = model.config().input_size;
    for (index, s) in data.iter().enumerate() {
        if s.image.width != size || s.image.height != size {
            return Err(EngineError::ImageSize {
                index,
                width: s.image.width,
                height: s.image.height,
                expected: size,
            });
        }
    }
    let anchors = anchors_for(model.config())?;
    let per_cell = model.config().anchors_per_cell;
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(total);
    let mut seen = 0u64;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = match &cfg.augment {
                    Some(a) => augment(&data[i], sample_seed(cfg.seed ^ AUGMENT_STREAM, seen), a)?,
                    None => data[i].clone(),
                };
                seen += 1;
                batch.push(s);
            }
            let assignments = batch
                .iter()
                .map(|s| assign(&anchors, &s.gt_box, &s.gt_quad))
                .collect::<Result<Vec<_>, _>>()?;
            let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
            let x = images_to_tensor(&images);

            let mut g = Graph::new();
            let fv = model.forward(&mut g, &x, true).map_err(|e| fault(step, e.into()))?;
            let maps = fv.maps(&g, per_cell);
            let out = total_loss(&maps, &assignments, &anchors, &cfg.loss_weights)?;
            if let Some(component) = out.breakdown.non_finite_component() {
                return Err(EngineError::NumericFault {
                    step,
                    component: component.to_string(),
                });
            }
            let mut seeds: Vec<(_, &[f32])> = Vec::new();
            for (&(s, b, c), (gs, gb, gc)) in fv.heads.iter().zip(&out.grads.levels) {
                seeds.extend([(s, gs.as_slice()), (b, gb.as_slice()), (c, gc.as_slice())]);
            }
            g.backward(&seeds).map_err(|e| fault(step, e.into()))?;
            model.load_grads(&g, &fv);
            if let Some(max) = cfg.grad_clip {
                clip_gradients(model.params_mut(), max);
            }
            let lr = cosine_lr(cfg.lr, cfg.min_lr, step - 1, total);
            let sgd = SgdConfig {
                lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            sgd_step(model.params_mut(), &sgd).map_err(|e| match e {
                AutodiffError::NumericFault { .. } => EngineError::NumericFault {
                    step,
                    component: "gradient".to_string(),
                },
                other => other.into(),
            })?;
            let entry = StepLog {
                step,
                epoch,
                lr,
                loss: out.breakdown,
            };
            on_step(&entry);
            log.push(entry);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| EngineError::io(dir, e))?;
            save_weights(&model, &dir.join(CHECKPOINT_FILE))?;
        }
    }
    Ok(TrainOutput { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_is_monotone() {
        let mut prev = f32::INFINITY;
        for t in 0..=50 {
            let v = cosine_lr(0.01, 1e-4, t, 50);
            assert!(v <= prev);
            prev = v;
        }
        assert_eq!(cosine_lr(0.01, 1e-4, 0, 50), 0.01);
        assert!((cosine_lr(0.01, 1e-4, 50, 50) - 1e-4).abs() < 1e-9);
        assert_eq!(cosine_lr(0.0, 1e-4, 7, 50), 0.0);
    }

    #[test]
    fn config_validation_lists_problems() {
        let cfg = TrainConfig {
            batch_size: 0,
            momentum: 1.5,
            ..TrainConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("batch_size") && msg.contains("momentum"), "{msg}");
    }
}
