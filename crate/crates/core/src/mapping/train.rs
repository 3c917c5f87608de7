use nalgebra::Vector3;

use super::loss::{map_loss, MapLossWeights};
use super::{MapModel, MappingError};
use crate::dataio::Image;
use crate::tensor::{AdamW, AdamWConfig, CosineSchedule, SeededRng, StepOutcome, Tape};

/// A keyframe image and its camera position, in frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSample {
    pub image: Image,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapTrainConfig {
    pub epochs: usize,
    /// Consecutive keyframes per optimizer step.
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta_kl: f64,
    pub lambda_edl: f64,
    /// Train on the embedding distance loss alone.
    pub edl_only: bool,
    /// Index gap inside each EDL triple.
    pub triple_stride: usize,
    /// Offset between window starts within an epoch.
    pub window_stride: usize,
    pub seed: u64,
    pub max_faults: u64,
}

impl Default for MapTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 8,
            lr_max: 1e-3,
            lr_min: 1e-5,
            beta_kl: 1e-3,
            lambda_edl: 1.0,
            edl_only: false,
            triple_stride: 1,
            window_stride: 1,
            seed: 0,
            max_faults: 100,
        }
    }
}

impl MapTrainConfig {
    fn uses_edl(&self) -> bool {
        self.lambda_edl > 0.0 || self.edl_only
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        let bad = |m: &str| Err(MappingError::InvalidConfig(m.into()));
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.beta_kl >= 0.0 && self.lambda_edl >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.triple_stride == 0 || self.window_stride == 0 {
            return bad("triple and window strides must be positive");
        }
        if self.uses_edl() && self.batch < 2 * self.triple_stride + 1 {
            return bad("batch is too small to hold an EDL triple");
        }
        Ok(())
    }

    fn weights(&self) -> MapLossWeights {
        MapLossWeights {
            beta_kl: self.beta_kl,
            lambda_edl: self.lambda_edl,
            edl_only: self.edl_only,
            triple_stride: self.triple_stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapEpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Epoch means of the total loss and its components.
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub edl: f64,
    pub lr: f64,
    pub faults: u64,
}

pub fn train_map(
    model: &mut MapModel,
    samples: &[MapSample],
    cfg: &MapTrainConfig,
) -> Result<Vec<MapEpochLog>, MappingError> {
    train_map_with(model, samples, cfg, &mut |_| {})
}

/// Each epoch visits windows of `batch` consecutive keyframes, starting
/// `window_stride` apart from a random phase, in shuffled order.
pub fn train_map_with(
    model: &mut MapModel,
    samples: &[MapSample],
    cfg: &MapTrainConfig,
    on_epoch: &mut dyn FnMut(&MapEpochLog),
) -> Result<Vec<MapEpochLog>, MappingError> {
    cfg.validate()?;
    if samples.len() < cfg.batch {
        return Err(MappingError::TooFew {
            needed: cfg.batch,
            got: samples.len(),
        });
    }
    let inputs = samples
        .iter()
        .map(|s| model.prepare(&s.image))
        .collect::<Result<Vec<_>, _>>()?;
    let positions: Vec<Vector3<f64>> = samples.iter().map(|s| s.position).collect();
    let span = samples.len() - cfg.batch + 1;
    let phases = cfg.window_stride.min(span);
    let per_epoch = (span - phases) / cfg.window_stride + 1;
    let schedule = CosineSchedule::single(cfg.lr_max, cfg.lr_min, cfg.epochs * per_epoch)
        .map_err(|e| MappingError::InvalidConfig(e.to_string()))?;
    let mut opt = AdamW::new(&model.store, AdamWConfig::adam());
    let mut order_rng = SeededRng::stream(cfg.seed, 0x77696e);
    let mut noise_rng = SeededRng::stream(cfg.seed, 0x6e6f6973);
    let weights = cfg.weights();
    let d = model.config.embedding_dim;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut t = 0;
    for epoch in 0..cfg.epochs {
        let phase = order_rng.below(phases);
        let mut starts: Vec<usize> = (0..per_epoch).map(|k| phase + k * cfg.window_stride).collect();
        order_rng.shuffle(&mut starts);
        let mut sums = [0.0f64; 4];
        let mut lr = cfg.lr_max;
        for start in starts {
            lr = schedule.lr(t).expect("step within schedule");
            t += 1;
            let window = start..start + cfg.batch;
            let refs: Vec<&[f32]> = inputs[window.clone()].iter().map(|v| v.as_slice()).collect();
            let noise: Option<Vec<f64>> = model
                .config
                .variational
                .then(|| (0..cfg.batch * d).map(|_| noise_rng.normal()).collect());
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(model.batch(&refs)?);
            let l = map_loss(
                &mut tape,
                model,
                &model.store,
                x,
                &positions[window],
                &weights,
                noise.as_deref(),
            )?;
            let total = tape.value(l.total).item() as f64;
            for (s, v) in sums.iter_mut().zip([total, l.recon, l.kl, l.edl]) {
                *s += v;
            }
            let grads = tape.backward(l.total)?;
            model.store.set_grads(&grads);
            if opt.step(&mut model.store, lr) == StepOutcome::SkippedNonFinite && opt.faults() > cfg.max_faults {
                return Err(MappingError::FaultLimit {
                    faults: opt.faults(),
                    epoch: epoch + 1,
                });
            }
        }
        let n = per_epoch as f64;
        let entry = MapEpochLog {
            epoch: epoch + 1,
            loss: sums[0] / n,
            recon: sums[1] / n,
            kl: sums[2] / n,
            edl: sums[3] / n,
            lr,
            faults: opt.faults(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::MapConfig;

    fn tiny() -> (MapModel, Vec<MapSample>) {
        let model = MapModel::new(
            MapConfig {
                image_size: 8,
                channels: vec![2, 4],
                embedding_dim: 4,
                variational: true,
                unet: true,
            },
            3,
        )
        .unwrap();
        let mut rng = SeededRng::new(5);
        let samples = (0..12)
            .map(|k| MapSample {
                image: Image::new(8, 8, (0..64).map(|_| rng.uniform() as f32).collect()).unwrap(),
                position: Vector3::new(k as f64, 0.0, 0.0),
            })
            .collect();
        (model, samples)
    }

    #[test]
    fn defaults() {
        let c = MapTrainConfig::default();
        assert_eq!((c.epochs, c.batch, c.lr_max, c.lr_min), (10, 8, 1e-3, 1e-5));
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (mut model, samples) = tiny();
        let before = model.store.clone();
        let cfg = MapTrainConfig {
            epochs: 2,
            batch: 4,
            lr_max: 0.0,
            lr_min: 0.0,
            ..MapTrainConfig::default()
        };
        train_map(&mut model, &samples, &cfg).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = MapTrainConfig {
            epochs: 2,
            batch: 4,
            ..MapTrainConfig::default()
        };
        let (mut a, samples) = tiny();
        let (mut b, _) = tiny();
        let la = train_map(&mut a, &samples, &cfg).unwrap();
        let lb = train_map(&mut b, &samples, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn edl_only_logs_losses() {
        let (mut model, samples) = tiny();
        let cfg = MapTrainConfig {
            epochs: 3,
            batch: 4,
            edl_only: true,
            ..MapTrainConfig::default()
        };
        let log = train_map(&mut model, &samples, &cfg).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|e| e.recon == 0.0 && e.loss.is_finite()));
    }

    #[test]
    fn rejects_small_batches() {
        let (mut model, samples) = tiny();
        let cfg = MapTrainConfig {
            batch: 2,
            ..MapTrainConfig::default()
        };
        assert!(train_map(&mut model, &samples, &cfg).is_err());
        let cfg = MapTrainConfig {
            batch: 20,
            ..MapTrainConfig::default()
        };
        assert!(matches!(train_map(&mut model, &samples, &cfg), Err(MappingError::TooFew { .. })));
    }
}
