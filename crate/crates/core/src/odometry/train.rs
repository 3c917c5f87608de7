use super::loss::{composition_loss_var, step_loss_var, DEFAULT_KAPPA};
use super::{OdometryError, VoModel};
use crate::dataio::FlowField;
use crate::geometry::RelativePose;
use crate::tensor::{AdamW, AdamWConfig, CosineSchedule, SeededRng, StepOutcome, Tape};

/// One training example: the flow from frame `i` to `i+1` and the true motion.
#[derive(Debug, Clone, PartialEq)]
pub struct VoSample {
    pub flow: FlowField,
    pub gt: RelativePose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    /// Weight of the composition term.
    pub alpha: f64,
    pub epochs: usize,
    /// Composition window length in steps.
    pub window: usize,
}

/// Ordered curriculum with optimizer and batching settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumPlan {
    pub stages: Vec<Stage>,
    pub lr_max: f64,
    pub lr_min: f64,
    pub kappa: f64,
    pub weight_decay: f64,
    /// Consecutive steps per optimizer batch; must cover the largest window.
    pub clip_len: usize,
    /// Offset between clip starts within an epoch.
    pub clip_stride: usize,
    /// Training aborts once more steps than this were skipped as non-finite.
    pub max_faults: u64,
}

impl Default for CurriculumPlan {
    fn default() -> Self {
        let stage = |alpha, epochs, window| Stage {
            alpha,
            epochs,
            window,
        };
        Self {
            stages: vec![
                stage(1.0, 5, 2),
                stage(0.7, 5, 4),
                stage(0.3, 10, 6),
                stage(0.3, 10, 8),
            ],
            lr_max: 1e-3,
            lr_min: 1e-6,
            kappa: DEFAULT_KAPPA,
            weight_decay: 1e-2,
            clip_len: 8,
            clip_stride: 1,
            max_faults: 100,
        }
    }
}

impl CurriculumPlan {
    pub fn validate(&self) -> Result<(), OdometryError> {
        let bad = |m: String| Err(OdometryError::InvalidPlan(m));
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        let mut prev = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.alpha) {
                return bad(format!("stage {}: alpha {} outside [0, 1]", i + 1, s.alpha));
            }
            if s.window < 2 {
                return bad(format!("stage {}: window must be at least 2", i + 1));
            }
            if s.window < prev {
                return bad(format!("stage {}: windows must not shrink", i + 1));
            }
            if s.epochs == 0 {
                return bad(format!("stage {}: epochs must be positive", i + 1));
            }
            prev = s.window;
        }
        if self.clip_len < prev {
            return bad(format!("clip length {} is shorter than window {prev}", self.clip_len));
        }
        if self.clip_stride == 0 {
            return bad("clip stride must be positive".into());
        }
        if !(self.kappa >= 0.0 && self.weight_decay >= 0.0) {
            return bad("kappa and weight decay must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based stage and epoch-within-stage.
    pub stage: usize,
    pub epoch: usize,
    /// Mean over the epoch's batches of the total, per-step and composition losses.
    pub loss: f64,
    pub step_loss: f64,
    pub comp_loss: f64,
    /// Learning rate of the last batch.
    pub lr: f64,
    pub faults: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
    pub faults: u64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Objective {
    Full,
    StepOnly,
}

pub fn train_vo(
    model: &mut VoModel,
    sequences: &[Vec<VoSample>],
    plan: &CurriculumPlan,
    seed: u64,
) -> Result<TrainReport, OdometryError> {
    run(model, sequences, plan, seed, Objective::Full, &mut |_| {})
}

/// [`train_vo`] with a callback after every epoch.
pub fn train_vo_with(
    model: &mut VoModel,
    sequences: &[Vec<VoSample>],
    plan: &CurriculumPlan,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport, OdometryError> {
    run(model, sequences, plan, seed, Objective::Full, on_epoch)
}

/// Trains on the per-step loss alone, ignoring every stage's composition term.
pub fn train_vo_step_only(
    model: &mut VoModel,
    sequences: &[Vec<VoSample>],
    plan: &CurriculumPlan,
    seed: u64,
) -> Result<TrainReport, OdometryError> {
    run(model, sequences, plan, seed, Objective::StepOnly, &mut |_| {})
}

/// Clip starts for one epoch. Each sequence contributes the same number of
/// clips every epoch, starting at a random phase below the stride.
struct Clips {
    per_sequence: Vec<(usize, usize, usize)>, // (sequence, phases, count)
    stride: usize,
}

impl Clips {
    fn new(lengths: &[usize], clip_len: usize, stride: usize) -> Self {
        let per_sequence = lengths
            .iter()
            .enumerate()
            .filter(|(_, &len)| len >= clip_len)
            .map(|(i, &len)| {
                let span = len - clip_len + 1;
                let phases = stride.min(span);
                (i, phases, (span - phases) / stride + 1)
            })
            .collect();
        Self {
            per_sequence,
            stride,
        }
    }

    fn per_epoch(&self) -> usize {
        self.per_sequence.iter().map(|c| c.2).sum()
    }

    fn epoch(&self, rng: &mut SeededRng) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.per_epoch());
        for &(seq, phases, count) in &self.per_sequence {
            let phase = rng.below(phases);
            out.extend((0..count).map(|k| (seq, phase + k * self.stride)));
        }
        rng.shuffle(&mut out);
        out
    }
}

fn run(
    model: &mut VoModel,
    sequences: &[Vec<VoSample>],
    plan: &CurriculumPlan,
    seed: u64,
    objective: Objective,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport, OdometryError> {
    plan.validate()?;
    let inputs = sequences
        .iter()
        .map(|seq| seq.iter().map(|s| model.prepare(&s.flow)).collect())
        .collect::<Result<Vec<Vec<_>>, _>>()?;
    let lengths: Vec<usize> = sequences.iter().map(Vec::len).collect();
    let clips = Clips::new(&lengths, plan.clip_len, plan.clip_stride);
    let per_epoch = clips.per_epoch();
    if per_epoch == 0 {
        return Err(OdometryError::NoClips {
            clip_len: plan.clip_len,
        });
    }
    let schedule = CosineSchedule::new(
        plan.lr_max,
        plan.lr_min,
        plan.stages.iter().map(|s| s.epochs * per_epoch).collect(),
    )
    .map_err(|e| OdometryError::InvalidPlan(e.to_string()))?;
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            weight_decay: plan.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut rng = SeededRng::stream(seed, 0x636c6970);
    let mut log = Vec::new();
    for (si, stage) in plan.stages.iter().enumerate() {
        let mut t = 0;
        for epoch in 0..stage.epochs {
            let (mut sum, mut sum_step, mut sum_comp) = (0.0, 0.0, 0.0);
            let mut lr = plan.lr_max;
            for (seq, start) in clips.epoch(&mut rng) {
                lr = schedule.segment_lr(si, t).expect("step within segment");
                t += 1;
                let batch: Vec<&[f32]> = inputs[seq][start..start + plan.clip_len]
                    .iter()
                    .map(|v| v.as_slice())
                    .collect();
                let gts: Vec<RelativePose> = sequences[seq][start..start + plan.clip_len]
                    .iter()
                    .map(|s| s.gt)
                    .collect();
                let mut tape = Tape::<f32>::new();
                let x = tape.constant(model.batch(&batch)?);
                let pred = model.forward(&mut tape, &model.store, x)?;
                let ls = step_loss_var(&mut tape, pred, &gts, plan.kappa)?;
                let total = match objective {
                    Objective::Full => {
                        let lc = composition_loss_var(&mut tape, pred, &gts, stage.window, plan.kappa)?;
                        sum_comp += tape.value(lc).item() as f64;
                        let weighted = tape.scale(lc, stage.alpha)?;
                        tape.add(ls, weighted)?
                    }
                    Objective::StepOnly => ls,
                };
                sum += tape.value(total).item() as f64;
                sum_step += tape.value(ls).item() as f64;
                let grads = tape.backward(total)?;
                model.store.set_grads(&grads);
                if opt.step(&mut model.store, lr) == StepOutcome::SkippedNonFinite
                    && opt.faults() > plan.max_faults
                {
                    return Err(OdometryError::FaultLimit {
                        faults: opt.faults(),
                        stage: si + 1,
                        epoch: epoch + 1,
                    });
                }
            }
            let n = per_epoch as f64;
            let entry = EpochLog {
                stage: si + 1,
                epoch: epoch + 1,
                loss: sum / n,
                step_loss: sum_step / n,
                comp_loss: sum_comp / n,
                lr,
                faults: opt.faults(),
            };
            on_epoch(&entry);
            log.push(entry);
        }
    }
    Ok(TrainReport {
        epochs: log,
        steps: opt.steps(),
        faults: opt.faults(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_matches_curriculum() {
        let p = CurriculumPlan::default();
        let got: Vec<_> = p.stages.iter().map(|s| (s.alpha, s.epochs, s.window)).collect();
        assert_eq!(got, vec![(1.0, 5, 2), (0.7, 5, 4), (0.3, 10, 6), (0.3, 10, 8)]);
        assert_eq!((p.lr_max, p.lr_min), (1e-3, 1e-6));
        p.validate().unwrap();
    }

    #[test]
    fn invalid_plans() {
        let mut p = CurriculumPlan::default();
        p.stages[1].window = 1;
        assert!(p.validate().is_err());
        let mut p = CurriculumPlan::default();
        p.stages[2].window = 3;
        assert!(p.validate().is_err());
        let mut p = CurriculumPlan::default();
        p.stages[0].alpha = 1.5;
        assert!(p.validate().is_err());
        let mut p = CurriculumPlan::default();
        p.clip_len = 4;
        assert!(p.validate().is_err());
    }

    #[test]
    fn clips_cover_fixed_count() {
        let c = Clips::new(&[20, 5, 9], 8, 3);
        let mut rng = SeededRng::new(4);
        for _ in 0..20 {
            let e = c.epoch(&mut rng);
            assert_eq!(e.len(), c.per_epoch());
            assert!(e.iter().all(|&(s, st)| st + 8 <= [20, 5, 9][s]));
        }
    }
}
