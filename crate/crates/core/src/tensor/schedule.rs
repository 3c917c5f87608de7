use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("step {step} is beyond the end of the schedule ({total} steps)")]
    OutOfRange { step: usize, total: usize },
}

/// Cosine annealing from `lr_max` to `lr_min`, restarted at every segment boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineSchedule {
    lr_max: f64,
    lr_min: f64,
    segments: Vec<usize>,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, segments: Vec<usize>) -> Result<Self, ScheduleError> {
        if !(lr_min.is_finite() && lr_max.is_finite()) || lr_min < 0.0 || lr_min > lr_max {
            return Err(ScheduleError::Invalid(format!(
                "need 0 <= lr_min <= lr_max, got {lr_min} / {lr_max}"
            )));
        }
        if segments.is_empty() || segments.contains(&0) {
            return Err(ScheduleError::Invalid(
                "segments must be non-empty and positive".into(),
            ));
        }
        Ok(Self {
            lr_max,
            lr_min,
            segments,
        })
    }

    /// One segment of `steps` steps.
    pub fn single(lr_max: f64, lr_min: f64, steps: usize) -> Result<Self, ScheduleError> {
        Self::new(lr_max, lr_min, vec![steps])
    }

    pub fn lr_max(&self) -> f64 {
        self.lr_max
    }

    pub fn lr_min(&self) -> f64 {
        self.lr_min
    }

    pub fn segments(&self) -> &[usize] {
        &self.segments
    }

    pub fn total_steps(&self) -> usize {
        self.segments.iter().sum()
    }

    /// Learning rate at step `t ∈ [0, T_seg]` of segment `segment`.
    pub fn segment_lr(&self, segment: usize, t: usize) -> Result<f64, ScheduleError> {
        let len = *self.segments.get(segment).ok_or(ScheduleError::OutOfRange {
            step: t,
            total: self.total_steps(),
        })?;
        if t > len {
            return Err(ScheduleError::OutOfRange { step: t, total: len });
        }
        // Centred form rounds the midpoint correctly; the endpoints are exact by definition.
        if t == 0 {
            return Ok(self.lr_max);
        }
        if t == len {
            return Ok(self.lr_min);
        }
        let phase = PI * (t as f64 / len as f64);
        let mid = 0.5 * (self.lr_max + self.lr_min);
        Ok(mid + 0.5 * (self.lr_max - self.lr_min) * phase.cos())
    }

    /// Learning rate at global step `t`; a segment boundary belongs to the segment it starts.
    pub fn lr(&self, t: usize) -> Result<f64, ScheduleError> {
        let total = self.total_steps();
        if t > total {
            return Err(ScheduleError::OutOfRange { step: t, total });
        }
        let mut start = 0;
        for (k, &len) in self.segments.iter().enumerate() {
            if t < start + len || k + 1 == self.segments.len() {
                return self.segment_lr(k, t - start);
            }
            start += len;
        }
        unreachable!("segments are non-empty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = CosineSchedule::single(1e-3, 1e-6, 100).unwrap();
        assert_eq!(s.lr(0).unwrap(), 1e-3);
        assert_eq!(s.lr(100).unwrap(), 1e-6);
        let mid = s.lr(50).unwrap();
        assert_eq!(mid, 5.005e-4);
        assert!(s.lr(101).is_err());
    }

    #[test]
    fn restarts_at_segment_boundaries() {
        let s = CosineSchedule::new(1e-3, 1e-6, vec![10, 20]).unwrap();
        assert!(s.lr(9).unwrap() < 1e-4);
        assert_eq!(s.lr(10).unwrap(), 1e-3);
        assert_eq!(s.lr(30).unwrap(), 1e-6);
    }

    #[test]
    fn monotone_within_segment() {
        let s = CosineSchedule::single(1e-3, 1e-5, 37).unwrap();
        let lrs: Vec<f64> = (0..=37).map(|t| s.lr(t).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&v| (1e-5..=1e-3).contains(&v)));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(CosineSchedule::new(1e-6, 1e-3, vec![1]).is_err());
        assert!(CosineSchedule::new(1e-3, 1e-6, vec![]).is_err());
        assert!(CosineSchedule::new(1e-3, 1e-6, vec![3, 0]).is_err());
    }
}
