use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ScalingRule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub start_token: u64,
    pub batch_size: usize,
    pub lr_multiplier: f64,
}

/// Piecewise-constant batch size and learning-rate multiplier, overlaid on
/// a base [`LrSchedule`](crate::optim::LrSchedule).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct BatchSchedule {
    segments: Vec<Segment>,
}

impl TryFrom<Vec<Segment>> for BatchSchedule {
    type Error = Error;

    fn try_from(segments: Vec<Segment>) -> Result<Self> {
        BatchSchedule::new(segments)
    }
}

impl From<BatchSchedule> for Vec<Segment> {
    fn from(schedule: BatchSchedule) -> Self {
        schedule.segments
    }
}

impl BatchSchedule {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let Some(first) = segments.first() else {
            return Err(Error::invalid("batch schedule needs at least one segment"));
        };
        if first.start_token != 0 {
            return Err(Error::invalid("first batch segment must start at token 0"));
        }
        for pair in segments.windows(2) {
            if pair[1].start_token <= pair[0].start_token {
                return Err(Error::invalid("segment start tokens must be strictly increasing"));
            }
        }
        for s in &segments {
            if s.batch_size == 0 {
                return Err(Error::invalid("segment batch sizes must be positive"));
            }
            if !(s.lr_multiplier > 0.0) || !s.lr_multiplier.is_finite() {
                return Err(Error::invalid("segment lr multipliers must be positive"));
            }
        }
        Ok(Self { segments })
    }

    pub fn constant(batch_size: usize, lr_multiplier: f64) -> Result<Self> {
        Self::new(vec![Segment {
            start_token: 0,
            batch_size,
            lr_multiplier,
        }])
    }

    /// Segments whose multipliers follow `rule` relative to `reference_batch`.
    pub fn scaled(rule: ScalingRule, reference_batch: usize, steps: &[(u64, usize)]) -> Result<Self> {
        let segments = steps
            .iter()
            .map(|&(start_token, batch_size)| {
                Ok(Segment {
                    start_token,
                    batch_size,
                    lr_multiplier: rule.factor(batch_size as f64 / reference_batch as f64)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(segments)
    }

    /// Checks that every multiplier equals `f(batch / reference_batch)`.
    pub fn check_scaling(&self, rule: ScalingRule, reference_batch: usize) -> Result<()> {
        for s in &self.segments {
            let want = rule.factor(s.batch_size as f64 / reference_batch as f64)?;
            if (s.lr_multiplier - want).abs() > 1e-12 * want {
                return Err(Error::invalid(format!(
                    "segment at {} has multiplier {} but the {rule} rule gives {want}",
                    s.start_token, s.lr_multiplier
                )));
            }
        }
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Index of the segment governing a step that starts at `tokens`.
    pub fn index_at(&self, tokens: u64) -> usize {
        self.segments
            .partition_point(|s| s.start_token <= tokens)
            .saturating_sub(1)
    }

    pub fn at(&self, tokens: u64) -> &Segment {
        &self.segments[self.index_at(tokens)]
    }

    pub fn final_segment(&self) -> &Segment {
        self.segments.last().expect("schedules are nonempty")
    }

    /// Number of optimizer steps taken between `from` and the first step
    /// boundary at or beyond `until`, computed segment by segment.
    pub fn count_steps(&self, tokens_per_example: u64, from: u64, until: u64) -> u64 {
        let mut tokens = from;
        let mut steps = 0;
        while tokens < until {
            let idx = self.index_at(tokens);
            let seg = &self.segments[idx];
            let end = self
                .segments
                .get(idx + 1)
                .map_or(until, |next| next.start_token.min(until));
            let per_step = seg.batch_size as u64 * tokens_per_example;
            let n = (end - tokens).div_ceil(per_step);
            steps += n;
            tokens += n * per_step;
        }
        steps
    }
}
