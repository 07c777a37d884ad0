//! Scale encoding of ground-truth boxes and per-sample cost budgets.
//!
//! All budgets here are expressed as fractions of `C_tot`, the cost of the
//! fully open network, so the global loss does not depend on resolution.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Object-size intervals over `max(h, w)`: `[0, b0]`, `(b0, b1]`, ...,
/// `(b_last, ∞)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScaleIntervals {
    boundaries: Vec<f64>,
}

impl TryFrom<Vec<f64>> for ScaleIntervals {
    type Error = Error;
    fn try_from(boundaries: Vec<f64>) -> Result<Self> {
        ScaleIntervals::new(boundaries)
    }
}

impl From<ScaleIntervals> for Vec<f64> {
    fn from(s: ScaleIntervals) -> Vec<f64> {
        s.boundaries
    }
}

impl Default for ScaleIntervals {
    /// Thresholds for 64×64 images: `[0,8], (8,16], (16,32], (32,∞)`.
    fn default() -> Self {
        ScaleIntervals {
            boundaries: vec![8.0, 16.0, 32.0],
        }
    }
}

impl ScaleIntervals {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::Config(format!("scale boundaries must be positive and finite: {boundaries:?}")));
        }
        if boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("scale boundaries must be strictly increasing: {boundaries:?}")));
        }
        Ok(ScaleIntervals { boundaries })
    }

    /// COCO-resolution thresholds `[0,64], (64,150], (150,360], (360,∞)`.
    pub fn coco() -> Self {
        ScaleIntervals {
            boundaries: vec![64.0, 150.0, 360.0],
        }
    }

    /// Number of intervals `m`.
    pub fn len(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Interval holding `size`; upper bounds are inclusive.
    pub fn interval_of(&self, size: f64) -> usize {
        self.boundaries.iter().position(|&b| size <= b).unwrap_or(self.boundaries.len())
    }

    /// `(exclusive lower, inclusive upper)` bounds of interval `i`; the first
    /// interval's lower bound is 0 and the last has no upper bound.
    pub fn bounds(&self, i: usize) -> (f64, Option<f64>) {
        let lo = if i == 0 { 0.0 } else { self.boundaries[i - 1] };
        (lo, self.boundaries.get(i).copied())
    }
}

/// Which size intervals occur in an image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScaleEncoding(pub Vec<bool>);

impl ScaleEncoding {
    pub fn from_bits(bits: &[u8]) -> Self {
        ScaleEncoding(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> Vec<u8> {
        self.0.iter().map(|&b| u8::from(b)).collect()
    }
}

impl std::fmt::Display for ScaleEncoding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.0 {
            write!(f, "{}", u8::from(b))?;
        }
        Ok(())
    }
}

/// Encodes `(h, w)` box sizes by the interval of their longer side.
pub fn encode_scales(boxes: &[(f64, f64)], intervals: &ScaleIntervals) -> Result<ScaleEncoding> {
    let mut bits = vec![false; intervals.len()];
    for (i, &(h, w)) in boxes.iter().enumerate() {
        if !(h > 0.0 && w > 0.0) {
            return Err(Error::Data(format!("box {i} has non-positive side (h={h}, w={w})")));
        }
        bits[intervals.interval_of(h.max(w))] = true;
    }
    Ok(ScaleEncoding(bits))
}

/// `C0 · Σs_i / m`.
pub fn expected_budget(s: &ScaleEncoding, c0: f64) -> f64 {
    c0 * s.count() as f64 / s.len() as f64
}

/// Squared gap between normalized network cost and budget.
pub fn global_budget_loss(c_net: f64, c_expect: f64) -> f64 {
    (c_net - c_expect).powi(2)
}

/// Batch mean of per-sample squared gaps; `c_net_ratio` is a `B` vector.
pub fn global_budget_loss_var(tape: &mut Tape, c_net_ratio: Var, c_expect: &[f64]) -> Result<Var> {
    if tape.shape(c_net_ratio) != [c_expect.len()] {
        return Err(Error::shape("global_budget_loss", format!("{:?} vs {} budgets", tape.shape(c_net_ratio), c_expect.len())));
    }
    let target = tape.constant(crate::tensor::Tensor::from_vec(c_expect.to_vec()));
    let gap = tape.sub(c_net_ratio, target)?;
    let sq = tape.square(gap);
    Ok(tape.mean(sq))
}

pub fn fixed_budget(c0: f64) -> f64 {
    c0
}

/// Maps the rank of `current` among buffered losses (fraction strictly
/// below) linearly onto `[C0, 4·C0]`. An empty buffer ranks 0.
pub fn loss_aware_budget(buffer: &[f64], current: f64, c0: f64) -> f64 {
    if buffer.is_empty() {
        return c0;
    }
    let below = buffer.iter().filter(|&&l| l < current).count();
    c0 * (1.0 + 3.0 * below as f64 / buffer.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetStrategy {
    Fixed,
    LossAware,
    ScaleDynamic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    /// `C0 / C_tot`.
    pub c0_ratio: f64,
    pub strategy: BudgetStrategy,
    pub loss_buffer_len: usize,
    pub intervals: ScaleIntervals,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            c0_ratio: 0.05,
            strategy: BudgetStrategy::ScaleDynamic,
            loss_buffer_len: 100,
            intervals: ScaleIntervals::default(),
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c0_ratio > 0.0 && self.c0_ratio <= 1.0) {
            return Err(Error::Config(format!("budget: c0_ratio must be in (0, 1], got {}", self.c0_ratio)));
        }
        if self.loss_buffer_len == 0 {
            return Err(Error::Config("budget: loss_buffer_len must be positive".into()));
        }
        Ok(())
    }
}

/// Assigns normalized budgets sample by sample in training order.
#[derive(Clone, Debug)]
pub struct BudgetAssigner {
    config: BudgetConfig,
    losses: VecDeque<f64>,
}

impl BudgetAssigner {
    pub fn new(config: BudgetConfig) -> Self {
        let cap = config.loss_buffer_len;
        BudgetAssigner {
            config,
            losses: VecDeque::with_capacity(cap),
        }
    }

    pub fn config(&self) -> &BudgetConfig {
        &self.config
    }

    /// Budget for one sample as a fraction of `C_tot`. The loss-aware
    /// strategy ranks `det_loss` against the buffer and then records it.
    pub fn assign(&mut self, scales: &ScaleEncoding, det_loss: f64) -> f64 {
        let c0 = self.config.c0_ratio;
        match self.config.strategy {
            BudgetStrategy::Fixed => fixed_budget(c0),
            BudgetStrategy::ScaleDynamic => {
                if scales.count() == 0 {
                    c0 / scales.len() as f64
                } else {
                    expected_budget(scales, c0)
                }
            }
            BudgetStrategy::LossAware => {
                let budget = loss_aware_budget(self.losses.make_contiguous(), det_loss, c0);
                if self.losses.len() == self.config.loss_buffer_len {
                    self.losses.pop_front();
                }
                self.losses.push_back(det_loss);
                budget
            }
        }
    }
}

/// One box as `[x, y, w, h, class]` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, f64, f64, usize)", into = "(f64, f64, f64, f64, usize)")]
pub struct BoxAnnotation {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class: usize,
}

impl From<(f64, f64, f64, f64, usize)> for BoxAnnotation {
    fn from((x, y, w, h, class): (f64, f64, f64, f64, usize)) -> Self {
        BoxAnnotation { x, y, w, h, class }
    }
}

impl From<BoxAnnotation> for (f64, f64, f64, f64, usize) {
    fn from(b: BoxAnnotation) -> Self {
        (b.x, b.y, b.w, b.h, b.class)
    }
}

/// One JSON-lines record: `{"image_id": .., "boxes": [[x,y,w,h,class], ..]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub image_id: u64,
    pub boxes: Vec<BoxAnnotation>,
}

impl Annotation {
    pub fn scale_encoding(&self, intervals: &ScaleIntervals) -> Result<ScaleEncoding> {
        let sizes: Vec<_> = self.boxes.iter().map(|b| (b.h, b.w)).collect();
        encode_scales(&sizes, intervals).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("image {}: {m}", self.image_id)),
            other => other,
        })
    }
}

pub fn write_annotations<W: Write>(mut out: W, records: &[Annotation]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_annotations<R: BufRead>(input: R) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Annotation =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("annotation line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
