//! Anchor-free dense head over the pyramid, target assignment and the
//! training objective.
//!
//! Every pyramid location predicts per-class logits and `(l, t, r, b)`
//! distances to the box edges. Objects go to the pyramid level matching the
//! size interval of their longer side, so "object scale" means the same
//! thing to the head and to the budget.

use std::io::Write;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CostScope, Tape, Var};
use crate::budget::{BoxAnnotation, ScaleIntervals};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamVars, Params};
use crate::supernet::{add_sepconv, fan_in_uniform, sepconv, SepConv};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub tower_depth: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Initial foreground probability encoded in the classifier bias.
    pub prior_prob: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            num_classes: 2,
            tower_depth: 2,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            prior_prob: 0.01,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("head: num_classes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return Err(Error::Config("head: focal alpha must be in [0,1] and gamma >= 0".into()));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(Error::Config("head: prior_prob must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// Predictions of one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct LevelPrediction {
    /// `B×K×h×w` logits.
    pub cls: Var,
    /// `B×4×h×w` nonnegative distances in pixels.
    pub reg: Var,
    pub stride: usize,
}

/// Largest raw regression value before `exp`.
const REG_LOGIT_LIMIT: f64 = 8.0;

pub struct Head {
    config: HeadConfig,
    tower: Vec<SepConv>,
    cls_w: ParamId,
    cls_b: ParamId,
    reg_w: ParamId,
    reg_b: ParamId,
}

pub fn level_stride(level: usize) -> usize {
    8 << level
}

impl Head {
    pub fn build<R: Rng>(config: HeadConfig, channels: usize, params: &mut Params, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tower = (0..config.tower_depth)
            .map(|i| add_sepconv(params, &format!("head.tower.{i}"), channels, channels, rng))
            .collect();
        let k = config.num_classes;
        let prior_bias = -((1.0 - config.prior_prob) / config.prior_prob).ln();
        let cls_w = params.add("head.cls.w", fan_in_uniform(&[k, channels], channels, 1.0, rng).map(|v| v * 0.1));
        let cls_b = params.add("head.cls.b", Tensor::full(&[k], prior_bias));
        let reg_w = params.add("head.reg.w", fan_in_uniform(&[4, channels], channels, 1.0, rng).map(|v| v * 0.1));
        let reg_b = params.add("head.reg.b", Tensor::zeros(&[4]));
        Ok(Head {
            config,
            tower,
            cls_w,
            cls_b,
            reg_w,
            reg_b,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    /// Shared tower and predictors applied to every level.
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, pyramid: &[Var]) -> Result<Vec<LevelPrediction>> {
        let prev = tape.set_scope(CostScope::Head);
        let mut out = Vec::with_capacity(pyramid.len());
        for (level, &feature) in pyramid.iter().enumerate() {
            let mut x = feature;
            for conv in &self.tower {
                let y = sepconv(tape, pv, *conv, x, 1)?;
                x = tape.relu(y);
            }
            let c = tape.conv2d_1x1(x, pv[self.cls_w], 1)?;
            let cls = tape.bias_add(c, pv[self.cls_b])?;
            let r = tape.conv2d_1x1(x, pv[self.reg_w], 1)?;
            let r = tape.bias_add(r, pv[self.reg_b])?;
            let r = tape.clamp(r, -REG_LOGIT_LIMIT, REG_LOGIT_LIMIT);
            let r = tape.exp(r);
            let stride = level_stride(level);
            let reg = tape.scale(r, stride as f64);
            out.push(LevelPrediction { cls, reg, stride });
        }
        tape.set_scope(prev);
        Ok(out)
    }
}

/// Spatial layout of the pyramid for one input size.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidGeometry {
    /// `(h, w, stride)` per level.
    pub levels: Vec<(usize, usize, usize)>,
}

impl PyramidGeometry {
    /// `levels` levels starting at stride 8; sizes use ceiling division,
    /// matching stride-2 convolutions with padding.
    pub fn new(image_h: usize, image_w: usize, levels: usize) -> Self {
        PyramidGeometry {
            levels: (0..levels)
                .map(|l| {
                    let s = level_stride(l);
                    (image_h.div_ceil(s), image_w.div_ceil(s), s)
                })
                .collect(),
        }
    }

    pub fn locations(&self) -> usize {
        self.levels.iter().map(|(h, w, _)| h * w).sum()
    }
}

/// Centre of location `(row, col)` on a level with `stride`.
pub fn location_centre(row: usize, col: usize, stride: usize) -> (f64, f64) {
    let half = (stride / 2) as f64;
    ((col * stride) as f64 + half, (row * stride) as f64 + half)
}

/// Targets of one level for one image, one entry per location.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelTargets {
    pub cls: Vec<Option<usize>>,
    pub boxes: Vec<Option<[f64; 4]>>,
}

impl LevelTargets {
    pub fn positives(&self) -> usize {
        self.cls.iter().filter(|c| c.is_some()).count()
    }
}

/// Per-level targets for one image.
pub type ImageTargets = Vec<LevelTargets>;

/// Level an object is assigned to.
pub fn object_level(b: &BoxAnnotation, intervals: &ScaleIntervals, levels: usize) -> usize {
    intervals.interval_of(b.w.max(b.h)).min(levels - 1)
}

/// A location is positive for a box when its centre lies strictly inside the
/// box and the box is assigned to that level. Overlaps go to the smaller box.
pub fn assign_targets(boxes: &[BoxAnnotation], geometry: &PyramidGeometry, intervals: &ScaleIntervals) -> ImageTargets {
    let n_levels = geometry.levels.len();
    geometry
        .levels
        .iter()
        .enumerate()
        .map(|(level, &(h, w, stride))| {
            let mut t = LevelTargets {
                cls: vec![None; h * w],
                boxes: vec![None; h * w],
            };
            let mut best_area = vec![f64::INFINITY; h * w];
            for b in boxes.iter().filter(|b| object_level(b, intervals, n_levels) == level) {
                let area = b.w * b.h;
                for row in 0..h {
                    for col in 0..w {
                        let (cx, cy) = location_centre(row, col, stride);
                        let ltrb = [cx - b.x, cy - b.y, b.x + b.w - cx, b.y + b.h - cy];
                        let i = row * w + col;
                        if ltrb.iter().all(|&d| d > 0.0) && area < best_area[i] {
                            best_area[i] = area;
                            t.cls[i] = Some(b.class);
                            t.boxes[i] = Some(ltrb);
                        }
                    }
                }
            }
            t
        })
        .collect()
}

pub struct DetectionLoss {
    /// Batch mean, scalar.
    pub total: Var,
    /// Per-sample losses, `B` vector.
    pub per_sample: Var,
}

/// Focal classification loss plus `-ln IoU` box loss, each sample
/// normalized by its number of positives (at least 1), averaged over the
/// batch.
pub fn detection_loss(tape: &mut Tape, preds: &[LevelPrediction], targets: &[ImageTargets], cfg: &HeadConfig) -> Result<DetectionLoss> {
    let batch = targets.len();
    if batch == 0 {
        return Err(Error::Usage("detection loss over an empty batch".into()));
    }
    if targets.iter().any(|t| t.len() != preds.len()) {
        return Err(Error::Usage("targets and predictions have different level counts".into()));
    }
    let mut per_sample: Option<Var> = None;
    let mut positives = vec![0usize; batch];
    for (level, p) in preds.iter().enumerate() {
        let cls: Vec<Option<usize>> = targets.iter().flat_map(|t| t[level].cls.iter().copied()).collect();
        let boxes: Vec<Option<[f64; 4]>> = targets.iter().flat_map(|t| t[level].boxes.iter().copied()).collect();
        for (b, t) in targets.iter().enumerate() {
            positives[b] += t[level].positives();
        }
        let focal = tape.sigmoid_focal_loss(p.cls, Rc::new(cls), cfg.focal_alpha, cfg.focal_gamma)?;
        let iou = tape.iou_loss(p.reg, Rc::new(boxes))?;
        let level_sum = tape.add(focal, iou)?;
        per_sample = Some(match per_sample {
            Some(acc) => tape.add(acc, level_sum)?,
            None => level_sum,
        });
    }
    let per_sample = per_sample.ok_or_else(|| Error::Usage("no pyramid levels".into()))?;
    let norm = tape.constant(Tensor::from_vec(positives.iter().map(|&n| 1.0 / n.max(1) as f64).collect()));
    let per_sample = tape.mul(per_sample, norm)?;
    let total = tape.mean(per_sample);
    Ok(DetectionLoss { total, per_sample })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_global: f64,
    pub lambda_local: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_global: 1.0,
            lambda_local: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_global < 0.0 || self.lambda_local < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }

    /// Weights in force during `epoch` (1-based): zero through the warmup
    /// epochs.
    pub fn for_epoch(&self, epoch: usize, warmup_epochs: usize) -> LossWeights {
        if epoch <= warmup_epochs {
            LossWeights {
                lambda_global: 0.0,
                lambda_local: 0.0,
            }
        } else {
            self.clone()
        }
    }
}

/// `L_det + λ1·L_global + λ2·L_local`, with the regularizers off during
/// warmup. Non-finite inputs are a numeric failure.
pub fn total_loss(l_det: f64, l_global: f64, l_local: f64, weights: &LossWeights, epoch: usize, warmup_epochs: usize) -> Result<f64> {
    for (name, v) in [("L_det", l_det), ("L_global", l_global), ("L_local", l_local)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v} at epoch {epoch}")));
        }
    }
    let w = weights.for_epoch(epoch, warmup_epochs);
    Ok(l_det + w.lambda_global * l_global + w.lambda_local * l_local)
}

/// Tape form of [`total_loss`]; zero-weighted terms are left out of the graph.
pub fn total_loss_var(tape: &mut Tape, l_det: Var, l_global: Option<Var>, l_local: Option<Var>, weights: &LossWeights) -> Result<Var> {
    let mut total = l_det;
    for (term, lambda) in [(l_global, weights.lambda_global), (l_local, weights.lambda_local)] {
        if let Some(t) = term {
            if lambda != 0.0 {
                let scaled = tape.scale(t, lambda);
                total = tape.add(total, scaled)?;
            }
        }
    }
    Ok(total)
}

/// Writes `image_id,level,x,y,class,score,l,t,r,b` for every location whose
/// best class score reaches `min_score`.
pub fn write_predictions_csv<W: Write>(mut out: W, tape: &Tape, preds: &[LevelPrediction], image_ids: &[u64], min_score: f64) -> Result<()> {
    writeln!(out, "image_id,level,x,y,class,score,l,t,r,b")?;
    for (level, p) in preds.iter().enumerate() {
        let cls = tape.value(p.cls);
        let reg = tape.value(p.reg);
        let (b, k, h, w) = cls.dims4().expect("4-D logits");
        for (bi, id) in image_ids.iter().enumerate().take(b) {
            for row in 0..h {
                for col in 0..w {
                    let at = |c: usize| (bi * k + c) * h * w + row * w + col;
                    let (best, logit) = (0..k)
                        .map(|c| (c, cls.data()[at(c)]))
                        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
                    let score = 1.0 / (1.0 + (-logit).exp());
                    if score < min_score {
                        continue;
                    }
                    let d: Vec<f64> = (0..4).map(|c| reg.data()[(bi * 4 + c) * h * w + row * w + col]).collect();
                    let (cx, cy) = location_centre(row, col, p.stride);
                    writeln!(out, "{id},{level},{cx},{cy},{best},{score},{},{},{},{}", d[0], d[1], d[2], d[3])?;
                }
            }
        }
    }
    Ok(())
}
