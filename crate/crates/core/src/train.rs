//! SGD training of supernet and head, and routing statistics on a corpus.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::budget::{global_budget_loss_var, BudgetAssigner, ScaleEncoding};
use crate::config::{Detector, RunConfig};
use crate::cost::{compile_cost_table, CostReport, network_cost, network_cost_var, CostTable, Summary};
use crate::error::{Error, Result};
use crate::head::{assign_targets, detection_loss, total_loss, total_loss_var, ImageTargets, LossWeights, PyramidGeometry};
use crate::params::Params;
use crate::similarity::{local_similarity_loss_var, path_similarity, route_matrix};
use crate::supernet::GateOverrides;
use crate::synth::Corpus;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
const PRETRAIN_STREAM_SALT: u64 = 0x5052_4554;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    /// 1-based epochs after which the learning rate is divided by 10.
    pub lr_drop_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_global: f64,
    pub lambda_local: f64,
    pub seed: u64,
    pub regularizer_warmup_epochs: usize,
    /// Steps over which the regularizer weights rise linearly after warmup.
    pub lambda_ramp_steps: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    /// Detection-only epochs with every gate forced open, run at `base_lr`
    /// before the main schedule. Not written to the step log.
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 12,
            base_lr: 0.01,
            lr_drop_epochs: vec![8, 11],
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda_global: 1.0,
            lambda_local: 1.0,
            seed: 7,
            regularizer_warmup_epochs: 1,
            lambda_ramp_steps: 100,
            grad_clip_norm: Some(10.0),
            pretrain_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("train: batch_size and epochs must be positive".into()));
        }
        if let Some(&e) = self.lr_drop_epochs.iter().find(|&&e| e == 0 || e > self.epochs) {
            return Err(Error::Config(format!("train: lr drop epoch {e} outside 1..={}", self.epochs)));
        }
        if self.lambda_local > 0.0 && self.batch_size < 2 {
            return Err(Error::Config("train: lambda_local > 0 needs batch_size >= 2".into()));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("train: need base_lr > 0, momentum in [0,1), weight_decay >= 0".into()));
        }
        if self.grad_clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("train: grad_clip_norm must be positive".into()));
        }
        LossWeights {
            lambda_global: self.lambda_global,
            lambda_local: self.lambda_local,
        }
        .validate()
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e < epoch).count();
        self.base_lr / 10f64.powi(drops as i32)
    }

    /// Fraction of the configured regularizer weights applied at a step,
    /// given how many steps have passed since warmup ended.
    pub fn ramp(&self, steps_after_warmup: usize) -> f64 {
        if self.lambda_ramp_steps == 0 {
            1.0
        } else {
            (steps_after_warmup as f64 / self.lambda_ramp_steps as f64).min(1.0)
        }
    }
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_det")]
    pub l_det: f64,
    #[serde(rename = "L_global")]
    pub l_global: f64,
    #[serde(rename = "L_local")]
    pub l_local: f64,
    #[serde(rename = "L_tot")]
    pub l_tot: f64,
    #[serde(rename = "mean_Cnet_ratio")]
    pub mean_cnet_ratio: f64,
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: Params,
    pub log: Vec<StepRecord>,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
}

fn check_corpus(cfg: &RunConfig, corpus: &Corpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Usage("corpus is empty".into()));
    }
    for (img, ann) in corpus.images.iter().zip(&corpus.annotations) {
        if img.channels != cfg.supernet.input_channels {
            return Err(Error::Config(format!(
                "image {} has {} channels, model expects {}",
                ann.image_id, img.channels, cfg.supernet.input_channels
            )));
        }
        cfg.supernet
            .check_input(img.height, img.width)
            .map_err(|e| Error::Config(format!("image {}: {e}", ann.image_id)))?;
    }
    Ok(())
}

fn image_targets(cfg: &RunConfig, corpus: &Corpus) -> Vec<ImageTargets> {
    corpus
        .images
        .iter()
        .zip(&corpus.annotations)
        .map(|(img, ann)| {
            let geometry = PyramidGeometry::new(img.height, img.width, cfg.supernet.pyramid_levels());
            assign_targets(&ann.boxes, &geometry, &cfg.budget.intervals)
        })
        .collect()
}

fn clip_and_check(grads: &mut [Tensor], limit: Option<f64>) -> Result<()> {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if let Some(limit) = limit {
        if norm > limit {
            let s = limit / norm;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    Ok(())
}

/// SGD with momentum and L2 weight decay, one optimizer step at a time.
struct Sgd {
    velocity: Vec<Tensor>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn new(params: &Params, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            velocity: params.iter().map(|(_, t)| t.zeros_like()).collect(),
            momentum,
            weight_decay,
        }
    }

    fn step(&mut self, params: &mut Params, grads: &[Tensor], lr: f64) {
        let ids: Vec<_> = params.ids().collect();
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let w = params.get_mut(id);
            for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Trains from freshly initialised parameters, writing the checkpoint and
/// JSON-lines log into `out_dir`. A non-finite loss or gradient stops the
/// run after saving the parameters from before the failing step.
pub fn train(cfg: &RunConfig, corpus: &Corpus, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_corpus(cfg, corpus)?;
    std::fs::create_dir_all(out_dir)?;
    let tc = &cfg.train;
    let (detector, mut params) = Detector::build(cfg, tc.seed)?;
    let (h, w) = (corpus.images[0].height, corpus.images[0].width);
    let table = compile_cost_table(&cfg.supernet, h, w)?;
    let c_tot = table.total();
    let scales = corpus.scale_encodings(&cfg.budget.intervals)?;
    let targets = image_targets(cfg, corpus);
    let mut assigner = BudgetAssigner::new(cfg.budget.clone());
    let mut sgd = Sgd::new(&params, tc.momentum, tc.weight_decay);
    let meta = cfg.to_json();
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let log_path = out_dir.join(LOG_FILE);
    let mut log_out = BufWriter::new(File::create(&log_path)?);
    let mut log = Vec::new();

    let n = corpus.len();
    for epoch in 1..=tc.pretrain_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ PRETRAIN_STREAM_SALT);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let mut tape = Tape::new();
            let pv = params.load_into(&mut tape);
            let images = tape.constant(corpus.batch(chunk)?);
            let open = GateOverrides::all_open(&cfg.supernet, chunk.len());
            let fwd = detector.supernet.forward_train(&mut tape, &pv, images, Some(&open))?;
            let preds = detector.head.forward(&mut tape, &pv, &fwd.pyramid)?;
            let batch_targets: Vec<ImageTargets> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let det = detection_loss(&mut tape, &preds, &batch_targets, &cfg.head)?;
            let l_det = tape.value(det.total).item();
            if !l_det.is_finite() {
                return Err(abort(&params, &meta, &checkpoint, 0, Error::Numeric(format!("pretraining loss {l_det}"))));
            }
            sum += l_det;
            let g = tape.backward(det.total)?;
            let mut grads: Vec<Tensor> =
                params.ids().map(|id| g.get_or_zeros(pv[id], params.get(id).shape())).collect();
            if let Err(e) = clip_and_check(&mut grads, tc.grad_clip_norm) {
                return Err(abort(&params, &meta, &checkpoint, 0, e));
            }
            sgd.step(&mut params, &grads, tc.base_lr);
        }
        log::info!("pretrain epoch {epoch}/{} mean L_det {:.4}", tc.pretrain_epochs, sum / n.div_ceil(tc.batch_size) as f64);
    }
    if tc.pretrain_epochs > 0 {
        sgd = Sgd::new(&params, tc.momentum, tc.weight_decay);
    }
    let steps_per_epoch = n.div_ceil(tc.batch_size);
    let warmup_steps = steps_per_epoch * tc.regularizer_warmup_epochs;
    let mut step = 0;
    for epoch in 1..=tc.epochs {
        let lr = tc.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            step += 1;
            let regularize = epoch > tc.regularizer_warmup_epochs;
            let ramp = if regularize { tc.ramp(step - warmup_steps) } else { 0.0 };
            let weights = LossWeights {
                lambda_global: tc.lambda_global * ramp,
                lambda_local: tc.lambda_local * ramp,
            };

            let mut tape = Tape::new();
            let pv = params.load_into(&mut tape);
            let images = tape.constant(corpus.batch(chunk)?);
            let fwd = detector.supernet.forward_train(&mut tape, &pv, images, None)?;
            let preds = detector.head.forward(&mut tape, &pv, &fwd.pyramid)?;
            let batch_targets: Vec<ImageTargets> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let det = detection_loss(&mut tape, &preds, &batch_targets, &cfg.head)?;
            let c_net = network_cost_var(&mut tape, &fwd.gates, &table)?;
            let ratio = tape.scale(c_net, 1.0 / c_tot);
            let per_sample_det = tape.value(det.per_sample).data().to_vec();
            let budgets: Vec<f64> = chunk.iter().zip(&per_sample_det).map(|(&i, &l)| assigner.assign(&scales[i], l)).collect();

            let (global, local) = if regularize {
                let g = global_budget_loss_var(&mut tape, ratio, &budgets)?;
                let routes = route_matrix(&mut tape, &fwd.gates)?;
                let batch_scales: Vec<ScaleEncoding> = chunk.iter().map(|&i| scales[i].clone()).collect();
                let l = local_similarity_loss_var(&mut tape, routes, &batch_scales, &cfg.similarity)?;
                (Some(g), Some(l))
            } else {
                (None, None)
            };
            let value = |v: Option<_>| v.map_or(0.0, |v| tape.value(v).item());
            let (l_det, l_global, l_local) = (tape.value(det.total).item(), value(global), value(local));
            let mean_ratio = tape.value(ratio).data().iter().sum::<f64>() / chunk.len() as f64;
            let l_tot = match total_loss(l_det, l_global, l_local, &weights, epoch, tc.regularizer_warmup_epochs) {
                Ok(v) => v,
                Err(e) => return Err(abort(&params, &meta, &checkpoint, step, e)),
            };
            let total = total_loss_var(&mut tape, det.total, global, local, &weights)?;
            let g = tape.backward(total)?;
            let mut grads: Vec<Tensor> =
                params.ids().map(|id| g.get_or_zeros(pv[id], params.get(id).shape())).collect();
            if let Err(e) = clip_and_check(&mut grads, tc.grad_clip_norm) {
                return Err(abort(&params, &meta, &checkpoint, step, e));
            }
            sgd.step(&mut params, &grads, lr);

            let record = StepRecord {
                step,
                epoch,
                lr,
                l_det,
                l_global,
                l_local,
                l_tot,
                mean_cnet_ratio: mean_ratio,
            };
            serde_json::to_writer(&mut log_out, &record)?;
            log_out.write_all(b"\n")?;
            log.push(record);
        }
        log_out.flush()?;
        params.save(&checkpoint, &meta)?;
        let recent = &log[log.len() - steps_per_epoch.min(log.len())..];
        log::info!(
            "epoch {epoch}/{} lr {lr} mean L_det {:.4} mean C_net ratio {:.4}",
            tc.epochs,
            recent.iter().map(|r| r.l_det).sum::<f64>() / recent.len() as f64,
            recent.iter().map(|r| r.mean_cnet_ratio).sum::<f64>() / recent.len() as f64
        );
    }
    Ok(TrainOutcome {
        params,
        log,
        checkpoint,
        log_path,
    })
}

fn abort(params: &Params, meta: &str, checkpoint: &Path, step: usize, cause: Error) -> Error {
    match params.save(checkpoint, meta) {
        Ok(()) => Error::Numeric(format!(
            "step {step}: {cause}; last good parameters saved to {}",
            checkpoint.display()
        )),
        Err(io) => Error::Numeric(format!("step {step}: {cause}; saving last good parameters failed: {io}")),
    }
}

/// Routing statistics of one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    pub image_id: u64,
    pub pattern: ScaleEncoding,
    /// Binarized `C_net` in MAdds.
    pub c_net: f64,
    pub executed_nodes: usize,
    /// Router MAdds actually executed, kept out of `c_net`.
    pub router_madds: f64,
    pub det_loss: f64,
    /// Continuous inference gates in node order.
    pub route: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub c_tot: f64,
    pub samples: Vec<SampleEval>,
    pub madds: Summary,
    /// Mean route cosine over pairs of images with the same scale pattern.
    pub within_group_cosine: Option<f64>,
    /// Mean route cosine over pairs with different patterns.
    pub cross_group_cosine: Option<f64>,
    /// Rank correlation between occupied-interval count and `C_net`.
    pub spearman: Option<f64>,
    pub det_loss: f64,
}

impl EvalSummary {
    pub fn c_net(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.c_net).collect()
    }

    /// Mean `C_net` of images with exactly `k` occupied intervals.
    pub fn mean_cnet_with_intervals(&self, k: usize) -> Option<f64> {
        let v: Vec<f64> = self.samples.iter().filter(|s| s.pattern.count() == k).map(|s| s.c_net).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn cost_report(&self) -> CostReport {
        CostReport {
            sample_ids: self.samples.iter().map(|s| s.image_id).collect(),
            c_net: self.c_net(),
            c_tot: self.c_tot,
            router_mean: self.samples.iter().map(|s| s.router_madds).sum::<f64>() / self.samples.len().max(1) as f64,
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        writeln!(out, "samples,mean,max,min,std,C_tot,mean_ratio,within_group_cosine,cross_group_cosine,spearman,det_loss")?;
        let m = &self.madds;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.samples.len(),
            m.mean,
            m.max,
            m.min,
            m.std,
            self.c_tot,
            m.mean / self.c_tot,
            opt(self.within_group_cosine),
            opt(self.cross_group_cosine),
            opt(self.spearman),
            self.det_loss
        )?;
        Ok(())
    }

    pub fn write_samples_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "sample_id,pattern,C_net,ratio,executed_nodes,det_loss")?;
        for s in &self.samples {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.image_id,
                s.pattern,
                s.c_net,
                s.c_net / self.c_tot,
                s.executed_nodes,
                s.det_loss
            )?;
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"));
        format!(
            "{} samples, C_tot {:.0} MAdds\nC_net mean {:.0} max {:.0} min {:.0} std {:.1} (mean ratio {:.4})\n\
             route cosine within groups {} across groups {}\nspearman(interval count, C_net) {}\ndetection loss {:.4}",
            self.samples.len(),
            self.c_tot,
            self.madds.mean,
            self.madds.max,
            self.madds.min,
            self.madds.std,
            self.madds.mean / self.c_tot,
            opt(self.within_group_cosine),
            opt(self.cross_group_cosine),
            opt(self.spearman),
            self.det_loss
        )
    }
}

/// Ranks with ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Mean pairwise cosine within and across pattern groups.
pub fn group_cosines(routes: &[Vec<f64>], patterns: &[ScaleEncoding]) -> (Option<f64>, Option<f64>) {
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..routes.len() {
        for j in i + 1..routes.len() {
            let c = path_similarity(&routes[i], &routes[j]);
            if patterns[i] == patterns[j] {
                within += c;
                nw += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    ((nw > 0).then(|| within / nw as f64), (nc > 0).then(|| cross / nc as f64))
}

fn evaluate_sample(detector: &Detector, params: &Params, cfg: &RunConfig, table: &CostTable, corpus: &Corpus, i: usize, targets: &ImageTargets) -> Result<SampleEval> {
    let image = corpus.images[i].to_tensor();
    let (levels, route, madds) = detector.supernet.infer_sample(params, &image, None, 0)?;
    let mut tape = Tape::inference();
    let pv = params.load_into(&mut tape);
    let pyramid: Vec<_> = levels.into_iter().map(|t| tape.constant(t)).collect();
    let preds = detector.head.forward(&mut tape, &pv, &pyramid)?;
    let det = detection_loss(&mut tape, &preds, std::slice::from_ref(targets), &cfg.head)?;
    let ann = &corpus.annotations[i];
    Ok(SampleEval {
        image_id: ann.image_id,
        pattern: ann.scale_encoding(&cfg.budget.intervals)?,
        c_net: network_cost(&route, table)?,
        executed_nodes: route.executed_nodes(),
        router_madds: madds.routers as f64,
        det_loss: tape.value(det.total).item(),
        route: route.route_vector(),
    })
}

/// Inference-mode routing statistics over every image of `corpus`.
pub fn evaluate_routing(detector: &Detector, params: &Params, cfg: &RunConfig, corpus: &Corpus) -> Result<EvalSummary> {
    check_corpus(cfg, corpus)?;
    let (h, w) = (corpus.images[0].height, corpus.images[0].width);
    let table = compile_cost_table(&cfg.supernet, h, w)?;
    let targets = image_targets(cfg, corpus);
    let samples = (0..corpus.len())
        .into_par_iter()
        .map(|i| evaluate_sample(detector, params, cfg, &table, corpus, i, &targets[i]))
        .collect::<Result<Vec<_>>>()?;
    let c_net: Vec<f64> = samples.iter().map(|s| s.c_net).collect();
    let counts: Vec<f64> = samples.iter().map(|s| s.pattern.count() as f64).collect();
    let routes: Vec<Vec<f64>> = samples.iter().map(|s| s.route.clone()).collect();
    let patterns: Vec<ScaleEncoding> = samples.iter().map(|s| s.pattern.clone()).collect();
    let (within, cross) = group_cosines(&routes, &patterns);
    let det_loss = samples.iter().map(|s| s.det_loss).sum::<f64>() / samples.len() as f64;
    Ok(EvalSummary {
        c_tot: table.total(),
        madds: Summary::of(&c_net).expect("nonempty corpus"),
        within_group_cosine: within,
        cross_group_cosine: cross,
        spearman: spearman(&counts, &c_net),
        det_loss,
        samples,
    })
}

/// Number of images per scale pattern, for reporting.
pub fn pattern_histogram(patterns: &[ScaleEncoding]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for p in patterns {
        *h.entry(p.to_string()).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_drops_after_configured_epochs() {
        let t = TrainConfig::default();
        let lrs: Vec<f64> = (1..=12).map(|e| t.lr_at(e)).collect();
        assert!(lrs[..8].iter().all(|&l| l == 0.01));
        assert!(lrs[8..11].iter().all(|&l| (l - 0.001).abs() < 1e-18));
        assert!((lrs[11] - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn ramp_is_linear_then_flat() {
        let t = TrainConfig::default();
        assert_eq!(t.ramp(0), 0.0);
        assert_eq!(t.ramp(50), 0.5);
        assert_eq!(t.ramp(500), 1.0);
        let t = TrainConfig {
            lambda_ramp_steps: 0,
            ..t
        };
        assert_eq!(t.ramp(0), 1.0);
    }

    #[test]
    fn config_checks() {
        let bad = TrainConfig {
            lr_drop_epochs: vec![13],
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let ok = TrainConfig {
            batch_size: 1,
            lambda_local: 0.0,
            ..TrainConfig::default()
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn spearman_matches_pearson_on_ranks() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[3.0, 2.0]), None);
        // ties: ranks (0.5,0.5,2) vs (0,1,2)
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn group_cosines_split_pairs_by_pattern() {
        let a = ScaleEncoding::from_bits(&[1, 0]);
        let b = ScaleEncoding::from_bits(&[0, 1]);
        let routes = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let (w, c) = group_cosines(&routes, &[a.clone(), a, b]);
        assert_eq!(w, Some(1.0));
        assert_eq!(c, Some(0.0));
    }

    #[test]
    fn sgd_applies_momentum_and_decay() {
        let mut p = Params::new();
        let id = p.add("w", Tensor::from_vec(vec![1.0]));
        let mut sgd = Sgd::new(&p, 0.9, 0.1);
        sgd.step(&mut p, &[Tensor::from_vec(vec![1.0])], 0.5);
        // v = 1 + 0.1, w = 1 - 0.55
        assert!((p.get(id).data()[0] - 0.45).abs() < 1e-15);
        sgd.step(&mut p, &[Tensor::from_vec(vec![0.0])], 0.5);
        // v = 0.99 + 0.045
        assert!((p.get(id).data()[0] - (0.45 - 0.5 * 1.035)).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_norm_and_rejects_nan() {
        let mut g = vec![Tensor::from_vec(vec![3.0, 4.0])];
        clip_and_check(&mut g, Some(1.0)).unwrap();
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut g = vec![Tensor::from_vec(vec![f64::NAN])];
        assert!(matches!(clip_and_check(&mut g, None), Err(Error::Numeric(_))));
    }
}
