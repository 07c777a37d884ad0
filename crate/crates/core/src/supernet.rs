//! Multi-scale densely connected trellis with per-node routers.
//!
//! A fixed stem brings the image to 1/8 resolution. Each of the following
//! layers holds up to `num_scales` computation nodes; a node at scale `s`
//! sums what the previous layer sent to `s` (keep from `s`, down from
//! `s - 1`, up from `s + 1`), runs a separable 3×3 block and forwards the
//! result along up to three gated paths. Layer `l` exposes scales
//! `0..min(l, num_scales)`, one more scale per layer until all are present.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CostScope, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamVars, Params};
use crate::tensor::Tensor;

pub const UP: usize = 0;
pub const KEEP: usize = 1;
pub const DOWN: usize = 2;

/// Static description of the trellis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupernetSpec {
    pub num_layers: usize,
    pub num_scales: usize,
    pub channels_per_scale: Vec<usize>,
    pub input_channels: usize,
    /// Gate binarization threshold τ.
    pub gate_threshold: f64,
    /// Width of the pyramid projections fed to the head.
    pub head_channels: usize,
    /// Pre-activation bias of each router's final layer.
    pub router_bias_init: f64,
}

impl Default for SupernetSpec {
    /// Desk-scale trellis: 8 layers, 4 scales, 8/16/32/64 channels.
    fn default() -> Self {
        SupernetSpec {
            num_layers: 8,
            num_scales: 4,
            channels_per_scale: vec![8, 16, 32, 64],
            input_channels: 1,
            gate_threshold: 1e-4,
            head_channels: 32,
            router_bias_init: 2.0,
        }
    }
}

impl SupernetSpec {
    /// The full-size configuration: 16 layers, 64/128/256/512 channels.
    pub fn full_scale() -> Self {
        SupernetSpec {
            num_layers: 16,
            channels_per_scale: vec![64, 128, 256, 512],
            input_channels: 3,
            head_channels: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("supernet: {m}")));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.num_scales == 0 {
            return fail("num_scales must be at least 1".into());
        }
        if self.channels_per_scale.len() != self.num_scales {
            return fail(format!(
                "{} channel entries for {} scales",
                self.channels_per_scale.len(),
                self.num_scales
            ));
        }
        if self.channels_per_scale[0] == 0 {
            return fail("channel counts must be positive".into());
        }
        for w in self.channels_per_scale.windows(2) {
            if w[1] != 2 * w[0] {
                return fail(format!("channels must double between scales, got {:?}", self.channels_per_scale));
            }
        }
        if !(self.gate_threshold > 0.0) {
            return fail(format!("gate threshold must be positive, got {}", self.gate_threshold));
        }
        if self.input_channels == 0 || self.head_channels == 0 {
            return fail("input and head channel counts must be positive".into());
        }
        Ok(())
    }

    /// Scales present at `layer` (1-based).
    pub fn scales_at(&self, layer: usize) -> usize {
        layer.min(self.num_scales)
    }

    /// Reachable nodes in layer-major, scale-minor order.
    pub fn nodes(&self) -> Vec<NodeId> {
        (1..=self.num_layers)
            .flat_map(|layer| (0..self.scales_at(layer)).map(move |scale| NodeId { layer, scale }))
            .collect()
    }

    pub fn node_count(&self) -> usize {
        (1..=self.num_layers).map(|l| self.scales_at(l)).sum()
    }

    pub fn node_index(&self, node: NodeId) -> Option<usize> {
        if node.layer == 0 || node.layer > self.num_layers || node.scale >= self.scales_at(node.layer) {
            return None;
        }
        let before: usize = (1..node.layer).map(|l| self.scales_at(l)).sum();
        Some(before + node.scale)
    }

    /// Image sides must be a multiple of this (the coarsest scale is 1/2^(2+S)).
    pub fn input_multiple(&self) -> usize {
        1 << (2 + self.num_scales)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.input_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Usage(format!("image size {h}×{w} must be a positive multiple of {m}")));
        }
        Ok(())
    }

    /// Spatial size of scale `s` for an `h×w` input.
    pub fn scale_size(&self, h: usize, w: usize, scale: usize) -> (usize, usize) {
        (h >> (3 + scale), w >> (3 + scale))
    }

    /// Which of (up, keep, down) exist at `scale`.
    pub fn valid_directions(&self, scale: usize) -> [bool; 3] {
        [scale > 0, true, scale + 1 < self.num_scales]
    }

    pub fn pyramid_levels(&self) -> usize {
        self.num_scales + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    /// 1-based layer index.
    pub layer: usize,
    /// 0 is the finest (1/8) scale.
    pub scale: usize,
}

/// Continuous (up, keep, down) gate of one node for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateVector {
    pub up: f64,
    pub keep: f64,
    pub down: f64,
}

impl GateVector {
    pub fn new(up: f64, keep: f64, down: f64) -> Self {
        GateVector { up, keep, down }
    }

    pub fn from_array(g: [f64; 3]) -> Self {
        GateVector::new(g[UP], g[KEEP], g[DOWN])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.up, self.keep, self.down]
    }
}

/// Inference-time open mask: a path is dropped iff its gate is below τ.
pub fn binarize_gates(g: GateVector, tau: f64) -> [bool; 3] {
    g.to_array().map(|v| v >= tau)
}

/// A node whose three paths are all closed skips its convolution block.
pub fn node_dropped(mask: [bool; 3]) -> bool {
    !mask.iter().any(|&m| m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeRoute {
    pub node: NodeId,
    pub gates: GateVector,
    /// Present in inference mode.
    pub open: Option<[bool; 3]>,
}

/// Gates of every reachable node for one sample, in node order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RouteRecord {
    pub nodes: Vec<NodeRoute>,
}

impl RouteRecord {
    /// Flattened gate values (layer-major, then scale, then up/keep/down).
    pub fn route_vector(&self) -> Vec<f64> {
        self.nodes.iter().flat_map(|n| n.gates.to_array()).collect()
    }

    /// Binary gates from the open mask; continuous gates when there is none.
    pub fn binary_gates(&self) -> Vec<[f64; 3]> {
        self.nodes
            .iter()
            .map(|n| match n.open {
                Some(mask) => mask.map(|o| if o { 1.0 } else { 0.0 }),
                None => n.gates.to_array(),
            })
            .collect()
    }

    pub fn executed_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.open.is_some_and(|m| !node_dropped(m))).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Continuous gates, every block executed.
    Train,
    /// Binarized gates, dropped paths and blocks skipped, one sample at a time.
    Infer,
}

#[derive(Clone, Copy, Debug)]
pub struct SepConv {
    pub dw: ParamId,
    pub pw: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Router {
    conv: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
}

#[derive(Clone, Debug)]
struct NodeParams {
    block: SepConv,
    up: Option<ParamId>,
    down: Option<ParamId>,
    router: Router,
}

/// Uniform fan-in initialisation; `gain2` is the squared gain (2 for ReLU).
pub(crate) fn fan_in_uniform<R: Rng>(shape: &[usize], fan_in: usize, gain2: f64, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, (3.0 * gain2 / fan_in as f64).sqrt(), rng)
}

pub(crate) fn add_sepconv<R: Rng>(params: &mut Params, name: &str, cin: usize, cout: usize, rng: &mut R) -> SepConv {
    let dw = params.add(format!("{name}.dw"), fan_in_uniform(&[cin, 9], 9, 1.0, rng));
    let pw = params.add(format!("{name}.pw"), fan_in_uniform(&[cout, cin], cin, 2.0, rng));
    SepConv { dw, pw }
}

pub(crate) fn sepconv(tape: &mut Tape, pv: &ParamVars, conv: SepConv, x: Var, stride: usize) -> Result<Var> {
    tape.depthwise_separable_conv3x3(x, pv[conv.dw], pv[conv.pw], stride)
}

/// Variance floor of the per-sample normalization.
pub(crate) const NORM_EPS: f64 = 1e-5;

/// Separable conv, per-sample normalization, ReLU.
pub(crate) fn conv_block(tape: &mut Tape, pv: &ParamVars, conv: SepConv, x: Var, stride: usize) -> Result<Var> {
    let y = sepconv(tape, pv, conv, x, stride)?;
    let y = tape.sample_norm(y, NORM_EPS)?;
    Ok(tape.relu(y))
}

/// Forced gate values per node, each `B×3`, e.g. all ones to bypass routers.
#[derive(Clone, Debug)]
pub struct GateOverrides(pub Vec<Tensor>);

impl GateOverrides {
    pub fn all_open(spec: &SupernetSpec, batch: usize) -> Self {
        GateOverrides(vec![Tensor::full(&[batch, 3], 1.0); spec.node_count()])
    }

    fn sample(&self, node: usize, b: usize) -> Tensor {
        Tensor::from_vec(self.0[node].data()[b * 3..b * 3 + 3].to_vec()).reshape(vec![1, 3])
    }
}

/// Output of a differentiable (train-mode) pass.
pub struct TrainForward {
    /// C3..C(3+S), each `B×head_channels×h×w`.
    pub pyramid: Vec<Var>,
    /// Masked gates per node, each `B×3`.
    pub gates: Vec<Var>,
    pub routes: Vec<RouteRecord>,
}

/// MAdds executed for one sample, by region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaddsBreakdown {
    pub stem: u64,
    pub nodes: u64,
    pub routers: u64,
    pub head: u64,
}

impl MaddsBreakdown {
    pub fn from_tape(tape: &Tape) -> Self {
        let mut m = MaddsBreakdown::default();
        for (scope, &count) in tape.madds_ledger() {
            match scope {
                CostScope::Stem => m.stem += count,
                CostScope::Node(_) => m.nodes += count,
                CostScope::Router(_) => m.routers += count,
                CostScope::Head | CostScope::Other => m.head += count,
            }
        }
        m
    }
}

pub struct NodeOutput {
    /// Gated outputs along (up, keep, down); `None` where nothing is emitted.
    pub outputs: [Option<Var>; 3],
    /// Masked gates, `B×3`.
    pub gates: Var,
    /// Binarized mask in inference mode.
    pub open: Option<[bool; 3]>,
}

pub struct ForwardOutput {
    pub pyramid: Vec<Tensor>,
    pub routes: Vec<RouteRecord>,
    /// Per-sample execution counts (inference mode only).
    pub madds: Vec<MaddsBreakdown>,
}

pub struct Supernet {
    spec: SupernetSpec,
    nodes: Vec<NodeId>,
    stem: Vec<SepConv>,
    node_params: Vec<NodeParams>,
    projections: Vec<ParamId>,
    extra_level: SepConv,
    gate_masks: Vec<Tensor>,
}

/// Builds a supernet with freshly initialised parameters.
pub fn build_supernet(spec: SupernetSpec, seed: u64) -> Result<(Supernet, Params)> {
    let mut params = Params::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Supernet::build(spec, &mut params, &mut rng)?;
    Ok((net, params))
}

impl Supernet {
    /// Registers all supernet parameters in `params`.
    pub fn build<R: Rng>(spec: SupernetSpec, params: &mut Params, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let ch = &spec.channels_per_scale;
        let mut stem = Vec::with_capacity(3);
        let mut cin = spec.input_channels;
        for i in 0..3 {
            stem.push(add_sepconv(params, &format!("stem.{i}"), cin, ch[0], rng));
            cin = ch[0];
        }
        let nodes = spec.nodes();
        let mut node_params = Vec::with_capacity(nodes.len());
        for n in &nodes {
            let c = ch[n.scale];
            let prefix = format!("node.{}.{}", n.layer, n.scale);
            let block = add_sepconv(params, &format!("{prefix}.block"), c, c, rng);
            let [up_ok, _, down_ok] = spec.valid_directions(n.scale);
            let up = up_ok.then(|| {
                params.add(format!("{prefix}.up"), fan_in_uniform(&[ch[n.scale - 1], c], c, 1.0, rng))
            });
            let down = down_ok.then(|| {
                params.add(format!("{prefix}.down"), fan_in_uniform(&[ch[n.scale + 1], c], c, 1.0, rng))
            });
            let router = Router {
                conv: params.add(format!("{prefix}.router.conv"), fan_in_uniform(&[c, c], c, 2.0, rng)),
                fc_w: params.add(format!("{prefix}.router.fc.w"), fan_in_uniform(&[3, c], c, 1.0, rng)),
                fc_b: params.add(format!("{prefix}.router.fc.b"), Tensor::full(&[3], spec.router_bias_init)),
            };
            node_params.push(NodeParams { block, up, down, router });
        }
        let projections = (0..spec.num_scales)
            .map(|s| {
                params.add(format!("proj.{s}"), fan_in_uniform(&[spec.head_channels, ch[s]], ch[s], 1.0, rng))
            })
            .collect();
        let extra_level = add_sepconv(params, "proj.extra", spec.head_channels, spec.head_channels, rng);
        let gate_masks = (0..spec.num_scales)
            .map(|s| Tensor::from_vec(spec.valid_directions(s).map(|v| if v { 1.0 } else { 0.0 }).to_vec()))
            .collect();
        Ok(Supernet {
            spec,
            nodes,
            stem,
            node_params,
            projections,
            extra_level,
            gate_masks,
        })
    }

    pub fn spec(&self) -> &SupernetSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    fn check_images(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        match *shape {
            [b, c, h, w] if c == self.spec.input_channels && b > 0 => {
                self.spec.check_input(h, w)?;
                Ok((b, h, w))
            }
            _ => Err(Error::Usage(format!(
                "images must be B×{}×H×W, got {shape:?}",
                self.spec.input_channels
            ))),
        }
    }

    fn stem_forward(&self, tape: &mut Tape, pv: &ParamVars, images: Var) -> Result<Var> {
        let prev = tape.set_scope(CostScope::Stem);
        let mut x = images;
        for conv in &self.stem {
            x = conv_block(tape, pv, *conv, x, 2)?;
        }
        tape.set_scope(prev);
        Ok(x)
    }

    /// Router: pool to 2×2, 1×1 conv, global pool, fully connected to three
    /// logits, then `clamp(tanh(·), 0, 1)` with boundary directions zeroed.
    pub fn router_forward(&self, tape: &mut Tape, pv: &ParamVars, node: usize, x: Var) -> Result<Var> {
        let r = self.node_params[node].router;
        let prev = tape.set_scope(CostScope::Router(node));
        let (batch, h, w) = match tape.shape(x)[..] {
            [b, _, h, w] => (b, h, w),
            ref s => return Err(Error::shape("router", format!("{s:?}"))),
        };
        let pooled = tape.avg_pool_to(x, h.min(2), w.min(2))?;
        let conv = tape.conv2d_1x1(pooled, pv[r.conv], 1)?;
        let act = tape.relu(conv);
        let gap = tape.global_avg_pool(act)?;
        let logits = tape.fully_connected(gap, pv[r.fc_w], pv[r.fc_b])?;
        let t = tape.tanh(logits);
        let g = tape.clamp(t, 0.0, 1.0);
        let mask = self.batch_mask(node, batch);
        let mask = tape.constant(mask);
        let gates = tape.mul(g, mask)?;
        tape.set_scope(prev);
        Ok(gates)
    }

    fn batch_mask(&self, node: usize, batch: usize) -> Tensor {
        let m = self.gate_masks[self.nodes[node].scale].data();
        Tensor::new(vec![batch, 3], m.iter().copied().cycle().take(batch * 3).collect())
    }

    fn masked_override(&self, tape: &mut Tape, node: usize, forced: Tensor) -> Result<Var> {
        let batch = forced.shape()[0];
        if forced.shape() != [batch, 3] {
            return Err(Error::shape("gate override", format!("{:?}", forced.shape())));
        }
        let mask = self.batch_mask(node, batch);
        let data = forced.data().iter().zip(mask.data()).map(|(g, m)| g * m).collect();
        Ok(tape.constant(Tensor::new(vec![batch, 3], data)))
    }

    fn block_forward(&self, tape: &mut Tape, pv: &ParamVars, node: usize, x: Var) -> Result<Var> {
        let y = sepconv(tape, pv, self.node_params[node].block, x, 1)?;
        Ok(tape.relu(y))
    }

    fn transform(&self, tape: &mut Tape, pv: &ParamVars, node: usize, dir: usize, y: Var) -> Result<Var> {
        let p = &self.node_params[node];
        match dir {
            UP => {
                let z = tape.conv2d_1x1(y, pv[p.up.expect("up path exists")], 1)?;
                tape.bilinear_upsample_2x(z)
            }
            DOWN => tape.conv2d_1x1(y, pv[p.down.expect("down path exists")], 2),
            _ => Ok(y),
        }
    }

    fn target_scale(scale: usize, dir: usize) -> usize {
        match dir {
            UP => scale - 1,
            DOWN => scale + 1,
            _ => scale,
        }
    }

    fn accumulate(tape: &mut Tape, slot: &mut Option<Var>, v: Var) -> Result<()> {
        *slot = Some(match *slot {
            Some(acc) => tape.add(acc, v)?,
            None => v,
        });
        Ok(())
    }

    fn pyramid_forward(&self, tape: &mut Tape, pv: &ParamVars, finals: Vec<Option<Var>>, batch: usize, h: usize, w: usize) -> Result<Vec<Var>> {
        let prev = tape.set_scope(CostScope::Head);
        let mut levels = Vec::with_capacity(self.spec.pyramid_levels());
        for (s, f) in finals.into_iter().enumerate() {
            let x = match f {
                Some(v) => v,
                None => {
                    let (hs, ws) = self.spec.scale_size(h, w, s);
                    tape.constant(Tensor::zeros(&[batch, self.spec.channels_per_scale[s], hs, ws]))
                }
            };
            levels.push(tape.conv2d_1x1(x, pv[self.projections[s]], 1)?);
        }
        let last = *levels.last().expect("at least one scale");
        let act = tape.relu(last);
        levels.push(sepconv(tape, pv, self.extra_level, act, 2)?);
        tape.set_scope(prev);
        Ok(levels)
    }

    /// One computation node. `x` is the summed node input.
    ///
    /// Train mode runs the block and emits `g_d · transform_d(block(x))` for
    /// every valid direction. Infer mode (batch of one) binarizes the gates,
    /// skips the block when every path is closed and emits only open paths.
    pub fn node_forward(&self, tape: &mut Tape, pv: &ParamVars, node: usize, x: Var, mode: Mode, forced: Option<Tensor>) -> Result<NodeOutput> {
        let gates = match forced {
            Some(g) => self.masked_override(tape, node, g)?,
            None => self.router_forward(tape, pv, node, x)?,
        };
        let scale = self.nodes[node].scale;
        let (active, open) = match mode {
            Mode::Train => (self.spec.valid_directions(scale), None),
            Mode::Infer => {
                if tape.shape(gates)[0] != 1 {
                    return Err(Error::Usage("inference-mode nodes take one sample at a time".into()));
                }
                let g = GateVector::from_array(std::array::from_fn(|d| tape.value(gates).data()[d]));
                let mask = binarize_gates(g, self.spec.gate_threshold);
                (mask, Some(mask))
            }
        };
        let mut outputs = [None; 3];
        if !node_dropped(active) {
            let prev = tape.set_scope(CostScope::Node(node));
            let y = self.block_forward(tape, pv, node, x)?;
            for dir in (0..3).filter(|&d| active[d]) {
                let t = self.transform(tape, pv, node, dir, y)?;
                outputs[dir] = Some(tape.gate_scale(t, gates, dir)?);
            }
            tape.set_scope(prev);
        }
        Ok(NodeOutput { outputs, gates, open })
    }

    /// Differentiable pass with continuous gates; every block runs.
    pub fn forward_train(&self, tape: &mut Tape, pv: &ParamVars, images: Var, overrides: Option<&GateOverrides>) -> Result<TrainForward> {
        let (batch, h, w) = self.check_images(tape.shape(images))?;
        let s_count = self.spec.num_scales;
        let mut inputs: Vec<Option<Var>> = vec![None; s_count];
        inputs[0] = Some(self.stem_forward(tape, pv, images)?);
        let mut gate_vars = Vec::with_capacity(self.nodes.len());
        let mut idx = 0;
        for layer in 1..=self.spec.num_layers {
            let mut next: Vec<Option<Var>> = vec![None; s_count];
            for scale in 0..self.spec.scales_at(layer) {
                let x = inputs[scale].expect("trellis keeps every exposed scale fed");
                let forced = overrides.map(|o| o.0[idx].clone());
                let out = self.node_forward(tape, pv, idx, x, Mode::Train, forced)?;
                for (dir, y) in out.outputs.into_iter().enumerate() {
                    if let Some(y) = y {
                        Self::accumulate(tape, &mut next[Self::target_scale(scale, dir)], y)?;
                    }
                }
                gate_vars.push(out.gates);
                idx += 1;
            }
            inputs = next;
        }
        let pyramid = self.pyramid_forward(tape, pv, inputs, batch, h, w)?;
        let routes = (0..batch)
            .map(|b| RouteRecord {
                nodes: self
                    .nodes
                    .iter()
                    .zip(&gate_vars)
                    .map(|(&node, &g)| NodeRoute {
                        node,
                        gates: GateVector::from_array(std::array::from_fn(|d| tape.value(g).data()[b * 3 + d])),
                        open: None,
                    })
                    .collect(),
            })
            .collect();
        Ok(TrainForward {
            pyramid,
            gates: gate_vars,
            routes,
        })
    }

    /// Inference for one sample (`1×C×H×W`) on a non-tracking tape. With
    /// `forced`, row `sample` of each override replaces the router output.
    ///
    /// Gates below τ close their path; a node with every path closed, or with
    /// no open incoming path, runs nothing and records zero gates in the
    /// latter case.
    pub fn infer_sample(&self, params: &Params, image: &Tensor, forced: Option<&GateOverrides>, sample: usize) -> Result<(Vec<Tensor>, RouteRecord, MaddsBreakdown)> {
        let (batch, h, w) = self.check_images(image.shape())?;
        if batch != 1 {
            return Err(Error::Usage(format!("infer_sample takes one image, got batch {batch}")));
        }
        let mut tape = Tape::inference();
        let pv = params.load_into(&mut tape);
        let img = tape.constant(image.clone());
        let s_count = self.spec.num_scales;
        let mut inputs: Vec<Option<Var>> = vec![None; s_count];
        inputs[0] = Some(self.stem_forward(&mut tape, &pv, img)?);
        let mut record = RouteRecord::default();
        let mut idx = 0;
        for layer in 1..=self.spec.num_layers {
            let mut next: Vec<Option<Var>> = vec![None; s_count];
            for scale in 0..self.spec.scales_at(layer) {
                let node = self.nodes[idx];
                let Some(x) = inputs[scale] else {
                    record.nodes.push(NodeRoute {
                        node,
                        gates: GateVector::default(),
                        open: Some([false; 3]),
                    });
                    idx += 1;
                    continue;
                };
                let forced = forced.map(|o| o.sample(idx, sample));
                let out = self.node_forward(&mut tape, &pv, idx, x, Mode::Infer, forced)?;
                let gates = GateVector::from_array(std::array::from_fn(|d| tape.value(out.gates).data()[d]));
                record.nodes.push(NodeRoute {
                    node,
                    gates,
                    open: out.open,
                });
                for (dir, y) in out.outputs.into_iter().enumerate() {
                    if let Some(y) = y {
                        Self::accumulate(&mut tape, &mut next[Self::target_scale(scale, dir)], y)?;
                    }
                }
                idx += 1;
            }
            inputs = next;
        }
        let pyramid = self.pyramid_forward(&mut tape, &pv, inputs, 1, h, w)?;
        let madds = MaddsBreakdown::from_tape(&tape);
        let levels = pyramid.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((levels, record, madds))
    }

    /// Runs a whole batch in either mode without gradient tracking.
    pub fn forward(&self, params: &Params, images: &Tensor, mode: Mode, overrides: Option<&GateOverrides>) -> Result<ForwardOutput> {
        let (batch, _, _) = self.check_images(images.shape())?;
        match mode {
            Mode::Train => {
                let mut tape = Tape::inference();
                let pv = params.load_into(&mut tape);
                let x = tape.constant(images.clone());
                let out = self.forward_train(&mut tape, &pv, x, overrides)?;
                Ok(ForwardOutput {
                    pyramid: out.pyramid.iter().map(|&v| tape.value(v).clone()).collect(),
                    routes: out.routes,
                    madds: Vec::new(),
                })
            }
            Mode::Infer => {
                let mut per_level: Vec<Vec<Tensor>> = vec![Vec::with_capacity(batch); self.spec.pyramid_levels()];
                let mut routes = Vec::with_capacity(batch);
                let mut madds = Vec::with_capacity(batch);
                for b in 0..batch {
                    let (levels, route, m) = self.infer_sample(params, &images.batch_item(b), overrides, b)?;
                    for (dst, l) in per_level.iter_mut().zip(levels) {
                        dst.push(l);
                    }
                    routes.push(route);
                    madds.push(m);
                }
                Ok(ForwardOutput {
                    pyramid: per_level.iter().map(|l| Tensor::concat_batch(l)).collect(),
                    routes,
                    madds,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SupernetSpec {
        SupernetSpec {
            num_layers: 4,
            num_scales: 3,
            channels_per_scale: vec![4, 8, 16],
            head_channels: 4,
            ..SupernetSpec::default()
        }
    }

    fn image(seed: u64, size: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[1, 1, size, size], 1.0, &mut rng).map(|v| v.abs())
    }

    #[test]
    fn node_counts_follow_expanding_trellis() {
        let full = SupernetSpec::full_scale();
        assert_eq!(full.node_count(), 58);
        assert_eq!(full.nodes().len(), 58);
        let tiny = SupernetSpec {
            num_layers: 1,
            num_scales: 1,
            channels_per_scale: vec![4],
            ..SupernetSpec::default()
        };
        let (net, _) = build_supernet(tiny, 0).unwrap();
        assert_eq!(net.nodes(), &[NodeId { layer: 1, scale: 0 }]);
        assert_eq!(SupernetSpec::default().node_count(), 26);
    }

    #[test]
    fn node_index_matches_enumeration() {
        let spec = SupernetSpec::full_scale();
        for (i, n) in spec.nodes().into_iter().enumerate() {
            assert_eq!(spec.node_index(n), Some(i));
        }
        assert_eq!(spec.node_index(NodeId { layer: 2, scale: 2 }), None);
        assert_eq!(spec.node_index(NodeId { layer: 0, scale: 0 }), None);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = SupernetSpec::default();
        s.channels_per_scale = vec![8, 12, 32, 64];
        assert!(matches!(build_supernet(s, 0), Err(Error::Config(_))));
        let mut s = SupernetSpec::default();
        s.gate_threshold = 0.0;
        assert!(matches!(build_supernet(s, 0), Err(Error::Config(_))));
        let mut s = SupernetSpec::default();
        s.channels_per_scale.pop();
        assert!(matches!(build_supernet(s, 0), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = build_supernet(small_spec(), 7).unwrap();
        let (_, b) = build_supernet(small_spec(), 7).unwrap();
        let (_, c) = build_supernet(small_spec(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn binarization_uses_inclusive_threshold() {
        let tau = 1e-4;
        assert_eq!(binarize_gates(GateVector::new(0.5, 5e-5, 0.2), tau), [true, false, true]);
        assert!(node_dropped(binarize_gates(GateVector::new(0.0, 0.0, 0.0), tau)));
        assert_eq!(binarize_gates(GateVector::new(tau, tau, tau), tau), [true; 3]);
    }

    #[test]
    fn zero_router_weights_give_constant_gates_with_boundary_mask() {
        let spec = small_spec();
        let (net, mut params) = build_supernet(spec.clone(), 1).unwrap();
        for id in params.ids().collect::<Vec<_>>() {
            if params.name(id).ends_with("router.fc.w") {
                *params.get_mut(id) = params.get(id).zeros_like();
            }
        }
        let images = Tensor::concat_batch(&[image(1, 32), image(2, 32)]);
        let out = net.forward(&params, &images, Mode::Train, None).unwrap();
        let g0 = spec.router_bias_init.tanh();
        for route in &out.routes {
            for n in &route.nodes {
                let expect = spec.valid_directions(n.node.scale).map(|v| if v { g0 } else { 0.0 });
                assert_eq!(n.gates.to_array(), expect, "{:?}", n.node);
            }
        }
        assert_eq!(out.routes[0], out.routes[1]);
    }

    #[test]
    fn boundary_gates_are_zero_in_both_modes() {
        let spec = small_spec();
        let (net, params) = build_supernet(spec.clone(), 3).unwrap();
        let images = Tensor::concat_batch(&[image(4, 32), image(5, 32)]);
        for mode in [Mode::Train, Mode::Infer] {
            let out = net.forward(&params, &images, mode, None).unwrap();
            for route in &out.routes {
                for n in &route.nodes {
                    if n.node.scale == 0 {
                        assert_eq!(n.gates.up, 0.0);
                    }
                    if n.node.scale == spec.num_scales - 1 {
                        assert_eq!(n.gates.down, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn pyramid_sizes_for_64_pixel_input() {
        let (net, params) = build_supernet(SupernetSpec::default(), 0).unwrap();
        let out = net.forward(&params, &image(0, 64), Mode::Train, None).unwrap();
        let sizes: Vec<_> = out.pyramid.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sizes, vec![8, 4, 2, 1, 1]);
        assert!(out.pyramid.iter().all(|t| t.shape()[1] == 32));
    }

    #[test]
    fn bad_input_size_is_a_usage_error() {
        let (net, params) = build_supernet(SupernetSpec::default(), 0).unwrap();
        let err = net.forward(&params, &Tensor::zeros(&[1, 1, 48, 64]), Mode::Train, None);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    fn node_outputs(gates: [f64; 3], keep_scale: f64) -> [Option<Tensor>; 3] {
        let spec = small_spec();
        let (net, params) = build_supernet(spec, 9).unwrap();
        let mut tape = Tape::new();
        let pv = params.load_into(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(Tensor::uniform(&[1, 8, 2, 2], 1.0, &mut rng));
        // layer 3, scale 1 has all three directions
        let idx = net.spec().node_index(NodeId { layer: 3, scale: 1 }).unwrap();
        let forced = Tensor::new(vec![1, 3], vec![gates[0], gates[1] * keep_scale, gates[2]]);
        let out = net.node_forward(&mut tape, &pv, idx, x, Mode::Train, Some(forced)).unwrap();
        out.outputs.map(|o| o.map(|v| tape.value(v).clone()))
    }

    #[test]
    fn train_node_with_keep_only_gate() {
        let out = node_outputs([0.0, 1.0, 0.0], 1.0);
        assert!(out[UP].as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(out[DOWN].as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(out[KEEP].as_ref().unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn train_node_output_is_linear_in_gate() {
        let one = node_outputs([0.0, 1.0, 0.0], 0.3);
        let two = node_outputs([0.0, 1.0, 0.0], 0.6);
        let (a, b) = (one[KEEP].as_ref().unwrap(), two[KEEP].as_ref().unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_node_with_closed_gates_computes_nothing() {
        let (net, params) = build_supernet(small_spec(), 9).unwrap();
        let mut tape = Tape::inference();
        let pv = params.load_into(&mut tape);
        let x = tape.constant(Tensor::full(&[1, 8, 2, 2], 1.0));
        let idx = net.spec().node_index(NodeId { layer: 3, scale: 1 }).unwrap();
        let closed = Tensor::new(vec![1, 3], vec![0.0, 5e-5, 0.0]);
        let out = net.node_forward(&mut tape, &pv, idx, x, Mode::Infer, Some(closed)).unwrap();
        assert_eq!(out.outputs, [None, None, None]);
        assert_eq!(out.open, Some([false; 3]));
        assert_eq!(tape.madds(CostScope::Node(idx)), 0);
    }

    #[test]
    fn all_open_bypass_is_a_fixed_dense_network() {
        let spec = small_spec();
        let (net, params) = build_supernet(spec.clone(), 11).unwrap();
        let images = Tensor::concat_batch(&[image(6, 32), image(7, 32), image(8, 32)]);
        let ones = GateOverrides::all_open(&spec, 3);
        let a = net.forward(&params, &images, Mode::Train, Some(&ones)).unwrap();
        let b = net.forward(&params, &images, Mode::Train, Some(&ones)).unwrap();
        assert_eq!(a.pyramid, b.pyramid);
        // every node reports the boundary-masked all-ones gate
        for n in &a.routes[0].nodes {
            let expect = spec.valid_directions(n.node.scale).map(|v| if v { 1.0 } else { 0.0 });
            assert_eq!(n.gates.to_array(), expect);
        }
    }

    #[test]
    fn dropped_node_contributes_nothing_downstream() {
        // Closing every gate of layer 1 leaves later layers with zero input,
        // so the pyramid collapses to the projection of zeros.
        let spec = small_spec();
        let (net, params) = build_supernet(spec.clone(), 12).unwrap();
        let mut forced = GateOverrides::all_open(&spec, 1);
        forced.0[0] = Tensor::zeros(&[1, 3]);
        let img = image(9, 32);
        let infer = net.forward(&params, &img, Mode::Infer, Some(&forced)).unwrap();
        let train = net.forward(&params, &img, Mode::Train, Some(&forced)).unwrap();
        for (a, b) in infer.pyramid.iter().zip(&train.pyramid) {
            assert!(a.data().iter().all(|&v| v == 0.0));
            assert!(a.max_abs_diff(b) <= 1e-9);
        }
        assert_eq!(infer.routes[0].executed_nodes(), 0);
        assert_eq!(infer.madds[0].nodes, 0);
    }
}
