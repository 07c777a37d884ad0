//! MAdds accounting for routed nodes.
//!
//! Node cost is `max(G)·c_conv + G·(c_up, c_keep, c_down)` and network cost
//! is the sum over reachable nodes. Only multiply-accumulates are counted:
//! biases, comparisons, gate scaling and bilinear interpolation weights are
//! free. Stem, routers and head are outside the routable region and are
//! reported separately.

use std::io::Write;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::supernet::{GateVector, NodeId, RouteRecord, SupernetSpec};

/// Separable 3×3 convolution producing an `h×w` output.
pub fn sepconv_madds(h: usize, w: usize, cin: usize, cout: usize) -> u64 {
    (h * w * cin * (9 + cout)) as u64
}

/// 1×1 convolution producing an `h×w` output.
pub fn conv1x1_madds(h: usize, w: usize, cin: usize, cout: usize) -> u64 {
    (h * w * cin * cout) as u64
}

/// Constant MAdds of one node's block and its resolution-change paths.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NodeCost {
    pub conv: f64,
    pub up: f64,
    pub keep: f64,
    pub down: f64,
}

impl NodeCost {
    pub fn paths(&self) -> [f64; 3] {
        [self.up, self.keep, self.down]
    }

    /// Cost with every valid path open.
    pub fn dense(&self) -> f64 {
        self.conv + self.up + self.keep + self.down
    }
}

/// Per-node constants for one input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CostTable {
    pub input_h: usize,
    pub input_w: usize,
    pub nodes: Vec<(NodeId, NodeCost)>,
    /// Router MAdds per node (not part of `C_net`).
    pub router: Vec<f64>,
}

pub fn compile_cost_table(spec: &SupernetSpec, input_h: usize, input_w: usize) -> Result<CostTable> {
    spec.validate()?;
    spec.check_input(input_h, input_w)?;
    let ch = &spec.channels_per_scale;
    let mut nodes = Vec::with_capacity(spec.node_count());
    let mut router = Vec::with_capacity(spec.node_count());
    for n in spec.nodes() {
        let s = n.scale;
        let c = ch[s];
        let (h, w) = spec.scale_size(input_h, input_w, s);
        let [up_ok, _, down_ok] = spec.valid_directions(s);
        let up = if up_ok { conv1x1_madds(h, w, c, ch[s - 1]) } else { 0 };
        let down = if down_ok {
            let (hd, wd) = spec.scale_size(input_h, input_w, s + 1);
            conv1x1_madds(hd, wd, c, ch[s + 1])
        } else {
            0
        };
        nodes.push((
            n,
            NodeCost {
                conv: sepconv_madds(h, w, c, c) as f64,
                up: up as f64,
                keep: 0.0,
                down: down as f64,
            },
        ));
        router.push((conv1x1_madds(h.min(2), w.min(2), c, c) + 3 * c as u64) as f64);
    }
    Ok(CostTable {
        input_h,
        input_w,
        nodes,
        router,
    })
}

impl CostTable {
    /// `C_tot`: network cost with every gate open.
    pub fn total(&self) -> f64 {
        self.nodes.iter().map(|(_, k)| k.dense()).sum()
    }

    pub fn router_total(&self) -> f64 {
        self.router.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub fn node_cost(g: GateVector, k: &NodeCost) -> f64 {
    let g = g.to_array();
    let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max * k.conv + g.iter().zip(k.paths()).map(|(a, b)| a * b).sum::<f64>()
}

/// `C_net` of a route. Inference routes use their binarized mask.
pub fn network_cost(route: &RouteRecord, table: &CostTable) -> Result<f64> {
    if route.nodes.len() != table.nodes.len() || route.nodes.iter().zip(&table.nodes).any(|(r, (n, _))| r.node != *n) {
        return Err(Error::Usage(format!(
            "route with {} nodes does not match cost table with {}",
            route.nodes.len(),
            table.nodes.len()
        )));
    }
    Ok(route
        .binary_gates()
        .into_iter()
        .zip(&table.nodes)
        .map(|(g, (_, k))| node_cost(GateVector::from_array(g), k))
        .sum())
}

/// Differentiable node cost for a `B×3` gate matrix, giving a `B` vector.
pub fn node_cost_var(tape: &mut Tape, gates: Var, k: &NodeCost) -> Result<Var> {
    let max = tape.row_max(gates)?;
    let conv = tape.scale(max, k.conv);
    let paths = tape.weighted_row_sum(gates, &k.paths())?;
    tape.add(conv, paths)
}

/// Differentiable per-sample `C_net` from per-node `B×3` gates.
pub fn network_cost_var(tape: &mut Tape, gates: &[Var], table: &CostTable) -> Result<Var> {
    if gates.len() != table.nodes.len() {
        return Err(Error::Usage(format!("{} gate tensors for {} nodes", gates.len(), table.nodes.len())));
    }
    let mut total: Option<Var> = None;
    for (&g, (_, k)) in gates.iter().zip(&table.nodes) {
        let c = node_cost_var(tape, g, k)?;
        total = Some(match total {
            Some(t) => tape.add(t, c)?,
            None => c,
        });
    }
    total.ok_or_else(|| Error::Usage("empty network".into()))
}

/// Mean, extrema and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Summary {
            mean,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            std: var.sqrt(),
        })
    }
}

/// Per-sample network costs over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub sample_ids: Vec<u64>,
    pub c_net: Vec<f64>,
    pub c_tot: f64,
    /// Mean router MAdds per sample, reported outside `C_net`.
    pub router_mean: f64,
}

impl CostReport {
    pub fn summary(&self) -> Option<Summary> {
        Summary::of(&self.c_net)
    }

    /// `sample_id,C_net,C_tot,ratio` rows followed by mean/max/min/std rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "sample_id,C_net,C_tot,ratio")?;
        for (id, c) in self.sample_ids.iter().zip(&self.c_net) {
            writeln!(out, "{id},{c},{},{}", self.c_tot, c / self.c_tot)?;
        }
        if let Some(s) = self.summary() {
            for (label, v) in [("mean", s.mean), ("max", s.max), ("min", s.min), ("std", s.std)] {
                writeln!(out, "{label},{v},{},{}", self.c_tot, v / self.c_tot)?;
            }
        }
        Ok(())
    }
}
