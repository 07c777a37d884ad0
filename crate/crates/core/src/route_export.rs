//! Route diagrams: one node per (layer, scale) on a fixed grid, stem on the
//! left. Open paths are solid edges labelled with their gate value; dropped
//! or unreached nodes are drawn grey.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::supernet::{binarize_gates, node_dropped, RouteRecord, SupernetSpec, DOWN, KEEP, UP};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteFormat {
    Dot,
    Svg,
}

impl FromStr for RouteFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(RouteFormat::Dot),
            "svg" => Ok(RouteFormat::Svg),
            other => Err(Error::Usage(format!("unknown route format {other:?} (expected dot or svg)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: String,
    /// 0 for the stem.
    pub layer: usize,
    pub scale: usize,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    /// `None` for the stem edge, which carries no gate.
    pub gate: Option<f64>,
}

/// Layout-independent graph shared by the DOT and SVG writers.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteGraph {
    pub num_layers: usize,
    pub num_scales: usize,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

fn node_id(layer: usize, scale: usize) -> String {
    format!("n{layer}_{scale}")
}

impl RouteGraph {
    pub fn build(spec: &SupernetSpec, route: &RouteRecord) -> Result<RouteGraph> {
        let mut nodes = vec![GraphNode {
            id: "stem".into(),
            layer: 0,
            scale: 0,
            active: true,
        }];
        let mut index = std::collections::HashMap::new();
        for layer in 1..=spec.num_layers {
            for scale in 0..spec.scales_at(layer) {
                index.insert((layer, scale), nodes.len());
                nodes.push(GraphNode {
                    id: node_id(layer, scale),
                    layer,
                    scale,
                    active: false,
                });
            }
        }
        let mut edges = Vec::new();
        if let Some(&first) = index.get(&(1, 0)) {
            edges.push(GraphEdge {
                from: 0,
                to: first,
                gate: None,
            });
        }
        for n in &route.nodes {
            let (layer, scale) = (n.node.layer, n.node.scale);
            let &from = index
                .get(&(layer, scale))
                .ok_or_else(|| Error::Usage(format!("route node ({layer}, {scale}) is not in the trellis")))?;
            let open = n.open.unwrap_or_else(|| binarize_gates(n.gates, spec.gate_threshold));
            if node_dropped(open) {
                continue;
            }
            nodes[from].active = true;
            if layer == spec.num_layers {
                continue;
            }
            let gates = n.gates.to_array();
            for dir in [UP, KEEP, DOWN] {
                if !open[dir] {
                    continue;
                }
                let target = match dir {
                    UP if scale > 0 => scale - 1,
                    KEEP => scale,
                    DOWN => scale + 1,
                    _ => continue,
                };
                if let Some(&to) = index.get(&(layer + 1, target)) {
                    edges.push(GraphEdge {
                        from,
                        to,
                        gate: Some(gates[dir]),
                    });
                }
            }
        }
        Ok(RouteGraph {
            num_layers: spec.num_layers,
            num_scales: spec.num_scales,
            nodes,
            edges,
        })
    }

    pub fn render(&self, format: RouteFormat) -> String {
        match format {
            RouteFormat::Dot => self.to_dot(),
            RouteFormat::Svg => self.to_svg(),
        }
    }

    fn label(n: &GraphNode) -> String {
        if n.layer == 0 {
            "stem".into()
        } else {
            format!("L{} S{}", n.layer, n.scale)
        }
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        out.push_str("digraph route {\n  rankdir=LR;\n  node [shape=box, style=filled, fillcolor=white, fontsize=10];\n");
        for n in &self.nodes {
            let pos = format!("{},{}!", n.layer, self.num_scales.saturating_sub(1 + n.scale));
            let style = if n.active {
                String::new()
            } else {
                ", fillcolor=lightgray, color=gray60, fontcolor=gray50".into()
            };
            let _ = writeln!(out, "  {} [label=\"{}\", pos=\"{pos}\"{style}];", n.id, Self::label(n));
        }
        for e in &self.edges {
            let (a, b) = (&self.nodes[e.from].id, &self.nodes[e.to].id);
            match e.gate {
                Some(g) => {
                    let _ = writeln!(out, "  {a} -> {b} [style=solid, label=\"{g:.3}\"];");
                }
                None => {
                    let _ = writeln!(out, "  {a} -> {b} [style=solid];");
                }
            }
        }
        out.push_str("}\n");
        out
    }

    pub fn to_svg(&self) -> String {
        const CELL_X: f64 = 90.0;
        const CELL_Y: f64 = 60.0;
        const MARGIN: f64 = 40.0;
        const W: f64 = 52.0;
        const H: f64 = 24.0;
        let centre = |n: &GraphNode| (MARGIN + W / 2.0 + n.layer as f64 * CELL_X, MARGIN + H / 2.0 + n.scale as f64 * CELL_Y);
        let width = 2.0 * MARGIN + W + self.num_layers as f64 * CELL_X;
        let height = 2.0 * MARGIN + H + self.num_scales.saturating_sub(1) as f64 * CELL_Y;

        let mut out = String::new();
        let _ = writeln!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"10\">"
        );
        out.push_str("<defs><marker id=\"arrow\" viewBox=\"0 0 10 10\" refX=\"10\" refY=\"5\" markerWidth=\"6\" markerHeight=\"6\" orient=\"auto\"><path d=\"M0,0 L10,5 L0,10 z\" fill=\"black\"/></marker></defs>\n");
        for e in &self.edges {
            let (x1, y1) = centre(&self.nodes[e.from]);
            let (x2, y2) = centre(&self.nodes[e.to]);
            let (x1, x2) = (x1 + W / 2.0, x2 - W / 2.0);
            let _ = writeln!(
                out,
                "<line x1=\"{x1}\" y1=\"{y1}\" x2=\"{x2}\" y2=\"{y2}\" stroke=\"black\" marker-end=\"url(#arrow)\"/>"
            );
            if let Some(g) = e.gate {
                let (mx, my) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0 - 3.0);
                let _ = writeln!(out, "<text x=\"{mx}\" y=\"{my}\" text-anchor=\"middle\">{g:.3}</text>");
            }
        }
        for n in &self.nodes {
            let (cx, cy) = centre(n);
            let (fill, stroke, ink) = if n.active { ("white", "black", "black") } else { ("lightgray", "gray", "gray") };
            let _ = writeln!(
                out,
                "<g class=\"node\" id=\"{}\"><rect x=\"{}\" y=\"{}\" width=\"{W}\" height=\"{H}\" fill=\"{fill}\" stroke=\"{stroke}\"/><text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\" fill=\"{ink}\">{}</text></g>",
                n.id,
                cx - W / 2.0,
                cy - H / 2.0,
                cy + 4.0,
                Self::label(n)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}
