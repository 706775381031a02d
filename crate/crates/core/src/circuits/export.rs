use std::collections::BTreeSet;

use crate::error::CircuitError;

use super::gates::{Circuit, Task};
use super::graph::{Edge, EdgeGraph, EmbedMode, GraphSpec, NodeId};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

/// DOT text: `//` header comments, then one quoted `"src" -> "dst";` line per
/// kept edge.
pub fn export_circuit(c: &Circuit) -> String {
    let mut s = String::new();
    let embed = match c.spec.embed {
        EmbedMode::Single => "single",
        EmbedMode::Split => "split",
    };
    s.push_str(&format!("// task: {}\n", c.task.name()));
    s.push_str(&format!("// k_scale: {}\n", c.k_scale));
    s.push_str(&format!("// sparsity: {}\n", c.sparsity()));
    s.push_str(&format!("// threshold: {}\n", opt(c.threshold)));
    s.push_str(&format!("// mse_one_after: {}\n", opt(c.eval_mse.map(|m| m.0))));
    s.push_str(&format!("// mse_two_after: {}\n", opt(c.eval_mse.map(|m| m.1))));
    s.push_str(&format!(
        "// graph: layers={} heads={} embed={} edges={}\n",
        c.spec.n_layers, c.spec.n_heads, embed, c.n_edges_total
    ));
    s.push_str("digraph circuit {\n");
    for e in &c.kept_edges {
        s.push_str(&format!("  \"{}\" -> \"{}\";\n", e.src, e.dst));
    }
    s.push_str("}\n");
    s
}

fn perr(line: usize, msg: impl Into<String>) -> CircuitError {
    CircuitError::Parse { line, msg: msg.into() }
}

fn parse_opt(v: &str, line: usize) -> Result<Option<f64>, CircuitError> {
    if v == "none" {
        Ok(None)
    } else {
        v.parse().map(Some).map_err(|_| perr(line, format!("bad number {v:?}")))
    }
}

/// Inverse of [`export_circuit`]. Every edge must belong to the graph named in
/// the header.
pub fn parse_circuit(text: &str) -> Result<Circuit, CircuitError> {
    let mut task = None;
    let mut k_scale = None;
    let mut threshold = None;
    let (mut m1, mut m2) = (None, None);
    let mut graph: Option<(EdgeGraph, usize)> = None;
    let mut raw_edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with("digraph") || line == "}" {
            continue;
        }
        if let Some(c) = line.strip_prefix("//") {
            let Some((key, val)) = c.split_once(':') else { continue };
            let val = val.trim();
            match key.trim() {
                "task" => task = Some(val.parse::<Task>().map_err(|m| perr(ln, m))?),
                "k_scale" => k_scale = parse_opt(val, ln)?,
                "threshold" => threshold = parse_opt(val, ln)?,
                "mse_one_after" => m1 = parse_opt(val, ln)?,
                "mse_two_after" => m2 = parse_opt(val, ln)?,
                "graph" => graph = Some(parse_graph(val, ln)?),
                _ => {}
            }
            continue;
        }
        let body = line.trim_end_matches(';');
        let (a, b) = body.split_once("->").ok_or_else(|| perr(ln, "expected `src -> dst`"))?;
        let node = |s: &str| -> Result<NodeId, CircuitError> { s.trim().trim_matches('"').parse().map_err(|m| perr(ln, m)) };
        raw_edges.push((ln, Edge { src: node(a)?, dst: node(b)? }));
    }
    let (g, total) = graph.ok_or_else(|| perr(0, "missing graph header"))?;
    if g.len() != total {
        return Err(perr(0, format!("header claims {total} edges, graph has {}", g.len())));
    }
    let mut kept = BTreeSet::new();
    for (ln, e) in raw_edges {
        if g.edge_index(&e).is_none() {
            return Err(perr(ln, format!("{e} is not an edge of this graph")));
        }
        kept.insert(e);
    }
    Ok(Circuit {
        spec: g.spec,
        n_edges_total: total,
        task: task.ok_or_else(|| perr(0, "missing task header"))?,
        k_scale: k_scale.unwrap_or(0.0),
        threshold,
        kept_edges: kept,
        eval_mse: m1.zip(m2),
    })
}

fn parse_graph(val: &str, ln: usize) -> Result<(EdgeGraph, usize), CircuitError> {
    let (mut l, mut h, mut e, mut n) = (None, None, EmbedMode::Single, None);
    for kv in val.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| perr(ln, format!("bad field {kv:?}")))?;
        let num = || v.parse::<usize>().map_err(|_| perr(ln, format!("bad number {v:?}")));
        match k {
            "layers" => l = Some(num()?),
            "heads" => h = Some(num()?),
            "edges" => n = Some(num()?),
            "embed" => {
                e = match v {
                    "single" => EmbedMode::Single,
                    "split" => EmbedMode::Split,
                    _ => return Err(perr(ln, format!("bad embed mode {v:?}"))),
                }
            }
            _ => return Err(perr(ln, format!("unknown field {k:?}"))),
        }
    }
    let spec = GraphSpec {
        n_layers: l.ok_or_else(|| perr(ln, "missing layers"))?,
        n_heads: h.ok_or_else(|| perr(ln, "missing heads"))?,
        embed: e,
    };
    let g = EdgeGraph::new(spec);
    let total = n.unwrap_or(g.len());
    Ok((g, total))
}
