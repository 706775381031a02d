use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CircuitError;
use crate::model::{ModelConfig, SizePreset};

/// A residual-stream reader or writer.
///
/// Attention heads read through three separate inputs (`AttnQ/K/V`) and
/// write through `AttnHeadOut`; an MLP reads and writes under the same name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Embed,
    /// Positional embedding, a separate writer only under [`EmbedMode::Split`].
    EmbedPos,
    AttnQ(usize, usize),
    AttnK(usize, usize),
    AttnV(usize, usize),
    AttnHeadOut(usize, usize),
    Mlp(usize),
    ResidPost,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Embed => write!(f, "embed"),
            NodeId::EmbedPos => write!(f, "pos_embed"),
            NodeId::AttnQ(l, h) => write!(f, "a{l}.h{h}.q"),
            NodeId::AttnK(l, h) => write!(f, "a{l}.h{h}.k"),
            NodeId::AttnV(l, h) => write!(f, "a{l}.h{h}.v"),
            NodeId::AttnHeadOut(l, h) => write!(f, "a{l}.h{h}"),
            NodeId::Mlp(l) => write!(f, "m{l}"),
            NodeId::ResidPost => write!(f, "resid_post"),
        }
    }
}

impl FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad node name {s:?}");
        match s {
            "embed" => return Ok(NodeId::Embed),
            "pos_embed" => return Ok(NodeId::EmbedPos),
            "resid_post" => return Ok(NodeId::ResidPost),
            _ => {}
        }
        if let Some(l) = s.strip_prefix('m') {
            return l.parse().map(NodeId::Mlp).map_err(|_| bad());
        }
        let rest = s.strip_prefix('a').ok_or_else(bad)?;
        let mut parts = rest.split('.');
        let l: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let h: usize = parts
            .next()
            .and_then(|p| p.strip_prefix('h'))
            .and_then(|p| p.parse().ok())
            .ok_or_else(bad)?;
        let node = match parts.next() {
            None => NodeId::AttnHeadOut(l, h),
            Some("q") => NodeId::AttnQ(l, h),
            Some("k") => NodeId::AttnK(l, h),
            Some("v") => NodeId::AttnV(l, h),
            Some(_) => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(node)
    }
}

/// Directed edge `src → dst`: `dst` reads what `src` wrote.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.src, self.dst)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Token projection and positional embedding form one writer.
    #[default]
    Single,
    /// Token projection (`embed`) and positional embedding (`pos_embed`)
    /// write separately.
    Split,
}

impl EmbedMode {
    pub fn n_writers(self) -> usize {
        match self {
            EmbedMode::Single => 1,
            EmbedMode::Split => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed: EmbedMode,
}

/// Closed-form edge count.
///
/// With `E` embedding writers and `a = H + 1` writers per layer, layer `l`
/// offers `E + l·a` writers to each of its `3H` attention inputs and
/// `E + l·a + H` to its MLP; `resid_post` reads all `E + L·a`.
pub fn edge_count_formula(n_layers: usize, n_heads: usize, embed_writers: usize) -> usize {
    let (l, h, e) = (n_layers, n_heads, embed_writers);
    let a = h + 1;
    l * ((3 * h + 1) * e + h) + (3 * h + 1) * a * l * l.saturating_sub(1) / 2 + e + l * a
}

/// Every reachable writer → reader pair, ordered by reader.
///
/// Writers are numbered embed first, then per layer the heads followed by the
/// MLP. Every reader sees a prefix of that list, so the gates of one reader
/// occupy a contiguous block.
#[derive(Clone, Debug)]
pub struct EdgeGraph {
    pub spec: GraphSpec,
    edges: Vec<Edge>,
    index: HashMap<Edge, usize>,
    writers: Vec<NodeId>,
    /// `(reader, first edge, number of writers read)`.
    readers: Vec<(NodeId, usize, usize)>,
}

impl EdgeGraph {
    pub fn new(spec: GraphSpec) -> Self {
        let (nl, nh) = (spec.n_layers, spec.n_heads);
        let mut writers = vec![NodeId::Embed];
        if spec.embed == EmbedMode::Split {
            writers.push(NodeId::EmbedPos);
        }
        for l in 0..nl {
            writers.extend((0..nh).map(|h| NodeId::AttnHeadOut(l, h)));
            writers.push(NodeId::Mlp(l));
        }
        let e = spec.embed.n_writers();
        let mut readers = Vec::new();
        let mut edges = Vec::new();
        let mut add = |reader: NodeId, n: usize, edges: &mut Vec<Edge>| {
            readers.push((reader, edges.len(), n));
            edges.extend(writers[..n].iter().map(|&src| Edge { src, dst: reader }));
        };
        for l in 0..nl {
            let before = e + l * (nh + 1);
            for h in 0..nh {
                add(NodeId::AttnQ(l, h), before, &mut edges);
                add(NodeId::AttnK(l, h), before, &mut edges);
                add(NodeId::AttnV(l, h), before, &mut edges);
            }
            add(NodeId::Mlp(l), before + nh, &mut edges);
        }
        add(NodeId::ResidPost, writers.len(), &mut edges);
        let index = edges.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        Self {
            spec,
            edges,
            index,
            writers,
            readers,
        }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_index(&self, e: &Edge) -> Option<usize> {
        self.index.get(e).copied()
    }

    pub fn writers(&self) -> &[NodeId] {
        &self.writers
    }

    /// First edge index and writer count for `reader`.
    pub(crate) fn reader_block(&self, reader: NodeId) -> (usize, usize) {
        let (_, first, n) = self
            .readers
            .iter()
            .find(|(r, _, _)| *r == reader)
            .copied()
            .expect("reader in graph");
        (first, n)
    }
}

/// Edge graph of a preset model.
pub fn disentangle(cfg: &ModelConfig, embed: EmbedMode) -> Result<EdgeGraph, CircuitError> {
    if cfg.size_name == SizePreset::Custom {
        return Err(CircuitError::UnsupportedArch(format!(
            "{} layers × {} heads is not a preset",
            cfg.n_layers, cfg.n_heads
        )));
    }
    Ok(EdgeGraph::new(GraphSpec {
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        embed,
    }))
}
