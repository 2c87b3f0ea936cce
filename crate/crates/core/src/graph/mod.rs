//! Dataflow graphs of blocks and their whole-stream evaluation.

mod dot;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::functional as f;
use crate::blocks::machines::Written;
use crate::blocks::{BlockConfig, BlockError, DropMode, EdgeKind};
use crate::storage::{Level, StorageError, TensorStorage};
use crate::stream::{StreamKind, Token};

pub use dot::{from_dot, to_dot};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("no node {0}")]
    UnknownNode(usize),
    #[error("node {node} ({block}) has no port `{port}`")]
    UnknownPort { node: usize, block: String, port: String },
    #[error("edge {src}.{src_port} -> {dst}.{dst_port} joins {src_kind} to {dst_kind}")]
    KindMismatch { src: usize, src_port: String, dst: usize, dst_port: String, src_kind: String, dst_kind: String },
    #[error("input `{port}` of node {node} ({block}) is not connected")]
    UnconnectedInput { node: usize, block: String, port: String },
    #[error("input `{port}` of node {node} has {count} drivers")]
    MultipleDrivers { node: usize, port: String, count: usize },
    #[error("graph has a cycle through node {0}")]
    Cycle(usize),
    #[error("node {node} ({block}): {source}")]
    Block { node: usize, block: String, source: BlockError },
    #[error("graph parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("output `{tensor}`: {msg}")]
    Output { tensor: String, msg: String },
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub block: BlockConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub src_port: String,
    pub dst: usize,
    pub dst_port: String,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamGraph {
    pub name: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

/// Edge streams and writer contents from evaluating a graph.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    /// Stream on each output port, keyed by (node, port index).
    pub streams: BTreeMap<(usize, usize), Vec<Token>>,
    pub written: BTreeMap<usize, Written>,
}

impl SamGraph {
    pub fn new(name: &str) -> Self {
        Self { name: name.into(), ..Default::default() }
    }

    pub fn add(&mut self, name: impl Into<String>, block: BlockConfig) -> usize {
        self.nodes.push(Node { name: name.into(), block });
        self.nodes.len() - 1
    }

    /// Connects `src.src_port` to `dst.dst_port`; the edge kind comes from
    /// the source port.
    pub fn connect(&mut self, src: usize, src_port: &str, dst: usize, dst_port: &str) -> Result<(), GraphError> {
        let kind = self.port_kind(src, src_port, true)?;
        let dk = self.port_kind(dst, dst_port, false)?;
        if kind != dk {
            return Err(GraphError::KindMismatch {
                src,
                src_port: src_port.into(),
                dst,
                dst_port: dst_port.into(),
                src_kind: kind.name().into(),
                dst_kind: dk.name().into(),
            });
        }
        self.edges.push(Edge { src, src_port: src_port.into(), dst, dst_port: dst_port.into(), kind });
        Ok(())
    }

    fn port_kind(&self, node: usize, port: &str, output: bool) -> Result<EdgeKind, GraphError> {
        let n = self.nodes.get(node).ok_or(GraphError::UnknownNode(node))?;
        let ports = if output { n.block.outputs() } else { n.block.inputs() };
        ports.into_iter().find(|(p, _)| p == port).map(|(_, k)| k).ok_or_else(|| GraphError::UnknownPort {
            node,
            block: n.block.kind_name().into(),
            port: port.into(),
        })
    }

    /// Checks port names, kinds, that every input has exactly one driver and
    /// that the non-skip edges form a DAG.
    pub fn validate(&self) -> Result<(), GraphError> {
        for e in &self.edges {
            let sk = self.port_kind(e.src, &e.src_port, true)?;
            let dk = self.port_kind(e.dst, &e.dst_port, false)?;
            if sk != dk || sk != e.kind {
                return Err(GraphError::KindMismatch {
                    src: e.src,
                    src_port: e.src_port.clone(),
                    dst: e.dst,
                    dst_port: e.dst_port.clone(),
                    src_kind: sk.name().into(),
                    dst_kind: dk.name().into(),
                });
            }
        }
        for (id, n) in self.nodes.iter().enumerate() {
            for (port, _) in n.block.inputs() {
                let count = self.edges.iter().filter(|e| e.dst == id && e.dst_port == port).count();
                match count {
                    1 => {}
                    0 => return Err(GraphError::UnconnectedInput { node: id, block: n.block.kind_name().into(), port }),
                    _ => return Err(GraphError::MultipleDrivers { node: id, port, count }),
                }
            }
        }
        self.topo_order().map(|_| ())
    }

    /// Node order in which every non-skip edge points forward.
    pub fn topo_order(&self) -> Result<Vec<usize>, GraphError> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for e in self.edges.iter().filter(|e| e.kind != EdgeKind::Skip) {
            indeg[e.dst] += 1;
        }
        let mut ready: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_front() {
            order.push(i);
            for e in self.edges.iter().filter(|e| e.src == i && e.kind != EdgeKind::Skip) {
                indeg[e.dst] -= 1;
                if indeg[e.dst] == 0 {
                    ready.push_back(e.dst);
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Number of blocks per primitive class (root nodes are not counted).
    pub fn primitive_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for n in &self.nodes {
            if let Some(c) = n.block.count_class() {
                *out.entry(c.to_string()).or_insert(0) += 1;
            }
        }
        out
    }

    /// The edge driving input `port` of `node`.
    pub fn driver(&self, node: usize, port: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.dst == node && e.dst_port == port)
    }

    /// Runs every block to completion on whole streams, ignoring timing.
    pub fn evaluate(&self, tensors: &BTreeMap<String, TensorStorage>) -> Result<Evaluation, GraphError> {
        self.validate()?;
        let mut ev = Evaluation::default();
        for id in self.topo_order()? {
            let node = &self.nodes[id];
            let block_err = |source: BlockError| GraphError::Block { node: id, block: node.block.kind_name().into(), source };
            let mut ins: Vec<&[Token]> = Vec::new();
            for (port, kind) in node.block.inputs() {
                if kind == EdgeKind::Skip {
                    continue;
                }
                let e = self.driver(id, &port).unwrap();
                let sp = self.nodes[e.src].block.output_index(&e.src_port).unwrap();
                ins.push(ev.streams.get(&(e.src, sp)).map(Vec::as_slice).unwrap_or(&[]));
            }
            let outs = eval_block(&node.block, &ins, tensors).map_err(block_err)?;
            match outs {
                Out::Streams(v) => {
                    for (p, s) in v.into_iter().enumerate() {
                        ev.streams.insert((id, p), s);
                    }
                }
                Out::Written(w) => {
                    ev.written.insert(id, w);
                }
            }
        }
        Ok(ev)
    }

    /// Writer nodes of `tensor` as (node, level, kind).
    pub fn writers(&self, tensor: &str) -> Vec<(usize, usize, StreamKind)> {
        let mut v: Vec<_> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match &n.block {
                BlockConfig::Write { tensor: t, level, kind } if t == tensor => Some((id, *level, *kind)),
                _ => None,
            })
            .collect();
        v.sort_by_key(|w| (w.2 == StreamKind::Val, w.1));
        v
    }

    /// Names of all written tensors.
    pub fn written_tensors(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .nodes
            .iter()
            .filter_map(|n| match &n.block {
                BlockConfig::Write { tensor, .. } => Some(tensor.clone()),
                _ => None,
            })
            .collect();
        v.sort();
        v.dedup();
        v
    }

    /// Assembles an all-compressed output tensor from writer contents.
    /// `shape` is the logical shape and `mode_order[k]` the mode at level k.
    pub fn assemble(
        &self,
        written: &BTreeMap<usize, Written>,
        tensor: &str,
        shape: &[usize],
        mode_order: &[usize],
    ) -> Result<TensorStorage, GraphError> {
        let bad = |msg: String| GraphError::Output { tensor: tensor.into(), msg };
        let mut levels = Vec::new();
        let mut vals = None;
        for (id, level, kind) in self.writers(tensor) {
            let w = written.get(&id).ok_or_else(|| bad(format!("writer {id} produced nothing")))?;
            match (kind, w) {
                (StreamKind::Val, Written::Vals(v)) => vals = Some(v.clone()),
                (_, Written::Level { seg, crd }) => {
                    if level != levels.len() {
                        return Err(bad(format!("missing level {}", levels.len())));
                    }
                    let mut seg = seg.clone();
                    if level == 0 && seg.len() == 1 {
                        seg.push(0);
                    }
                    levels.push(Level::Compressed { seg, crd: crd.clone() });
                }
                _ => return Err(bad(format!("writer {id} has the wrong kind"))),
            }
        }
        drop_phantom_fibers(&mut levels).map_err(bad)?;
        let mut vals = vals.ok_or_else(|| bad("no value writer".into()))?;
        if levels.is_empty() && vals.is_empty() {
            vals.push(0.0);
        }
        let t = TensorStorage {
            name: tensor.into(),
            shape: shape.to_vec(),
            levels,
            vals,
            mode_order: mode_order.to_vec(),
        };
        t.validate()?;
        Ok(t)
    }
}

/// An empty outer fiber shows up one level down as a bare stop, which a
/// writer cannot tell from a real empty fiber. Removes those using the
/// fiber sizes of the level above.
fn drop_phantom_fibers(levels: &mut [Level]) -> Result<(), String> {
    let mut parent: Vec<usize> = Vec::new();
    for (k, level) in levels.iter_mut().enumerate() {
        let Level::Compressed { seg, .. } = level else { unreachable!("writers produce compressed levels") };
        let raw: Vec<usize> = seg.windows(2).map(|w| w[1] - w[0]).collect();
        if k > 0 {
            let mut keep = Vec::with_capacity(raw.len());
            let mut f = 0;
            for &c in &parent {
                if c == 0 {
                    if raw.get(f) == Some(&0) {
                        f += 1;
                    }
                } else {
                    if f + c > raw.len() {
                        return Err(format!("level {k}: {} fibers stored, more referenced", raw.len()));
                    }
                    keep.extend_from_slice(&raw[f..f + c]);
                    f += c;
                }
            }
            if f != raw.len() {
                return Err(format!("level {k}: {} fibers stored, {f} referenced", raw.len()));
            }
            let mut s = vec![0];
            for c in keep {
                s.push(s.last().unwrap() + c);
            }
            *seg = s;
        }
        parent = raw;
    }
    Ok(())
}

enum Out {
    Streams(Vec<Vec<Token>>),
    Written(Written),
}

fn eval_block(block: &BlockConfig, ins: &[&[Token]], tensors: &BTreeMap<String, TensorStorage>) -> Result<Out, BlockError> {
    let tensor = |name: &str| {
        tensors
            .get(name)
            .ok_or_else(|| BlockError::Config { block: block.kind_name().into(), detail: format!("no tensor `{name}`") })
    };
    let level = |name: &str, k: usize| -> Result<&Level, BlockError> {
        tensor(name)?
            .levels
            .get(k)
            .ok_or_else(|| BlockError::Config { block: block.kind_name().into(), detail: format!("`{name}` has no level {k}") })
    };
    let s = Out::Streams;
    Ok(match block {
        BlockConfig::Root => s(vec![f::root()]),
        BlockConfig::Scan { tensor, level: k, .. } => {
            let (a, b) = f::scan(level(tensor, *k)?, ins[0])?;
            s(vec![a, b])
        }
        BlockConfig::Repeat => s(vec![f::repeat(ins[0], ins[1])?]),
        BlockConfig::Intersect { refs, .. } => s(f::intersect(ins, refs)?),
        BlockConfig::Union { refs } => s(f::union(ins, refs)?),
        BlockConfig::BvIntersect { .. } => s(f::bv_intersect(ins)?),
        BlockConfig::Array { tensor: name } => s(vec![f::array_load(&tensor(name)?.vals, ins[0])?]),
        BlockConfig::Alu { op } => s(vec![f::alu(*op, ins[0], ins[1])?]),
        BlockConfig::Reduce { n: 0, drop_empty } => s(vec![f::reduce_scalar(ins[0], *drop_empty)?]),
        BlockConfig::Reduce { n: 1, drop_empty } => {
            let (a, b) = f::reduce_vector(ins[0], ins[1], *drop_empty)?;
            s(vec![a, b])
        }
        BlockConfig::Reduce { drop_empty, .. } => {
            let (a, b, c) = f::reduce_matrix(ins[0], ins[1], ins[2], *drop_empty)?;
            s(vec![a, b, c])
        }
        BlockConfig::CrdDrop { mode: DropMode::Crd } => {
            let (a, b) = f::crd_drop(ins[0], ins[1])?;
            s(vec![a, b])
        }
        BlockConfig::CrdDrop { mode: DropMode::Val } => {
            let (a, b) = f::val_drop(ins[0], ins[1])?;
            s(vec![a, b])
        }
        BlockConfig::Write { kind: StreamKind::Val, .. } => Out::Written(Written::Vals(f::write_vals(ins[0])?)),
        BlockConfig::Write { .. } => {
            let (seg, crd) = f::write_level(ins[0])?;
            Out::Written(Written::Level { seg, crd })
        }
        BlockConfig::Locate { tensor, level: k, .. } => {
            let (a, b, c) = f::locate(level(tensor, *k)?, ins[0], ins[1], ins[2])?;
            s(vec![a, b, c])
        }
        BlockConfig::BvConvert { b } => s(vec![f::bv_convert(*b, ins[0])?]),
    })
}
