//! Cycle-approximate simulation of a graph.
//!
//! Every tick each block may pop one token per input and push one token per
//! output. Pushed tokens become visible to the consumer on the next tick.
//! Channels are FIFOs, one per edge, optionally bounded; a full channel
//! back-pressures its producer.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::machines::{build, Hint, Io, Machine, Outbox, Wire, Written};
use crate::blocks::{BlockConfig, BlockError, EdgeKind};
use crate::graph::{GraphError, SamGraph};
use crate::storage::TensorStorage;
use crate::stream::{Token, TokenCounts};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node {node} ({block}) at cycle {cycle}: {source}")]
    Block { node: usize, block: String, cycle: u64, source: BlockError },
    #[error("deadlock at cycle {cycle}; blocked: {}", blocked.join(", "))]
    Deadlock { cycle: u64, blocked: Vec<String> },
    #[error("no completion within {0} cycles")]
    Timeout(u64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    /// Channel capacity; `None` means unbounded.
    pub capacity: Option<usize>,
    /// Capacity of edges leaving a scanner that receives skip hints, so that
    /// hints reach it before it runs far ahead.
    pub skip_fifo: usize,
    pub max_cycles: u64,
    /// Record every token on every edge.
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { capacity: None, skip_fifo: 2, max_cycles: 50_000_000, trace: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeStats {
    pub src: String,
    pub src_port: String,
    pub dst: String,
    pub dst_port: String,
    pub kind: String,
    pub counts: TokenCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub graph: String,
    pub cycles: u64,
    pub edges: Vec<EdgeStats>,
}

impl SimReport {
    /// Stats of the first edge leaving `node` (by name) on `port`.
    pub fn edge(&self, node: &str, port: &str) -> Option<&EdgeStats> {
        self.edges.iter().find(|e| e.src == node && e.src_port == port)
    }
}

#[derive(Debug)]
pub struct SimRun {
    pub report: SimReport,
    pub written: BTreeMap<usize, Written>,
    /// Per-edge token traces, indexed like `graph.edges`; empty unless
    /// tracing was requested.
    pub traces: Vec<Vec<Token>>,
}

struct Channel {
    q: VecDeque<Wire>,
    incoming: Vec<Wire>,
    cap: usize,
    start_len: usize,
    popped: bool,
    skip: bool,
    counts: TokenCounts,
    trace: Option<Vec<Token>>,
}

struct Ports<'a> {
    chans: &'a mut [Channel],
    inputs: &'a [Option<usize>],
    pops: &'a mut u64,
}

impl Io for Ports<'_> {
    fn peek(&self, port: usize) -> Option<Token> {
        let ch = &self.chans[self.inputs[port]?];
        if ch.popped {
            return None;
        }
        match ch.q.front() {
            Some(Wire::Tok(t)) => Some(*t),
            _ => None,
        }
    }

    fn pop(&mut self, port: usize) -> Option<Token> {
        let t = self.peek(port)?;
        let ch = &mut self.chans[self.inputs[port]?];
        ch.q.pop_front();
        ch.popped = true;
        *self.pops += 1;
        Some(t)
    }

    fn pop_hint(&mut self, port: usize) -> Option<Hint> {
        let ch = &mut self.chans[(*self.inputs.get(port)?)?];
        match ch.q.front() {
            Some(Wire::Hint(h)) => {
                let h = *h;
                ch.q.pop_front();
                Some(h)
            }
            _ => None,
        }
    }
}

/// Simulates `graph` on `tensors` until every block has finished and every
/// channel has drained.
pub fn run(graph: &SamGraph, tensors: &BTreeMap<String, TensorStorage>, cfg: &SimConfig) -> Result<SimRun, SimError> {
    graph.validate()?;
    let order = graph.topo_order()?;
    let mut machines: Vec<Box<dyn Machine>> = Vec::with_capacity(graph.nodes.len());
    let mut outboxes = Vec::with_capacity(graph.nodes.len());
    for (id, n) in graph.nodes.iter().enumerate() {
        let m = build(&n.block, tensors).map_err(|source| SimError::Block {
            node: id,
            block: n.block.kind_name().into(),
            cycle: 0,
            source,
        })?;
        machines.push(m);
        outboxes.push(Outbox::new(n.block.outputs().len()));
    }
    let skip_scanner = |id: usize| matches!(graph.nodes[id].block, BlockConfig::Scan { skip: true, .. });
    let mut chans: Vec<Channel> = graph
        .edges
        .iter()
        .map(|e| {
            let cap = if e.kind != EdgeKind::Skip && skip_scanner(e.src) {
                cfg.skip_fifo.max(1)
            } else {
                cfg.capacity.unwrap_or(usize::MAX).max(1)
            };
            Channel {
                q: VecDeque::new(),
                incoming: vec![],
                cap,
                start_len: 0,
                popped: false,
                skip: e.kind == EdgeKind::Skip,
                counts: TokenCounts::default(),
                trace: cfg.trace.then(Vec::new),
            }
        })
        .collect();
    // port wiring
    let mut in_ch: Vec<Vec<Option<usize>>> = graph.nodes.iter().map(|n| vec![None; n.block.inputs().len()]).collect();
    let mut out_ch: Vec<Vec<Vec<usize>>> = graph.nodes.iter().map(|n| vec![vec![]; n.block.outputs().len()]).collect();
    for (k, e) in graph.edges.iter().enumerate() {
        let dp = graph.nodes[e.dst].block.input_index(&e.dst_port).unwrap();
        let sp = graph.nodes[e.src].block.output_index(&e.src_port).unwrap();
        in_ch[e.dst][dp] = Some(k);
        out_ch[e.src][sp].push(k);
    }

    let mut cycle = 0u64;
    let mut quiet = 0u32;
    loop {
        let all_done = machines.iter().all(|m| m.finished())
            && outboxes.iter().all(|o| o.is_empty())
            && chans.iter().all(|c| c.skip || c.q.is_empty());
        if all_done {
            break;
        }
        if cycle >= cfg.max_cycles {
            return Err(SimError::Timeout(cycle));
        }
        cycle += 1;
        for c in chans.iter_mut() {
            c.start_len = c.q.len();
            c.popped = false;
        }
        let mut pops = 0u64;
        let mut pushes = 0u64;
        for &id in &order {
            if outboxes[id].is_empty() && !machines[id].finished() {
                let mut io = Ports { chans: &mut chans, inputs: &in_ch[id], pops: &mut pops };
                machines[id].step(&mut io, &mut outboxes[id]).map_err(|source| SimError::Block {
                    node: id,
                    block: graph.nodes[id].block.kind_name().into(),
                    cycle,
                    source,
                })?;
            }
            for (p, q) in outboxes[id].queues.iter_mut().enumerate() {
                while let Some(Wire::Hint(h)) = q.front().copied() {
                    q.pop_front();
                    for &k in &out_ch[id][p] {
                        chans[k].incoming.push(Wire::Hint(h));
                    }
                }
                let Some(Wire::Tok(t)) = q.front().copied() else { continue };
                if out_ch[id][p].iter().any(|&k| chans[k].start_len >= chans[k].cap) {
                    continue;
                }
                q.pop_front();
                pushes += 1;
                for &k in &out_ch[id][p] {
                    let ch = &mut chans[k];
                    ch.incoming.push(Wire::Tok(t));
                    ch.counts.record(&t);
                    if let Some(tr) = ch.trace.as_mut() {
                        tr.push(t);
                    }
                }
            }
        }
        for c in chans.iter_mut() {
            c.q.extend(c.incoming.drain(..));
        }
        if pops == 0 && pushes == 0 && !machines.iter().any(|m| m.busy()) {
            quiet += 1;
            if quiet >= 2 {
                let blocked = order
                    .iter()
                    .filter(|&&id| !machines[id].finished() || !outboxes[id].is_empty())
                    .map(|&id| format!("{} ({})", graph.nodes[id].name, graph.nodes[id].block.kind_name()))
                    .collect();
                return Err(SimError::Deadlock { cycle, blocked });
            }
        } else {
            quiet = 0;
        }
    }

    let mut written = BTreeMap::new();
    for (id, m) in machines.iter().enumerate() {
        if let Some(w) = m.written() {
            written.insert(id, w);
        }
    }
    let edges = graph
        .edges
        .iter()
        .zip(&chans)
        .map(|(e, c)| {
            let mut counts = c.counts.clone();
            counts.idle = cycle.saturating_sub(counts.tokens());
            EdgeStats {
                src: graph.nodes[e.src].name.clone(),
                src_port: e.src_port.clone(),
                dst: graph.nodes[e.dst].name.clone(),
                dst_port: e.dst_port.clone(),
                kind: e.kind.name().into(),
                counts,
            }
        })
        .collect();
    let traces = chans.into_iter().map(|c| c.trace.unwrap_or_default()).collect();
    Ok(SimRun { report: SimReport { graph: graph.name.clone(), cycles: cycle, edges }, written, traces })
}

/// Per-edge token counts as JSON-friendly rows.
pub fn channel_stats(report: &SimReport) -> Vec<(String, TokenCounts)> {
    report
        .edges
        .iter()
        .map(|e| (format!("{}.{} -> {}.{}", e.src, e.src_port, e.dst, e.dst_port), e.counts.clone()))
        .collect()
}
