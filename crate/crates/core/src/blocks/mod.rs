//! Dataflow blocks.
//!
//! Every block exists twice: as a pure function over whole streams
//! ([`functional`]) and as a tick-driven state machine used by the simulator
//! ([`machines`]). The two are written independently; the pure form is the
//! oracle for the machine form.

pub mod functional;
pub mod machines;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::storage::LevelFormat;
use crate::stream::StreamKind;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BlockError {
    #[error("{block}: reference {r} out of range")]
    RefOutOfRange { block: String, r: u64 },
    #[error("{block}: inputs are not shape-aligned: {detail}")]
    ShapeMisaligned { block: String, detail: String },
    #[error("{block}: lockstep violation: {detail}")]
    LockstepViolation { block: String, detail: String },
    #[error("{block}: coordinates not increasing")]
    NonMonotoneInput { block: String },
    #[error("{block}: unexpected token {token} on {port}")]
    UnexpectedToken { block: String, token: String, port: String },
    #[error("{block}: input ended before done")]
    Truncated { block: String },
    #[error("{block}: {detail}")]
    Config { block: String, detail: String },
}

/// Channel kinds. `Skip` carries coordinate-skipping hints backwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    Crd,
    Ref,
    Val,
    Bv,
    Skip,
}

impl EdgeKind {
    pub fn name(&self) -> &'static str {
        match self {
            EdgeKind::Crd => "crd",
            EdgeKind::Ref => "ref",
            EdgeKind::Val => "val",
            EdgeKind::Bv => "bv",
            EdgeKind::Skip => "skip",
        }
    }

    pub fn parse(s: &str) -> Option<EdgeKind> {
        Some(match s {
            "crd" => EdgeKind::Crd,
            "ref" => EdgeKind::Ref,
            "val" => EdgeKind::Val,
            "bv" => EdgeKind::Bv,
            "skip" => EdgeKind::Skip,
            _ => return None,
        })
    }

    pub fn stream_kind(&self) -> Option<StreamKind> {
        match self {
            EdgeKind::Crd => Some(StreamKind::Crd),
            EdgeKind::Ref => Some(StreamKind::Ref),
            EdgeKind::Val => Some(StreamKind::Val),
            EdgeKind::Bv => Some(StreamKind::Bv),
            EdgeKind::Skip => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
}

impl AluOp {
    pub fn apply(&self, a: f64, b: f64) -> f64 {
        match self {
            AluOp::Add => a + b,
            AluOp::Sub => a - b,
            AluOp::Mul => a * b,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
        }
    }
}

/// What a coordinate dropper filters on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DropMode {
    /// Drop outer coordinates whose inner fiber is empty.
    Crd,
    /// Drop (coordinate, value) pairs whose value is zero.
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockConfig {
    /// Emits `[Ref 0, Done]`.
    Root,
    Scan { tensor: String, level: usize, fmt: LevelFormat, skip: bool },
    Repeat,
    /// `refs[g]` is the number of reference streams travelling with input `g`.
    Intersect { refs: Vec<usize>, skip: bool },
    Union { refs: Vec<usize> },
    BvIntersect { arity: usize },
    Array { tensor: String },
    Alu { op: AluOp },
    /// `n` is the reduction's output order: 0 scalar, 1 vector, 2 matrix.
    Reduce { n: u8, drop_empty: bool },
    CrdDrop { mode: DropMode },
    /// Writes level `level` of `tensor` (kind crd) or its values (kind val).
    Write { tensor: String, level: usize, kind: StreamKind },
    Locate { tensor: String, level: usize, fmt: LevelFormat },
    BvConvert { b: u8 },
}

pub type Port = (String, EdgeKind);

fn p(name: impl Into<String>, kind: EdgeKind) -> Port {
    (name.into(), kind)
}

impl BlockConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            BlockConfig::Root => "root",
            BlockConfig::Scan { .. } => "scan",
            BlockConfig::Repeat => "repeat",
            BlockConfig::Intersect { .. } => "intersect",
            BlockConfig::Union { .. } => "union",
            BlockConfig::BvIntersect { .. } => "bvintersect",
            BlockConfig::Array { .. } => "array",
            BlockConfig::Alu { .. } => "alu",
            BlockConfig::Reduce { .. } => "reduce",
            BlockConfig::CrdDrop { .. } => "crddrop",
            BlockConfig::Write { .. } => "write",
            BlockConfig::Locate { .. } => "locate",
            BlockConfig::BvConvert { .. } => "bvconvert",
        }
    }

    /// Category used for primitive counts; bitvector intersecters count as
    /// intersecters and roots are not counted.
    pub fn count_class(&self) -> Option<&'static str> {
        match self {
            BlockConfig::Root => None,
            BlockConfig::BvIntersect { .. } => Some("intersect"),
            other => Some(other.kind_name()),
        }
    }

    pub fn inputs(&self) -> Vec<Port> {
        use EdgeKind::*;
        match self {
            BlockConfig::Root => vec![],
            BlockConfig::Scan { skip, .. } => {
                let mut v = vec![p("ref", Ref)];
                if *skip {
                    v.push(p("skip", Skip));
                }
                v
            }
            BlockConfig::Repeat => vec![p("ref", Ref), p("repsig", Crd)],
            BlockConfig::Intersect { refs, .. } | BlockConfig::Union { refs } => merge_ports(refs),
            BlockConfig::BvIntersect { arity } => {
                (0..*arity).flat_map(|g| [p(format!("bv{g}"), Bv), p(format!("ref{g}"), Ref)]).collect()
            }
            BlockConfig::Array { .. } => vec![p("ref", Ref)],
            BlockConfig::Alu { .. } => vec![p("a", Val), p("b", Val)],
            BlockConfig::Reduce { n, .. } => match n {
                0 => vec![p("val", Val)],
                1 => vec![p("crd", Crd), p("val", Val)],
                _ => vec![p("crd_outer", Crd), p("crd_inner", Crd), p("val", Val)],
            },
            BlockConfig::CrdDrop { mode: DropMode::Crd } => vec![p("outer", Crd), p("inner", Crd)],
            BlockConfig::CrdDrop { mode: DropMode::Val } => vec![p("crd", Crd), p("val", Val)],
            BlockConfig::Write { kind, .. } => match kind {
                StreamKind::Val => vec![p("val", Val)],
                _ => vec![p("crd", Crd)],
            },
            BlockConfig::Locate { .. } => vec![p("crd", Crd), p("ref", Ref), p("parent", Ref)],
            BlockConfig::BvConvert { .. } => vec![p("crd", Crd)],
        }
    }

    pub fn outputs(&self) -> Vec<Port> {
        use EdgeKind::*;
        match self {
            BlockConfig::Root => vec![p("ref", Ref)],
            BlockConfig::Scan { fmt, .. } => match fmt {
                LevelFormat::Bitvector(_) => vec![p("bv", Bv), p("ref", Ref)],
                _ => vec![p("crd", Crd), p("ref", Ref)],
            },
            BlockConfig::Repeat => vec![p("ref", Ref)],
            BlockConfig::Intersect { refs, skip } => {
                let mut v = merge_out_ports(refs);
                if *skip {
                    v.extend((0..refs.len()).map(|g| p(format!("skip{g}"), Skip)));
                }
                v
            }
            BlockConfig::Union { refs } => merge_out_ports(refs),
            BlockConfig::BvIntersect { arity } => {
                let mut v = vec![p("crd", Crd)];
                v.extend((0..*arity).map(|g| p(format!("ref{g}"), Ref)));
                v
            }
            BlockConfig::Array { .. } | BlockConfig::Alu { .. } => vec![p("val", Val)],
            BlockConfig::Reduce { .. } | BlockConfig::CrdDrop { .. } => self.inputs(),
            BlockConfig::Write { .. } => vec![],
            BlockConfig::Locate { .. } => vec![p("crd", Crd), p("ref", Ref), p("found", Ref)],
            BlockConfig::BvConvert { .. } => vec![p("bv", Bv)],
        }
    }

    pub fn input_index(&self, name: &str) -> Option<usize> {
        self.inputs().iter().position(|(n, _)| n == name)
    }

    pub fn output_index(&self, name: &str) -> Option<usize> {
        self.outputs().iter().position(|(n, _)| n == name)
    }

    /// Space-separated `key=value` attributes, the inverse of [`BlockConfig::from_label`].
    pub fn attrs(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match self {
            BlockConfig::Root | BlockConfig::Repeat => vec![],
            BlockConfig::Scan { tensor, level, fmt, skip } => vec![
                kv("fmt", fmt.name().into()),
                kv("tensor", tensor.clone()),
                kv("level", level.to_string()),
                kv("width", fmt_width(fmt)),
                kv("skip", skip.to_string()),
            ],
            BlockConfig::Intersect { refs, skip } => vec![kv("refs", list(refs)), kv("skip", skip.to_string())],
            BlockConfig::Union { refs } => vec![kv("refs", list(refs))],
            BlockConfig::BvIntersect { arity } => vec![kv("arity", arity.to_string())],
            BlockConfig::Array { tensor } => vec![kv("tensor", tensor.clone())],
            BlockConfig::Alu { op } => vec![kv("op", op.name().into())],
            BlockConfig::Reduce { n, drop_empty } => {
                vec![kv("n", n.to_string()), kv("drop_empty", drop_empty.to_string())]
            }
            BlockConfig::CrdDrop { mode } => vec![kv(
                "mode",
                match mode {
                    DropMode::Crd => "crd".into(),
                    DropMode::Val => "val".into(),
                },
            )],
            BlockConfig::Write { tensor, level, kind } => vec![
                kv("tensor", tensor.clone()),
                kv("level", level.to_string()),
                kv("kind", kind.name().into()),
            ],
            BlockConfig::Locate { tensor, level, fmt } => vec![
                kv("fmt", fmt.name().into()),
                kv("tensor", tensor.clone()),
                kv("level", level.to_string()),
            ],
            BlockConfig::BvConvert { b } => vec![kv("b", b.to_string())],
        }
    }

    pub fn label(&self) -> String {
        let mut s = self.kind_name().to_string();
        for (k, v) in self.attrs() {
            s.push(' ');
            s.push_str(&k);
            s.push('=');
            s.push_str(&v);
        }
        s
    }

    /// Parses a label produced by [`BlockConfig::label`].
    pub fn from_label(label: &str) -> Result<BlockConfig, String> {
        let mut parts = label.split_whitespace();
        let kind = parts.next().ok_or("empty label")?;
        let mut attrs = std::collections::BTreeMap::new();
        for part in parts {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("bad attribute `{part}`"))?;
            attrs.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| attrs.get(k).cloned().ok_or_else(|| format!("{kind}: missing `{k}`"));
        let num = |k: &str| -> Result<usize, String> { get(k)?.parse().map_err(|_| format!("{kind}: bad `{k}`")) };
        let flag = |k: &str| -> Result<bool, String> { get(k)?.parse().map_err(|_| format!("{kind}: bad `{k}`")) };
        let list = |k: &str| -> Result<Vec<usize>, String> {
            get(k)?.split(',').map(|x| x.parse().map_err(|_| format!("{kind}: bad `{k}`"))).collect()
        };
        let fmt = |name: &str, width: Option<String>| -> Result<LevelFormat, String> {
            Ok(match name {
                "dense" => LevelFormat::Dense,
                "compressed" => LevelFormat::Compressed,
                "bitvector" => LevelFormat::Bitvector(
                    width.unwrap_or_else(|| "64".into()).parse().map_err(|_| "bad width".to_string())?,
                ),
                other => return Err(format!("unknown level format `{other}`")),
            })
        };
        Ok(match kind {
            "root" => BlockConfig::Root,
            "repeat" => BlockConfig::Repeat,
            "scan" => BlockConfig::Scan {
                tensor: get("tensor")?,
                level: num("level")?,
                fmt: fmt(&get("fmt")?, attrs.get("width").cloned())?,
                skip: flag("skip")?,
            },
            "intersect" => BlockConfig::Intersect { refs: list("refs")?, skip: flag("skip")? },
            "union" => BlockConfig::Union { refs: list("refs")? },
            "bvintersect" => BlockConfig::BvIntersect { arity: num("arity")? },
            "array" => BlockConfig::Array { tensor: get("tensor")? },
            "alu" => BlockConfig::Alu {
                op: match get("op")?.as_str() {
                    "add" => AluOp::Add,
                    "sub" => AluOp::Sub,
                    "mul" => AluOp::Mul,
                    other => return Err(format!("unknown alu op `{other}`")),
                },
            },
            "reduce" => BlockConfig::Reduce { n: num("n")? as u8, drop_empty: flag("drop_empty")? },
            "crddrop" => BlockConfig::CrdDrop {
                mode: match get("mode")?.as_str() {
                    "crd" => DropMode::Crd,
                    "val" => DropMode::Val,
                    other => return Err(format!("unknown drop mode `{other}`")),
                },
            },
            "write" => BlockConfig::Write {
                tensor: get("tensor")?,
                level: num("level")?,
                kind: get("kind")?.parse().map_err(|e: crate::stream::StreamError| e.to_string())?,
            },
            "locate" => BlockConfig::Locate {
                tensor: get("tensor")?,
                level: num("level")?,
                fmt: fmt(&get("fmt")?, None)?,
            },
            "bvconvert" => BlockConfig::BvConvert { b: num("b")? as u8 },
            other => return Err(format!("unknown block type `{other}`")),
        })
    }
}

fn fmt_width(fmt: &LevelFormat) -> String {
    match fmt {
        LevelFormat::Bitvector(b) => b.to_string(),
        _ => "0".into(),
    }
}

fn merge_ports(refs: &[usize]) -> Vec<Port> {
    let mut v = Vec::new();
    for (g, &k) in refs.iter().enumerate() {
        v.push(p(format!("crd{g}"), EdgeKind::Crd));
        for t in 0..k {
            v.push(p(format!("ref{g}_{t}"), EdgeKind::Ref));
        }
    }
    v
}

fn merge_out_ports(refs: &[usize]) -> Vec<Port> {
    let mut v = vec![p("crd", EdgeKind::Crd)];
    for (g, &k) in refs.iter().enumerate() {
        for t in 0..k {
            v.push(p(format!("ref{g}_{t}"), EdgeKind::Ref));
        }
    }
    v
}

impl fmt::Display for BlockConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}
