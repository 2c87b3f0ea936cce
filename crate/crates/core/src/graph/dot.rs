//! Graphviz text form of a graph. The writer output is also the only format
//! the reader accepts: one statement per line, node ids `n<k>` in order.

use std::fmt::Write as _;

use super::{Edge, GraphError, Node, SamGraph};
use crate::blocks::{BlockConfig, EdgeKind};

const HEADER: &str = "// samgraph v1";

fn style(kind: EdgeKind) -> &'static str {
    match kind {
        EdgeKind::Crd | EdgeKind::Bv => "solid",
        EdgeKind::Ref => "bold",
        EdgeKind::Val => "dashed",
        EdgeKind::Skip => "dotted",
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

pub fn to_dot(g: &SamGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{HEADER}");
    let _ = writeln!(s, "digraph {} {{", quote(&g.name));
    for (id, n) in g.nodes.iter().enumerate() {
        let _ = writeln!(s, "  n{id} [label={}, name={}];", quote(&n.block.label()), quote(&n.name));
    }
    for e in &g.edges {
        let _ = writeln!(
            s,
            "  n{} -> n{} [label={}, style={}, src_port={}, dst_port={}];",
            e.src,
            e.dst,
            quote(e.kind.name()),
            style(e.kind),
            quote(&e.src_port),
            quote(&e.dst_port)
        );
    }
    s.push_str("}\n");
    s
}

/// Parses `key=value` pairs from the inside of `[...]`.
fn attrs(text: &str, line: usize) -> Result<Vec<(String, String)>, GraphError> {
    let err = |msg: &str| GraphError::Parse { line, msg: msg.into() };
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    loop {
        while matches!(chars.peek(), Some(c) if c.is_whitespace() || *c == ',') {
            chars.next();
        }
        if chars.peek().is_none() {
            return Ok(out);
        }
        let key: String = std::iter::from_fn(|| chars.next_if(|c| c.is_alphanumeric() || *c == '_')).collect();
        if key.is_empty() || chars.next() != Some('=') {
            return Err(err("expected key=value"));
        }
        let mut val = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            loop {
                match chars.next() {
                    Some('\\') => val.push(chars.next().ok_or_else(|| err("dangling escape"))?),
                    Some('"') => break,
                    Some(c) => val.push(c),
                    None => return Err(err("unterminated string")),
                }
            }
        } else {
            val = std::iter::from_fn(|| chars.next_if(|c| !c.is_whitespace() && *c != ',')).collect();
        }
        out.push((key, val));
    }
}

fn node_id(s: &str, line: usize) -> Result<usize, GraphError> {
    s.trim()
        .strip_prefix('n')
        .and_then(|k| k.parse().ok())
        .ok_or_else(|| GraphError::Parse { line, msg: format!("bad node id `{s}`") })
}

pub fn from_dot(text: &str) -> Result<SamGraph, GraphError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, h)) if h == HEADER => {}
        _ => return Err(GraphError::Parse { line: 1, msg: format!("missing `{HEADER}` header") }),
    }
    let mut g = SamGraph::default();
    let mut opened = false;
    for (no, line) in lines {
        let err = |msg: String| GraphError::Parse { line: no, msg };
        if line.is_empty() || line.starts_with("//") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("digraph") {
            let name = rest.trim().trim_end_matches('{').trim();
            g.name = name.trim_matches('"').to_string();
            opened = true;
            continue;
        }
        if line == "}" {
            if !opened {
                return Err(err("unbalanced `}`".into()));
            }
            g.validate()?;
            return Ok(g);
        }
        let (head, body) = line
            .trim_end_matches(';')
            .split_once('[')
            .ok_or_else(|| err("expected a node or edge statement".into()))?;
        let kv = attrs(body.trim_end().trim_end_matches(']'), no)?;
        let get = |k: &str| kv.iter().find(|(a, _)| a == k).map(|(_, v)| v.clone()).ok_or_else(|| err(format!("missing `{k}`")));
        if let Some((a, b)) = head.split_once("->") {
            let (src, dst) = (node_id(a, no)?, node_id(b, no)?);
            let kind = EdgeKind::parse(&get("label")?).ok_or_else(|| err("unknown edge kind".into()))?;
            let edge = Edge { src, src_port: get("src_port")?, dst, dst_port: get("dst_port")?, kind };
            if src >= g.nodes.len() || dst >= g.nodes.len() {
                return Err(err("edge names an undeclared node".into()));
            }
            g.edges.push(edge);
        } else {
            let id = node_id(head, no)?;
            if id != g.nodes.len() {
                return Err(err(format!("node n{id} out of order")));
            }
            let block = BlockConfig::from_label(&get("label")?).map_err(err)?;
            let name = get("name").unwrap_or_else(|_| format!("n{id}"));
            g.nodes.push(Node { name, block });
        }
    }
    Err(GraphError::Parse { line: text.lines().count(), msg: "missing closing `}`".into() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::spmv_graph;

    #[test]
    fn round_trip() {
        let g = spmv_graph();
        let text = to_dot(&g);
        assert!(text.starts_with(HEADER));
        assert!(text.contains("style=bold"));
        let back = from_dot(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(to_dot(&back), text);
    }

    #[test]
    fn rejects_malformed() {
        assert!(matches!(from_dot("digraph x {\n}\n"), Err(GraphError::Parse { line: 1, .. })));
        let text = to_dot(&spmv_graph()).replace("level=1", "level=x");
        assert!(from_dot(&text).is_err());
        let cut: String = to_dot(&spmv_graph()).lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(from_dot(&cut).is_err());
    }
}
