//! Token alphabet and flattened hierarchical streams.
//!
//! A stream carries one level of a coordinate tree. Payload tokens are
//! interleaved with stop tokens `S_n` marking the end of `n + 1` nested
//! fibers, and a single trailing done token `D`. Streams are stored in
//! emission order: index 0 is the first token sent.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A packed presence word. Bit `k` covers coordinate `base + k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitWord {
    pub bits: u64,
    pub width: u8,
}

impl BitWord {
    pub fn new(bits: u64, width: u8) -> Self {
        debug_assert!(width as u32 <= 64);
        Self { bits, width }
    }

    pub fn popcount(&self) -> u32 {
        self.bits.count_ones()
    }

    /// Number of set bits strictly below `bit`.
    pub fn rank(&self, bit: u32) -> u32 {
        if bit == 0 {
            0
        } else if bit >= 64 {
            self.popcount()
        } else {
            (self.bits & ((1u64 << bit) - 1)).count_ones()
        }
    }
}

impl fmt::Display for BitWord {
    /// MSB first, e.g. `0101` for bits 0 and 2 of a 4-bit word.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in (0..self.width as u32).rev() {
            write!(f, "{}", (self.bits >> k) & 1)?;
        }
        Ok(())
    }
}

/// One wire datum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Token {
    Crd(u64),
    Ref(u64),
    Val(f64),
    Bits(BitWord),
    Stop(u32),
    Done,
    Empty,
}

impl Token {
    pub fn is_control(&self) -> bool {
        matches!(self, Token::Stop(_) | Token::Done)
    }

    pub fn is_payload(&self) -> bool {
        !self.is_control()
    }

    pub fn stop_level(&self) -> Option<u32> {
        match self {
            Token::Stop(n) => Some(*n),
            _ => None,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Crd(c) => write!(f, "{c}"),
            Token::Ref(r) => write!(f, "{r}"),
            Token::Val(v) => write!(f, "{v}"),
            Token::Bits(w) => write!(f, "B:{w}"),
            Token::Stop(n) => write!(f, "S{n}"),
            Token::Done => write!(f, "D"),
            Token::Empty => write!(f, "N"),
        }
    }
}

/// Stream kinds; each admits a fixed payload token type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StreamKind {
    Crd,
    Ref,
    Val,
    Bv,
}

impl StreamKind {
    pub fn name(&self) -> &'static str {
        match self {
            StreamKind::Crd => "crd",
            StreamKind::Ref => "ref",
            StreamKind::Val => "val",
            StreamKind::Bv => "bv",
        }
    }

    pub fn admits(&self, tok: &Token) -> bool {
        match tok {
            Token::Stop(_) | Token::Done => true,
            Token::Empty => !matches!(self, StreamKind::Crd),
            Token::Crd(_) => *self == StreamKind::Crd,
            Token::Ref(_) => *self == StreamKind::Ref,
            Token::Val(_) => *self == StreamKind::Val,
            Token::Bits(_) => *self == StreamKind::Bv,
        }
    }
}

impl std::str::FromStr for StreamKind {
    type Err = StreamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "crd" => Ok(StreamKind::Crd),
            "ref" => Ok(StreamKind::Ref),
            "val" | "vals" => Ok(StreamKind::Val),
            "bv" => Ok(StreamKind::Bv),
            other => Err(StreamError::Parse(format!("unknown stream kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StreamError {
    #[error("stream has no done token")]
    MissingDone,
    #[error("token at index {index} follows the done token")]
    TrailingTokensAfterDone { index: usize },
    #[error("coordinate at index {index} does not increase within its fiber")]
    NonMonotoneFiber { index: usize },
    #[error("token `{token}` at index {index} is not allowed in a {kind} stream")]
    WrongTokenKind { index: usize, token: String, kind: &'static str },
    #[error("illegal payload: {0}")]
    IllegalPayload(String),
    #[error("parse error: {0}")]
    Parse(String),
}

/// A complete stream of one kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStream {
    pub kind: StreamKind,
    pub tokens: Vec<Token>,
}

impl TokenStream {
    pub fn new(kind: StreamKind, tokens: Vec<Token>) -> Self {
        Self { kind, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks every stream invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), StreamError> {
        validate(self.kind, &self.tokens)
    }

    /// Parses the comma-separated text form, e.g. `1,S0,2,3,S1,D`.
    pub fn parse(kind: StreamKind, text: &str) -> Result<Self, StreamError> {
        let mut tokens = Vec::new();
        for raw in text.split(',') {
            let item = raw.trim();
            if item.is_empty() {
                continue;
            }
            tokens.push(parse_token(kind, item)?);
        }
        Ok(Self { kind, tokens })
    }

    /// Number of nesting levels: one more than the highest stop level,
    /// or 0 when the stream has no stop tokens.
    pub fn depth(&self) -> usize {
        depth_of(&self.tokens)
    }
}

impl fmt::Display for TokenStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text: Vec<String> = self.tokens.iter().map(|t| t.to_string()).collect();
        write!(f, "{}", text.join(","))
    }
}

fn parse_token(kind: StreamKind, item: &str) -> Result<Token, StreamError> {
    let bad = |msg: &str| StreamError::Parse(format!("`{item}`: {msg}"));
    match item {
        "D" => return Ok(Token::Done),
        "N" => return Ok(Token::Empty),
        _ => {}
    }
    if let Some(level) = item.strip_prefix('S') {
        let n = level.parse::<u32>().map_err(|_| bad("bad stop level"))?;
        return Ok(Token::Stop(n));
    }
    if let Some(bits) = item.strip_prefix("B:") {
        if bits.is_empty() || bits.len() > 64 {
            return Err(bad("bit word must have 1..=64 digits"));
        }
        let word = u64::from_str_radix(bits, 2).map_err(|_| bad("bad bit word"))?;
        return Ok(Token::Bits(BitWord::new(word, bits.len() as u8)));
    }
    match kind {
        StreamKind::Crd => item.parse().map(Token::Crd).map_err(|_| bad("bad coordinate")),
        StreamKind::Ref => item.parse().map(Token::Ref).map_err(|_| bad("bad reference")),
        StreamKind::Val => item.parse().map(Token::Val).map_err(|_| bad("bad value")),
        StreamKind::Bv => Err(bad("bit words are written B:<bits>")),
    }
}

pub(crate) fn depth_of(tokens: &[Token]) -> usize {
    tokens
        .iter()
        .filter_map(Token::stop_level)
        .max()
        .map(|n| n as usize + 1)
        .unwrap_or(0)
}

pub fn validate(kind: StreamKind, tokens: &[Token]) -> Result<(), StreamError> {
    let mut done_at = None;
    let mut last_crd: Option<u64> = None;
    for (index, tok) in tokens.iter().enumerate() {
        if done_at.is_some() {
            return Err(StreamError::TrailingTokensAfterDone { index });
        }
        if !kind.admits(tok) {
            return Err(StreamError::WrongTokenKind {
                index,
                token: tok.to_string(),
                kind: kind.name(),
            });
        }
        match tok {
            Token::Crd(c) => {
                if matches!(last_crd, Some(prev) if prev >= *c) {
                    return Err(StreamError::NonMonotoneFiber { index });
                }
                last_crd = Some(*c);
            }
            Token::Stop(_) => last_crd = None,
            Token::Done => done_at = Some(index),
            _ => {}
        }
    }
    if done_at.is_none() {
        return Err(StreamError::MissingDone);
    }
    Ok(())
}

/// Nested-list view of a stream. Leaves hold payload tokens.
#[derive(Debug, Clone, PartialEq)]
pub enum Nested {
    Leaf(Token),
    List(Vec<Nested>),
}

impl Nested {
    pub fn list(items: Vec<Nested>) -> Self {
        Nested::List(items)
    }

    pub fn children(&self) -> &[Nested] {
        match self {
            Nested::List(items) => items,
            Nested::Leaf(_) => &[],
        }
    }

    fn height(&self) -> Result<usize, StreamError> {
        match self {
            Nested::Leaf(_) => Ok(0),
            Nested::List(items) => {
                let mut h = None;
                for item in items {
                    let ih = item.height()?;
                    match h {
                        None => h = Some(ih),
                        Some(prev) if prev != ih => {
                            return Err(StreamError::IllegalPayload(
                                "ragged nesting: siblings differ in depth".into(),
                            ))
                        }
                        _ => {}
                    }
                }
                Ok(1 + h.unwrap_or(0))
            }
        }
    }
}

impl fmt::Display for Nested {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Nested::Leaf(t) => write!(f, "{t}"),
            Nested::List(items) => {
                write!(f, "(")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{item}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// Interprets a stream as nested lists.
///
/// The returned root list holds the stream's top-level fibers; a stream of
/// depth 0 (no stops) yields its payloads directly under the root. A stop
/// `S_n` closes the current fibers at levels `0..=n`, so a fiber above level
/// 0 always holds at least one child.
pub fn nest(s: &TokenStream) -> Result<Nested, StreamError> {
    s.validate()?;
    let depth = s.depth();
    // open[l] is the fiber currently being filled at level l; open[depth] is the root.
    let mut open: Vec<Vec<Nested>> = vec![Vec::new(); depth + 1];
    let mut dirty = false;
    for tok in &s.tokens {
        match tok {
            Token::Stop(n) => {
                for l in 0..=(*n as usize) {
                    let fiber = std::mem::take(&mut open[l]);
                    open[l + 1].push(Nested::List(fiber));
                }
                dirty = false;
            }
            Token::Done => {
                if dirty && depth > 0 {
                    for l in 0..depth {
                        let fiber = std::mem::take(&mut open[l]);
                        open[l + 1].push(Nested::List(fiber));
                    }
                }
            }
            payload => {
                open[0].push(Nested::Leaf(*payload));
                dirty = true;
            }
        }
    }
    Ok(Nested::List(open.pop().unwrap_or_default()))
}

/// Inverse of [`nest`].
pub fn flatten(root: &Nested, kind: StreamKind) -> Result<TokenStream, StreamError> {
    let Nested::List(top) = root else {
        return Err(StreamError::IllegalPayload("root must be a list".into()));
    };
    let height = root.height()?;
    let mut tokens = Vec::new();
    if height <= 1 {
        for item in top {
            push_leaf(item, kind, &mut tokens)?;
        }
    } else {
        let level = (height - 2) as u32;
        for fiber in top {
            emit_fiber(fiber, level, kind, &mut tokens)?;
            tokens.push(Token::Stop(level));
        }
    }
    tokens.push(Token::Done);
    let s = TokenStream::new(kind, tokens);
    s.validate()?;
    Ok(s)
}

fn push_leaf(item: &Nested, kind: StreamKind, out: &mut Vec<Token>) -> Result<(), StreamError> {
    match item {
        Nested::Leaf(t) if t.is_payload() && kind.admits(t) => {
            out.push(*t);
            Ok(())
        }
        Nested::Leaf(t) => Err(StreamError::IllegalPayload(format!(
            "`{t}` is not a {} payload",
            kind.name()
        ))),
        Nested::List(_) => Err(StreamError::IllegalPayload("unexpected list".into())),
    }
}

// Emits a level-`level` fiber's contents, without its closing stop.
fn emit_fiber(
    fiber: &Nested,
    level: u32,
    kind: StreamKind,
    out: &mut Vec<Token>,
) -> Result<(), StreamError> {
    let items = fiber.children();
    if level == 0 {
        for item in items {
            push_leaf(item, kind, out)?;
        }
        return Ok(());
    }
    if items.is_empty() {
        return Err(StreamError::IllegalPayload(format!(
            "a level-{level} fiber must hold at least one child fiber"
        )));
    }
    for (i, child) in items.iter().enumerate() {
        emit_fiber(child, level - 1, kind, out)?;
        if i + 1 < items.len() {
            out.push(Token::Stop(level - 1));
        }
    }
    Ok(())
}

/// Per-variant token counts for one stream or channel.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub coord: u64,
    #[serde(rename = "ref")]
    pub reference: u64,
    pub val: u64,
    pub bv: u64,
    pub stop: BTreeMap<u32, u64>,
    pub done: u64,
    pub empty: u64,
    pub idle: u64,
}

impl TokenCounts {
    pub fn record(&mut self, tok: &Token) {
        match tok {
            Token::Crd(_) => self.coord += 1,
            Token::Ref(_) => self.reference += 1,
            Token::Val(_) => self.val += 1,
            Token::Bits(_) => self.bv += 1,
            Token::Stop(n) => *self.stop.entry(*n).or_default() += 1,
            Token::Done => self.done += 1,
            Token::Empty => self.empty += 1,
        }
    }

    pub fn stops(&self) -> u64 {
        self.stop.values().sum()
    }

    /// Every non-idle token.
    pub fn tokens(&self) -> u64 {
        self.coord + self.reference + self.val + self.bv + self.stops() + self.done + self.empty
    }

    pub fn control(&self) -> u64 {
        self.stops() + self.done + self.empty
    }

    /// Stop tokens as a fraction of non-idle tokens.
    pub fn stop_fraction(&self) -> f64 {
        ratio(self.stops(), self.tokens())
    }

    pub fn idle_fraction(&self) -> f64 {
        ratio(self.idle, self.tokens() + self.idle)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Token counts plus the level-versus-point representation comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStats {
    pub counts: TokenCounts,
    /// Tokens in the level-based representation: the stream length.
    pub level_tokens: u64,
    /// Tokens a point-tuple stream of an order-2 tensor would need:
    /// three per value plus the done token.
    pub point_tokens: u64,
}

pub fn token_stats(s: &TokenStream) -> Result<StreamStats, StreamError> {
    s.validate()?;
    let mut counts = TokenCounts::default();
    for tok in &s.tokens {
        counts.record(tok);
    }
    Ok(StreamStats {
        level_tokens: s.len() as u64,
        point_tokens: 3 * counts.val + 1,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn crd(text: &str) -> TokenStream {
        TokenStream::parse(StreamKind::Crd, text).unwrap()
    }

    fn val(text: &str) -> TokenStream {
        TokenStream::parse(StreamKind::Val, text).unwrap()
    }

    fn leaves(vals: &[f64]) -> Nested {
        Nested::List(vals.iter().map(|v| Nested::Leaf(Token::Val(*v))).collect())
    }

    #[test]
    fn validate_examples() {
        assert_eq!(val("1,S0,2,3,S0,4,5,S1,D").validate(), Ok(()));
        assert_eq!(crd("D").validate(), Ok(()));
        assert_eq!(
            crd("3,1,S0,D").validate(),
            Err(StreamError::NonMonotoneFiber { index: 1 })
        );
        assert_eq!(crd("1,S0").validate(), Err(StreamError::MissingDone));
        assert_eq!(
            crd("1,D,D").validate(),
            Err(StreamError::TrailingTokensAfterDone { index: 2 })
        );
        assert!(matches!(
            crd("N,D").validate(),
            Err(StreamError::WrongTokenKind { index: 0, .. })
        ));
        // coordinates restart after every stop
        assert_eq!(crd("1,S0,0,2,S0,1,3,S1,D").validate(), Ok(()));
    }

    #[test]
    fn nest_examples() {
        let n = nest(&val("1,S0,2,3,S0,4,5,S1,D")).unwrap();
        let fiber = Nested::List(vec![leaves(&[1.0]), leaves(&[2.0, 3.0]), leaves(&[4.0, 5.0])]);
        assert_eq!(n, Nested::List(vec![fiber.clone()]));
        assert_eq!(n.children()[0].to_string(), "((1),(2,3),(4,5))");
        assert_eq!(nest(&val("D")).unwrap(), Nested::List(vec![]));
        let n = nest(&crd("0,2,S0,1,S1,D")).unwrap();
        assert_eq!(n.children()[0].to_string(), "((0,2),(1))");
    }

    #[test]
    fn flatten_examples() {
        let fiber = Nested::List(vec![leaves(&[1.0]), leaves(&[2.0, 3.0]), leaves(&[4.0, 5.0])]);
        let s = flatten(&Nested::List(vec![fiber]), StreamKind::Val).unwrap();
        assert_eq!(s.to_string(), "1,S0,2,3,S0,4,5,S1,D");
        assert_eq!(flatten(&Nested::List(vec![]), StreamKind::Val).unwrap().to_string(), "D");
        let s = crd("0,2,S0,1,S1,D");
        assert_eq!(flatten(&nest(&s).unwrap(), StreamKind::Crd).unwrap(), s);
        let empty_fiber = crd("S0,D");
        assert_eq!(flatten(&nest(&empty_fiber).unwrap(), StreamKind::Crd).unwrap(), empty_fiber);
    }

    #[test]
    fn flatten_rejects_bad_payload() {
        let bad = Nested::List(vec![Nested::Leaf(Token::Val(1.0))]);
        assert!(matches!(flatten(&bad, StreamKind::Crd), Err(StreamError::IllegalPayload(_))));
        let ragged = Nested::List(vec![Nested::Leaf(Token::Crd(1)), leaves(&[1.0])]);
        assert!(flatten(&ragged, StreamKind::Crd).is_err());
    }

    #[test]
    fn stats_examples() {
        let st = token_stats(&crd("1,S0,0,2,S0,1,3,S1,D")).unwrap();
        assert_eq!(st.counts.coord, 5);
        assert_eq!(st.counts.stop, BTreeMap::from([(0, 2), (1, 1)]));
        assert_eq!(st.counts.done, 1);
        assert_eq!(st.level_tokens, 9);

        let st = token_stats(&crd("D")).unwrap();
        assert_eq!(st.counts.done, 1);
        assert_eq!(st.counts.tokens(), 1);

        let st = token_stats(&val("1,S0,2,3,S0,4,5,S1,D")).unwrap();
        assert_eq!(st.point_tokens, 16);
    }

    #[test]
    fn text_round_trip() {
        let s = TokenStream::parse(StreamKind::Bv, "B:0101,B:0100,B:0011,S0,D").unwrap();
        assert_eq!(s.tokens[0], Token::Bits(BitWord::new(0b0101, 4)));
        assert_eq!(s.to_string(), "B:0101,B:0100,B:0011,S0,D");
        let r = TokenStream::parse(StreamKind::Ref, "N,0,S0,D").unwrap();
        assert_eq!(r.tokens[0], Token::Empty);
        assert_eq!(r.to_string(), "N,0,S0,D");
    }
}
