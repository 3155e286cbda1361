//! Four-stage tagged response grammar.
//!
//! A response is a sequence of tagged blocks in the fixed order
//! summary, caption, reasoning, conclusion. The parser accepts any prefix
//! of that order (or requires all four), ignores whitespace between blocks
//! and rejects everything else with one of four error kinds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Summary,
    Caption,
    Reasoning,
    Conclusion,
}

impl StageKind {
    pub const ALL: [StageKind; 4] = [
        StageKind::Summary,
        StageKind::Caption,
        StageKind::Reasoning,
        StageKind::Conclusion,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<StageKind> {
        Self::ALL.get(index).copied()
    }

    pub fn next(self) -> Option<StageKind> {
        Self::from_index(self.index() + 1)
    }

    pub fn prev(self) -> Option<StageKind> {
        self.index().checked_sub(1).and_then(Self::from_index)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Summary => "summary",
            StageKind::Caption => "caption",
            StageKind::Reasoning => "reasoning",
            StageKind::Conclusion => "conclusion",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "summary" => Ok(StageKind::Summary),
            "caption" => Ok(StageKind::Caption),
            "reasoning" => Ok(StageKind::Reasoning),
            "conclusion" => Ok(StageKind::Conclusion),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

/// Open/close tag strings per stage, indexed by `StageKind::index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSchema {
    open: [String; 4],
    close: [String; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("tag for {0} is empty")]
    EmptyTag(StageKind),
    #[error("tag `{inner}` is contained in tag `{outer}`")]
    Overlapping { inner: String, outer: String },
}

impl Default for TagSchema {
    fn default() -> Self {
        let open = StageKind::ALL.map(|k| format!("<{}>", k.as_str().to_ascii_uppercase()));
        let close = StageKind::ALL.map(|k| format!("</{}>", k.as_str().to_ascii_uppercase()));
        TagSchema { open, close }
    }
}

impl TagSchema {
    /// Builds a schema from explicit tag pairs in canonical stage order.
    pub fn new(open: [String; 4], close: [String; 4]) -> Result<Self, SchemaError> {
        let schema = TagSchema { open, close };
        schema.validate()?;
        Ok(schema)
    }

    /// Replaces one stage's tag pair.
    pub fn with_tags(
        mut self,
        kind: StageKind,
        open: impl Into<String>,
        close: impl Into<String>,
    ) -> Result<Self, SchemaError> {
        self.open[kind.index()] = open.into();
        self.close[kind.index()] = close.into();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        for kind in StageKind::ALL {
            if self.open(kind).is_empty() || self.close(kind).is_empty() {
                return Err(SchemaError::EmptyTag(kind));
            }
        }
        let tags: Vec<&str> = self.all_tags().collect();
        for (i, inner) in tags.iter().enumerate() {
            for (j, outer) in tags.iter().enumerate() {
                if i != j && outer.contains(inner) {
                    return Err(SchemaError::Overlapping {
                        inner: inner.to_string(),
                        outer: outer.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn open(&self, kind: StageKind) -> &str {
        &self.open[kind.index()]
    }

    pub fn close(&self, kind: StageKind) -> &str {
        &self.close[kind.index()]
    }

    fn all_tags(&self) -> impl Iterator<Item = &str> {
        self.open.iter().chain(self.close.iter()).map(String::as_str)
    }

    /// True when `text` contains any tag string of this schema.
    pub fn contains_tag(&self, text: &str) -> bool {
        self.all_tags().any(|t| text.contains(t))
    }

    /// Earliest tag occurrence at or after `from`: (byte offset, tag, is_open, kind).
    fn next_tag(&self, text: &str, from: usize) -> Option<(usize, usize, bool, StageKind)> {
        let rest = &text[from..];
        let mut best: Option<(usize, usize, bool, StageKind)> = None;
        for kind in StageKind::ALL {
            for (tag, is_open) in [(self.open(kind), true), (self.close(kind), false)] {
                if let Some(pos) = rest.find(tag) {
                    if best.is_none_or(|(p, ..)| from + pos < p) {
                        best = Some((from + pos, tag.len(), is_open, kind));
                    }
                }
            }
        }
        best
    }
}

/// Closing tag of `kind`, used as the stop sequence when generating that stage.
pub fn stop_marker(kind: StageKind, schema: &TagSchema) -> &str {
    schema.close(kind)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBlock {
    pub kind: StageKind,
    pub text: String,
}

impl StageBlock {
    /// Trims surrounding whitespace from `text`.
    pub fn new(kind: StageKind, text: impl AsRef<str>) -> Self {
        StageBlock {
            kind,
            text: text.as_ref().trim().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("block {got} cannot follow {after:?}")]
pub struct OrderError {
    pub got: StageKind,
    pub after: Option<StageKind>,
}

/// Ordered stage blocks forming a prefix of the canonical order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<StageBlock>", into = "Vec<StageBlock>")]
pub struct StagedResponse {
    blocks: Vec<StageBlock>,
}

impl TryFrom<Vec<StageBlock>> for StagedResponse {
    type Error = OrderError;

    fn try_from(blocks: Vec<StageBlock>) -> Result<Self, Self::Error> {
        let mut resp = StagedResponse::default();
        for b in blocks {
            resp.push(b)?;
        }
        Ok(resp)
    }
}

impl From<StagedResponse> for Vec<StageBlock> {
    fn from(r: StagedResponse) -> Self {
        r.blocks
    }
}

impl StagedResponse {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, block: StageBlock) -> Result<(), OrderError> {
        if block.kind.index() != self.blocks.len() {
            return Err(OrderError {
                got: block.kind,
                after: self.last_kind(),
            });
        }
        self.blocks.push(block);
        Ok(())
    }

    /// Returns a copy extended by `block`.
    pub fn extended(&self, block: StageBlock) -> Result<Self, OrderError> {
        let mut next = self.clone();
        next.push(block)?;
        Ok(next)
    }

    /// Appends blocks produced by a continuation.
    ///
    /// Panics if they do not continue this prefix in order.
    pub fn extend_blocks(&mut self, blocks: impl IntoIterator<Item = StageBlock>) {
        for b in blocks {
            self.push(b).expect("continuation follows the prefix");
        }
    }

    pub fn blocks(&self) -> &[StageBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.blocks.len() == StageKind::ALL.len()
    }

    pub fn last(&self) -> Option<&StageBlock> {
        self.blocks.last()
    }

    pub fn last_kind(&self) -> Option<StageKind> {
        self.blocks.last().map(|b| b.kind)
    }

    /// The stage that would come next, if any.
    pub fn next_kind(&self) -> Option<StageKind> {
        StageKind::from_index(self.blocks.len())
    }

    pub fn get(&self, kind: StageKind) -> Option<&StageBlock> {
        self.blocks.get(kind.index())
    }

    pub fn conclusion(&self) -> Option<&str> {
        self.get(StageKind::Conclusion).map(|b| b.text.as_str())
    }

    /// Prefix through `kind` inclusive, or `None` if that stage is absent.
    pub fn through(&self, kind: StageKind) -> Option<Self> {
        (kind.index() < self.blocks.len()).then(|| StagedResponse {
            blocks: self.blocks[..=kind.index()].to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    UnbalancedTag,
    OutOfOrder,
    MissingStage,
    StrayText,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unbalanced tag `{tag}` at byte {offset}")]
    UnbalancedTag { tag: String, offset: usize },
    #[error("stage {got} out of order at byte {offset}")]
    OutOfOrder { got: StageKind, offset: usize },
    #[error("missing stage {missing}")]
    MissingStage { missing: StageKind },
    #[error("stray text at byte {offset}")]
    StrayText { offset: usize },
}

impl ParseError {
    pub fn kind(&self) -> ParseErrorKind {
        match self {
            ParseError::UnbalancedTag { .. } => ParseErrorKind::UnbalancedTag,
            ParseError::OutOfOrder { .. } => ParseErrorKind::OutOfOrder,
            ParseError::MissingStage { .. } => ParseErrorKind::MissingStage,
            ParseError::StrayText { .. } => ParseErrorKind::StrayText,
        }
    }
}

/// Parses tagged text into a staged response.
///
/// Blocks are read left to right. Each open tag must be followed by its own
/// close tag before any other tag appears, otherwise the block is unbalanced;
/// a close tag with no open tag is unbalanced as well. A block that goes
/// back or repeats is out of order; one that skips ahead reports the
/// skipped stage as missing.
pub fn parse_staged(
    text: &str,
    schema: &TagSchema,
    require_complete: bool,
) -> Result<StagedResponse, ParseError> {
    let mut found: Vec<(usize, StageBlock)> = Vec::new();
    let mut pos = 0;
    loop {
        let skipped = text[pos..].len() - text[pos..].trim_start().len();
        pos += skipped;
        if pos == text.len() {
            break;
        }
        let Some((tag_at, tag_len, is_open, kind)) = schema.next_tag(text, pos) else {
            return Err(ParseError::StrayText { offset: pos });
        };
        if tag_at != pos {
            return Err(ParseError::StrayText { offset: pos });
        }
        if !is_open {
            return Err(ParseError::UnbalancedTag {
                tag: schema.close(kind).to_string(),
                offset: pos,
            });
        }
        let inner_start = pos + tag_len;
        let close = match schema.next_tag(text, inner_start) {
            Some((at, len, false, k)) if k == kind => (at, len),
            _ => {
                return Err(ParseError::UnbalancedTag {
                    tag: schema.open(kind).to_string(),
                    offset: pos,
                })
            }
        };
        found.push((pos, StageBlock::new(kind, &text[inner_start..close.0])));
        pos = close.0 + close.1;
    }
    for pair in found.windows(2) {
        if pair[1].1.kind <= pair[0].1.kind {
            return Err(ParseError::OutOfOrder {
                got: pair[1].1.kind,
                offset: pair[1].0,
            });
        }
    }
    let mut resp = StagedResponse::new();
    for (_, block) in found {
        if let Some(missing) = resp.next_kind().filter(|k| *k < block.kind) {
            return Err(ParseError::MissingStage { missing });
        }
        resp.push(block).expect("strictly increasing without gaps");
    }
    if require_complete {
        if let Some(missing) = resp.next_kind() {
            return Err(ParseError::MissingStage { missing });
        }
    }
    Ok(resp)
}

/// Renders blocks wrapped in their tags, one newline between blocks.
pub fn render_staged(resp: &StagedResponse, schema: &TagSchema) -> String {
    resp.blocks()
        .iter()
        .map(|b| format!("{}{}{}", schema.open(b.kind), b.text, schema.close(b.kind)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parses a generator continuation covering stages `first..=last`.
///
/// The generator output has its final stop marker stripped and may or may
/// not start with the first stage's open tag; both forms are accepted.
pub fn parse_continuation(
    raw: &str,
    first: StageKind,
    last: StageKind,
    schema: &TagSchema,
) -> Result<Vec<StageBlock>, ParseError> {
    let body = raw.trim_start();
    let mut text = String::with_capacity(raw.len() + 32);
    if !body.starts_with(schema.open(first)) {
        text.push_str(schema.open(first));
    }
    text.push_str(body);
    text.push_str(schema.close(last));

    // Parse as if the earlier stages were already present.
    let mut prefix = String::new();
    for kind in StageKind::ALL.iter().take(first.index()) {
        prefix.push_str(schema.open(*kind));
        prefix.push_str(schema.close(*kind));
    }
    let offset = prefix.len();
    prefix.push_str(&text);
    let parsed = parse_staged(&prefix, schema, false).map_err(|e| shift(e, offset))?;
    if parsed.last_kind() != Some(last) {
        let missing = parsed.next_kind().unwrap_or(last);
        return Err(ParseError::MissingStage { missing });
    }
    Ok(parsed.blocks()[first.index()..].to_vec())
}

fn shift(e: ParseError, offset: usize) -> ParseError {
    match e {
        ParseError::UnbalancedTag { tag, offset: o } => ParseError::UnbalancedTag {
            tag,
            offset: o.saturating_sub(offset),
        },
        ParseError::OutOfOrder { got, offset: o } => ParseError::OutOfOrder {
            got,
            offset: o.saturating_sub(offset),
        },
        ParseError::StrayText { offset: o } => ParseError::StrayText {
            offset: o.saturating_sub(offset),
        },
        e => e,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> TagSchema {
        TagSchema::default()
    }

    const FULL: &str = "<SUMMARY>a</SUMMARY><CAPTION>b</CAPTION><REASONING>c</REASONING><CONCLUSION>d</CONCLUSION>";

    #[test]
    fn default_tags() {
        let s = schema();
        assert_eq!(s.open(StageKind::Summary), "<SUMMARY>");
        assert_eq!(s.close(StageKind::Caption), "</CAPTION>");
        assert_eq!(s.open(StageKind::Reasoning), "<REASONING>");
        assert_eq!(s.close(StageKind::Conclusion), "</CONCLUSION>");
        s.validate().unwrap();
    }

    #[test]
    fn parses_minimal_full_response() {
        let r = parse_staged(FULL, &schema(), true).unwrap();
        let texts: Vec<_> = r.blocks().iter().map(|b| b.text.as_str()).collect();
        assert_eq!(texts, ["a", "b", "c", "d"]);
        assert!(r.is_complete());
    }

    #[test]
    fn whitespace_between_blocks_and_inner_trim() {
        let text = "  \n<SUMMARY>  a b \n</SUMMARY>\n\n\t<CAPTION>\tb</CAPTION>  ";
        let r = parse_staged(text, &schema(), false).unwrap();
        assert_eq!(r.blocks()[0].text, "a b");
        assert_eq!(r.blocks()[1].text, "b");
    }

    #[test]
    fn missing_close_is_unbalanced() {
        let e = parse_staged("<SUMMARY>a</SUMMARY><CONCLUSION>d", &schema(), false).unwrap_err();
        assert_eq!(e.kind(), ParseErrorKind::UnbalancedTag);
    }

    #[test]
    fn nested_open_is_unbalanced() {
        let e = parse_staged("<SUMMARY>a<CAPTION>b</CAPTION></SUMMARY>", &schema(), false)
            .unwrap_err();
        assert_eq!(e.kind(), ParseErrorKind::UnbalancedTag);
    }

    #[test]
    fn lone_close_is_unbalanced() {
        let e = parse_staged("</SUMMARY>", &schema(), false).unwrap_err();
        assert_eq!(e.kind(), ParseErrorKind::UnbalancedTag);
    }

    #[test]
    fn out_of_order_and_repeats() {
        let s = schema();
        let e = parse_staged(
            "<CAPTION>b</CAPTION><SUMMARY>a</SUMMARY><REASONING>c</REASONING><CONCLUSION>d</CONCLUSION>",
            &s,
            false,
        )
        .unwrap_err();
        assert_eq!(e.kind(), ParseErrorKind::OutOfOrder);
        let e = parse_staged("<SUMMARY>a</SUMMARY><SUMMARY>a</SUMMARY>", &s, false).unwrap_err();
        assert_eq!(e.kind(), ParseErrorKind::OutOfOrder);
    }

    #[test]
    fn missing_stages() {
        let text = "<SUMMARY>a</SUMMARY><CAPTION>b</CAPTION><CONCLUSION>d</CONCLUSION>";
        for complete in [true, false] {
            assert_eq!(
                parse_staged(text, &schema(), complete).unwrap_err(),
                ParseError::MissingStage {
                    missing: StageKind::Reasoning
                }
            );
        }
        let text = "<SUMMARY>a</SUMMARY><CAPTION>b</CAPTION>";
        assert!(parse_staged(text, &schema(), false).is_ok());
        assert_eq!(
            parse_staged(text, &schema(), true).unwrap_err(),
            ParseError::MissingStage {
                missing: StageKind::Reasoning
            }
        );
    }

    #[test]
    fn stray_text() {
        let s = schema();
        let e = parse_staged(&format!("{FULL} trailing prose"), &s, true).unwrap_err();
        assert_eq!(e.kind(), ParseErrorKind::StrayText);
        let e = parse_staged(&format!("Sure! {FULL}"), &s, true).unwrap_err();
        assert_eq!(e, ParseError::StrayText { offset: 0 });
    }

    #[test]
    fn tags_are_case_sensitive() {
        let e = parse_staged("<summary>a</summary>", &schema(), false).unwrap_err();
        assert_eq!(e.kind(), ParseErrorKind::StrayText);
    }

    #[test]
    fn empty_input_parses_to_empty() {
        assert!(parse_staged("", &schema(), false).unwrap().is_empty());
        assert!(parse_staged(" \n ", &schema(), false).unwrap().is_empty());
    }

    #[test]
    fn render_cases() {
        assert_eq!(render_staged(&StagedResponse::new(), &schema()), "");
        let mut r = StagedResponse::new();
        r.push(StageBlock::new(StageKind::Summary, "a")).unwrap();
        assert_eq!(render_staged(&r, &schema()), "<SUMMARY>a</SUMMARY>");
        let full = parse_staged(FULL, &schema(), true).unwrap();
        assert_eq!(
            render_staged(&full, &schema()),
            "<SUMMARY>a</SUMMARY>\n<CAPTION>b</CAPTION>\n<REASONING>c</REASONING>\n<CONCLUSION>d</CONCLUSION>"
        );
    }

    #[test]
    fn stop_markers() {
        let s = schema();
        assert_eq!(stop_marker(StageKind::Summary, &s), "</SUMMARY>");
        assert_eq!(stop_marker(StageKind::Conclusion, &s), "</CONCLUSION>");
        let custom = s.with_tags(StageKind::Caption, "[CAP]", "[END-CAP]").unwrap();
        assert_eq!(stop_marker(StageKind::Caption, &custom), "[END-CAP]");
    }

    #[test]
    fn custom_schema_parses() {
        let custom = schema()
            .with_tags(StageKind::Caption, "[CAP]", "[END-CAP]")
            .unwrap();
        let r = parse_staged("<SUMMARY>a</SUMMARY>[CAP] b [END-CAP]", &custom, false).unwrap();
        assert_eq!(r.blocks()[1], StageBlock::new(StageKind::Caption, "b"));
    }

    #[test]
    fn schema_rejects_overlapping_tags() {
        let e = schema()
            .with_tags(StageKind::Caption, "<S", "</CAP>")
            .unwrap_err();
        assert!(matches!(e, SchemaError::Overlapping { .. }));
        assert!(matches!(
            schema().with_tags(StageKind::Caption, "", "x"),
            Err(SchemaError::EmptyTag(StageKind::Caption))
        ));
    }

    #[test]
    fn push_enforces_prefix_order() {
        let mut r = StagedResponse::new();
        assert!(r.push(StageBlock::new(StageKind::Caption, "b")).is_err());
        r.push(StageBlock::new(StageKind::Summary, "a")).unwrap();
        assert!(r.push(StageBlock::new(StageKind::Summary, "a")).is_err());
        assert_eq!(r.next_kind(), Some(StageKind::Caption));
    }

    #[test]
    fn continuation_with_and_without_open_tag() {
        let s = schema();
        let a = parse_continuation(" the image shows x", StageKind::Caption, StageKind::Caption, &s)
            .unwrap();
        let b = parse_continuation("<CAPTION>the image shows x", StageKind::Caption, StageKind::Caption, &s)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].text, "the image shows x");

        let full = parse_continuation(
            "a</SUMMARY><CAPTION>b</CAPTION><REASONING>c</REASONING><CONCLUSION>d",
            StageKind::Summary,
            StageKind::Conclusion,
            &s,
        )
        .unwrap();
        assert_eq!(full.len(), 4);

        let e = parse_continuation("a</SUMMARY><CAPTION>b", StageKind::Summary, StageKind::Conclusion, &s)
            .unwrap_err();
        assert_eq!(e.kind(), ParseErrorKind::UnbalancedTag);
        let e = parse_continuation("x</CAPTION>", StageKind::Caption, StageKind::Caption, &s)
            .unwrap_err();
        assert_eq!(e.kind(), ParseErrorKind::UnbalancedTag);
    }

    #[test]
    fn serde_rejects_misordered_blocks() {
        let json = r#"[{"kind":"caption","text":"b"}]"#;
        assert!(serde_json::from_str::<StagedResponse>(json).is_err());
        let json = r#"[{"kind":"summary","text":"a"}]"#;
        assert_eq!(serde_json::from_str::<StagedResponse>(json).unwrap().len(), 1);
    }
}
