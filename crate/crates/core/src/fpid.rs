//! Position ids for mixed text/visual sequences.
//!
//! In [`PositionMode::Naive`] every token takes a fresh id. In
//! [`PositionMode::SharedFpid`] each visual frame (a video frame or one view
//! of a split image) takes a single id shared by all of its tokens, while
//! text tokens still take one id each. Ids start at 0 and are consumed in
//! sequence order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    Naive,
    #[default]
    SharedFpid,
}

impl PositionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PositionMode::Naive => "naive",
            PositionMode::SharedFpid => "shared_fpid",
        }
    }
}

impl fmt::Display for PositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PositionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(PositionMode::Naive),
            "shared_fpid" => Ok(PositionMode::SharedFpid),
            other => Err(format!("unknown position mode `{other}` (expected naive or shared_fpid)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenType {
    Text,
    Visual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Text(usize),
    VisualFrame(usize),
}

impl Segment {
    pub fn len(self) -> usize {
        match self {
            Segment::Text(n) | Segment::VisualFrame(n) => n,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    segments: Vec<Segment>,
    token_types: Vec<TokenType>,
    /// Empty until [`assign_positions`] has run.
    position_ids: Vec<usize>,
}

impl SequenceLayout {
    /// Builds a layout from segments in sequence order. Adjacent text
    /// segments are kept as given; zero-length segments are dropped.
    pub fn new(segments: impl IntoIterator<Item = Segment>) -> Self {
        let segments: Vec<Segment> = segments.into_iter().filter(|s| !s.is_empty()).collect();
        let token_types = segments
            .iter()
            .flat_map(|s| {
                let t = match s {
                    Segment::Text(_) => TokenType::Text,
                    Segment::VisualFrame(_) => TokenType::Visual,
                };
                std::iter::repeat(t).take(s.len())
            })
            .collect();
        Self { segments, token_types, position_ids: Vec::new() }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn token_types(&self) -> &[TokenType] {
        &self.token_types
    }

    pub fn position_ids(&self) -> &[usize] {
        &self.position_ids
    }

    pub fn has_positions(&self) -> bool {
        !self.token_types.is_empty() && self.position_ids.len() == self.token_types.len()
    }

    pub fn len(&self) -> usize {
        self.token_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_types.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::VisualFrame(_))).count()
    }

    pub fn visual_token_count(&self) -> usize {
        self.token_types.iter().filter(|t| **t == TokenType::Visual).count()
    }

    pub fn text_token_count(&self) -> usize {
        self.len() - self.visual_token_count()
    }

    /// Sequence indices of tokens of type `ty`, ascending.
    pub fn indices_of(&self, ty: TokenType) -> Vec<usize> {
        self.token_types.iter().enumerate().filter(|(_, t)| **t == ty).map(|(i, _)| i).collect()
    }
}

/// Fills position ids according to `mode`. Re-running on a filled layout
/// recomputes the same ids.
pub fn assign_positions(mut layout: SequenceLayout, mode: PositionMode) -> SequenceLayout {
    let mut ids = Vec::with_capacity(layout.len());
    let mut next = 0;
    for seg in &layout.segments {
        match (*seg, mode) {
            (Segment::VisualFrame(n), PositionMode::SharedFpid) => {
                ids.extend(std::iter::repeat(next).take(n));
                next += 1;
            }
            (s, _) => {
                ids.extend(next..next + s.len());
                next += s.len();
            }
        }
    }
    layout.position_ids = ids;
    layout
}

/// Number of distinct position ids the layout consumes under `mode`.
pub fn count_positions(layout: &SequenceLayout, mode: PositionMode) -> usize {
    layout
        .segments
        .iter()
        .map(|s| match (*s, mode) {
            (Segment::VisualFrame(_), PositionMode::SharedFpid) => 1,
            (s, _) => s.len(),
        })
        .sum()
}
