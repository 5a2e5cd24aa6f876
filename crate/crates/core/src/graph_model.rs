//! Attributed graph sequences of moving objects.
//!
//! Every frame of a video is a complete graph over the objects detected in
//! it. Nodes carry a pixel position plus `k` appearance features; edge weights
//! are not stored but derived from positions on demand.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;

/// Number of appearance features per object: box width, box height and five
/// RGB samples (center, left, right, top, bottom).
pub const DEFAULT_FEATURE_LEN: usize = 17;

/// Floor applied to edge weights before inverting them, in squared pixels.
pub const DEFAULT_MIN_EDGE_WEIGHT: f64 = 1.0;

/// Pixel coordinates of an object's box center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub track_id: u64,
    pub position: Position,
    /// `[box_w, box_h, rgb_center, rgb_left, rgb_right, rgb_top, rgb_bottom]`.
    pub features: Vec<f64>,
}

impl ObjectNode {
    pub fn new(track_id: u64, position: Position, features: Vec<f64>) -> Self {
        Self {
            track_id,
            position,
            features,
        }
    }
}

/// One frame. The graph is complete over `nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedGraph {
    pub frame_index: u64,
    pub nodes: Vec<ObjectNode>,
}

impl AttributedGraph {
    pub fn new(frame_index: u64, mut nodes: Vec<ObjectNode>) -> Self {
        nodes.sort_by_key(|n| n.track_id);
        Self { frame_index, nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Index of `track_id` in `nodes`. Nodes are kept sorted by track id.
    pub fn index_of(&self, track_id: u64) -> Option<usize> {
        self.nodes
            .binary_search_by_key(&track_id, |n| n.track_id)
            .ok()
    }

    pub fn node(&self, track_id: u64) -> Option<&ObjectNode> {
        self.index_of(track_id).map(|i| &self.nodes[i])
    }

    /// Edge weight between two nodes of this graph, by index.
    pub fn edge_weight_between(&self, a: usize, b: usize) -> f64 {
        edge_weight(self.nodes[a].position, self.nodes[b].position)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSequence {
    pub graphs: Vec<AttributedGraph>,
    pub fps: f64,
    pub frame_width: f64,
    pub frame_height: f64,
    /// Feature length `k` shared by every node.
    pub feature_len: usize,
}

impl GraphSequence {
    pub fn new(
        graphs: Vec<AttributedGraph>,
        fps: f64,
        frame_width: f64,
        frame_height: f64,
        feature_len: usize,
    ) -> Self {
        Self {
            graphs,
            fps,
            frame_width,
            frame_height,
            feature_len,
        }
    }

    /// Number of graphs `T`.
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// `Σ_t |V^(t)|`.
    pub fn total_nodes(&self) -> usize {
        self.graphs.iter().map(|g| g.len()).sum()
    }

    /// Contiguous sub-sequence of graphs `range`, keeping the scene metadata.
    pub fn slice(&self, range: std::ops::Range<usize>) -> GraphSequence {
        GraphSequence {
            graphs: self.graphs[range].to_vec(),
            ..self.metadata_only()
        }
    }

    fn metadata_only(&self) -> GraphSequence {
        GraphSequence {
            graphs: Vec::new(),
            fps: self.fps,
            frame_width: self.frame_width,
            frame_height: self.frame_height,
            feature_len: self.feature_len,
        }
    }
}

/// Squared Euclidean distance between two positions.
pub fn edge_weight(p_u: Position, p_v: Position) -> f64 {
    let dx = p_u.x - p_v.x;
    let dy = p_u.y - p_v.y;
    dx * dx + dy * dy
}

/// Importance of a neighbor at edge weight `e`: `1 / max(e, floor)`.
pub fn neighbor_importance(e: f64, floor: f64) -> f64 {
    1.0 / e.max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    DuplicateTrackId,
    FeatureLength { expected: usize, found: usize },
    NonFinitePosition,
    OutOfBounds,
    FrameOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub frame_index: u64,
    pub track_id: Option<u64>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "frame {}", self.frame_index)?;
        if let Some(id) = self.track_id {
            write!(f, ", track {id}")?;
        }
        match self.rule {
            Rule::DuplicateTrackId => write!(f, ": duplicate track id"),
            Rule::FeatureLength { expected, found } => {
                write!(f, ": expected {expected} features, found {found}")
            }
            Rule::NonFinitePosition => write!(f, ": non-finite position"),
            Rule::OutOfBounds => write!(f, ": position outside the frame"),
            Rule::FrameOrder => write!(f, ": frame index not strictly increasing"),
        }
    }
}

/// Checks every invariant of a sequence and lists what is broken.
pub fn validate_sequence(seq: &GraphSequence) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut last_frame: Option<u64> = None;
    for g in &seq.graphs {
        if g.frame_index == 0 || last_frame.is_some_and(|prev| g.frame_index <= prev) {
            out.push(Violation {
                frame_index: g.frame_index,
                track_id: None,
                rule: Rule::FrameOrder,
            });
        }
        last_frame = Some(g.frame_index);

        let mut seen = HashSet::new();
        for node in &g.nodes {
            let violation = |rule| Violation {
                frame_index: g.frame_index,
                track_id: Some(node.track_id),
                rule,
            };
            if !seen.insert(node.track_id) {
                out.push(violation(Rule::DuplicateTrackId));
            }
            if node.features.len() != seq.feature_len {
                out.push(violation(Rule::FeatureLength {
                    expected: seq.feature_len,
                    found: node.features.len(),
                }));
            }
            let p = node.position;
            if !p.is_finite() {
                out.push(violation(Rule::NonFinitePosition));
            } else if p.x < 0.0 || p.y < 0.0 || p.x > seq.frame_width || p.y > seq.frame_height
            {
                out.push(violation(Rule::OutOfBounds));
            }
        }
    }
    out
}
