//! Loading graph sequences: Stanford-Drone-style annotation files, synthetic
//! scenes, the native JSON-lines sequence format, and train/validation/test
//! splitting.

use crate::graph_model::{AttributedGraph, GraphSequence, ObjectNode, Position, DEFAULT_FEATURE_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

/// Number of color values carried in the feature vector (5 samples x RGB).
pub const COLOR_FEATURES: usize = 15;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate record for track {track_id} at frame {frame}")]
    DuplicateRecord { track_id: u64, frame: u64 },
    #[error("sequence has {frames} frames but the default split needs at least {required}")]
    TooShort { frames: usize, required: usize },
    #[error("invalid split fractions: {0}")]
    InvalidSplit(String),
    #[error("invalid synthetic scene config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// One row of an SDD `annotations.txt` file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackRecord {
    pub track_id: u64,
    pub xmin: i64,
    pub ymin: i64,
    pub xmax: i64,
    pub ymax: i64,
    pub frame: u64,
    pub lost: bool,
    pub occluded: bool,
    pub generated: bool,
    pub label: String,
}

impl TrackRecord {
    pub fn center(&self) -> Position {
        Position::new(
            (self.xmin + self.xmax) as f64 / 2.0,
            (self.ymin + self.ymax) as f64 / 2.0,
        )
    }

    pub fn box_width(&self) -> f64 {
        (self.xmax - self.xmin) as f64
    }

    pub fn box_height(&self) -> f64 {
        (self.ymax - self.ymin) as f64
    }
}

/// Parses whitespace-separated SDD rows:
/// `track_id xmin ymin xmax ymax frame lost occluded generated "label"`.
/// Blank lines are skipped.
pub fn parse_sdd_annotations<R: BufRead>(reader: R) -> Result<Vec<TrackRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_sdd_row(&line, line_no)?);
    }
    Ok(out)
}

fn parse_sdd_row(line: &str, line_no: usize) -> Result<TrackRecord> {
    let err = |message: String| IngestError::Parse {
        line: line_no,
        message,
    };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 10 {
        return Err(err(format!("expected 10 fields, found {}", fields.len())));
    }
    let int = |idx: usize, name: &str| -> Result<i64> {
        fields[idx]
            .parse::<i64>()
            .map_err(|_| err(format!("{name}: not an integer: {:?}", fields[idx])))
    };
    let flag = |idx: usize, name: &str| -> Result<bool> {
        match fields[idx] {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(err(format!("{name}: expected 0 or 1, found {other:?}"))),
        }
    };
    let track_id = int(0, "track_id")?;
    let frame = int(5, "frame")?;
    if track_id < 0 {
        return Err(err("track_id must be non-negative".into()));
    }
    if frame < 0 {
        return Err(err("frame must be non-negative".into()));
    }
    let (xmin, ymin, xmax, ymax) = (int(1, "xmin")?, int(2, "ymin")?, int(3, "xmax")?, int(4, "ymax")?);
    if xmin > xmax || ymin > ymax {
        return Err(err(format!("inverted box ({xmin},{ymin},{xmax},{ymax})")));
    }
    Ok(TrackRecord {
        track_id: track_id as u64,
        xmin,
        ymin,
        xmax,
        ymax,
        frame: frame as u64,
        lost: flag(6, "lost")?,
        occluded: flag(7, "occluded")?,
        generated: flag(8, "generated")?,
        label: fields[9].trim_matches('"').to_string(),
    })
}

/// Writes records back in SDD layout.
pub fn write_sdd_annotations(records: &[TrackRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} \"{}\"\n",
            r.track_id,
            r.xmin,
            r.ymin,
            r.xmax,
            r.ymax,
            r.frame,
            u8::from(r.lost),
            u8::from(r.occluded),
            u8::from(r.generated),
            r.label
        ));
    }
    s
}

/// Which SDD records become graph nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecordFilter {
    pub include_lost: bool,
    pub include_occluded: bool,
    pub include_generated: bool,
}

impl Default for RecordFilter {
    fn default() -> Self {
        Self {
            include_lost: false,
            include_occluded: true,
            include_generated: true,
        }
    }
}

impl RecordFilter {
    pub fn accepts(&self, r: &TrackRecord) -> bool {
        (self.include_lost || !r.lost)
            && (self.include_occluded || !r.occluded)
            && (self.include_generated || !r.generated)
    }
}

/// Builds one graph per frame between the first and last annotated frame
/// (frames without accepted records become empty graphs). SDD frame `f` maps
/// to frame index `f + 1`. Colors are zero-filled; see [`merge_color_sidecar`].
pub fn tracks_to_graph_sequence(
    records: &[TrackRecord],
    frame_width: f64,
    frame_height: f64,
    fps: f64,
    filter: RecordFilter,
) -> Result<GraphSequence> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert((r.track_id, r.frame)) {
            return Err(IngestError::DuplicateRecord {
                track_id: r.track_id,
                frame: r.frame,
            });
        }
    }
    let (Some(first), Some(last)) = (
        records.iter().map(|r| r.frame).min(),
        records.iter().map(|r| r.frame).max(),
    ) else {
        return Ok(GraphSequence::new(Vec::new(), fps, frame_width, frame_height, DEFAULT_FEATURE_LEN));
    };

    let mut by_frame: BTreeMap<u64, Vec<ObjectNode>> = (first..=last).map(|f| (f, Vec::new())).collect();
    for r in records.iter().filter(|r| filter.accepts(r)) {
        let c = r.center();
        let position = Position::new(c.x.clamp(0.0, frame_width), c.y.clamp(0.0, frame_height));
        let mut features = vec![0.0; DEFAULT_FEATURE_LEN];
        features[0] = r.box_width();
        features[1] = r.box_height();
        by_frame
            .get_mut(&r.frame)
            .expect("frame range covers all records")
            .push(ObjectNode::new(r.track_id, position, features));
    }
    let graphs = by_frame
        .into_iter()
        .map(|(f, nodes)| AttributedGraph::new(f + 1, nodes))
        .collect();
    Ok(GraphSequence::new(graphs, fps, frame_width, frame_height, DEFAULT_FEATURE_LEN))
}

/// Parses a color sidecar CSV with rows `track_id,frame,c1,...,c15` (SDD frame
/// numbering). A header row is allowed.
pub fn parse_color_sidecar<R: BufRead>(reader: R) -> Result<HashMap<(u64, u64), [f64; COLOR_FEATURES]>> {
    let mut out = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || (line_no == 1 && trimmed.starts_with("track_id")) {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 2 + COLOR_FEATURES {
            return Err(IngestError::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", 2 + COLOR_FEATURES, fields.len()),
            });
        }
        let bad = |what: &str| IngestError::Parse {
            line: line_no,
            message: format!("invalid {what}"),
        };
        let track_id = fields[0].parse().map_err(|_| bad("track_id"))?;
        let frame = fields[1].parse().map_err(|_| bad("frame"))?;
        let mut colors = [0.0; COLOR_FEATURES];
        for (c, f) in colors.iter_mut().zip(&fields[2..]) {
            *c = f.parse().map_err(|_| bad("color value"))?;
        }
        out.insert((track_id, frame), colors);
    }
    Ok(out)
}

/// Overwrites the zero-filled color features with sidecar values. Returns the
/// number of nodes updated.
pub fn merge_color_sidecar(
    seq: &mut GraphSequence,
    colors: &HashMap<(u64, u64), [f64; COLOR_FEATURES]>,
) -> usize {
    let mut updated = 0;
    for g in &mut seq.graphs {
        let sdd_frame = g.frame_index - 1;
        for node in &mut g.nodes {
            if let Some(c) = colors.get(&(node.track_id, sdd_frame)) {
                node.features[2..2 + COLOR_FEATURES].copy_from_slice(c);
                updated += 1;
            }
        }
    }
    updated
}

/// Fraction of records per label, sorted by label.
pub fn label_distribution(records: &[TrackRecord]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.label.clone()).or_default() += 1;
    }
    let total = records.len().max(1) as f64;
    counts.into_iter().map(|(k, v)| (k, v as f64 / total)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Linear,
    Circular,
    Brownian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    ConstantPerTrack,
    Random,
}

/// Explicit start state for one synthetic object (linear and brownian motion).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectInit {
    pub start: (f64, f64),
    pub velocity: (f64, f64),
}

/// The `[synth]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_objects: usize,
    pub motion: Motion,
    /// Speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    pub frame_width: f64,
    pub frame_height: f64,
    pub n_frames: usize,
    pub fps: f64,
    pub seed: u64,
    pub color_mode: ColorMode,
    /// Overrides the random start states; length must equal `n_objects`.
    pub objects: Option<Vec<ObjectInit>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_objects: 5,
            motion: Motion::Linear,
            speed_min: 1.0,
            speed_max: 3.0,
            frame_width: 640.0,
            frame_height: 480.0,
            n_frames: 300,
            fps: 30.0,
            seed: 0,
            color_mode: ColorMode::ConstantPerTrack,
            objects: None,
        }
    }
}

impl SynthConfig {
    /// Checks the config, including that the loss window for `delta_t` is non-empty.
    pub fn validate(&self, delta_t: usize) -> Result<()> {
        let bad = |m: String| Err(IngestError::InvalidConfig(m));
        if self.n_objects == 0 {
            return bad("n_objects must be at least 1".into());
        }
        if self.n_frames < delta_t + 2 {
            return bad(format!(
                "n_frames = {} must be at least delta_t + 2 = {}",
                self.n_frames,
                delta_t + 2
            ));
        }
        if !(self.frame_width > 0.0 && self.frame_height > 0.0) {
            return bad("frame dimensions must be positive".into());
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return bad("speed range must satisfy 0 <= speed_min <= speed_max".into());
        }
        if self.fps <= 0.0 {
            return bad("fps must be positive".into());
        }
        if let Some(objs) = &self.objects {
            if objs.len() != self.n_objects {
                return bad(format!("{} object inits given for {} objects", objs.len(), self.n_objects));
            }
        }
        Ok(())
    }
}

/// Folds a coordinate back into `[0, limit]`, flipping the velocity on each bounce.
fn reflect(pos: &mut f64, vel: &mut f64, limit: f64) {
    loop {
        if *pos < 0.0 {
            *pos = -*pos;
            *vel = -*vel;
        } else if *pos > limit {
            *pos = 2.0 * limit - *pos;
            *vel = -*vel;
        } else {
            break;
        }
    }
}

struct SynthTrack {
    pos: (f64, f64),
    vel: (f64, f64),
    // circular motion
    center: (f64, f64),
    radius: f64,
    phase: f64,
    omega: f64,
    box_size: (f64, f64),
    colors: [f64; COLOR_FEATURES],
}

/// Generates a deterministic synthetic scene. Frame indices start at 1.
pub fn synth_scene(cfg: &SynthConfig) -> Result<GraphSequence> {
    cfg.validate(0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.frame_width, cfg.frame_height);
    let speed = |rng: &mut ChaCha8Rng| {
        if cfg.speed_max > cfg.speed_min {
            rng.gen_range(cfg.speed_min..cfg.speed_max)
        } else {
            cfg.speed_min
        }
    };

    let mut tracks: Vec<SynthTrack> = (0..cfg.n_objects)
        .map(|i| {
            let (pos, vel) = match &cfg.objects {
                Some(objs) => (objs[i].start, objs[i].velocity),
                None => {
                    let pos = (rng.gen_range(0.0..=w), rng.gen_range(0.0..=h));
                    let s = speed(&mut rng);
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    (pos, (s * angle.cos(), s * angle.sin()))
                }
            };
            let max_r = 0.45 * w.min(h);
            let radius = rng.gen_range(0.2 * max_r..=max_r);
            let center = (
                rng.gen_range(radius..=w - radius),
                rng.gen_range(radius..=h - radius),
            );
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let omega = speed(&mut rng) / radius * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let box_size = (rng.gen_range(16.0..48.0), rng.gen_range(16.0..48.0));
            let mut colors = [0.0; COLOR_FEATURES];
            for c in colors.iter_mut() {
                *c = rng.gen_range(0.0..=255.0_f64).round();
            }
            SynthTrack {
                pos,
                vel,
                center,
                radius,
                phase,
                omega,
                box_size,
                colors,
            }
        })
        .collect();

    let mut graphs = Vec::with_capacity(cfg.n_frames);
    for frame in 0..cfg.n_frames {
        if frame > 0 {
            for tr in &mut tracks {
                match cfg.motion {
                    Motion::Linear => {
                        tr.pos.0 += tr.vel.0;
                        tr.pos.1 += tr.vel.1;
                    }
                    Motion::Brownian => {
                        let s = speed(&mut rng);
                        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                        tr.vel = (s * angle.cos(), s * angle.sin());
                        tr.pos.0 += tr.vel.0;
                        tr.pos.1 += tr.vel.1;
                    }
                    Motion::Circular => {
                        tr.phase += tr.omega;
                        tr.pos = (
                            tr.center.0 + tr.radius * tr.phase.cos(),
                            tr.center.1 + tr.radius * tr.phase.sin(),
                        );
                    }
                }
            }
        }
        let mut nodes = Vec::with_capacity(tracks.len());
        for (id, tr) in tracks.iter_mut().enumerate() {
            if cfg.motion == Motion::Circular && frame == 0 && cfg.objects.is_none() {
                tr.pos = (
                    tr.center.0 + tr.radius * tr.phase.cos(),
                    tr.center.1 + tr.radius * tr.phase.sin(),
                );
            }
            reflect(&mut tr.pos.0, &mut tr.vel.0, w);
            reflect(&mut tr.pos.1, &mut tr.vel.1, h);
            if cfg.color_mode == ColorMode::Random && frame > 0 {
                for c in tr.colors.iter_mut() {
                    *c = rng.gen_range(0.0..=255.0_f64).round();
                }
            }
            let mut features = Vec::with_capacity(DEFAULT_FEATURE_LEN);
            features.push(tr.box_size.0);
            features.push(tr.box_size.1);
            features.extend_from_slice(&tr.colors);
            nodes.push(ObjectNode::new(id as u64, Position::new(tr.pos.0, tr.pos.1), features));
        }
        graphs.push(AttributedGraph::new(frame as u64 + 1, nodes));
    }
    Ok(GraphSequence::new(graphs, cfg.fps, w, h, DEFAULT_FEATURE_LEN))
}

/// Train / validation / test fractions used for sequences too short for the
/// minute-based layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.2,
            validation: 0.2,
            test: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: GraphSequence,
    pub validation: GraphSequence,
    pub test: GraphSequence,
}

/// Splits a sequence by graph position. Without an override: the first minute
/// trains, the last three minutes test, and the minute right before the test
/// window validates. With fractions: train is the leading fraction, test the
/// trailing one, validation sits immediately before test.
pub fn split_sequence(seq: &GraphSequence, fps: f64, fractions: Option<SplitFractions>) -> Result<Split> {
    let total = seq.len();
    let (n_train, n_val, n_test) = match fractions {
        None => {
            let minute = (60.0 * fps).round() as usize;
            let required = 5 * minute;
            if minute == 0 || total < required {
                return Err(IngestError::TooShort {
                    frames: total,
                    required,
                });
            }
            (minute, minute, 3 * minute)
        }
        Some(f) => {
            let parts = [f.train, f.validation, f.test];
            if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || parts.iter().sum::<f64>() > 1.0 + 1e-12 {
                return Err(IngestError::InvalidSplit(format!(
                    "fractions ({}, {}, {}) must lie in [0,1] and sum to at most 1",
                    f.train, f.validation, f.test
                )));
            }
            let count = |p: f64| ((p * total as f64) + 1e-9).floor() as usize;
            (count(f.train), count(f.validation), count(f.test))
        }
    };
    let test_start = total - n_test;
    let val_start = test_start - n_val;
    Ok(Split {
        train: seq.slice(0..n_train),
        validation: seq.slice(val_start..test_start),
        test: seq.slice(test_start..total),
    })
}

#[derive(Serialize, Deserialize)]
struct NativeHeader {
    fps: f64,
    width: f64,
    height: f64,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct NativeNode {
    id: u64,
    x: f64,
    y: f64,
    f: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NativeFrame {
    frame: u64,
    nodes: Vec<NativeNode>,
}

/// Writes the native format: a header line `{fps, width, height, k}` followed
/// by one `{frame, nodes: [{id, x, y, f}]}` line per graph. Floats are written
/// in shortest round-trip form.
pub fn write_native<W: Write>(seq: &GraphSequence, mut out: W) -> Result<()> {
    let header = NativeHeader {
        fps: seq.fps,
        width: seq.frame_width,
        height: seq.frame_height,
        k: seq.feature_len,
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| IngestError::Json { line: 1, source: e })?;
    out.write_all(b"\n")?;
    for (i, g) in seq.graphs.iter().enumerate() {
        let frame = NativeFrame {
            frame: g.frame_index,
            nodes: g
                .nodes
                .iter()
                .map(|n| NativeNode {
                    id: n.track_id,
                    x: n.position.x,
                    y: n.position.y,
                    f: n.features.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &frame).map_err(|e| IngestError::Json { line: i + 2, source: e })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_native<R: BufRead>(reader: R) -> Result<GraphSequence> {
    let mut lines = reader.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
    let Some((_, first)) = lines.next() else {
        return Err(IngestError::Parse {
            line: 1,
            message: "missing header line".into(),
        });
    };
    let header: NativeHeader = serde_json::from_str(&first?).map_err(|e| IngestError::Json { line: 1, source: e })?;
    let mut graphs = Vec::new();
    for (i, line) in lines {
        let frame: NativeFrame = serde_json::from_str(&line?).map_err(|e| IngestError::Json { line: i + 1, source: e })?;
        let nodes = frame
            .nodes
            .into_iter()
            .map(|n| ObjectNode::new(n.id, Position::new(n.x, n.y), n.f))
            .collect();
        graphs.push(AttributedGraph::new(frame.frame, nodes));
    }
    Ok(GraphSequence::new(graphs, header.fps, header.width, header.height, header.k))
}
