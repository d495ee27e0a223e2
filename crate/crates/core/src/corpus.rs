//! Severity labels, speaker-disjoint splits and recording segmentation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// Five-step severity scale shared by HAMD and QIDS (1 = Normal ... 5 = Very Severe).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeverityLevel(u8);

impl SeverityLevel {
    pub fn new(level: u8) -> Result<Self> {
        if !(1..=5).contains(&level) {
            bail!(Range, "severity level {} outside 1..=5", level);
        }
        Ok(Self(level))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn name(self) -> &'static str {
        ["Normal", "Mild", "Moderate", "Severe", "Very Severe"][self.0 as usize - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeverityClass {
    Normal,
    Moderate,
    Severe,
}

impl SeverityClass {
    pub const ALL: [SeverityClass; 3] = [Self::Normal, Self::Moderate, Self::Severe];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Range(format!("class index {i} outside 0..3")))
    }

    pub fn short(self) -> &'static str {
        match self {
            Self::Normal => "N",
            Self::Moderate => "M",
            Self::Severe => "S",
        }
    }
}

impl fmt::Display for SeverityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normal => "normal",
            Self::Moderate => "moderate",
            Self::Severe => "severe",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scale {
    Hamd,
    Qids,
}

impl Scale {
    pub fn max_score(self) -> u32 {
        match self {
            Scale::Hamd => 52,
            Scale::Qids => 27,
        }
    }

    /// Inclusive score interval of each of the five levels.
    pub fn level_intervals(self) -> [(u32, u32); 5] {
        match self {
            Scale::Hamd => [(0, 7), (8, 13), (14, 18), (19, 22), (23, 52)],
            Scale::Qids => [(0, 5), (6, 10), (11, 15), (16, 20), (21, 27)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScaleScore {
    pub scale: Scale,
    pub score: u32,
}

impl ScaleScore {
    pub fn hamd(score: u32) -> Self {
        Self {
            scale: Scale::Hamd,
            score,
        }
    }

    pub fn qids(score: u32) -> Self {
        Self {
            scale: Scale::Qids,
            score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub speaker_id: String,
    pub scores: Vec<ScaleScore>,
    pub class: SeverityClass,
    pub split: Option<Split>,
    pub path: String,
    pub duration_s: f64,
}

impl SessionRecord {
    pub fn score(&self, scale: Scale) -> Option<u32> {
        self.scores.iter().find(|s| s.scale == scale).map(|s| s.score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub session_id: String,
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub class: SeverityClass,
}

impl SegmentRecord {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

pub fn severity_from_scale(score: ScaleScore) -> Result<SeverityLevel> {
    let max = score.scale.max_score();
    if score.score > max {
        bail!(Range, "{:?} score {} outside 0..={}", score.scale, score.score, max);
    }
    let level = score
        .scale
        .level_intervals()
        .iter()
        .position(|&(lo, hi)| (lo..=hi).contains(&score.score))
        .expect("intervals cover the scale");
    SeverityLevel::new(level as u8 + 1)
}

/// Collapses the five levels to three classes: 1 → Normal, 2–3 → Moderate, 4–5 → Severe.
pub fn class_from_level(level: SeverityLevel) -> Option<SeverityClass> {
    match level.get() {
        1 => Some(SeverityClass::Normal),
        2 | 3 => Some(SeverityClass::Moderate),
        4 | 5 => Some(SeverityClass::Severe),
        _ => None,
    }
}

/// Class of a session from one or two clinician scores.
///
/// Two scores must agree on the five-level scale; otherwise the session is
/// excluded (`Ok(None)`).
pub fn admit_session(scores: &[ScaleScore]) -> Result<Option<SeverityClass>> {
    match scores {
        [] => bail!(Argument, "session has no severity scores"),
        [single] => Ok(class_from_level(severity_from_scale(*single)?)),
        [a, b] => {
            if a.scale == b.scale {
                bail!(Argument, "two scores on the same scale {:?}", a.scale);
            }
            let (la, lb) = (severity_from_scale(*a)?, severity_from_scale(*b)?);
            Ok(if la == lb { class_from_level(la) } else { None })
        }
        _ => bail!(Argument, "at most one score per scale is supported, got {}", scores.len()),
    }
}

/// Assigns every speaker to exactly one split.
///
/// Split sizes are `round(ratio * speakers)` for train and validation with
/// the remainder in test, each at least one speaker. Speakers are grouped by
/// their majority class, shuffled within the class under `seed`, and the
/// concatenated order is dealt out by largest remaining deficit so that
/// every class is spread across splits in proportion to the ratios.
pub fn split_speakers(
    sessions: &[SessionRecord],
    ratios: [f64; 3],
    seed: u64,
) -> Result<BTreeMap<String, Split>> {
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        bail!(Argument, "split ratios {:?} must be non-negative and sum to 1", ratios);
    }
    let mut counts: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
    for s in sessions {
        counts.entry(&s.speaker_id).or_default()[s.class.index()] += 1;
    }
    let n = counts.len();
    if n < 3 {
        bail!(Split, "need at least 3 speakers for a train/validation/test split, got {}", n);
    }

    let mut targets = [
        (ratios[0] * n as f64).round() as usize,
        (ratios[1] * n as f64).round() as usize,
        0,
    ];
    targets[1] = targets[1].min(n - targets[0]);
    targets[2] = n - targets[0] - targets[1];
    while let Some(empty) = targets.iter().position(|&t| t == 0) {
        let largest = (0..3).max_by_key(|&i| (targets[i], std::cmp::Reverse(i))).expect("three splits");
        if targets[largest] < 2 {
            bail!(Split, "cannot make all three splits non-empty from {} speakers", n);
        }
        targets[largest] -= 1;
        targets[empty] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&str> = Vec::with_capacity(n);
    for class in SeverityClass::ALL {
        let mut group: Vec<&str> = counts
            .iter()
            .filter(|(_, c)| majority_class(c) == class)
            .map(|(&id, _)| id)
            .collect();
        group.shuffle(&mut rng);
        order.extend(group);
    }

    let mut assigned = [0usize; 3];
    let mut out = BTreeMap::new();
    for (k, speaker) in order.into_iter().enumerate() {
        let progress = (k + 1) as f64 / n as f64;
        let split = (0..3)
            .filter(|&s| assigned[s] < targets[s])
            .max_by(|&a, &b| {
                let da = targets[a] as f64 * progress - assigned[a] as f64;
                let db = targets[b] as f64 * progress - assigned[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("remaining capacity");
        assigned[split] += 1;
        out.insert(speaker.to_string(), Split::ALL[split]);
    }
    Ok(out)
}

fn majority_class(counts: &[usize; 3]) -> SeverityClass {
    let best = (0..3)
        .max_by_key(|&i| (counts[i], std::cmp::Reverse(i)))
        .expect("three classes");
    SeverityClass::ALL[best]
}

/// Window lengths used to cut recordings into model inputs, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationRule {
    pub window_s: f64,
    pub shift_s: f64,
    pub min_s: f64,
}

impl Default for SegmentationRule {
    fn default() -> Self {
        Self {
            window_s: 20.0,
            shift_s: 5.0,
            min_s: 10.0,
        }
    }
}

impl SegmentationRule {
    /// Segment bounds for one recording.
    ///
    /// Train/validation: recordings shorter than `min_s` are dropped, those up
    /// to `window_s` are kept whole, longer ones are cut into `window_s`
    /// windows advancing by `shift_s`. Test: `n` equal non-overlapping pieces
    /// with `n` minimizing `|duration/n - window_s|` (ties to larger `n`)
    /// subject to `duration/n >= min_s`.
    pub fn segment(&self, duration_s: f64, split: Split) -> Result<Vec<(f64, f64)>> {
        if !(duration_s > 0.0) || !duration_s.is_finite() {
            bail!(Argument, "recording duration must be positive, got {}", duration_s);
        }
        if duration_s < self.min_s {
            return Ok(Vec::new());
        }
        match split {
            Split::Train | Split::Validation => {
                if duration_s <= self.window_s {
                    return Ok(vec![(0.0, duration_s)]);
                }
                let mut out = Vec::new();
                let mut k = 0usize;
                loop {
                    let start = k as f64 * self.shift_s;
                    if start + self.window_s > duration_s {
                        break;
                    }
                    out.push((start, start + self.window_s));
                    k += 1;
                }
                Ok(out)
            }
            Split::Test => {
                let max_n = (duration_s / self.min_s).floor().max(1.0) as usize;
                let mut best = (1usize, f64::INFINITY);
                for n in 1..=max_n {
                    let gap = (duration_s / n as f64 - self.window_s).abs();
                    if gap <= best.1 + 1e-9 {
                        best = (n, gap);
                    }
                }
                let n = best.0;
                Ok((0..n)
                    .map(|k| {
                        let start = duration_s * k as f64 / n as f64;
                        let end = if k + 1 == n {
                            duration_s
                        } else {
                            duration_s * (k + 1) as f64 / n as f64
                        };
                        (start, end)
                    })
                    .collect())
            }
        }
    }
}

pub fn segment_recording(duration_s: f64, split: Split) -> Result<Vec<(f64, f64)>> {
    SegmentationRule::default().segment(duration_s, split)
}

/// Segments every session with an assigned split. Sessions yielding no
/// segment are returned separately so callers can report them.
pub fn segment_sessions(
    sessions: &[SessionRecord],
    rule: &SegmentationRule,
) -> Result<(Vec<SegmentRecord>, Vec<String>)> {
    let mut segments = Vec::new();
    let mut dropped = Vec::new();
    for s in sessions {
        let Some(split) = s.split else {
            bail!(Argument, "session '{}' has no split assigned", s.session_id);
        };
        let bounds = rule.segment(s.duration_s, split)?;
        if bounds.is_empty() {
            log::info!("dropping session {} ({:.1} s): no valid segment", s.session_id, s.duration_s);
            dropped.push(s.session_id.clone());
            continue;
        }
        segments.extend(bounds.into_iter().enumerate().map(|(index, (start_s, end_s))| SegmentRecord {
            session_id: s.session_id.clone(),
            index,
            start_s,
            end_s,
            class: s.class,
        }));
    }
    Ok((segments, dropped))
}

/// One row of the corpus manifest CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub session_id: String,
    pub speaker_id: String,
    pub split: Option<Split>,
    pub hamd: Option<u32>,
    pub qids: Option<u32>,
    pub duration_s: f64,
    pub path: String,
}

impl ManifestRow {
    pub fn scores(&self) -> Vec<ScaleScore> {
        let mut out = Vec::with_capacity(2);
        if let Some(h) = self.hamd {
            out.push(ScaleScore::hamd(h));
        }
        if let Some(q) = self.qids {
            out.push(ScaleScore::qids(q));
        }
        out
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    for required in ["session_id", "speaker_id", "duration_s", "path"] {
        if !headers.iter().any(|h| h == required) {
            bail!(Format, "manifest {} lacks column '{}'", path.display(), required);
        }
    }
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Turns manifest rows into labelled sessions, dropping rows whose two scores disagree.
///
/// Splits come from the manifest when every row carries one, otherwise they
/// are assigned with [`split_speakers`]. A manifest with only some splits
/// filled in is rejected.
pub fn sessions_from_manifest(rows: &[ManifestRow], ratios: [f64; 3], seed: u64) -> Result<Vec<SessionRecord>> {
    let mut sessions = Vec::with_capacity(rows.len());
    for row in rows {
        let scores = row.scores();
        let Some(class) = admit_session(&scores).map_err(|e| Error::Argument(format!("session '{}': {e}", row.session_id)))? else {
            log::info!("excluding session {}: scores disagree on severity level", row.session_id);
            continue;
        };
        sessions.push(SessionRecord {
            session_id: row.session_id.clone(),
            speaker_id: row.speaker_id.clone(),
            scores,
            class,
            split: row.split,
            path: row.path.clone(),
            duration_s: row.duration_s,
        });
    }
    let with_split = sessions.iter().filter(|s| s.split.is_some()).count();
    if with_split == 0 {
        let assignment = split_speakers(&sessions, ratios, seed)?;
        for s in &mut sessions {
            s.split = Some(assignment[&s.speaker_id]);
        }
    } else if with_split != sessions.len() {
        bail!(Format, "manifest assigns splits to {} of {} sessions; fill all or none", with_split, sessions.len());
    } else {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for s in &sessions {
            let split = s.split.expect("checked");
            if let Some(prev) = seen.insert(&s.speaker_id, split) {
                if prev != split {
                    bail!(Split, "speaker '{}' appears in both {} and {}", s.speaker_id, prev, split);
                }
            }
        }
    }
    Ok(sessions)
}
