//! Classification metrics, plurality voting and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Scale, SessionRecord, SeverityClass};
use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub truth: SeverityClass,
    pub predicted: SeverityClass,
    pub confidence: f64,
}

/// Rows are true classes, columns predicted classes, both in Normal, Moderate, Severe order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted_count(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }
}

pub fn confusion(preds: &[Prediction]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for p in preds {
        cm.counts[p.truth.index()][p.predicted.index()] += 1;
    }
    cm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub support: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// 0 when undefined; see `f1_defined`.
    pub f1: f64,
    pub f1_defined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Mean recall over classes with non-zero support.
    pub uar: f64,
    pub per_class: [ClassScore; 3],
}

impl Metrics {
    pub fn f1(&self) -> [f64; 3] {
        [self.per_class[0].f1, self.per_class[1].f1, self.per_class[2].f1]
    }
}

fn class_score(tp: u64, support: u64, predicted: u64) -> ClassScore {
    let precision = (predicted > 0).then(|| tp as f64 / predicted as f64);
    let recall = (support > 0).then(|| tp as f64 / support as f64);
    let (f1, f1_defined) = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => (2.0 * p * r / (p + r), true),
        (Some(_), Some(_)) => (0.0, true),
        _ => (0.0, false),
    };
    ClassScore {
        support,
        precision,
        recall,
        f1,
        f1_defined,
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        bail!(Argument, "metrics of an empty confusion matrix");
    }
    let per_class: [ClassScore; 3] =
        std::array::from_fn(|c| class_score(cm.counts[c][c], cm.support(c), cm.predicted_count(c)));
    let recalls: Vec<f64> = per_class.iter().filter_map(|s| s.recall).collect();
    let trace: u64 = (0..3).map(|c| cm.counts[c][c]).sum();
    Ok(Metrics {
        accuracy: trace as f64 / total as f64,
        uar: recalls.iter().sum::<f64>() / recalls.len() as f64,
        per_class,
    })
}

/// Same quantities computed straight from the prediction list.
pub fn metrics_from_predictions(preds: &[Prediction]) -> Result<Metrics> {
    if preds.is_empty() {
        bail!(Argument, "metrics of an empty prediction set");
    }
    let correct = preds.iter().filter(|p| p.truth == p.predicted).count();
    let per_class: [ClassScore; 3] = std::array::from_fn(|c| {
        let class = SeverityClass::ALL[c];
        let tp = preds.iter().filter(|p| p.truth == class && p.predicted == class).count() as u64;
        let support = preds.iter().filter(|p| p.truth == class).count() as u64;
        let predicted = preds.iter().filter(|p| p.predicted == class).count() as u64;
        class_score(tp, support, predicted)
    });
    let recalls: Vec<f64> = per_class.iter().filter_map(|s| s.recall).collect();
    Ok(Metrics {
        accuracy: correct as f64 / preds.len() as f64,
        uar: recalls.iter().sum::<f64>() / recalls.len() as f64,
        per_class,
    })
}

/// Session label from its segment predictions `(class, confidence)` in segment order.
///
/// Keeps the `ceil(fraction·n)` most confident predictions (earlier segments
/// win confidence ties) and returns their most frequent class. A tie for
/// the most frequent class is broken uniformly at random with `rng`.
pub fn plurality_vote<R: Rng + ?Sized>(
    preds: &[(SeverityClass, f64)],
    fraction: f64,
    rng: &mut R,
) -> Result<SeverityClass> {
    if preds.is_empty() {
        bail!(Argument, "plurality vote over zero segments");
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        bail!(Argument, "vote fraction {} outside (0, 1]", fraction);
    }
    let n = preds.len();
    let keep = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1).then(a.cmp(&b)));
    let mut counts = [0usize; 3];
    for &i in &order[..keep] {
        counts[preds[i].0.index()] += 1;
    }
    let best = *counts.iter().max().expect("three classes");
    let tied: Vec<SeverityClass> = SeverityClass::ALL
        .into_iter()
        .filter(|c| counts[c.index()] == best)
        .collect();
    Ok(if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.gen_range(0..tied.len())]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub lower: usize,
    /// Exclusive; `None` for the open last bucket.
    pub upper: Option<usize>,
    pub sessions: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Session accuracy grouped by segment count into `[edges[i], edges[i+1])`,
/// the last bucket open-ended. Sessions below the first edge and empty
/// buckets are left out.
pub fn accuracy_by_segment_count(
    preds: &[Prediction],
    segment_counts: &[usize],
    edges: &[usize],
) -> Result<Vec<BucketRow>> {
    if preds.len() != segment_counts.len() {
        bail!(Argument, "{} predictions but {} segment counts", preds.len(), segment_counts.len());
    }
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        bail!(Argument, "bucket edges must be non-empty and strictly increasing");
    }
    if segment_counts.contains(&0) {
        bail!(Argument, "segment counts must be at least 1");
    }
    let mut rows: Vec<BucketRow> = edges
        .iter()
        .enumerate()
        .map(|(i, &lower)| BucketRow {
            lower,
            upper: edges.get(i + 1).copied(),
            sessions: 0,
            correct: 0,
            accuracy: 0.0,
        })
        .collect();
    for (p, &n) in preds.iter().zip(segment_counts) {
        if let Some(row) = rows.iter_mut().rev().find(|r| n >= r.lower) {
            row.sessions += 1;
            row.correct += usize::from(p.truth == p.predicted);
        }
    }
    rows.retain(|r| r.sessions > 0);
    for r in &mut rows {
        r.accuracy = r.correct as f64 / r.sessions as f64;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisclassifiedSession {
    pub speaker_id: String,
    pub session_id: String,
    pub truth: SeverityClass,
    pub predicted: SeverityClass,
    pub hamd: Option<u32>,
    pub qids: Option<u32>,
}

/// Every misclassified session with its scale scores, grouped by speaker
/// (speakers sorted by id, sessions in prediction order).
pub fn misclassification_report(preds: &[Prediction], sessions: &[SessionRecord]) -> Result<Vec<MisclassifiedSession>> {
    let by_id: BTreeMap<&str, &SessionRecord> = sessions.iter().map(|s| (s.session_id.as_str(), s)).collect();
    let mut groups: BTreeMap<&str, Vec<MisclassifiedSession>> = BTreeMap::new();
    for p in preds.iter().filter(|p| p.truth != p.predicted) {
        let Some(s) = by_id.get(p.id.as_str()) else {
            bail!(Argument, "prediction for unknown session '{}'", p.id);
        };
        groups.entry(&s.speaker_id).or_default().push(MisclassifiedSession {
            speaker_id: s.speaker_id.clone(),
            session_id: s.session_id.clone(),
            truth: p.truth,
            predicted: p.predicted,
            hamd: s.score(Scale::Hamd),
            qids: s.score(Scale::Qids),
        });
    }
    Ok(groups.into_values().flatten().collect())
}

/// Expected per-class F1 of a guesser that draws labels at the test set's
/// own class frequencies: precision and recall both equal the prior, so
/// F1_c = p_c.
pub fn chance_f1(class_counts: [usize; 3]) -> Result<[f64; 3]> {
    let total: usize = class_counts.iter().sum();
    if total == 0 {
        bail!(Argument, "chance F1 of an empty class distribution");
    }
    Ok(class_counts.map(|c| c as f64 / total as f64))
}

/// One row of the metrics table: accuracy, UAR and per-class F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub level: String,
    pub features: String,
    pub accuracy: f64,
    pub uar: f64,
    pub f1_n: f64,
    pub f1_m: f64,
    pub f1_s: f64,
}

impl MetricsRow {
    pub fn new(model: &str, level: &str, features: &str, m: &Metrics) -> Self {
        let [f1_n, f1_m, f1_s] = m.f1();
        Self {
            model: model.into(),
            level: level.into(),
            features: features.into(),
            accuracy: m.accuracy,
            uar: m.uar,
            f1_n,
            f1_m,
            f1_s,
        }
    }
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Header `truth,N,M,S` with one row per true class.
pub fn write_confusion_csv(path: &Path, cm: &ConfusionMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["truth", "N", "M", "S"])?;
    for (c, row) in cm.counts.iter().enumerate() {
        let mut rec = vec![SeverityClass::ALL[c].short().to_string()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Self-contained SVG heatmap of a confusion matrix.
pub fn confusion_svg(cm: &ConfusionMatrix, title: &str) -> String {
    let cell = 80;
    let (ox, oy) = (90, 60);
    let max = cm.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="14">"#,
        ox + 3 * cell + 20,
        oy + 3 * cell + 50
    );
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle">{}</text>"#, ox + 3 * cell / 2, escape(title));
    for (r, row) in cm.counts.iter().enumerate() {
        let label = SeverityClass::ALL[r].short();
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{label}</text>"#,
            ox - 10,
            oy + r * cell + cell / 2 + 5
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
            ox + r * cell + cell / 2,
            oy + 3 * cell + 20
        );
        for (c, &n) in row.iter().enumerate() {
            let shade = 255 - (200.0 * n as f64 / max).round() as u8;
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#333"/>"##,
                ox + c * cell,
                oy + r * cell
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{n}</text>"#,
                ox + c * cell + cell / 2,
                oy + r * cell + cell / 2 + 5
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">predicted</text>"#,
        ox + 3 * cell / 2,
        oy + 3 * cell + 42
    );
    s.push_str("</svg>\n");
    s
}

/// Self-contained SVG bar chart of per-bucket accuracy.
pub fn buckets_svg(rows: &[BucketRow], title: &str) -> String {
    let (bar, gap, height) = (50, 20, 200);
    let (ox, oy) = (50, 40);
    let width = ox + rows.len() * (bar + gap) + 20;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="12">"#,
        oy + height + 50
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, width / 2, escape(title));
    let _ = writeln!(s, r##"<line x1="{ox}" y1="{oy}" x2="{ox}" y2="{}" stroke="#333"/>"##, oy + height);
    for (i, r) in rows.iter().enumerate() {
        let h = (r.accuracy * height as f64).round() as usize;
        let x = ox + gap / 2 + i * (bar + gap);
        let label = match r.upper {
            Some(u) => format!("{}-{}", r.lower, u - 1),
            None => format!("{}+", r.lower),
        };
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{}" width="{bar}" height="{h}" fill="#4a7ebb"/>"##,
            oy + height - h
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{:.2} (n={})</text>"#,
            x + bar / 2,
            oy + height - h - 4,
            r.accuracy,
            r.sessions
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
            x + bar / 2,
            oy + height + 16
        );
    }
    s.push_str("</svg>\n");
    s
}
