//! Synthetic labeled corpus: multichannel vector-autoregressive signals whose
//! cross-channel coupling delay depends on the severity class.

use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_manifest, ManifestRow, Scale, ScaleScore, SessionRecord, SeverityClass};
use crate::dsp::{default_channel_names, write_feature_csv, ChannelSeries, FeatureSource};
use crate::error::{bail, Error, Result};

const BURN_IN: usize = 200;
const MAX_RETRIES: u64 = 10;
/// Generated values are rounded to this many decimals so the CSV text is the exact data.
const DECIMALS: i32 = 6;

/// Coupling of one class: channel `j` is driven by channel `j - 1` delayed by
/// about `delay_frames`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub delay_frames: usize,
    pub coupling: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub channels: usize,
    pub frame_rate_hz: f64,
    /// Normal, Moderate, Severe.
    pub profiles: [ClassProfile; 3],
    /// Per-session, per-channel delay perturbation, uniform in `±lag_jitter` frames.
    pub lag_jitter: usize,
    /// Own-lag autoregressive coefficient of every channel.
    pub ar: f64,
    /// Speaker-specific offset range of the autoregressive coefficient.
    pub ar_jitter: f64,
    /// Speaker-specific relative range of the coupling gain.
    pub gain_jitter: f64,
    pub speakers_per_class: usize,
    pub sessions_per_speaker: usize,
    pub min_s: f64,
    pub max_s: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let profile = |delay_frames| ClassProfile {
            delay_frames,
            coupling: 1.2,
            noise: 1.0,
        };
        Self {
            channels: 8,
            frame_rate_hz: 100.0,
            profiles: [profile(4), profile(8), profile(12)],
            lag_jitter: 1,
            ar: 0.5,
            ar_jitter: 0.1,
            gain_jitter: 0.2,
            speakers_per_class: 15,
            sessions_per_speaker: 3,
            min_s: 12.0,
            max_s: 60.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn profile(&self, class: SeverityClass) -> &ClassProfile {
        &self.profiles[class.index()]
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.channels < 2 {
            p.push(format!("synth: need at least 2 channels, got {}", self.channels));
        }
        if !(self.frame_rate_hz > 0.0 && self.frame_rate_hz.is_finite()) {
            p.push(format!("synth: frame rate {} must be positive", self.frame_rate_hz));
        }
        for a in 0..3 {
            for b in a + 1..3 {
                if self.profiles[a].delay_frames == self.profiles[b].delay_frames {
                    p.push(format!(
                        "synth: {} and {} share coupling delay {}",
                        SeverityClass::ALL[a],
                        SeverityClass::ALL[b],
                        self.profiles[a].delay_frames
                    ));
                }
            }
        }
        for (c, prof) in SeverityClass::ALL.iter().zip(&self.profiles) {
            if !(prof.noise > 0.0 && prof.noise.is_finite()) {
                p.push(format!("synth: {c} noise level {} must be positive", prof.noise));
            }
            if !prof.coupling.is_finite() {
                p.push(format!("synth: {c} coupling must be finite"));
            }
        }
        if !(0.0..1.0).contains(&self.ar) || !(0.0..1.0).contains(&self.ar_jitter) {
            p.push(format!("synth: ar {} and ar_jitter {} must lie in [0, 1)", self.ar, self.ar_jitter));
        }
        if !(0.0..1.0).contains(&self.gain_jitter) {
            p.push(format!("synth: gain_jitter {} outside [0, 1)", self.gain_jitter));
        }
        if self.speakers_per_class == 0 || self.sessions_per_speaker == 0 {
            p.push("synth: speakers_per_class and sessions_per_speaker must be positive".into());
        }
        if !(self.min_s > 0.0 && self.min_s <= self.max_s) {
            p.push(format!("synth: duration range [{}, {}] is empty", self.min_s, self.max_s));
        }
        if self.max_s < 10.0 {
            p.push(format!("synth: max_s {} leaves no session of 10 s or more", self.max_s));
        }
        let longest = self.profiles.iter().map(|c| c.delay_frames).max().unwrap_or(0) + self.lag_jitter;
        if (longest as f64) >= self.min_s * self.frame_rate_hz {
            p.push(format!("synth: coupling delay {longest} frames exceeds the shortest session"));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Identity and seeds of one session to generate.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionPlan {
    pub session_id: String,
    pub speaker_id: String,
    pub class: SeverityClass,
    pub speaker_seed: u64,
    pub session_seed: u64,
}

/// SplitMix64 finalizer over a combined pair, for independent child seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scores on both scales at one severity level inside the class.
fn draw_scores<R: Rng>(class: SeverityClass, rng: &mut R) -> Vec<ScaleScore> {
    let level = match class {
        SeverityClass::Normal => 0,
        SeverityClass::Moderate => rng.gen_range(1..=2),
        SeverityClass::Severe => rng.gen_range(3..=4),
    };
    [Scale::Hamd, Scale::Qids]
        .into_iter()
        .map(|scale| {
            let (lo, hi) = scale.level_intervals()[level];
            ScaleScore {
                scale,
                score: rng.gen_range(lo..=hi),
            }
        })
        .collect()
}

struct SpeakerTraits {
    ar: Vec<f64>,
    gain: Vec<f64>,
}

fn draw_speaker(spec: &SynthSpec, seed: u64) -> Result<SpeakerTraits> {
    for attempt in 0..MAX_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, attempt));
        let ar: Vec<f64> = (0..spec.channels)
            .map(|_| spec.ar + rng.gen_range(-1.0..=1.0) * spec.ar_jitter)
            .collect();
        let gain: Vec<f64> = (0..spec.channels)
            .map(|_| 1.0 + rng.gen_range(-1.0..=1.0) * spec.gain_jitter)
            .collect();
        // The coupling only reaches lower-indexed channels, so the companion
        // matrix is block triangular and its spectral radius is max |ar|.
        if ar.iter().all(|a| a.abs() < 0.99) {
            return Ok(SpeakerTraits { ar, gain });
        }
        warn!("unstable coefficient draw for speaker seed {seed} (attempt {attempt}); retrying");
    }
    Err(Error::Unstable(format!("no stable coefficients for speaker seed {seed} after {MAX_RETRIES} draws")))
}

/// One session of the class's coupled autoregressive process.
pub fn generate_session(spec: &SynthSpec, plan: &SessionPlan) -> Result<(ChannelSeries, SessionRecord)> {
    spec.validate()?;
    let traits = draw_speaker(spec, plan.speaker_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.session_seed);
    let profile = spec.profile(plan.class);
    let frames = ((rng.gen_range(spec.min_s..=spec.max_s)) * spec.frame_rate_hz).round() as usize;
    let scores = draw_scores(plan.class, &mut rng);
    let lags: Vec<usize> = (0..spec.channels)
        .map(|_| {
            let j = spec.lag_jitter as i64;
            (profile.delay_frames as i64 + rng.gen_range(-j..=j)).max(1) as usize
        })
        .collect();
    let noise = Normal::new(0.0, profile.noise).map_err(|e| Error::Argument(e.to_string()))?;
    let total = frames + BURN_IN;
    let mut x = vec![vec![0.0; total]; spec.channels];
    for t in 0..total {
        for j in 0..spec.channels {
            let mut v = noise.sample(&mut rng);
            if t > 0 {
                v += traits.ar[j] * x[j][t - 1];
            }
            if j > 0 && t >= lags[j] {
                v += profile.coupling * traits.gain[j] * x[j - 1][t - lags[j]];
            }
            x[j][t] = v;
        }
    }
    let scale = 10f64.powi(DECIMALS);
    let data: Vec<Vec<f64>> = x
        .into_iter()
        .map(|c| c[BURN_IN..].iter().map(|v| (v * scale).round() / scale).collect())
        .collect();
    if data.iter().flatten().any(|v| !v.is_finite() || v.abs() > 1e9) {
        bail!(Unstable, "session '{}' diverged", plan.session_id);
    }
    let series = ChannelSeries::new(
        data,
        spec.frame_rate_hz,
        default_channel_names(spec.channels),
        FeatureSource::Synthetic,
    )?;
    let record = SessionRecord {
        session_id: plan.session_id.clone(),
        speaker_id: plan.speaker_id.clone(),
        scores,
        class: plan.class,
        split: None,
        path: format!("raw/{}.csv", plan.session_id),
        duration_s: series.duration_s(),
    };
    Ok((series, record))
}

/// Every session of the corpus, speakers ordered by class.
pub fn corpus_plan(spec: &SynthSpec) -> Vec<SessionPlan> {
    let mut plans = Vec::new();
    let mut speaker = 0u64;
    for class in SeverityClass::ALL {
        for _ in 0..spec.speakers_per_class {
            speaker += 1;
            let speaker_id = format!("spk{speaker:03}");
            let speaker_seed = mix(spec.seed, speaker);
            for k in 1..=spec.sessions_per_speaker {
                plans.push(SessionPlan {
                    session_id: format!("{speaker_id}_{k}"),
                    speaker_id: speaker_id.clone(),
                    class,
                    speaker_seed,
                    session_seed: mix(speaker_seed, 1000 + k as u64),
                });
            }
        }
    }
    plans
}

pub fn manifest_row(record: &SessionRecord) -> ManifestRow {
    ManifestRow {
        session_id: record.session_id.clone(),
        speaker_id: record.speaker_id.clone(),
        split: record.split,
        hamd: record.score(Scale::Hamd),
        qids: record.score(Scale::Qids),
        duration_s: record.duration_s,
        path: record.path.clone(),
    }
}

/// Writes `manifest.csv` and `raw/<session_id>.csv` under `out_dir`.
/// Manifest paths are relative to the manifest's directory.
pub fn generate_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    let raw = out_dir.join("raw");
    std::fs::create_dir_all(&raw).map_err(|e| Error::io(&raw, e))?;
    let rows = corpus_plan(spec)
        .par_iter()
        .map(|plan| {
            let (series, record) = generate_session(spec, plan)?;
            write_feature_csv(&out_dir.join(&record.path), &series)?;
            Ok(manifest_row(&record))
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    info!("synthesized {} sessions in {}", rows.len(), out_dir.display());
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acf::{acf_matrix, delayed_correlation, AcfMatrix};
    use crate::corpus::{admit_session, read_manifest, segment_recording, severity_from_scale, Split};
    use crate::dsp::{ingest_feature_csv, slice_segment, standardize_channels};

    fn plan(class: SeverityClass, seed: u64) -> SessionPlan {
        SessionPlan {
            session_id: "x_1".into(),
            speaker_id: "x".into(),
            class,
            speaker_seed: seed,
            session_seed: seed + 1,
        }
    }

    fn long_spec() -> SynthSpec {
        SynthSpec {
            min_s: 60.0,
            max_s: 60.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn severe_coupling_peaks_at_its_delay() {
        let (series, record) = generate_session(&long_spec(), &plan(SeverityClass::Severe, 3)).unwrap();
        assert_eq!(series.frames(), 6000);
        assert_eq!(record.class, SeverityClass::Severe);
        let z = standardize_channels(&series).unwrap();
        for j in 1..8 {
            let r: Vec<f64> = (0..=30).map(|d| delayed_correlation(&z.data[j - 1], &z.data[j], d).unwrap()).collect();
            let peak = (0..=30).max_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs())).unwrap();
            assert!(peak.abs_diff(12) <= 2, "pair {j}: peak at {peak}");
        }
    }

    #[test]
    fn zero_coupling_leaves_channels_uncorrelated() {
        let mut spec = long_spec();
        for p in &mut spec.profiles {
            p.coupling = 0.0;
        }
        let (series, _) = generate_session(&spec, &plan(SeverityClass::Moderate, 9)).unwrap();
        let z = standardize_channels(&series).unwrap();
        assert!(z.frames() >= 2000);
        for i in 0..8 {
            for j in 0..8 {
                if i == j {
                    continue;
                }
                for d in 0..=50 {
                    let r = delayed_correlation(&z.data[i], &z.data[j], d).unwrap();
                    assert!(r.abs() < 0.1, "r[{i},{j}]({d}) = {r}");
                }
            }
        }
    }

    #[test]
    fn same_seeds_same_series() {
        let spec = SynthSpec::default();
        let a = generate_session(&spec, &plan(SeverityClass::Normal, 5)).unwrap();
        let b = generate_session(&spec, &plan(SeverityClass::Normal, 5)).unwrap();
        assert_eq!(a, b);
        let c = generate_session(&spec, &plan(SeverityClass::Normal, 6)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn scores_fall_inside_the_class() {
        for seed in 0..40 {
            for class in SeverityClass::ALL {
                let (_, rec) = generate_session(&SynthSpec::default(), &plan(class, seed)).unwrap();
                assert_eq!(admit_session(&rec.scores).unwrap(), Some(class));
                if class == SeverityClass::Normal {
                    assert!(rec.score(Scale::Hamd).unwrap() <= 7);
                }
                let levels: Vec<_> = rec.scores.iter().map(|s| severity_from_scale(*s).unwrap()).collect();
                assert_eq!(levels[0], levels[1]);
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec::default().validate().is_ok());
        let mut bad = SynthSpec::default();
        bad.profiles[2].delay_frames = 4;
        bad.max_s = 5.0;
        match bad.validate() {
            Err(Error::Config(p)) => assert!(p.len() >= 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
        let text = toml::to_string(&SynthSpec::default()).unwrap();
        assert_eq!(toml::from_str::<SynthSpec>(&text).unwrap(), SynthSpec::default());
    }

    #[test]
    fn corpus_files_and_counts() {
        let spec = SynthSpec {
            speakers_per_class: 3,
            sessions_per_speaker: 4,
            min_s: 12.0,
            max_s: 14.0,
            ..SynthSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let rows = generate_corpus(&spec, dir.path()).unwrap();
        assert_eq!(rows.len(), 36);
        assert_eq!(read_manifest(&dir.path().join("manifest.csv")).unwrap(), rows);
        let speakers: std::collections::BTreeSet<_> = rows.iter().map(|r| r.speaker_id.clone()).collect();
        assert_eq!(speakers.len(), 9);
        let cs = ingest_feature_csv(&dir.path().join(&rows[0].path), Some(8)).unwrap();
        assert!((cs.duration_s() - rows[0].duration_s).abs() < 1e-9);
        let (again, _) = generate_session(&spec, &corpus_plan(&spec)[0]).unwrap();
        assert_eq!(cs.data, again.data);

        let dir2 = tempfile::tempdir().unwrap();
        generate_corpus(&spec, dir2.path()).unwrap();
        for r in &rows {
            let a = std::fs::read(dir.path().join(&r.path)).unwrap();
            let b = std::fs::read(dir2.path().join(&r.path)).unwrap();
            assert_eq!(a, b, "{}", r.session_id);
        }
        assert_eq!(
            std::fs::read(dir.path().join("manifest.csv")).unwrap(),
            std::fs::read(dir2.path().join("manifest.csv")).unwrap()
        );
    }

    fn distance(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    /// Mean pairwise distance between class-averaged training-segment ACFs,
    /// and mean distance of each segment ACF from its own class average.
    fn class_distances(spec: &SynthSpec) -> (f64, f64) {
        let mut by_class: [Vec<AcfMatrix>; 3] = Default::default();
        for p in corpus_plan(spec) {
            let (series, rec) = generate_session(spec, &p).unwrap();
            for (a, b) in segment_recording(rec.duration_s, Split::Train).unwrap() {
                let seg = standardize_channels(&slice_segment(&series, a, b).unwrap()).unwrap();
                by_class[rec.class.index()].push(acf_matrix(&seg, 50).unwrap());
            }
        }
        let total: usize = by_class.iter().map(Vec::len).sum();
        let means: Vec<Vec<f64>> = by_class
            .iter()
            .map(|ms| {
                let mut m = vec![0.0; ms[0].values.len()];
                for x in ms {
                    for (s, v) in m.iter_mut().zip(&x.values) {
                        *s += v / ms.len() as f64;
                    }
                }
                m
            })
            .collect();
        let inter = (distance(&means[0], &means[1]) + distance(&means[0], &means[2]) + distance(&means[1], &means[2])) / 3.0;
        let intra = by_class
            .iter()
            .zip(&means)
            .flat_map(|(ms, m)| ms.iter().map(move |x| distance(&x.values, m)))
            .sum::<f64>()
            / total as f64;
        if spec == &SynthSpec::default() {
            assert!((400..700).contains(&total), "{total} training segments");
        }
        (inter, intra)
    }

    #[test]
    fn default_corpus_classes_are_separable() {
        let (inter, intra) = class_distances(&SynthSpec::default());
        assert!(inter > 3.0 * intra, "inter {inter:.3}, intra {intra:.3}");
    }
}
