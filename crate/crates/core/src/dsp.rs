//! Audio loading, MFCC extraction and frame-level feature files.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const EXPECTED_SAMPLE_RATE_HZ: u32 = 8000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Where a feature stream came from. Determines the default model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Tv,
    Mfcc,
    Formant,
    Egemaps,
    Synthetic,
}

impl FeatureSource {
    /// Guess from the channel count of a feature file.
    pub fn infer(channels: usize) -> Self {
        match channels {
            8 => Self::Tv,
            12 => Self::Mfcc,
            3 => Self::Formant,
            23 => Self::Egemaps,
            _ => Self::Synthetic,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tv => "tv",
            Self::Mfcc => "mfcc",
            Self::Formant => "formant",
            Self::Egemaps => "egemaps",
            Self::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "tv" => Self::Tv,
            "mfcc" => Self::Mfcc,
            "formant" | "formants" => Self::Formant,
            "egemaps" => Self::Egemaps,
            "synthetic" => Self::Synthetic,
            other => bail!(Format, "unknown feature source '{}'", other),
        })
    }
}

/// `M` channels of `N` frames each, sampled at `frame_rate_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSeries {
    pub data: Vec<Vec<f64>>,
    pub frame_rate_hz: f64,
    pub channel_names: Vec<String>,
    pub source: FeatureSource,
}

impl ChannelSeries {
    pub fn new(
        data: Vec<Vec<f64>>,
        frame_rate_hz: f64,
        channel_names: Vec<String>,
        source: FeatureSource,
    ) -> Result<Self> {
        let Some(first) = data.first() else {
            bail!(Argument, "channel series needs at least one channel");
        };
        let frames = first.len();
        if frames == 0 {
            bail!(Argument, "channel series needs at least one frame");
        }
        if data.iter().any(|c| c.len() != frames) {
            bail!(Shape, "channels have unequal lengths");
        }
        if channel_names.len() != data.len() {
            bail!(Shape, "{} channel names for {} channels", channel_names.len(), data.len());
        }
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            bail!(Argument, "frame rate must be positive, got {}", frame_rate_hz);
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            bail!(Numeric, "channel series contains NaN or infinite values");
        }
        Ok(Self {
            data,
            frame_rate_hz,
            channel_names,
            source,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.len()
    }

    pub fn frames(&self) -> usize {
        self.data[0].len()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.frame_rate_hz
    }
}

pub fn default_channel_names(m: usize) -> Vec<String> {
    (1..=m).map(|i| format!("ch{i}")).collect()
}

pub fn load_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        bail!(Format, "{}: expected mono audio, found {} channels", path.display(), spec.channels);
    }
    let bad = |e: hound::Error| Error::Format(format!("{}: {e}", path.display()));
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(bad)?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?,
    };
    if spec.sample_rate != EXPECTED_SAMPLE_RATE_HZ {
        log::warn!(
            "{}: sample rate {} Hz, models are tuned for {} Hz",
            path.display(),
            spec.sample_rate,
            EXPECTED_SAMPLE_RATE_HZ
        );
    }
    Ok(Waveform {
        samples,
        sample_rate_hz: spec.sample_rate,
    })
}

/// Writes 16-bit PCM mono. Samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &w.samples {
        writer
            .write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)
            .map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

pub fn normalize_peak(w: Waveform) -> Waveform {
    let peak = w.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    if peak == 0.0 {
        return w;
    }
    Waveform {
        samples: w.samples.iter().map(|s| s / peak).collect(),
        sample_rate_hz: w.sample_rate_hz,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub window_s: f64,
    pub hop_s: f64,
    pub pre_emphasis: f64,
    pub fft_size: usize,
    pub mel_filters: usize,
    pub coefficients: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            window_s: 0.020,
            hop_s: 0.010,
            pre_emphasis: 0.97,
            fft_size: 512,
            mel_filters: 26,
            coefficients: 13,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn window_samples(&self, sample_rate_hz: u32) -> usize {
        (self.window_s * sample_rate_hz as f64).round() as usize
    }

    pub fn hop_samples(&self, sample_rate_hz: u32) -> usize {
        (self.hop_s * sample_rate_hz as f64).round() as usize
    }

    pub fn frame_count(&self, samples: usize, sample_rate_hz: u32) -> usize {
        let (win, hop) = (self.window_samples(sample_rate_hz), self.hop_samples(sample_rate_hz));
        if samples < win {
            0
        } else {
            (samples - win) / hop + 1
        }
    }
}

pub fn mfcc(w: &Waveform) -> Result<ChannelSeries> {
    mfcc_with(w, &MfccConfig::default())
}

/// Mel cepstra with the first coefficient discarded.
pub fn mfcc_with(w: &Waveform, cfg: &MfccConfig) -> Result<ChannelSeries> {
    if w.sample_rate_hz < EXPECTED_SAMPLE_RATE_HZ {
        bail!(Argument, "MFCC needs a sample rate of at least 8000 Hz, got {}", w.sample_rate_hz);
    }
    if cfg.coefficients < 2 || cfg.coefficients > cfg.mel_filters {
        bail!(Argument, "need 2..={} cepstral coefficients, got {}", cfg.mel_filters, cfg.coefficients);
    }
    let sr = w.sample_rate_hz;
    let win = cfg.window_samples(sr);
    let hop = cfg.hop_samples(sr);
    if win == 0 || hop == 0 {
        bail!(Argument, "MFCC window and hop must be at least one sample");
    }
    let frames = cfg.frame_count(w.samples.len(), sr);
    if frames == 0 {
        bail!(
            Argument,
            "audio of {} samples is shorter than one {} ms analysis window",
            w.samples.len(),
            cfg.window_s * 1000.0
        );
    }
    let nfft = cfg.fft_size.max(win.next_power_of_two());

    let mut emphasized = Vec::with_capacity(w.samples.len());
    emphasized.push(w.samples[0]);
    emphasized.extend(w.samples.windows(2).map(|p| p[1] - cfg.pre_emphasis * p[0]));

    let hamming: Vec<f64> = (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (win - 1).max(1) as f64).cos())
        .collect();
    let filters = mel_filterbank(cfg.mel_filters, nfft, sr as f64);
    let dct = dct_ortho_matrix(cfg.mel_filters, cfg.coefficients);

    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut power = vec![0.0; nfft / 2 + 1];
    let mut log_energy = vec![0.0; cfg.mel_filters];
    let mut out = vec![Vec::with_capacity(frames); cfg.coefficients - 1];
    for f in 0..frames {
        let start = f * hop;
        for (k, slot) in buf.iter_mut().enumerate() {
            let v = if k < win { emphasized[start + k] * hamming[k] } else { 0.0 };
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr() / nfft as f64;
        }
        for (e, filter) in log_energy.iter_mut().zip(&filters) {
            let energy: f64 = filter.iter().map(|&(bin, wgt)| wgt * power[bin]).sum();
            *e = energy.max(cfg.log_floor).ln();
        }
        for (c, row) in dct.iter().enumerate().skip(1) {
            out[c - 1].push(row.iter().zip(&log_energy).map(|(a, b)| a * b).sum());
        }
    }
    let names = (2..=cfg.coefficients).map(|c| format!("mfcc{c}")).collect();
    ChannelSeries::new(out, sr as f64 / hop as f64, names, FeatureSource::Mfcc)
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Sparse triangular filters as `(bin, weight)` lists, centres equally spaced on the mel scale.
fn mel_filterbank(count: usize, nfft: usize, sample_rate: f64) -> Vec<Vec<(usize, f64)>> {
    let top = hz_to_mel(sample_rate / 2.0);
    let bins: Vec<f64> = (0..count + 2)
        .map(|k| mel_to_hz(top * k as f64 / (count + 1) as f64) * nfft as f64 / sample_rate)
        .collect();
    (0..count)
        .map(|m| {
            let (lo, mid, hi) = (bins[m], bins[m + 1], bins[m + 2]);
            (lo.ceil() as usize..=(hi.floor() as usize).min(nfft / 2))
                .filter_map(|b| {
                    let x = b as f64;
                    let w = if x <= mid { (x - lo) / (mid - lo) } else { (hi - x) / (hi - mid) };
                    (w > 0.0).then_some((b, w))
                })
                .collect()
        })
        .collect()
}

/// Rows `0..keep` of the orthonormal DCT-II matrix of size `n`.
fn dct_ortho_matrix(n: usize, keep: usize) -> Vec<Vec<f64>> {
    (0..keep)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|i| scale * (PI * k as f64 * (i as f64 + 0.5) / n as f64).cos())
                .collect()
        })
        .collect()
}

const FRAME_RATE_KEY: &str = "frame_rate_hz";
const SOURCE_KEY: &str = "source";

/// Reads a frame-level feature CSV.
///
/// Leading `# key=value` comment lines carry metadata; `frame_rate_hz` is
/// required and `source` is optional (inferred from the channel count when
/// absent). The header row names the channels.
pub fn ingest_feature_csv(path: &Path, expected_channels: Option<usize>) -> Result<ChannelSeries> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_csv(&text, expected_channels).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_feature_csv(text: &str, expected_channels: Option<usize>) -> Result<ChannelSeries> {
    let mut frame_rate = None;
    let mut source = None;
    let mut body_start = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if let Some(meta) = trimmed.strip_prefix('#') {
            if let Some((key, value)) = meta.split_once('=') {
                match key.trim() {
                    FRAME_RATE_KEY => {
                        frame_rate = Some(value.trim().parse::<f64>().map_err(|_| {
                            Error::Format(format!("unreadable frame rate '{}'", value.trim()))
                        })?)
                    }
                    SOURCE_KEY => source = Some(value.parse::<FeatureSource>()?),
                    _ => {}
                }
            }
        } else if !trimmed.is_empty() {
            break;
        }
        body_start += line.len();
    }
    let Some(frame_rate) = frame_rate else {
        bail!(Format, "missing '# {}=<value>' metadata line", FRAME_RATE_KEY);
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text[body_start..].as_bytes());
    let names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let m = names.len();
    if m == 0 || names.iter().all(String::is_empty) {
        bail!(Format, "feature file has no channel header");
    }
    if let Some(expected) = expected_channels {
        if expected != m {
            bail!(Format, "expected {} channels, file has {}", expected, m);
        }
    }
    let mut data = vec![Vec::new(); m];
    for (row_index, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != m {
            bail!(Format, "row {} has {} cells, header has {}", row_index + 1, record.len(), m);
        }
        for (ch, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Format(format!("row {}: non-numeric cell '{}'", row_index + 1, cell)))?;
            if !v.is_finite() {
                bail!(Format, "row {}: non-finite value '{}'", row_index + 1, cell);
            }
            data[ch].push(v);
        }
    }
    if data[0].is_empty() {
        bail!(Format, "feature file has no frames");
    }
    let source = source.unwrap_or_else(|| FeatureSource::infer(m));
    ChannelSeries::new(data, frame_rate, names, source)
}

pub fn write_feature_csv(path: &Path, cs: &ChannelSeries) -> Result<()> {
    std::fs::write(path, format_feature_csv(cs)?).map_err(|e| Error::io(path, e))
}

pub fn format_feature_csv(cs: &ChannelSeries) -> Result<String> {
    let mut out = format!("# {FRAME_RATE_KEY}={}\n# {SOURCE_KEY}={}\n", cs.frame_rate_hz, cs.source);
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(&cs.channel_names)?;
    for t in 0..cs.frames() {
        writer.write_record(cs.data.iter().map(|c| c[t].to_string()))?;
    }
    let body = writer
        .into_inner()
        .map_err(|e| Error::Format(format!("feature CSV encoding failed: {e}")))?;
    out.push_str(&String::from_utf8(body).expect("CSV writer emits UTF-8"));
    Ok(out)
}

/// Z-scores each channel with its own mean and population standard deviation.
/// Constant channels become all-zero.
pub fn standardize_channels(cs: &ChannelSeries) -> Result<ChannelSeries> {
    let n = cs.frames();
    if n < 2 {
        bail!(Argument, "standardization needs at least 2 frames, got {}", n);
    }
    let data = cs
        .data
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / n as f64;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if std <= 1e-12 * mean.abs().max(1.0) {
                vec![0.0; n]
            } else {
                c.iter().map(|v| (v - mean) / std).collect()
            }
        })
        .collect();
    Ok(ChannelSeries {
        data,
        ..cs.clone()
    })
}

/// Frames `[round(start·fr), round(end·fr))`.
pub fn slice_segment(cs: &ChannelSeries, start_s: f64, end_s: f64) -> Result<ChannelSeries> {
    let duration = cs.duration_s();
    if !(start_s >= 0.0 && start_s < end_s && end_s <= duration + 1e-9) {
        bail!(
            Argument,
            "segment [{}, {}] outside series of {} s",
            start_s,
            end_s,
            duration
        );
    }
    let a = (start_s * cs.frame_rate_hz).round() as usize;
    let b = ((end_s * cs.frame_rate_hz).round() as usize).min(cs.frames());
    if a >= b {
        bail!(Argument, "segment [{}, {}] covers no frame", start_s, end_s);
    }
    Ok(ChannelSeries {
        data: cs.data.iter().map(|c| c[a..b].to_vec()).collect(),
        ..cs.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(data: Vec<Vec<f64>>, fr: f64) -> ChannelSeries {
        let m = data.len();
        ChannelSeries::new(data, fr, default_channel_names(m), FeatureSource::Synthetic).unwrap()
    }

    #[test]
    fn wav_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform {
            samples: (0..8000).map(|n| 0.5 * (n as f64 * 0.01).sin()).collect(),
            sample_rate_hz: 8000,
        };
        write_wav(&path, &w).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.samples.len(), 8000);
        assert_eq!(back.sample_rate_hz, 8000);
        assert!(back.samples.iter().zip(&w.samples).all(|(a, b)| (a - b).abs() < 1e-4));

        let hi = dir.path().join("hi.wav");
        write_wav(&hi, &Waveform { samples: vec![0.1; 1600], sample_rate_hz: 16000 }).unwrap();
        assert_eq!(load_wav(&hi).unwrap().sample_rate_hz, 16000);

        let stereo = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..20 {
            wr.write_sample(0i16).unwrap();
        }
        wr.finalize().unwrap();
        assert!(matches!(load_wav(&stereo), Err(Error::Format(_))));

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"RIFF not really").unwrap();
        assert!(matches!(load_wav(&junk), Err(Error::Format(_))));
    }

    #[test]
    fn peak_normalization_examples() {
        let w = |s: Vec<f64>| Waveform { samples: s, sample_rate_hz: 8000 };
        assert_eq!(normalize_peak(w(vec![0.5, -0.25])).samples, vec![1.0, -0.5]);
        assert_eq!(normalize_peak(w(vec![0.0; 3])).samples, vec![0.0; 3]);
    }

    proptest! {
        #[test]
        fn peak_normalization_is_idempotent(s in prop::collection::vec(-5.0f64..5.0, 1..200)) {
            let once = normalize_peak(Waveform { samples: s, sample_rate_hz: 8000 });
            let twice = normalize_peak(once.clone());
            let peak = once.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(peak == 0.0 || (peak - 1.0).abs() < 1e-15);
            for (a, b) in once.samples.iter().zip(&twice.samples) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn mfcc_frame_count_formula(samples in 160usize..1_600_000) {
            let cfg = MfccConfig::default();
            prop_assert_eq!(cfg.frame_count(samples, 8000), (samples - 160) / 80 + 1);
        }
    }

    #[test]
    fn mfcc_shapes_and_silence() {
        let w = Waveform { samples: vec![0.0; 8000], sample_rate_hz: 8000 };
        let cs = mfcc(&w).unwrap();
        assert_eq!((cs.channels(), cs.frames()), (12, 99));
        assert_eq!(cs.frame_rate_hz, 100.0);
        assert!(cs.data.iter().flatten().all(|v| v.is_finite()));
        assert!(matches!(
            mfcc(&Waveform { samples: vec![0.0; 100], sample_rate_hz: 8000 }),
            Err(Error::Argument(_))
        ));
        assert!(mfcc(&Waveform { samples: vec![0.0; 1000], sample_rate_hz: 4000 }).is_err());
    }

    #[test]
    fn mfcc_frame_count_on_real_extraction() {
        for n in [160, 161, 239, 240, 241, 4003, 16000] {
            let w = Waveform {
                samples: (0..n).map(|k| ((k * 7919) % 101) as f64 / 101.0 - 0.5).collect(),
                sample_rate_hz: 8000,
            };
            assert_eq!(mfcc(&w).unwrap().frames(), (n - 160) / 80 + 1, "n = {n}");
        }
    }

    #[test]
    fn mfcc_is_deterministic_and_tracks_a_direct_evaluation() {
        let sr = 8000;
        let w = Waveform {
            samples: (0..2 * sr).map(|n| (2.0 * PI * 440.0 * n as f64 / sr as f64).sin()).collect(),
            sample_rate_hz: sr as u32,
        };
        let a = mfcc(&w).unwrap();
        assert_eq!(a, mfcc(&w).unwrap());

        // Frame 10 recomputed with a naive DFT and a dense filter evaluation.
        let start = 10 * 80;
        let x: Vec<f64> = (0..160)
            .map(|k| {
                let t = start + k;
                let prev = if t == 0 { 0.0 } else { w.samples[t - 1] };
                let e = if t == 0 { w.samples[0] } else { w.samples[t] - 0.97 * prev };
                e * (0.54 - 0.46 * (2.0 * PI * k as f64 / 159.0).cos())
            })
            .collect();
        let power: Vec<f64> = (0..=256)
            .map(|b| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * (b * n) as f64 / 512.0;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re * re + im * im) / 512.0
            })
            .collect();
        let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let edges: Vec<f64> = (0..28).map(|k| inv(mel(4000.0) * k as f64 / 27.0) * 512.0 / 8000.0).collect();
        let logs: Vec<f64> = (0..26)
            .map(|m| {
                let e: f64 = (0..=256)
                    .map(|b| {
                        let x = b as f64;
                        let w = if x >= edges[m] && x <= edges[m + 1] {
                            (x - edges[m]) / (edges[m + 1] - edges[m])
                        } else if x > edges[m + 1] && x <= edges[m + 2] {
                            (edges[m + 2] - x) / (edges[m + 2] - edges[m + 1])
                        } else {
                            0.0
                        };
                        w * power[b]
                    })
                    .sum();
                e.max(1e-10).ln()
            })
            .collect();
        for c in 1..13 {
            let v: f64 = (0..26)
                .map(|i| (2.0f64 / 26.0).sqrt() * (PI * c as f64 * (i as f64 + 0.5) / 26.0).cos() * logs[i])
                .sum();
            let got = a.data[c - 1][10];
            assert!((v - got).abs() < 1e-9 * v.abs().max(1.0), "c{c}: {got} vs {v}");
        }
    }

    #[test]
    fn csv_ingestion_examples() {
        let tv = "# frame_rate_hz=100\nla,lp,ttcl,ttcd,tbcl,tbcd,per,aper\n1,2,3,4,5,6,7,8\n0,0,0,0,0,0,0,0\n";
        let cs = parse_feature_csv(tv, Some(8)).unwrap();
        assert_eq!((cs.channels(), cs.frames(), cs.source), (8, 2, FeatureSource::Tv));
        assert_eq!(cs.data[3], vec![4.0, 0.0]);
        let f = "# frame_rate_hz=100\nf1,f2,f3\n500,1500,2500\n";
        assert_eq!(parse_feature_csv(f, None).unwrap().channels(), 3);
        let eg = format!(
            "# frame_rate_hz=100\n{}\n{}\n",
            (1..=23).map(|i| format!("g{i}")).collect::<Vec<_>>().join(","),
            vec!["0.5"; 23].join(",")
        );
        assert_eq!(parse_feature_csv(&eg, Some(23)).unwrap().source, FeatureSource::Egemaps);

        assert!(matches!(parse_feature_csv(f, Some(8)), Err(Error::Format(_))));
        assert!(matches!(parse_feature_csv("f1\n1\n", None), Err(Error::Format(_))));
        assert!(matches!(
            parse_feature_csv("# frame_rate_hz=100\nf1,f2\n1,x\n", None),
            Err(Error::Format(_))
        ));
        let tagged = "# frame_rate_hz=50\n# source=mfcc\na,b\n1,2\n3,4\n";
        let cs = parse_feature_csv(tagged, None).unwrap();
        assert_eq!((cs.source, cs.frame_rate_hz), (FeatureSource::Mfcc, 50.0));
    }

    proptest! {
        #[test]
        fn csv_round_trip(
            m in 1usize..6,
            values in prop::collection::vec(-1e6f64..1e6, 2..120),
        ) {
            let n = values.len() / m;
            prop_assume!(n >= 1);
            let data: Vec<Vec<f64>> = (0..m).map(|c| values[c * n..(c + 1) * n].to_vec()).collect();
            let cs = series(data, 100.0);
            let back = parse_feature_csv(&format_feature_csv(&cs).unwrap(), Some(m)).unwrap();
            prop_assert_eq!(back.channel_names.clone(), cs.channel_names.clone());
            for (a, b) in back.data.iter().flatten().zip(cs.data.iter().flatten()) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }

        #[test]
        fn standardized_channels_have_zero_mean_unit_std(
            values in prop::collection::vec(-1e3f64..1e3, 4..300),
        ) {
            let cs = series(vec![values.clone(), values.iter().map(|v| 3.0 * v + 7.0).collect()], 100.0);
            let z = standardize_channels(&cs).unwrap();
            for c in &z.data {
                let n = c.len() as f64;
                let mean = c.iter().sum::<f64>() / n;
                let std = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!(std == 0.0 || (std - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn standardization_examples() {
        let z = standardize_channels(&series(vec![vec![1.0, 2.0, 3.0], vec![5.0; 3]], 100.0)).unwrap();
        let s = 1.5f64.sqrt();
        for (got, want) in z.data[0].iter().zip([-s, 0.0, s]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((z.data[0][0] + 1.2247).abs() < 1e-4);
        assert_eq!(z.data[1], vec![0.0; 3]);
        let again = standardize_channels(&z).unwrap();
        for (a, b) in again.data.iter().flatten().zip(z.data.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(
            standardize_channels(&series(vec![vec![1.0]], 100.0)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn slicing_examples() {
        let cs = series(vec![(0..3000).map(f64::from).collect()], 100.0);
        let s = slice_segment(&cs, 5.0, 25.0).unwrap();
        assert_eq!(s.frames(), 2000);
        assert_eq!(s.data[0][0], 500.0);
        assert_eq!(slice_segment(&cs, 0.0, 30.0).unwrap(), cs);
        assert!(matches!(slice_segment(&cs, 25.0, 5.0), Err(Error::Argument(_))));
        assert!(slice_segment(&cs, 0.0, 31.0).is_err());
        assert!(slice_segment(&cs, -1.0, 3.0).is_err());
    }
}
