//! Channel-delay correlation matrices and their dataset-level standardization.
//!
//! For channels `x_i`, `x_j` of length `N`, the delay-`d` correlation is
//! `r_ij(d) = Σ_{t<N-d} x_i[t]·x_j[t+d] / (N-d)`. An [`AcfMatrix`] stacks the
//! vectors `[r_ij(0), …, r_ij(D)]` for all ordered pairs, row-major over
//! `(i, j)`, giving an `M²×(D+1)` array.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{ChannelSeries, FeatureSource};
use crate::error::{bail, Error, Result};

pub const STD_FLOOR: f64 = 1e-8;
const STANDARDIZED_TOLERANCE: f64 = 1e-6;

pub fn delayed_correlation(x_i: &[f64], x_j: &[f64], d: usize) -> Result<f64> {
    let n = x_i.len();
    if x_j.len() != n {
        bail!(Argument, "channel lengths differ: {} vs {}", n, x_j.len());
    }
    if d >= n {
        bail!(Argument, "delay {} must be below the series length {}", d, n);
    }
    Ok(lagged_dot(x_i, x_j, d) / (n - d) as f64)
}

fn lagged_dot(x_i: &[f64], x_j: &[f64], d: usize) -> f64 {
    x_i[..x_i.len() - d].iter().zip(&x_j[d..]).map(|(a, b)| a * b).sum()
}

pub fn correlation_vector(x_i: &[f64], x_j: &[f64], max_delay: usize) -> Result<Vec<f64>> {
    if x_j.len() != x_i.len() {
        bail!(Argument, "channel lengths differ: {} vs {}", x_i.len(), x_j.len());
    }
    if max_delay >= x_i.len() {
        bail!(Argument, "maximum delay {} must be below the series length {}", max_delay, x_i.len());
    }
    let n = x_i.len();
    Ok((0..=max_delay).map(|d| lagged_dot(x_i, x_j, d) / (n - d) as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfMatrix {
    /// Row-major `channels²×(max_delay+1)`.
    pub values: Vec<f64>,
    pub channels: usize,
    pub max_delay: usize,
    pub frame_rate_hz: f64,
    pub source: FeatureSource,
}

impl AcfMatrix {
    pub fn rows(&self) -> usize {
        self.channels * self.channels
    }

    pub fn cols(&self) -> usize {
        self.max_delay + 1
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    /// Zero-based `(i, j)` pair stored in each row.
    pub fn channel_pairs(&self) -> Vec<(usize, usize)> {
        channel_pairs(self.channels)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols()..(r + 1) * self.cols()]
    }

    pub fn get(&self, i: usize, j: usize, d: usize) -> f64 {
        self.values[(i * self.channels + j) * self.cols() + d]
    }
}

pub fn channel_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).collect()
}

/// ACF matrix of a (standardized) series. Input that does not look
/// standardized is accepted with a warning.
pub fn acf_matrix(cs: &ChannelSeries, max_delay: usize) -> Result<AcfMatrix> {
    let n = cs.frames();
    if max_delay >= n {
        bail!(Argument, "maximum delay {} must be below the segment length {}", max_delay, n);
    }
    if !looks_standardized(cs) {
        log::warn!("ACF input channels are not standardized (zero mean, unit variance)");
    }
    let cols = max_delay + 1;
    let m = cs.channels();
    let mut values = Vec::with_capacity(m * m * cols);
    for (i, j) in channel_pairs(m) {
        let (a, b) = (&cs.data[i], &cs.data[j]);
        values.extend((0..cols).map(|d| lagged_dot(a, b, d) / (n - d) as f64));
    }
    Ok(AcfMatrix {
        values,
        channels: m,
        max_delay,
        frame_rate_hz: cs.frame_rate_hz,
        source: cs.source,
    })
}

fn looks_standardized(cs: &ChannelSeries) -> bool {
    let n = cs.frames() as f64;
    cs.data.iter().all(|c| {
        let mean = c.iter().sum::<f64>() / n;
        let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        var == 0.0 && mean == 0.0
            || mean.abs() <= STANDARDIZED_TOLERANCE && (var.sqrt() - 1.0).abs() <= STANDARDIZED_TOLERANCE
    })
}

/// Element-wise mean and population std of the training ACF matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfStandardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub fitted_on: usize,
}

pub fn fit_acf_standardizer(train: &[AcfMatrix]) -> Result<AcfStandardizer> {
    if train.len() < 2 {
        bail!(Argument, "standardizer needs at least 2 training matrices, got {}", train.len());
    }
    let shape = train[0].shape();
    if let Some(bad) = train.iter().find(|m| m.shape() != shape) {
        bail!(Argument, "ACF shape {:?} differs from {:?}", bad.shape(), shape);
    }
    let len = shape.0 * shape.1;
    let count = train.len() as f64;
    let mut mean = vec![0.0; len];
    for m in train {
        mean.iter_mut().zip(&m.values).for_each(|(s, v)| *s += v);
    }
    mean.iter_mut().for_each(|s| *s /= count);
    let mut var = vec![0.0; len];
    for m in train {
        var.iter_mut()
            .zip(m.values.iter().zip(&mean))
            .for_each(|(s, (v, mu))| *s += (v - mu).powi(2));
    }
    let std = var.into_iter().map(|s| (s / count).sqrt().max(STD_FLOOR)).collect();
    Ok(AcfStandardizer {
        mean,
        std,
        rows: shape.0,
        cols: shape.1,
        fitted_on: train.len(),
    })
}

pub fn apply_acf_standardizer(s: &AcfStandardizer, m: &AcfMatrix) -> Result<AcfMatrix> {
    if m.shape() != (s.rows, s.cols) {
        bail!(Argument, "ACF shape {:?} does not match standardizer {:?}", m.shape(), (s.rows, s.cols));
    }
    let values = m
        .values
        .iter()
        .zip(s.mean.iter().zip(&s.std))
        .map(|(v, (mu, sd))| (v - mu) / sd)
        .collect();
    Ok(AcfMatrix { values, ..m.clone() })
}

pub fn write_acf_csv(path: &Path, m: &AcfMatrix) -> Result<()> {
    std::fs::write(path, format_acf_csv(m)?).map_err(|e| Error::io(path, e))
}

/// One row per channel pair, labelled `i-j` with 1-based channel numbers.
pub fn format_acf_csv(m: &AcfMatrix) -> Result<String> {
    let mut out = format!(
        "# channels={}\n# max_delay={}\n# frame_rate_hz={}\n# source={}\n# pair_order=row-major\n",
        m.channels, m.max_delay, m.frame_rate_hz, m.source
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["pair".to_string()];
    header.extend((0..m.cols()).map(|d| format!("d{d}")));
    w.write_record(&header)?;
    for (r, (i, j)) in m.channel_pairs().into_iter().enumerate() {
        let mut rec = vec![format!("{}-{}", i + 1, j + 1)];
        rec.extend(m.row(r).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    let body = w
        .into_inner()
        .map_err(|e| Error::Format(format!("ACF CSV encoding failed: {e}")))?;
    out.push_str(&String::from_utf8(body).expect("CSV writer emits UTF-8"));
    Ok(out)
}

pub fn read_acf_csv(path: &Path) -> Result<AcfMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_acf_csv(&text)
}

pub fn parse_acf_csv(text: &str) -> Result<AcfMatrix> {
    let (mut channels, mut max_delay, mut frame_rate, mut source) = (None, None, None, None);
    let mut body_start = 0;
    for line in text.split_inclusive('\n') {
        let Some(meta) = line.trim().strip_prefix('#') else { break };
        if let Some((k, v)) = meta.split_once('=') {
            let v = v.trim();
            let bad = || Error::Format(format!("unreadable ACF metadata '{}'", line.trim()));
            match k.trim() {
                "channels" => channels = Some(v.parse::<usize>().map_err(|_| bad())?),
                "max_delay" => max_delay = Some(v.parse::<usize>().map_err(|_| bad())?),
                "frame_rate_hz" => frame_rate = Some(v.parse::<f64>().map_err(|_| bad())?),
                "source" => source = Some(v.parse::<FeatureSource>()?),
                _ => {}
            }
        }
        body_start += line.len();
    }
    let (Some(channels), Some(max_delay)) = (channels, max_delay) else {
        bail!(Format, "ACF CSV lacks channels/max_delay metadata");
    };
    let cols = max_delay + 1;
    let pairs = channel_pairs(channels);
    let mut reader = csv::ReaderBuilder::new().from_reader(text[body_start..].as_bytes());
    let mut values = Vec::with_capacity(pairs.len() * cols);
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec?;
        let Some(&(i, j)) = pairs.get(rows) else {
            bail!(Format, "ACF CSV has more than {} rows", pairs.len());
        };
        if rec.get(0) != Some(format!("{}-{}", i + 1, j + 1).as_str()) || rec.len() != cols + 1 {
            bail!(Format, "ACF CSV row {} is not pair {}-{} with {} delays", rows + 1, i + 1, j + 1, cols);
        }
        for cell in rec.iter().skip(1) {
            values.push(
                cell.parse::<f64>()
                    .map_err(|_| Error::Format(format!("non-numeric ACF cell '{cell}'")))?,
            );
        }
        rows += 1;
    }
    if rows != pairs.len() {
        bail!(Format, "ACF CSV has {} rows, expected {}", rows, pairs.len());
    }
    Ok(AcfMatrix {
        values,
        channels,
        max_delay,
        frame_rate_hz: frame_rate.unwrap_or(100.0),
        source: source.unwrap_or_else(|| FeatureSource::infer(channels)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{default_channel_names, standardize_channels};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(data: Vec<Vec<f64>>) -> ChannelSeries {
        let m = data.len();
        ChannelSeries::new(data, 100.0, default_channel_names(m), FeatureSource::Synthetic).unwrap()
    }

    fn random_series(m: usize, n: usize, seed: u64) -> ChannelSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        series((0..m).map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect())
    }

    /// Triple loop written directly from the definition.
    fn brute_force(cs: &ChannelSeries, dmax: usize) -> Vec<Vec<f64>> {
        let m = cs.channels();
        let n = cs.frames();
        let mut rows = Vec::new();
        for i in 0..m {
            for j in 0..m {
                let mut row = Vec::new();
                for d in 0..=dmax {
                    let mut s = 0.0;
                    let mut t = 0;
                    while t + d < n {
                        s += cs.data[i][t] * cs.data[j][t + d];
                        t += 1;
                    }
                    row.push(s / (n as f64 - d as f64));
                }
                rows.push(row);
            }
        }
        rows
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300) || (a - b).abs() < 1e-300
    }

    #[test]
    fn delayed_correlation_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(delayed_correlation(&x, &x, 1).unwrap(), 4.0);
        assert_eq!(delayed_correlation(&[0.0; 3], &x, 0).unwrap(), 0.0);
        assert!(matches!(delayed_correlation(&x, &x, 3), Err(Error::Argument(_))));
        assert!(delayed_correlation(&x, &x[..2], 0).is_err());
        let z = standardize_channels(&random_series(1, 200, 3)).unwrap();
        assert!((delayed_correlation(&z.data[0], &z.data[0], 0).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn correlation_vector_examples() {
        let cs = random_series(2, 100, 9);
        assert_eq!(correlation_vector(&cs.data[0], &cs.data[1], 0).unwrap().len(), 1);
        let v = correlation_vector(&cs.data[0], &cs.data[1], 10).unwrap();
        let oracle = brute_force(&cs, 10);
        assert_eq!(v.len(), 11);
        for (a, b) in v.iter().zip(&oracle[1]) {
            assert!(close(*a, *b, 1e-12));
        }
        assert!(correlation_vector(&cs.data[0], &cs.data[1], 100).is_err());
    }

    #[test]
    fn acf_shapes() {
        let tv = standardize_channels(&random_series(8, 2000, 1)).unwrap();
        let a = acf_matrix(&tv, 50).unwrap();
        assert_eq!(a.shape(), (64, 51));
        for i in 0..8 {
            assert!((a.get(i, i, 0) - 1.0).abs() < 1e-9);
        }
        let mf = standardize_channels(&random_series(12, 300, 2)).unwrap();
        assert_eq!(acf_matrix(&mf, 50).unwrap().shape(), (144, 51));
        assert!(matches!(acf_matrix(&mf, 300), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn matches_brute_force(m in 1usize..=4, n in 12usize..=100, d in 0usize..=10, seed in any::<u64>()) {
            let cs = random_series(m, n, seed);
            let a = acf_matrix(&cs, d).unwrap();
            let oracle = brute_force(&cs, d);
            prop_assert_eq!(a.shape(), (m * m, d + 1));
            for (r, row) in oracle.iter().enumerate() {
                for (c, want) in row.iter().enumerate() {
                    prop_assert!(close(a.row(r)[c], *want, 1e-12), "{} vs {}", a.row(r)[c], want);
                }
            }
        }

        #[test]
        fn zero_delay_is_symmetric(m in 2usize..=5, seed in any::<u64>()) {
            let a = acf_matrix(&random_series(m, 60, seed), 3).unwrap();
            for i in 0..m {
                for j in 0..m {
                    prop_assert_eq!(a.get(i, j, 0), a.get(j, i, 0));
                }
            }
        }

        #[test]
        fn scale_covariance(c in 0.1f64..10.0, seed in any::<u64>()) {
            let cs = random_series(3, 50, seed);
            let mut scaled = cs.clone();
            scaled.data[1].iter_mut().for_each(|v| *v *= c);
            let (a, b) = (acf_matrix(&cs, 5).unwrap(), acf_matrix(&scaled, 5).unwrap());
            for i in 0..3 {
                for j in 0..3 {
                    let k = [i, j].iter().filter(|&&x| x == 1).count() as i32;
                    for d in 0..=5 {
                        // Entries are means of products of values in [-2, 2].
                        prop_assert!((b.get(i, j, d) - a.get(i, j, d) * c.powi(k)).abs() <= 4e-12 * c.powi(k));
                    }
                }
            }
        }
    }

    #[test]
    fn every_pair_delay_has_one_cell() {
        let m = 4;
        let pairs = channel_pairs(m);
        assert_eq!(pairs.len(), 16);
        assert_eq!(pairs[0], (0, 0));
        assert_eq!(pairs[1], (0, 1));
        assert_eq!(pairs[4], (1, 0));
        let mut seen = std::collections::BTreeSet::new();
        for p in &pairs {
            assert!(seen.insert(*p));
        }
    }

    fn matrix(values: Vec<f64>) -> AcfMatrix {
        AcfMatrix {
            values,
            channels: 1,
            max_delay: 2,
            frame_rate_hz: 100.0,
            source: FeatureSource::Synthetic,
        }
    }

    #[test]
    fn standardizer_examples() {
        let a = matrix(vec![1.0, -2.0, 3.0]);
        let s = fit_acf_standardizer(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(s.mean, a.values);
        assert_eq!(s.std, vec![STD_FLOOR; 3]);

        let s = fit_acf_standardizer(&[a.clone(), matrix(vec![-1.0, 2.0, -3.0])]).unwrap();
        assert_eq!(s.mean, vec![0.0; 3]);
        assert_eq!(s.std, vec![1.0, 2.0, 3.0]);

        let once = apply_acf_standardizer(&s, &a).unwrap();
        assert_eq!(once.values, vec![1.0, -1.0, 1.0]);
        let twice = apply_acf_standardizer(&s, &once).unwrap();
        assert_eq!(twice.values, vec![1.0, -0.5, 1.0 / 3.0]);

        let mean_matrix = matrix(s.mean.clone());
        assert_eq!(apply_acf_standardizer(&s, &mean_matrix).unwrap().values, vec![0.0; 3]);

        assert!(fit_acf_standardizer(&[a.clone()]).is_err());
        let mut other = a.clone();
        other.max_delay = 1;
        other.values.pop();
        assert!(matches!(fit_acf_standardizer(&[a.clone(), other.clone()]), Err(Error::Argument(_))));
        assert!(apply_acf_standardizer(&s, &other).is_err());
    }

    #[test]
    fn standardizer_on_training_set_gives_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let train: Vec<AcfMatrix> = (0..20)
            .map(|_| matrix((0..3).map(|_| rng.gen_range(-5.0..5.0)).collect()))
            .collect();
        let s = fit_acf_standardizer(&train).unwrap();
        let z: Vec<AcfMatrix> = train.iter().map(|m| apply_acf_standardizer(&s, m).unwrap()).collect();
        for k in 0..3 {
            let col: Vec<f64> = z.iter().map(|m| m.values[k]).collect();
            let mean = col.iter().sum::<f64>() / 20.0;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0).sqrt();
            assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        }
        let probe = matrix(vec![0.3, -7.0, 2.5]);
        let out = apply_acf_standardizer(&s, &probe).unwrap();
        for k in 0..3 {
            assert!(close(out.values[k], (probe.values[k] - s.mean[k]) / s.std[k], 1e-12));
        }
    }

    #[test]
    fn csv_round_trip() {
        let a = acf_matrix(&random_series(3, 40, 5), 4).unwrap();
        let text = format_acf_csv(&a).unwrap();
        assert!(text.contains("\npair,d0,d1,d2,d3,d4\n1-1,"));
        assert_eq!(parse_acf_csv(&text).unwrap(), a);
        assert!(parse_acf_csv("pair,d0\n1-1,0\n").is_err());
    }
}
