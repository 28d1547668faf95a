//! Per-source partitions of STFT bins into contiguous subbands.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, s, Array3, Array4, Axis};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spectral::{ComplexSpectrogram, FrameParams};

/// The four MUSDB18 stems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Vocals,
    Bass,
    Drums,
    Other,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Vocals, Source::Bass, Source::Drums, Source::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Vocals => "vocals",
            Source::Bass => "bass",
            Source::Drums => "drums",
            Source::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Source::ALL
            .into_iter()
            .find(|src| src.as_str() == s)
            .ok_or_else(|| Error::UnknownSource(s.to_string()))
    }
}

/// Ordered, contiguous, non-overlapping cover of `[0, n_bins)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandScheme {
    source_name: String,
    bands: Vec<(usize, usize)>,
    n_bins: usize,
}

impl BandScheme {
    pub fn new(source_name: impl Into<String>, bands: Vec<(usize, usize)>, n_bins: usize) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::Scheme("a scheme needs at least one band".into()));
        }
        let mut cursor = 0;
        for &(start, end) in &bands {
            if start != cursor {
                return Err(Error::Scheme(format!(
                    "band ({start}, {end}) does not start at bin {cursor}"
                )));
            }
            if end <= start {
                return Err(Error::Scheme(format!("band ({start}, {end}) is empty")));
            }
            cursor = end;
        }
        if cursor != n_bins {
            return Err(Error::Scheme(format!("bands cover [0, {cursor}), expected [0, {n_bins})")));
        }
        Ok(Self {
            source_name: source_name.into(),
            bands,
            n_bins,
        })
    }

    /// Consecutive bands of the given widths.
    pub fn from_widths(source_name: impl Into<String>, widths: &[usize]) -> Result<Self> {
        let mut bands = Vec::with_capacity(widths.len());
        let mut start = 0;
        for &w in widths {
            bands.push((start, start + w));
            start += w;
        }
        Self::new(source_name, bands, start)
    }

    /// Converts Hz ranges to bins for an `n_fft`-point transform at `sample_rate`.
    pub fn from_ranges(source_name: impl Into<String>, ranges: &[HzRange], n_fft: usize, sample_rate: u32) -> Result<Self> {
        validate_ranges(ranges, Some(sample_rate))?;
        let n_bins = n_fft / 2 + 1;
        let to_bin = |hz: f64| ((hz * n_fft as f64 / sample_rate as f64) + 1e-9).floor() as usize;
        let mut edges = vec![0usize];
        let mut lower = 0.0;
        for r in ranges {
            let count = ((r.upper_edge_hz - lower) / r.band_width_hz).round() as usize;
            for j in 1..=count {
                edges.push(to_bin(lower + j as f64 * r.band_width_hz).min(n_bins));
            }
            lower = r.upper_edge_hz;
        }
        edges.push(n_bins);
        edges.dedup();
        let bands = edges.windows(2).map(|w| (w[0], w[1])).collect();
        Self::new(source_name, bands, n_bins)
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn bands(&self) -> &[(usize, usize)] {
        &self.bands
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn widths(&self) -> impl Iterator<Item = usize> + '_ {
        self.bands.iter().map(|&(a, b)| b - a)
    }
}

/// One `[upper_edge_hz, band_width_hz]` entry of a scheme file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct HzRange {
    pub upper_edge_hz: f64,
    pub band_width_hz: f64,
}

impl From<(f64, f64)> for HzRange {
    fn from((upper_edge_hz, band_width_hz): (f64, f64)) -> Self {
        Self {
            upper_edge_hz,
            band_width_hz,
        }
    }
}

impl From<HzRange> for (f64, f64) {
    fn from(r: HzRange) -> Self {
        (r.upper_edge_hz, r.band_width_hz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRanges {
    pub ranges: Vec<HzRange>,
}

/// Scheme file: per-source Hz ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SchemeConfig {
    pub sources: BTreeMap<String, SourceRanges>,
}

const DEFAULT_SCHEMES: &str = include_str!("../data/band_schemes.toml");

impl Default for SchemeConfig {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_SCHEMES).expect("shipped band schemes are valid")
    }
}

impl SchemeConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SchemeConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Checks every source entry independently of any transform size.
    pub fn validate(&self) -> Result<()> {
        for (name, entry) in &self.sources {
            validate_ranges(&entry.ranges, None).map_err(|e| Error::Scheme(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn ranges(&self, source: &str) -> Option<&[HzRange]> {
        self.sources.get(source).map(|s| s.ranges.as_slice())
    }
}

fn validate_ranges(ranges: &[HzRange], sample_rate: Option<u32>) -> Result<()> {
    let mut lower = 0.0;
    for r in ranges {
        if !(r.band_width_hz > 0.0) || !r.upper_edge_hz.is_finite() {
            return Err(Error::Scheme(format!("invalid range {r:?}")));
        }
        if r.upper_edge_hz <= lower {
            return Err(Error::Scheme(format!(
                "upper edges must increase: {} after {lower}",
                r.upper_edge_hz
            )));
        }
        let count = (r.upper_edge_hz - lower) / r.band_width_hz;
        if (count - count.round()).abs() > 1e-6 {
            return Err(Error::Scheme(format!(
                "span {lower}..{} Hz is not a multiple of {} Hz",
                r.upper_edge_hz, r.band_width_hz
            )));
        }
        if let Some(sr) = sample_rate {
            if r.upper_edge_hz > sr as f64 / 2.0 {
                return Err(Error::Scheme(format!(
                    "edge {} Hz exceeds Nyquist at {sr} Hz",
                    r.upper_edge_hz
                )));
            }
        }
        lower = r.upper_edge_hz;
    }
    Ok(())
}

/// Scheme for `source` from `config`, or from the shipped defaults when `config` is `None`.
pub fn build_scheme(source: &str, n_fft: usize, sample_rate: u32, config: Option<&SchemeConfig>) -> Result<BandScheme> {
    let default;
    let cfg = match config {
        Some(c) => c,
        None => {
            default = SchemeConfig::default();
            &default
        }
    };
    let ranges = cfg
        .ranges(source)
        .ok_or_else(|| Error::UnknownSource(source.to_string()))?;
    BandScheme::from_ranges(source, ranges, n_fft, sample_rate)
}

/// Subband views of `spec`, each `[channels, width, frames, 2]` with real and imaginary parts last.
pub fn split<T: Scalar>(spec: &ComplexSpectrogram<T>, scheme: &BandScheme) -> Result<Vec<Array4<T>>> {
    if spec.n_bins() != scheme.n_bins() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, scheme covers {}",
            spec.n_bins(),
            scheme.n_bins()
        )));
    }
    Ok(scheme
        .bands()
        .iter()
        .map(|&(a, b)| {
            let part = spec.values.slice(s![.., a..b, ..]);
            let (c, w, t) = part.dim();
            Array4::from_shape_fn((c, w, t, 2), |(ci, wi, ti, ri)| {
                let z = part[[ci, wi, ti]];
                if ri == 0 {
                    z.re
                } else {
                    z.im
                }
            })
        })
        .collect())
}

/// Reassembles subband masks `[channels, width, frames, 2]` into a fullband complex spectrogram.
pub fn merge_mask<T: Scalar>(
    subbands: &[Array4<T>],
    scheme: &BandScheme,
    frame: FrameParams,
    sample_rate: u32,
) -> Result<ComplexSpectrogram<T>> {
    if subbands.len() != scheme.n_bands() {
        return Err(Error::Shape(format!(
            "{} subbands for a {}-band scheme",
            subbands.len(),
            scheme.n_bands()
        )));
    }
    for (k, (sb, w)) in subbands.iter().zip(scheme.widths()).enumerate() {
        if sb.shape()[1] != w || sb.shape()[3] != 2 {
            return Err(Error::Shape(format!(
                "subband {k} has shape {:?}, expected width {w}",
                sb.shape()
            )));
        }
    }
    let complex: Vec<Array3<Complex<T>>> = subbands
        .iter()
        .map(|sb| {
            let (c, w, t, _) = sb.dim();
            Array3::from_shape_fn((c, w, t), |(ci, wi, ti)| Complex::new(sb[[ci, wi, ti, 0]], sb[[ci, wi, ti, 1]]))
        })
        .collect();
    let views: Vec<_> = complex.iter().map(|a| a.view()).collect();
    let values = concatenate(Axis(1), &views).map_err(|e| Error::Shape(format!("merging subbands: {e}")))?;
    Ok(ComplexSpectrogram {
        values,
        frame,
        sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shipped_vocals_scheme_covers_all_bins() {
        let s = build_scheme("vocals", 2048, 44_100, None).unwrap();
        assert_eq!(s.n_bins(), 1025);
        assert_eq!(s.n_bands(), 41);
        assert_eq!(s.widths().sum::<usize>(), 1025);
        let b = build_scheme("bass", 2048, 44_100, None).unwrap();
        assert_eq!(b.n_bands(), 30);
        let big = build_scheme("vocals", 4096, 44_100, None).unwrap();
        assert_eq!((big.n_bins(), big.n_bands()), (2049, 41));
    }

    #[test]
    fn toy_uniform_split() {
        let s = BandScheme::from_widths("toy", &[4, 4]).unwrap();
        assert_eq!(s.bands(), &[(0, 4), (4, 8)]);
        assert_eq!(s.n_bands(), 2);
    }

    #[test]
    fn rejects_bad_partitions() {
        assert!(BandScheme::new("x", vec![], 4).is_err());
        assert!(BandScheme::new("x", vec![(0, 2), (3, 4)], 4).is_err());
        assert!(BandScheme::new("x", vec![(0, 2), (2, 2), (2, 4)], 4).is_err());
        assert!(BandScheme::new("x", vec![(0, 2), (2, 3)], 4).is_err());
    }

    #[test]
    fn unknown_source_without_config() {
        assert!(matches!(build_scheme("piano", 2048, 44_100, None), Err(Error::UnknownSource(_))));
        let cfg = SchemeConfig::from_toml_str("[piano]\nranges = [[2000, 500]]\n").unwrap();
        let s = build_scheme("piano", 2048, 44_100, Some(&cfg)).unwrap();
        assert_eq!(s.n_bands(), 5);
    }

    #[test]
    fn validator_rejects_malformed_files() {
        assert!(SchemeConfig::from_toml_str("[v]\nranges = [[1000, 300]]\n").is_err());
        assert!(SchemeConfig::from_toml_str("[v]\nranges = [[1000, 100], [500, 100]]\n").is_err());
        assert!(SchemeConfig::from_toml_str("[v]\nranges = [[1000, 0]]\n").is_err());
        assert!(SchemeConfig::from_toml_str("[v]\nranges = [[1000, 100]]\nextra = 1\n").is_err());
        assert!(build_scheme("v", 2048, 1000, Some(&SchemeConfig::from_toml_str("[v]\nranges = [[1000, 100]]\n").unwrap())).is_err());
    }

    #[test]
    fn coarse_transform_drops_empty_bands() {
        let s = build_scheme("vocals", 32, 44_100, None).unwrap();
        assert_eq!(s.n_bins(), 17);
        assert!(s.widths().all(|w| w >= 1));
        assert_eq!(s.widths().sum::<usize>(), 17);
    }

    fn toy_spec(widths: &[usize], frames: usize, seed: u64) -> (BandScheme, ComplexSpectrogram<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scheme = BandScheme::from_widths("toy", widths).unwrap();
        let f = scheme.n_bins();
        let values = Array3::from_shape_fn((2, f, frames), |_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let frame = FrameParams::new(2 * (f - 1).max(1), 1);
        (scheme, ComplexSpectrogram { values, frame, sample_rate: 44_100 })
    }

    #[test]
    fn split_widths_and_identity_cases() {
        let (scheme, spec) = toy_spec(&[4, 4], 3, 1);
        let parts = split(&spec, &scheme).unwrap();
        assert_eq!(parts.len(), 2);
        assert!(parts.iter().all(|p| p.shape() == [2, 4, 3, 2]));

        let (single, spec) = toy_spec(&[8], 3, 2);
        let parts = split(&spec, &single).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(merge_mask(&parts, &single, spec.frame, 44_100).unwrap().values, spec.values);

        let wrong = BandScheme::from_widths("toy", &[3, 3]).unwrap();
        assert!(split(&spec, &wrong).is_err());
    }

    #[test]
    fn merge_ones_and_width_sum() {
        let scheme = BandScheme::from_widths("toy", &[3, 5]).unwrap();
        let parts = vec![Array4::from_elem((1, 3, 2, 2), 1.0f64), Array4::from_elem((1, 5, 2, 2), 1.0f64)];
        let m = merge_mask(&parts, &scheme, FrameParams::new(14, 7), 44_100).unwrap();
        assert_eq!(m.n_bins(), 8);
        assert!(m.values.iter().all(|z| *z == Complex::new(1.0, 1.0)));
        let bad = vec![Array4::from_elem((1, 4, 2, 2), 1.0f64), Array4::from_elem((1, 4, 2, 2), 1.0f64)];
        assert!(merge_mask(&bad, &scheme, FrameParams::new(14, 7), 44_100).is_err());
    }

    proptest! {
        #[test]
        fn split_merge_is_bit_exact(widths in proptest::collection::vec(1usize..6, 1..8), seed in 0u64..1000) {
            let (scheme, spec) = toy_spec(&widths, 4, seed);
            prop_assert_eq!(scheme.widths().sum::<usize>(), scheme.n_bins());
            let parts = split(&spec, &scheme).unwrap();
            let merged = merge_mask(&parts, &scheme, spec.frame, spec.sample_rate).unwrap();
            prop_assert_eq!(merged.values, spec.values);
        }
    }
}
