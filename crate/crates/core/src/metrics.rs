//! Whole-song and chunked signal-to-distortion ratios and their aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{ArrayView2, Axis, Slice};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spectral::Waveform;

/// Magnitude bound applied to every SDR value.
pub const SDR_CAP_DB: f64 = 60.0;

/// Energy-ratio SDR on raw `[channels, samples]` views, channels pooled; `None` for a silent reference.
pub fn sdr_view<T: Scalar>(reference: ArrayView2<T>, estimate: ArrayView2<T>) -> Option<f64> {
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (&r, &e) in reference.iter().zip(estimate.iter()) {
        let (r, e) = (r.as_f64(), e.as_f64());
        signal += r * r;
        noise += (r - e) * (r - e);
    }
    if signal == 0.0 {
        return None;
    }
    let db = if noise == 0.0 {
        SDR_CAP_DB
    } else {
        10.0 * (signal / noise).log10()
    };
    Some(db.clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

fn check_pair<T: Scalar>(reference: &Waveform<T>, estimate: &Waveform<T>) -> Result<()> {
    if reference.samples.dim() != estimate.samples.dim() {
        return Err(Error::Metric(format!(
            "reference {:?} and estimate {:?} differ in shape",
            reference.samples.dim(),
            estimate.samples.dim()
        )));
    }
    Ok(())
}

/// `10·log10(Σ ref² / Σ (ref − est)²)`, capped at ±60 dB. A silent reference is an error.
pub fn sdr<T: Scalar>(reference: &Waveform<T>, estimate: &Waveform<T>) -> Result<f64> {
    check_pair(reference, estimate)?;
    sdr_view(reference.samples.view(), estimate.samples.view())
        .ok_or_else(|| Error::Metric("reference is silent; SDR undefined".into()))
}

/// Per-song scores plus their aggregate. Songs with an undefined score are kept as `None`
/// and left out of the aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongScores {
    pub per_song: Vec<Option<f64>>,
    pub aggregate: Option<f64>,
}

impl SongScores {
    pub fn excluded(&self) -> usize {
        self.per_song.iter().filter(|s| s.is_none()).count()
    }
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Median with the midpoint convention for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Utterance SDR per song and its mean across songs.
pub fn usdr<T: Scalar>(pairs: &[(Waveform<T>, Waveform<T>)]) -> Result<SongScores> {
    let per_song = pairs
        .iter()
        .map(|(r, e)| {
            check_pair(r, e)?;
            Ok(sdr_view(r.samples.view(), e.samples.view()))
        })
        .collect::<Result<Vec<_>>>()?;
    let defined: Vec<f64> = per_song.iter().flatten().copied().collect();
    Ok(SongScores {
        aggregate: mean(&defined),
        per_song,
    })
}

/// Per-chunk SDRs over consecutive one-second chunks; a trailing partial chunk is dropped.
pub fn chunk_sdrs<T: Scalar>(reference: &Waveform<T>, estimate: &Waveform<T>) -> Result<Vec<Option<f64>>> {
    check_pair(reference, estimate)?;
    let chunk = reference.sample_rate as usize;
    if chunk == 0 || reference.len() < chunk {
        return Err(Error::Metric(format!(
            "song of {} samples is shorter than one second at {} Hz",
            reference.len(),
            reference.sample_rate
        )));
    }
    Ok((0..reference.len() / chunk)
        .map(|i| {
            let s = Slice::from(i * chunk..(i + 1) * chunk);
            sdr_view(
                reference.samples.slice_axis(Axis(1), s),
                estimate.samples.slice_axis(Axis(1), s),
            )
        })
        .collect())
}

/// Median of the per-chunk SDRs, silent-reference chunks excluded. `None` if every chunk is silent.
pub fn csdr_song<T: Scalar>(reference: &Waveform<T>, estimate: &Waveform<T>) -> Result<Option<f64>> {
    let defined: Vec<f64> = chunk_sdrs(reference, estimate)?.into_iter().flatten().collect();
    Ok(median(&defined))
}

/// Median across songs.
pub fn csdr_aggregate(per_song: &[f64]) -> Result<f64> {
    median(per_song).ok_or_else(|| Error::Metric("no songs to aggregate".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub song: String,
    pub source: String,
    pub usdr: Option<f64>,
    pub csdr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub source: String,
    pub mean_usdr: Option<f64>,
    pub median_csdr: Option<f64>,
    pub songs: usize,
}

/// Per (song, source) scores with mean-uSDR and median-cSDR aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub note: String,
    pub entries: Vec<EvalEntry>,
    pub per_source: Vec<SourceSummary>,
    pub average_usdr: Option<f64>,
    pub average_csdr: Option<f64>,
}

pub const REPORT_NOTE: &str = "uSDR: whole-song energy-ratio SDR, mean across songs. \
cSDR: energy-ratio SDR over 1 s chunks, median per song then median across songs; \
no BSS-Eval distortion-filter projection, so cSDR is not directly comparable to museval values. \
All values capped at +/-60 dB.";

impl EvaluationReport {
    /// Builds the aggregates from the entries.
    pub fn from_entries(entries: Vec<EvalEntry>) -> Self {
        let mut by_source: BTreeMap<&str, Vec<&EvalEntry>> = BTreeMap::new();
        for e in &entries {
            by_source.entry(&e.source).or_default().push(e);
        }
        let per_source: Vec<SourceSummary> = by_source
            .into_iter()
            .map(|(source, es)| {
                let u: Vec<f64> = es.iter().filter_map(|e| e.usdr).collect();
                let c: Vec<f64> = es.iter().filter_map(|e| e.csdr).collect();
                SourceSummary {
                    source: source.to_string(),
                    mean_usdr: mean(&u),
                    median_csdr: median(&c),
                    songs: es.len(),
                }
            })
            .collect();
        let u: Vec<f64> = per_source.iter().filter_map(|s| s.mean_usdr).collect();
        let c: Vec<f64> = per_source.iter().filter_map(|s| s.median_csdr).collect();
        Self {
            note: REPORT_NOTE.to_string(),
            average_usdr: mean(&u),
            average_csdr: mean(&c),
            per_source,
            entries,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.note);
        let _ = writeln!(out, "{:<32} {:<8} {:>9} {:>9}", "song", "source", "uSDR", "cSDR");
        for e in &self.entries {
            let _ = writeln!(out, "{:<32} {:<8} {:>9} {:>9}", e.song, e.source, fmt(e.usdr), fmt(e.csdr));
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<8} {:>6} {:>11} {:>12}", "source", "songs", "mean uSDR", "median cSDR");
        for s in &self.per_source {
            let _ = writeln!(out, "{:<8} {:>6} {:>11} {:>12}", s.source, s.songs, fmt(s.mean_usdr), fmt(s.median_csdr));
        }
        let _ = writeln!(out, "{:<8} {:>6} {:>11} {:>12}", "average", "", fmt(self.average_usdr), fmt(self.average_csdr));
        out
    }
}

/// Scores one (song, source) estimate.
pub fn evaluate_pair<T: Scalar>(
    song: &str,
    source: &str,
    reference: &Waveform<T>,
    estimate: &Waveform<T>,
) -> Result<EvalEntry> {
    check_pair(reference, estimate)?;
    let usdr = sdr_view(reference.samples.view(), estimate.samples.view());
    let csdr = if reference.len() >= reference.sample_rate as usize {
        csdr_song(reference, estimate)?
    } else {
        None
    };
    Ok(EvalEntry {
        song: song.to_string(),
        source: source.to_string(),
        usdr,
        csdr,
    })
}
