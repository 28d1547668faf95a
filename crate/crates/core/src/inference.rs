//! Whole-song separation by segmenting, separating each segment and reassembling.

use ndarray::{Array2, Axis, Slice};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BandSplitModel;
use crate::scalar::Scalar;
use crate::spectral::{FrameParams, Stft, Waveform};

/// Anything that maps a mixture segment to a same-length target estimate.
pub trait Separator<T: Scalar>: Sync {
    fn separate_segment(&self, segment: &Waveform<T>) -> Result<Waveform<T>>;
}

impl<T: Scalar> Separator<T> for BandSplitModel<T> {
    fn separate_segment(&self, segment: &Waveform<T>) -> Result<Waveform<T>> {
        let plan = Stft::new(self.frame())?;
        let spec = plan.forward(segment)?;
        let est = self.separate(&spec)?;
        plan.inverse(&est, segment.len())
    }
}

/// Applies one real gain to every STFT bin; gain 1 is the identity model, gain 0 silences.
#[derive(Debug, Clone, Copy)]
pub struct ConstantMask<T> {
    pub gain: T,
    pub frame: FrameParams,
}

impl<T: Scalar> Separator<T> for ConstantMask<T> {
    fn separate_segment(&self, segment: &Waveform<T>) -> Result<Waveform<T>> {
        let plan = Stft::new(self.frame)?;
        let mut spec = plan.forward(segment)?;
        spec.values.mapv_inplace(|z| z * self.gain);
        plan.inverse(&spec, segment.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ola,
    Fader,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ola" => Ok(Self::Ola),
            "fader" => Ok(Self::Fader),
            other => Err(Error::Config(format!("unknown inference method {other:?} (expected ola or fader)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OlaConfig {
    pub segment_s: f64,
    pub hop_s: f64,
}

impl Default for OlaConfig {
    fn default() -> Self {
        Self {
            segment_s: 3.0,
            hop_s: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaderConfig {
    pub segment_s: f64,
    /// Fraction of the segment shared with the next one.
    pub overlap: f64,
}

impl Default for FaderConfig {
    fn default() -> Self {
        Self {
            segment_s: 10.0,
            overlap: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub method: Method,
    pub ola: OlaConfig,
    pub fader: FaderConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            method: Method::Fader,
            ola: OlaConfig::default(),
            fader: FaderConfig::default(),
        }
    }
}

fn seconds_to_samples(s: f64, sample_rate: u32) -> usize {
    (s * sample_rate as f64).round() as usize
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let o = self.ola;
        if !(o.segment_s > 0.0 && o.hop_s > 0.0 && o.hop_s <= o.segment_s) {
            return Err(Error::Config(format!(
                "OLA needs 0 < hop <= segment, got hop {} s, segment {} s",
                o.hop_s, o.segment_s
            )));
        }
        let f = self.fader;
        if !(f.segment_s > 0.0 && (0.0..1.0).contains(&f.overlap)) {
            return Err(Error::Config(format!(
                "fader needs segment > 0 and overlap in [0, 1), got {} s and {}",
                f.segment_s, f.overlap
            )));
        }
        Ok(())
    }

    /// `(segment, hop)` in samples.
    pub fn ola_samples(&self, sample_rate: u32) -> Result<(usize, usize)> {
        let seg = seconds_to_samples(self.ola.segment_s, sample_rate);
        let hop = seconds_to_samples(self.ola.hop_s, sample_rate);
        if seg == 0 || hop == 0 || hop > seg {
            return Err(Error::Config(format!("OLA segment {seg} / hop {hop} samples invalid")));
        }
        Ok((seg, hop))
    }

    /// `(segment, overlap)` in samples.
    pub fn fader_samples(&self, sample_rate: u32) -> Result<(usize, usize)> {
        let seg = seconds_to_samples(self.fader.segment_s, sample_rate);
        let overlap = (self.fader.overlap * seg as f64).round() as usize;
        if seg == 0 || overlap >= seg {
            return Err(Error::Config(format!("fader segment {seg} / overlap {overlap} samples invalid")));
        }
        Ok((seg, overlap))
    }
}

/// `[start, end)` of each segment: `1 + ceil(max(len − seg, 0) / hop)` segments, the last one truncated.
pub fn segment_bounds(len: usize, seg: usize, hop: usize) -> Vec<(usize, usize)> {
    if len <= seg {
        return vec![(0, len)];
    }
    let n = 1 + (len - seg).div_ceil(hop);
    (0..n).map(|i| (i * hop, (i * hop + seg).min(len))).collect()
}

/// Number of segments covering each sample.
pub fn ola_coverage(len: usize, seg: usize, hop: usize) -> Vec<u32> {
    let mut count = vec![0u32; len];
    for (s, e) in segment_bounds(len, seg, hop) {
        count[s..e].iter_mut().for_each(|c| *c += 1);
    }
    count
}

/// Complementary ramps over an overlap of `n` samples, excluding the endpoints 0 and 1.
pub fn fade_weights(n: usize) -> (Vec<f64>, Vec<f64>) {
    let ramp_in: Vec<f64> = (0..n).map(|i| (i + 1) as f64 / (n + 1) as f64).collect();
    let ramp_out = ramp_in.iter().map(|w| 1.0 - w).collect();
    (ramp_out, ramp_in)
}

/// Per-sample weights of every fader segment, aligned with [`segment_bounds`] at stride `seg − overlap`.
///
/// When the overlap exceeds half a segment more than two segments meet, so the ramps are
/// renormalized to sum to one; for smaller overlaps this leaves them unchanged.
pub fn fader_segment_weights(len: usize, seg: usize, overlap: usize) -> Vec<((usize, usize), Vec<f64>)> {
    let bounds = segment_bounds(len, seg, seg - overlap);
    let (ramp_out, ramp_in) = fade_weights(overlap);
    let last = bounds.len() - 1;
    let mut plan: Vec<((usize, usize), Vec<f64>)> = bounds
        .iter()
        .enumerate()
        .map(|(i, &(s, e))| {
            let mut w = vec![1.0; e - s];
            if i > 0 {
                w[..overlap].copy_from_slice(&ramp_in);
            }
            if i < last {
                let n = w.len();
                let m = w[n - overlap..].iter_mut();
                m.zip(&ramp_out).for_each(|(w, r)| *w *= r);
            }
            ((s, e), w)
        })
        .collect();
    if 2 * overlap > seg {
        let mut total = vec![0.0; len];
        for ((s, _), w) in &plan {
            total[*s..*s + w.len()].iter_mut().zip(w).for_each(|(t, w)| *t += w);
        }
        for ((s, _), w) in &mut plan {
            w.iter_mut().zip(&total[*s..]).for_each(|(w, t)| *w /= t);
        }
    }
    plan
}

fn run_segments<T: Scalar, M: Separator<T> + ?Sized>(
    song: &Waveform<T>,
    model: &M,
    bounds: &[(usize, usize)],
) -> Result<Vec<Waveform<T>>> {
    bounds
        .par_iter()
        .map(|&(s, e)| {
            let seg = song.slice(s, e);
            let out = model.separate_segment(&seg)?;
            if out.samples.dim() != seg.samples.dim() {
                return Err(Error::Shape(format!(
                    "separator returned {:?} for a {:?} segment",
                    out.samples.dim(),
                    seg.samples.dim()
                )));
            }
            Ok(out)
        })
        .collect()
}

/// Overlap-add with a rectangular window, normalized by per-sample coverage.
pub fn separate_ola<T: Scalar, M: Separator<T> + ?Sized>(song: &Waveform<T>, model: &M, cfg: &InferenceConfig) -> Result<Waveform<T>> {
    cfg.validate()?;
    song.validate()?;
    let (seg, hop) = cfg.ola_samples(song.sample_rate)?;
    let bounds = segment_bounds(song.len(), seg, hop);
    let outs = run_segments(song, model, &bounds)?;
    let mut acc = Array2::<T>::zeros(song.samples.raw_dim());
    for (&(s, e), out) in bounds.iter().zip(&outs) {
        let mut dst = acc.slice_axis_mut(Axis(1), Slice::from(s..e));
        dst += &out.samples;
    }
    let count = ola_coverage(song.len(), seg, hop);
    for mut ch in acc.outer_iter_mut() {
        for (x, &c) in ch.iter_mut().zip(&count) {
            *x /= T::of(c as f64);
        }
    }
    Waveform::new(acc, song.sample_rate)
}

/// Segments cross-faded with complementary linear ramps over their overlaps.
pub fn separate_fader<T: Scalar, M: Separator<T> + ?Sized>(song: &Waveform<T>, model: &M, cfg: &InferenceConfig) -> Result<Waveform<T>> {
    cfg.validate()?;
    song.validate()?;
    let (seg, overlap) = cfg.fader_samples(song.sample_rate)?;
    let plan = fader_segment_weights(song.len(), seg, overlap);
    let bounds: Vec<(usize, usize)> = plan.iter().map(|(b, _)| *b).collect();
    let outs = run_segments(song, model, &bounds)?;
    let mut acc = Array2::<T>::zeros(song.samples.raw_dim());
    for (((s, e), w), out) in plan.iter().zip(&outs) {
        let mut dst = acc.slice_axis_mut(Axis(1), Slice::from(*s..*e));
        for (mut d, o) in dst.outer_iter_mut().zip(out.samples.outer_iter()) {
            for ((d, &o), &w) in d.iter_mut().zip(o.iter()).zip(w) {
                *d += o * T::of(w);
            }
        }
    }
    Waveform::new(acc, song.sample_rate)
}

pub fn separate_song<T: Scalar, M: Separator<T> + ?Sized>(song: &Waveform<T>, model: &M, cfg: &InferenceConfig) -> Result<Waveform<T>> {
    match cfg.method {
        Method::Ola => separate_ola(song, model, cfg),
        Method::Fader => separate_fader(song, model, cfg),
    }
}
