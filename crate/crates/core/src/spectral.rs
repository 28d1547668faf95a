//! Short-time Fourier transform with centered framing and window-sum normalized resynthesis.

use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

/// Multichannel time-domain signal, `[channels, length]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    pub samples: Array2<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Array2<T>, sample_rate: u32) -> Result<Self> {
        let w = Self {
            samples,
            sample_rate,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn zeros(channels: usize, length: usize, sample_rate: u32) -> Self {
        Self {
            samples: Array2::zeros((channels, length)),
            sample_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if !(1..=2).contains(&c) {
            return Err(Error::Shape(format!("waveform must have 1 or 2 channels, got {c}")));
        }
        if self.samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seconds(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Samples `[start, end)` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            samples: self
                .samples
                .slice(ndarray::s![.., start..end])
                .to_owned(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn energy(&self) -> T {
        self.samples.iter().map(|&x| x * x).sum()
    }
}

/// Analysis frame geometry shared by the forward and inverse transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameParams {
    pub window_size: usize,
    pub hop: usize,
}

impl FrameParams {
    pub const fn new(window_size: usize, hop: usize) -> Self {
        Self { window_size, hop }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 || self.window_size % 2 != 0 {
            return Err(Error::FrameParams(format!(
                "window size must be even and >= 2, got {}",
                self.window_size
            )));
        }
        if self.hop == 0 || self.hop > self.window_size {
            return Err(Error::FrameParams(format!(
                "hop must be in (0, {}], got {}",
                self.window_size, self.hop
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Number of centered frames for a signal of `length` samples.
    pub fn n_frames(&self, length: usize) -> usize {
        1 + length / self.hop
    }
}

impl Default for FrameParams {
    fn default() -> Self {
        Self::new(2048, 512)
    }
}

/// Complex STFT, `[channels, bins, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<T> {
    pub values: Array3<Complex<T>>,
    pub frame: FrameParams,
    pub sample_rate: u32,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn zeros(channels: usize, frames: usize, frame: FrameParams, sample_rate: u32) -> Self {
        Self {
            values: Array3::from_elem((channels, frame.n_bins(), frames), Complex::new(T::zero(), T::zero())),
            frame,
            sample_rate,
        }
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_bins(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        if self.n_bins() != self.frame.n_bins() {
            return Err(Error::Shape(format!(
                "spectrogram has {} bins, window {} implies {}",
                self.n_bins(),
                self.frame.window_size,
                self.frame.n_bins()
            )));
        }
        if self.n_frames() == 0 {
            return Err(Error::Shape("spectrogram has no frames".into()));
        }
        if self.values.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("spectrogram"));
        }
        Ok(())
    }
}

/// Periodic Hann window.
pub fn hann_window<T: Scalar>(size: usize) -> Vec<T> {
    let n = T::of_usize(size);
    (0..size)
        .map(|i| {
            let phase = T::of(2.0) * T::PI() * T::of_usize(i) / n;
            T::of(0.5) - T::of(0.5) * phase.cos()
        })
        .collect()
}

/// Reusable forward/inverse transform pair for one frame geometry.
pub struct Stft<T: Scalar> {
    frame: FrameParams,
    window: Vec<T>,
    forward: Arc<dyn RealToComplex<T>>,
    inverse: Arc<dyn ComplexToReal<T>>,
}

impl<T: Scalar> std::fmt::Debug for Stft<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("frame", &self.frame).finish()
    }
}

impl<T: Scalar> Stft<T> {
    pub fn new(frame: FrameParams) -> Result<Self> {
        frame.validate()?;
        let mut planner = RealFftPlanner::<T>::new();
        Ok(Self {
            frame,
            window: hann_window(frame.window_size),
            forward: planner.plan_fft_forward(frame.window_size),
            inverse: planner.plan_fft_inverse(frame.window_size),
        })
    }

    pub fn frame(&self) -> FrameParams {
        self.frame
    }

    pub fn window(&self) -> &[T] {
        &self.window
    }

    /// Centered forward transform. Signals longer than half a window are reflection padded,
    /// shorter ones zero padded.
    pub fn forward(&self, w: &Waveform<T>) -> Result<ComplexSpectrogram<T>> {
        w.validate()?;
        if w.is_empty() {
            return Err(Error::Shape("cannot transform an empty waveform".into()));
        }
        let n = self.frame.window_size;
        let hop = self.frame.hop;
        let frames = self.frame.n_frames(w.len());
        let mut out = ComplexSpectrogram::zeros(w.channels(), frames, self.frame, w.sample_rate);
        let mut buf = self.forward.make_input_vec();
        let mut spec = self.forward.make_output_vec();
        let mut scratch = self.forward.make_scratch_vec();
        for (c, channel) in w.samples.axis_iter(Axis(0)).enumerate() {
            let padded = center_pad(channel.to_vec(), n / 2);
            for t in 0..frames {
                let start = t * hop;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = padded[start + i] * self.window[i];
                }
                self.forward
                    .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                    .map_err(|e| Error::FrameParams(e.to_string()))?;
                for (k, z) in spec.iter().enumerate() {
                    out.values[[c, k, t]] = *z;
                }
            }
        }
        Ok(out)
    }

    /// Inverse transform trimmed or zero-extended to exactly `target_length` samples.
    pub fn inverse(&self, s: &ComplexSpectrogram<T>, target_length: usize) -> Result<Waveform<T>> {
        self.check_compatible(s)?;
        let n = self.frame.window_size;
        let hop = self.frame.hop;
        let frames = s.n_frames();
        let padded_len = (frames - 1) * hop + n;
        let wsum = self.window_sum(frames);
        self.check_nola(&wsum, target_length)?;
        let norm = T::one() / T::of_usize(n);
        let mut out = Array2::zeros((s.channels(), target_length));
        let mut spec = self.inverse.make_input_vec();
        let mut buf = self.inverse.make_output_vec();
        let mut scratch = self.inverse.make_scratch_vec();
        let mut acc = vec![T::zero(); padded_len];
        for c in 0..s.channels() {
            acc.iter_mut().for_each(|a| *a = T::zero());
            for t in 0..frames {
                for (k, z) in spec.iter_mut().enumerate() {
                    *z = s.values[[c, k, t]];
                }
                spec[0].im = T::zero();
                spec[n / 2].im = T::zero();
                self.inverse
                    .process_with_scratch(&mut spec, &mut buf, &mut scratch)
                    .map_err(|e| Error::FrameParams(e.to_string()))?;
                let start = t * hop;
                for i in 0..n {
                    acc[start + i] = acc[start + i] + buf[i] * norm * self.window[i];
                }
            }
            for m in 0..target_length {
                let p = m + n / 2;
                if p < padded_len {
                    out[[c, m]] = acc[p] / wsum[p];
                }
            }
        }
        Ok(Waveform {
            samples: out,
            sample_rate: s.sample_rate,
        })
    }

    /// Adjoint of [`Stft::inverse`]: maps a gradient on the output samples to gradients on the
    /// real and imaginary parts of every bin.
    pub fn inverse_adjoint(&self, grad: &Array2<T>, frames: usize) -> Result<Array3<Complex<T>>> {
        let n = self.frame.window_size;
        let hop = self.frame.hop;
        let target_length = grad.ncols();
        let padded_len = (frames - 1) * hop + n;
        let wsum = self.window_sum(frames);
        self.check_nola(&wsum, target_length)?;
        let bins = self.frame.n_bins();
        let inv_n = T::one() / T::of_usize(n);
        let mut out = Array3::from_elem((grad.nrows(), bins, frames), Complex::new(T::zero(), T::zero()));
        let mut gpad = vec![T::zero(); padded_len];
        let mut buf = self.forward.make_input_vec();
        let mut spec = self.forward.make_output_vec();
        let mut scratch = self.forward.make_scratch_vec();
        for c in 0..grad.nrows() {
            gpad.iter_mut().for_each(|g| *g = T::zero());
            for m in 0..target_length {
                let p = m + n / 2;
                if p < padded_len {
                    gpad[p] = grad[[c, m]] / wsum[p];
                }
            }
            for t in 0..frames {
                let start = t * hop;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = gpad[start + i] * self.window[i];
                }
                self.forward
                    .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                    .map_err(|e| Error::FrameParams(e.to_string()))?;
                for (k, z) in spec.iter().enumerate() {
                    let weight = if k == 0 || k == n / 2 { inv_n } else { T::of(2.0) * inv_n };
                    out[[c, k, t]] = Complex::new(z.re * weight, if k == 0 || k == n / 2 { T::zero() } else { z.im * weight });
                }
            }
        }
        Ok(out)
    }

    /// Sum of squared windows at every padded sample position.
    pub fn window_sum(&self, frames: usize) -> Vec<T> {
        let n = self.frame.window_size;
        let mut wsum = vec![T::zero(); (frames - 1) * self.frame.hop + n];
        for t in 0..frames {
            let start = t * self.frame.hop;
            for i in 0..n {
                wsum[start + i] = wsum[start + i] + self.window[i] * self.window[i];
            }
        }
        wsum
    }

    fn check_compatible(&self, s: &ComplexSpectrogram<T>) -> Result<()> {
        if s.frame != self.frame {
            return Err(Error::FrameParams(format!(
                "spectrogram framed with {:?}, transform expects {:?}",
                s.frame, self.frame
            )));
        }
        s.validate()
    }

    fn check_nola(&self, wsum: &[T], target_length: usize) -> Result<()> {
        let n = self.frame.window_size;
        let covered = target_length.min(wsum.len().saturating_sub(n / 2));
        let floor = T::of(1e-10);
        if let Some(m) = (0..covered).find(|&m| wsum[m + n / 2] < floor) {
            return Err(Error::Cola(format!(
                "window {} with hop {} leaves output sample {m} without synthesis weight",
                n, self.frame.hop
            )));
        }
        Ok(())
    }
}

fn center_pad<T: Scalar>(x: Vec<T>, pad: usize) -> Vec<T> {
    let len = x.len();
    let mut out = Vec::with_capacity(len + 2 * pad);
    if len > pad {
        out.extend((1..=pad).rev().map(|i| x[i]));
        out.extend_from_slice(&x);
        out.extend((0..pad).map(|i| x[len - 2 - i]));
    } else {
        out.extend(std::iter::repeat(T::zero()).take(pad));
        out.extend_from_slice(&x);
        out.extend(std::iter::repeat(T::zero()).take(pad));
    }
    out
}

/// Forward STFT with a fresh plan.
pub fn stft<T: Scalar>(w: &Waveform<T>, window_size: usize, hop: usize) -> Result<ComplexSpectrogram<T>> {
    Stft::new(FrameParams::new(window_size, hop))?.forward(w)
}

/// Inverse STFT with a fresh plan.
pub fn istft<T: Scalar>(s: &ComplexSpectrogram<T>, target_length: usize) -> Result<Waveform<T>> {
    Stft::new(s.frame)?.inverse(s, target_length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(channels: usize, len: usize, seed: u64) -> Waveform<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(Array2::from_shape_fn((channels, len), |_| rng.gen_range(-1.0..1.0)), 44_100).unwrap()
    }

    #[test]
    fn frame_count_matches_hand_framing() {
        // hand-framed oracle: count frame starts t*hop over a padded signal of length L + W
        let frame = FrameParams::new(2048, 512);
        for len in [2048usize, 2049, 4000, 132_300] {
            let padded = len + 2048;
            let mut count = 0;
            let mut start = 0;
            while start + 2048 <= padded {
                count += 1;
                start += 512;
            }
            assert_eq!(frame.n_frames(len), count, "len {len}");
        }
        let s = stft(&noise(2, 3 * 44_100, 1), 2048, 512).unwrap();
        assert_eq!((s.channels(), s.n_bins(), s.n_frames()), (2, 1025, 259));
    }

    #[test]
    fn large_window_bins() {
        let s = stft(&noise(1, 8192, 2), 4096, 1024).unwrap();
        assert_eq!(s.n_bins(), 2049);
    }

    #[test]
    fn zeros_in_zeros_out() {
        let w = Waveform::<f64>::zeros(2, 5000, 44_100);
        let s = stft(&w, 2048, 512).unwrap();
        assert!(s.values.iter().all(|z| z.re == 0.0 && z.im == 0.0));
        let back = istft(&s, 5000).unwrap();
        assert!(back.samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn round_trip_both_geometries() {
        for (n, hop, len) in [(2048, 512, 30_000), (4096, 1024, 44_100)] {
            let w = noise(1, len, 3);
            let s = stft(&w, n, hop).unwrap();
            let back = istft(&s, len).unwrap();
            let err = (&back.samples - &w.samples).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(err < 1e-6, "({n},{hop}) err {err}");
        }
    }

    #[test]
    fn short_signal_round_trip() {
        let w = noise(2, 700, 4);
        let s = stft(&w, 2048, 512).unwrap();
        let back = istft(&s, 700).unwrap();
        let err = (&back.samples - &w.samples).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err < 1e-9);
    }

    #[test]
    fn rejects_non_finite_and_bad_frames() {
        let mut w = noise(1, 4096, 5);
        w.samples[[0, 10]] = f64::NAN;
        assert!(matches!(stft(&w, 2048, 512), Err(Error::NonFinite(_))));
        let w = noise(1, 4096, 5);
        assert!(stft(&w, 2047, 512).is_err());
        assert!(stft(&w, 2048, 0).is_err());
        assert!(stft(&w, 2048, 4096).is_err());
    }

    #[test]
    fn rejects_cola_violation() {
        // hop == window leaves the zeros of the periodic Hann window uncovered
        let w = noise(1, 8192, 6);
        let s = stft(&w, 256, 256).unwrap();
        assert!(matches!(istft(&s, 8192), Err(Error::Cola(_))));
    }

    #[test]
    fn linearity() {
        let a = noise(2, 9000, 7);
        let b = noise(2, 9000, 8);
        let mix = Waveform::new(&a.samples * 0.3 + &b.samples * -1.7, 44_100).unwrap();
        let sa = stft(&a, 2048, 512).unwrap();
        let sb = stft(&b, 2048, 512).unwrap();
        let sm = stft(&mix, 2048, 512).unwrap();
        let expected = sa.values.mapv(|z| z * 0.3) + sb.values.mapv(|z| z * -1.7);
        let err = (&sm.values - &expected).iter().fold(0.0f64, |m, z| m.max(z.norm()));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn parseval_with_window_scaling() {
        // Hann^2 summed at hop W/4 is 1.5 in the interior; taper the signal so edges carry no energy
        let len = 40_000;
        let mut w = noise(1, len, 9);
        for i in 0..len {
            let edge = (i.min(len - 1 - i) as f64 / 4096.0).min(1.0);
            w.samples[[0, i]] *= if i < 2048 || len - 1 - i < 2048 { 0.0 } else { edge };
        }
        let s = stft(&w, 2048, 512).unwrap();
        let n = 2048.0;
        let spectral: f64 = s
            .values
            .indexed_iter()
            .map(|((_, k, _), z)| {
                let c = if k == 0 || k == 1024 { 1.0 } else { 2.0 };
                c * z.norm_sqr() / n
            })
            .sum();
        let temporal = 1.5 * w.energy();
        assert!(((spectral - temporal) / temporal).abs() < 1e-4);
    }

    #[test]
    fn adjoint_identity() {
        // <istft(S), g> == <S, istft_adjoint(g)> with the real inner product on (re, im)
        let plan = Stft::<f64>::new(FrameParams::new(32, 8)).unwrap();
        let w = noise(2, 300, 10);
        let s = plan.forward(&w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut perturbed = s.clone();
        perturbed.values.mapv_inplace(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let g = Array2::from_shape_fn((2, 290), |_| rng.gen_range(-1.0..1.0));
        let y = plan.inverse(&perturbed, 290).unwrap();
        let lhs: f64 = (&y.samples * &g).sum();
        let adj = plan.inverse_adjoint(&g, s.n_frames()).unwrap();
        let rhs: f64 = perturbed
            .values
            .iter()
            .zip(adj.iter())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
