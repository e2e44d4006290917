//! Waveform and frame preprocessing: log-magnitude STFT, source mixing and
//! side-by-side frame concatenation for multi-source scenes.

use ndarray::{s, Array2, Array3, Axis};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{invalid, Result};

pub const SAMPLE_RATE: u32 = 22050;
pub const CLIP_SECONDS: f64 = 3.0;
pub const FFT_SIZE: usize = 512;
pub const WINDOW_MS: f64 = 50.0;
pub const HOP_MS: f64 = 25.0;
pub const FLOOR_EPS: f64 = 1e-5;
/// Side length of a single video frame in pixels.
pub const FRAME_SIZE: usize = 224;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return invalid("sample rate must be positive");
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return invalid(format!("waveform sample {i} is not finite"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    /// `amplitude · sin(2π·freq·t + phase)` sampled for `seconds`.
    pub fn tone(freq_hz: f64, amplitude: f64, phase: f64, sample_rate: u32, seconds: f64) -> Self {
        let len = (sample_rate as f64 * seconds).round() as usize;
        let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate as f64;
        let samples = (0..len)
            .map(|n| amplitude * (w * n as f64 + phase).sin())
            .collect();
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftParams {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub floor_eps: f64,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            window_ms: WINDOW_MS,
            hop_ms: HOP_MS,
            fft_size: FFT_SIZE,
            floor_eps: FLOOR_EPS,
        }
    }
}

impl StftParams {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    /// Number of frames produced for a signal of `len` samples (no padding).
    pub fn frames(&self, len: usize, sample_rate: u32) -> Option<usize> {
        let win = self.window_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        (len >= win && hop > 0).then(|| (len - win) / hop + 1)
    }
}

/// `F×T` log-magnitude spectrogram; rows are frequency bins.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSpectrogram {
    pub values: Array2<f64>,
    pub params: StftParams,
    pub sample_rate: u32,
}

impl LogSpectrogram {
    pub fn freq_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Hann-windowed STFT without padding, `ln(max(|X|, floor_eps))`.
///
/// When the window is longer than `fft_size` each windowed frame is folded
/// modulo `fft_size` before the transform, so bin `k` is the frame's DTFT
/// sampled exactly at `k·sample_rate/fft_size` Hz.
pub fn stft_log_spectrogram(wave: &Waveform, params: StftParams) -> Result<LogSpectrogram> {
    if !(params.floor_eps > 0.0) {
        return invalid("floor_eps must be positive");
    }
    if params.fft_size < 2 {
        return invalid("fft_size must be at least 2");
    }
    let sr = wave.sample_rate();
    let win = params.window_samples(sr);
    let hop = params.hop_samples(sr);
    if win == 0 || hop == 0 {
        return invalid("window and hop must span at least one sample");
    }
    let Some(frames) = params.frames(wave.len(), sr) else {
        return invalid(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            wave.len()
        ));
    };
    let n = params.fft_size;
    let bins = n / 2 + 1;
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut values = Array2::zeros((bins, frames));
    let x = wave.samples();
    for t in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        let start = t * hop;
        for (i, w) in window.iter().enumerate() {
            buf[i % n].re += x[start + i] * w;
        }
        fft.process(&mut buf);
        for f in 0..bins {
            values[[f, t]] = buf[f].norm().max(params.floor_eps).ln();
        }
    }
    Ok(LogSpectrogram {
        values,
        params,
        sample_rate: sr,
    })
}

/// Sample-wise sum. No clipping or renormalization.
pub fn mix_waveforms(waves: &[Waveform]) -> Result<Waveform> {
    let Some(first) = waves.first() else {
        return invalid("cannot mix an empty list of waveforms");
    };
    if let Some(w) = waves
        .iter()
        .find(|w| w.len() != first.len() || w.sample_rate() != first.sample_rate())
    {
        return invalid(format!(
            "mismatched waveforms: {} samples @ {} Hz vs {} samples @ {} Hz",
            first.len(),
            first.sample_rate(),
            w.len(),
            w.sample_rate()
        ));
    }
    let mut out = vec![0.0; first.len()];
    for w in waves {
        for (o, s) in out.iter_mut().zip(w.samples()) {
            *o += s;
        }
    }
    Ok(Waveform {
        samples: out,
        sample_rate: first.sample_rate(),
    })
}

/// RGB frame with values in `[0, 1]`, stored `height × width × channel`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Self {
        Self { pixels }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            pixels: Array3::from_elem((height, width, 3), value),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Places `right` to the right of `left`. Both must be `FRAME_SIZE` tall
/// with widths that are multiples of `FRAME_SIZE`, so chaining builds
/// `224·N × 224` scenes left to right.
pub fn concat_frames(left: &Image, right: &Image) -> Result<Image> {
    for (name, img) in [("left", left), ("right", right)] {
        if img.height() != FRAME_SIZE || img.width() == 0 || img.width() % FRAME_SIZE != 0 {
            return invalid(format!(
                "{name} frame is {}×{} (width×height); expected height {FRAME_SIZE} and width a multiple of {FRAME_SIZE}",
                img.width(),
                img.height()
            ));
        }
    }
    if left.channels() != right.channels() {
        return invalid(format!(
            "channel mismatch: {} vs {}",
            left.channels(),
            right.channels()
        ));
    }
    let pixels = ndarray::concatenate(Axis(1), &[left.pixels.view(), right.pixels.view()])
        .map_err(|e| crate::Error::InvalidInput(e.to_string()))?;
    Ok(Image { pixels })
}

/// Columns `[x0, x0 + width)` of a frame.
pub fn crop_columns(img: &Image, x0: usize, width: usize) -> Image {
    Image {
        pixels: img.pixels.slice(s![.., x0..x0 + width, ..]).to_owned(),
    }
}
