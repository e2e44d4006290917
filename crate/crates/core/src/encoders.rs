//! Two-stream convolutional encoders.
//!
//! Both streams are a stack of five 2×2 stride-2 convolutions (a stem plus
//! four blocks), so the total downsampling factor is 32 per axis. The visual
//! stream keeps its spatial grid; the audio stream average-pools to a single
//! global vector.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Mat, SpaceToDepthGeom, Var};
use crate::error::{invalid, Result};
use crate::frontend::{Image, LogSpectrogram, FRAME_SIZE};
use crate::params::{normal_mat, Bound, ParamStore};

pub const DOWNSAMPLE: usize = 32;
pub const NUM_STAGES: usize = 5;

/// Stage widths for a given embedding size `dim`.
pub fn default_widths(dim: usize) -> Vec<usize> {
    vec![8, 16, 32, 64.min(dim.max(32)), dim]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder {
    pub prefix: String,
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl ConvEncoder {
    pub fn new(prefix: &str, in_channels: usize, widths: Vec<usize>) -> Self {
        assert_eq!(widths.len(), NUM_STAGES, "encoder needs {NUM_STAGES} stages");
        Self { prefix: prefix.to_string(), in_channels, widths }
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    fn name(&self, stage: usize, what: &str) -> String {
        format!("{}.conv{stage}.{what}", self.prefix)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let mut cin = self.in_channels;
        for (k, &cout) in self.widths.iter().enumerate() {
            let fan_in = 4 * cin;
            let gain = if k + 1 == self.widths.len() { 1.0 } else { 2.0 };
            store.insert(self.name(k, "w"), normal_mat(rng, fan_in, cout, (gain / fan_in as f64).sqrt()));
            store.insert(self.name(k, "b"), Mat::zeros((1, cout)));
            cin = cout;
        }
    }

    /// `input` holds `batch` grids of `height × width` rows (row-major) by
    /// `in_channels` columns. Returns the final grid rows and its size.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        input: Var,
        batch: usize,
        height: usize,
        width: usize,
    ) -> (Var, usize, usize) {
        let (mut x, mut h, mut w, mut c) = (input, height, width, self.in_channels);
        for (k, &cout) in self.widths.iter().enumerate() {
            let geom = SpaceToDepthGeom { batch, height: h, width: w, channels: c };
            let patches = g.space_to_depth(x, geom);
            let lin = g.matmul(patches, p.var(&self.name(k, "w")));
            x = g.add_row(lin, p.var(&self.name(k, "b")));
            if k + 1 < self.widths.len() {
                x = g.relu(x);
            }
            (h, w, c) = (geom.out_height(), geom.out_width(), cout);
        }
        (x, h, w)
    }
}

/// Global audio feature, `1×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeature {
    pub vector: Array2<f64>,
}

/// Spatial visual features, `P×D` with `P = h·w` in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureMap {
    pub features: Array2<f64>,
    pub grid: (usize, usize),
}

/// Spectrogram as a one-channel grid, standardized per spectrogram.
pub fn audio_input(spec: &LogSpectrogram) -> Result<Mat> {
    if spec.values.iter().any(|v| !v.is_finite()) {
        return invalid("spectrogram contains non-finite values");
    }
    let n = spec.values.len() as f64;
    let mean = spec.values.sum() / n;
    let var = spec.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-6);
    let flat: Vec<f64> = spec.values.iter().map(|v| (v - mean) / std).collect();
    Ok(Mat::from_shape_vec((flat.len(), 1), flat).expect("length matches"))
}

/// Frame pixels as `H·W × 3` rows, centred on zero.
pub fn visual_input(img: &Image) -> Result<Mat> {
    validate_frame(img)?;
    let (h, w, c) = img.pixels.dim();
    let flat: Vec<f64> = img.pixels.iter().map(|v| v - 0.5).collect();
    Ok(Mat::from_shape_vec((h * w, c), flat).expect("length matches"))
}

pub fn validate_frame(img: &Image) -> Result<()> {
    if img.height() != FRAME_SIZE || img.width() == 0 || img.width() % FRAME_SIZE != 0 || img.channels() != 3 {
        return invalid(format!(
            "unsupported frame geometry {}×{}×{} (width×height×channels); need height {FRAME_SIZE}, width a multiple of {FRAME_SIZE}, 3 channels",
            img.width(),
            img.height(),
            img.channels()
        ));
    }
    if img.pixels.iter().any(|v| !v.is_finite()) {
        return invalid("frame contains non-finite pixels");
    }
    Ok(())
}

/// Feature grid `(rows, cols)` produced for a frame of the given size.
pub fn visual_grid(height: usize, width: usize) -> (usize, usize) {
    (height / DOWNSAMPLE, width / DOWNSAMPLE)
}

pub fn encode_audio(spec: &LogSpectrogram, enc: &ConvEncoder, store: &ParamStore) -> Result<AudioFeature> {
    let input = audio_input(spec)?;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(input);
    let (y, h, w) = enc.forward(&mut g, &p, x, 1, spec.freq_bins(), spec.frames());
    let pooled = g.group_mean_rows(y, h * w);
    Ok(AudioFeature { vector: g.value(pooled).clone() })
}

pub fn encode_visual(img: &Image, enc: &ConvEncoder, store: &ParamStore) -> Result<VisualFeatureMap> {
    let input = visual_input(img)?;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(input);
    let (y, h, w) = enc.forward(&mut g, &p, x, 1, img.height(), img.width());
    Ok(VisualFeatureMap { features: g.value(y).clone(), grid: (h, w) })
}
