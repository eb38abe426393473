//! Feature frontend: ASR-side frame stacking and mel min-max normalisation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{io, Tensor};

pub const MEL_DIM: usize = 80;
pub const FRAME_SHIFT_MS: u32 = 10;
pub const WINDOW_MS: u32 = 50;
pub const NORM_LOW: f64 = -4.0;
pub const NORM_HIGH: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelState {
    Raw,
    Normalized,
}

/// `[T × 80]` mel spectrogram tagged with its value domain.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: Tensor,
    state: MelState,
}

impl MelSpectrogram {
    pub fn new(frames: Tensor, state: MelState) -> Result<Self> {
        if frames.rank() != 2 || frames.cols() != MEL_DIM {
            return Err(Error::dim(format!(
                "mel spectrogram must be [T × {MEL_DIM}], got {:?}",
                frames.shape()
            )));
        }
        if state == MelState::Normalized
            && frames
                .data()
                .iter()
                .any(|v| !(NORM_LOW..=NORM_HIGH).contains(v))
        {
            return Err(Error::contract("normalized mel has values outside [-4, 4]"));
        }
        Ok(MelSpectrogram { frames, state })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn state(&self) -> MelState {
        self.state
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Frame stacking: `stack` consecutive frames per output, advancing by `skip`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackSpec {
    pub stack: usize,
    pub skip: usize,
}

impl Default for StackSpec {
    fn default() -> Self {
        StackSpec { stack: 8, skip: 3 }
    }
}

/// Output row `r` concatenates input rows `r·skip … r·skip+stack−1`; indices
/// past the end repeat the last frame. Output length is `ceil(T/skip)`.
pub fn stack_and_skip(x: &Tensor, spec: StackSpec) -> Result<Tensor> {
    if spec.stack == 0 || spec.skip == 0 {
        return Err(Error::contract("stack and skip must both be ≥ 1"));
    }
    if x.rank() != 2 {
        return Err(Error::dim(format!("stack_and_skip needs [T × D], got {:?}", x.shape())));
    }
    let (t, d) = (x.rows(), x.cols());
    let out_len = t.div_ceil(spec.skip);
    let mut out = Vec::with_capacity(out_len * spec.stack * d);
    for r in 0..out_len {
        for s in 0..spec.stack {
            out.extend_from_slice(x.row((r * spec.skip + s).min(t - 1)));
        }
    }
    Tensor::new(vec![out_len, spec.stack * d], out)
}

/// Per-dimension extrema of a training corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != MEL_DIM || max.len() != MEL_DIM {
            return Err(Error::dim("norm stats must have 80 entries per row"));
        }
        for (dim, (lo, hi)) in min.iter().zip(&max).enumerate() {
            if hi <= lo {
                return Err(Error::DegenerateStats { dim, value: *lo });
            }
        }
        Ok(NormStats { min, max })
    }

    /// `[2 × 80]`: row 0 min, row 1 max.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.min.clone();
        data.extend_from_slice(&self.max);
        Tensor::new(vec![2, MEL_DIM], data).expect("fixed shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape() != [2, MEL_DIM] {
            return Err(Error::format(format!(
                "norm stats tensor must be [2 × 80], got {:?}",
                t.shape()
            )));
        }
        NormStats::new(t.row(0).to_vec(), t.row(1).to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::save_tensor(path, &self.to_tensor())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        NormStats::from_tensor(&io::load_tensor(path)?)
    }
}

pub fn fit_norm(corpus: &[MelSpectrogram]) -> Result<NormStats> {
    if corpus.is_empty() {
        return Err(Error::contract("cannot fit normalisation on an empty corpus"));
    }
    let mut min = vec![f64::INFINITY; MEL_DIM];
    let mut max = vec![f64::NEG_INFINITY; MEL_DIM];
    for mel in corpus {
        if mel.state() != MelState::Raw {
            return Err(Error::contract("normalisation must be fitted on raw mels"));
        }
        for row in mel.frames().data().chunks(MEL_DIM) {
            for (d, &v) in row.iter().enumerate() {
                min[d] = min[d].min(v);
                max[d] = max[d].max(v);
            }
        }
    }
    NormStats::new(min, max)
}

/// `y = −4 + 8·(x − min)/(max − min)`, clipped to `[−4, 4]`.
pub fn normalize(x: &MelSpectrogram, stats: &NormStats) -> Result<MelSpectrogram> {
    if x.state() != MelState::Raw {
        return Err(Error::contract("mel is already normalized"));
    }
    let span = NORM_HIGH - NORM_LOW;
    let mut data = x.frames().data().to_vec();
    for row in data.chunks_mut(MEL_DIM) {
        for (d, v) in row.iter_mut().enumerate() {
            let y = NORM_LOW + span * (*v - stats.min[d]) / (stats.max[d] - stats.min[d]);
            *v = y.clamp(NORM_LOW, NORM_HIGH);
        }
    }
    MelSpectrogram::new(
        Tensor::new(x.frames().shape().to_vec(), data)?,
        MelState::Normalized,
    )
}

pub fn denormalize(y: &MelSpectrogram, stats: &NormStats) -> Result<MelSpectrogram> {
    if y.state() != MelState::Normalized {
        return Err(Error::contract("mel is not normalized"));
    }
    let span = NORM_HIGH - NORM_LOW;
    let mut data = y.frames().data().to_vec();
    for row in data.chunks_mut(MEL_DIM) {
        for (d, v) in row.iter_mut().enumerate() {
            *v = stats.min[d] + (*v - NORM_LOW) * (stats.max[d] - stats.min[d]) / span;
        }
    }
    MelSpectrogram::new(Tensor::new(y.frames().shape().to_vec(), data)?, MelState::Raw)
}
