//! Windowing, resampling and input standardization.
//!
//! Recordings of different species arrive at different sampling rates, so a
//! two-second window holds a different number of samples per species. Each
//! window is linearly interpolated onto a common length (50 by default) so
//! one network with fixed kernel sizes can consume all of them.

use serde::{Deserialize, Serialize};

use crate::dataset::SampleWindow;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_WINDOW_SECONDS: f64 = 2.0;
pub const DEFAULT_TARGET_LEN: usize = 50;

/// A continuous tri-axial recording of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub species: usize,
    pub sampling_rate_hz: f64,
    /// x, y, z acceleration, all of equal length.
    pub channels: [Vec<f64>; 3],
    /// Per-timestep class id; `None` for samples outside the class set.
    pub labels: Vec<Option<usize>>,
    pub subject: String,
}

impl RawRecording {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.channels.iter().any(|c| c.len() != self.labels.len()) {
            return Err(Error::InvalidArgument(format!(
                "recording {}: channel and label lengths differ",
                self.subject
            )));
        }
        if !(self.sampling_rate_hz > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "recording {}: sampling rate must be positive",
                self.subject
            )));
        }
        Ok(())
    }
}

/// A window cut from a recording before resampling; `data` is `[1, 3, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    pub data: Tensor,
    pub label: usize,
}

/// Number of samples in a window of `seconds` at `rate_hz`.
pub fn window_len(rate_hz: f64, seconds: f64) -> usize {
    (rate_hz * seconds).round() as usize
}

/// Most frequent label; ties go to the smallest class id, and unlabelled
/// samples only win when strictly more common than every class.
pub fn majority_label(labels: &[Option<usize>]) -> Option<usize> {
    let mut counts: Vec<usize> = Vec::new();
    let mut none = 0;
    for l in labels {
        match l {
            Some(c) => {
                if *c >= counts.len() {
                    counts.resize(c + 1, 0);
                }
                counts[*c] += 1;
            }
            None => none += 1,
        }
    }
    let (best, count) = counts.iter().enumerate().fold(
        (None, 0),
        |(bi, bc), (i, &c)| if c > bc { (Some(i), c) } else { (bi, bc) },
    );
    if none > count {
        None
    } else {
        best
    }
}

/// Cuts `recording` into consecutive non-overlapping windows of
/// `round(seconds * rate)` samples, labelled by majority. Windows whose
/// majority label is missing or `>= num_classes` are dropped; the returned
/// count says how many.
pub fn window(recording: &RawRecording, seconds: f64, num_classes: usize) -> Result<(Vec<RawWindow>, usize)> {
    recording.check()?;
    if recording.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "recording {} is empty",
            recording.subject
        )));
    }
    let len = window_len(recording.sampling_rate_hz, seconds);
    if len == 0 {
        return Err(Error::InvalidArgument(format!(
            "window of {seconds} s at {} Hz has no samples",
            recording.sampling_rate_hz
        )));
    }
    let mut out = Vec::new();
    let mut dropped = 0;
    for start in (0..recording.len()).step_by(len) {
        if start + len > recording.len() {
            break;
        }
        match majority_label(&recording.labels[start..start + len]) {
            Some(label) if label < num_classes => {
                let mut data = Vec::with_capacity(3 * len);
                for ch in &recording.channels {
                    data.extend_from_slice(&ch[start..start + len]);
                }
                out.push(RawWindow {
                    data: Tensor::new(&[1, 3, len], data)?,
                    label,
                });
            }
            _ => dropped += 1,
        }
    }
    Ok((out, dropped))
}

/// Linear interpolation of each channel onto `target` evenly spaced
/// positions spanning `[0, n-1]`.
pub fn resample(window: &Tensor, target: usize) -> Result<Tensor> {
    let n = match window.shape() {
        [1, 3, n] => *n,
        s => return Err(Error::shape("resample", format!("expected [1,3,n], got {s:?}"))),
    };
    if n < 2 {
        return Err(Error::shape("resample", format!("need at least 2 samples, got {n}")));
    }
    if target < 2 {
        return Err(Error::shape("resample", "target length must be at least 2"));
    }
    let src = window.data();
    let mut out = Vec::with_capacity(3 * target);
    for ch in 0..3 {
        let row = &src[ch * n..(ch + 1) * n];
        for j in 0..target {
            let pos = (j * (n - 1)) as f64 / (target - 1) as f64;
            let i = pos.floor() as usize;
            if i >= n - 1 {
                out.push(row[n - 1]);
            } else {
                let frac = pos - i as f64;
                out.push(row[i] * (1.0 - frac) + row[i + 1] * frac);
            }
        }
    }
    Tensor::new(&[1, 3, target], out)
}

pub fn resample_to_50(window: &Tensor) -> Result<Tensor> {
    resample(window, DEFAULT_TARGET_LEN)
}

/// Counts from turning recordings into windows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub windows: usize,
    pub dropped_windows: usize,
}

/// Windows and resamples a batch of recordings. Output is ordered by
/// recording, then window index.
pub fn recordings_to_windows(
    recordings: &[RawRecording],
    class_counts: &[usize],
    seconds: f64,
    target_len: usize,
) -> Result<(Vec<SampleWindow>, Vec<WindowStats>)> {
    let mut stats = vec![WindowStats::default(); class_counts.len()];
    let mut out = Vec::new();
    for rec in recordings {
        let k = *class_counts
            .get(rec.species)
            .ok_or(Error::UnknownSpecies(rec.species))?;
        let (windows, dropped) = window(rec, seconds, k)?;
        stats[rec.species].dropped_windows += dropped;
        stats[rec.species].windows += windows.len();
        for w in windows {
            out.push(SampleWindow {
                data: resample(&w.data, target_len)?,
                species: rec.species,
                label: w.label,
                subject: rec.subject.clone(),
            });
        }
    }
    Ok((out, stats))
}

/// Per-axis affine standardization fitted on training windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Standardizer {
    fn default() -> Self {
        Standardizer {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Standardizer {
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a SampleWindow>) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0usize;
        let windows: Vec<&SampleWindow> = windows.into_iter().collect();
        for w in &windows {
            for (axis, s) in sum.iter_mut().enumerate() {
                *s += w.channel(axis).iter().sum::<f64>();
            }
            n += w.len();
        }
        if n == 0 {
            return Standardizer::default();
        }
        let mean = sum.map(|s| s / n as f64);
        for w in &windows {
            for (axis, q) in sq.iter_mut().enumerate() {
                *q += w.channel(axis).iter().map(|v| (v - mean[axis]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.map(|q| {
            let s = (q / n as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        });
        Standardizer { mean, std }
    }

    /// Standardizes a `[.., 3, w]`-laid-out buffer in place.
    pub fn apply(&self, data: &mut [f64], width: usize) {
        for (i, chunk) in data.chunks_exact_mut(width).enumerate() {
            let axis = i % 3;
            chunk
                .iter_mut()
                .for_each(|v| *v = (*v - self.mean[axis]) / self.std[axis]);
        }
    }
}
