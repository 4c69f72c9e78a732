//! Seeded multi-species accelerometer-like data built from a small library
//! of parametric motion motifs.
//!
//! Every class of every species is one motif. Motifs listed under several
//! species are the behaviours those species share; each species then bends
//! the shared waveform with its own amplitude scale, frequency shift, axis
//! rotation and offset.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SampleWindow, SpeciesInfo};
use crate::error::{Error, Result};
use crate::ingest::{build_dataset, IngestReport};
use crate::preprocess::{window_len, RawRecording, DEFAULT_TARGET_LEN};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Sinusoid,
    Square,
    /// Oscillation whose envelope decays and restarts every `1 / burst_hz`.
    Damped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Motif {
    pub name: String,
    pub family: Family,
    pub freq_hz: f64,
    pub amplitude: f64,
    /// Per-axis gain applied to the waveform.
    pub gains: [f64; 3],
    /// Static per-axis component (posture).
    pub offset: [f64; 3],
    /// Second harmonic relative amplitude.
    #[serde(default)]
    pub harmonic: f64,
    /// Envelope decay rate for the damped family, per second.
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_burst")]
    pub burst_hz: f64,
}

fn default_decay() -> f64 {
    3.0
}

fn default_burst() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticClass {
    pub name: String,
    /// Index into the motif library.
    pub motif: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpecies {
    pub name: String,
    pub sampling_rate_hz: f64,
    pub classes: Vec<SyntheticClass>,
    #[serde(default = "one")]
    pub amplitude_scale: f64,
    #[serde(default = "one")]
    pub freq_scale: f64,
    /// Rotation of the x/y axes about z, in degrees.
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub offset: [f64; 3],
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub window_seconds: f64,
    pub windows_per_class: usize,
    pub subjects_per_species: usize,
    pub noise_std: f64,
    /// Relative frequency jitter per window, uniform in `±freq_jitter`.
    pub freq_jitter: f64,
    /// Relative amplitude jitter per window, uniform in `±amp_jitter`.
    pub amp_jitter: f64,
    /// Draw a uniform phase per window instead of starting at zero.
    pub random_phase: bool,
    pub motifs: Vec<Motif>,
    pub species: Vec<SyntheticSpecies>,
}

fn motif(name: &str, family: Family, freq_hz: f64, amplitude: f64, gains: [f64; 3], offset: [f64; 3]) -> Motif {
    Motif {
        name: name.into(),
        family,
        freq_hz,
        amplitude,
        gains,
        offset,
        harmonic: 0.0,
        decay: default_decay(),
        burst_hz: default_burst(),
    }
}

fn classes(list: &[(&str, usize)]) -> Vec<SyntheticClass> {
    list.iter()
        .map(|&(name, motif)| SyntheticClass {
            name: name.into(),
            motif,
        })
        .collect()
}

impl Default for SyntheticSpec {
    /// Three species at 100, 12.5 and 25 Hz. Grazing, standing and walking
    /// motifs are shared; galloping and trotting are horse-only; ruminating
    /// and salting are cattle-only.
    fn default() -> Self {
        let mut grazing = motif("grazing", Family::Damped, 1.6, 0.4, [0.4, 0.3, 1.0], [0.1, 0.0, 0.3]);
        grazing.burst_hz = 0.8;
        let standing = motif(
            "standing",
            Family::Sinusoid,
            0.7,
            0.25,
            [1.0, 0.5, 0.5],
            [0.0, 0.1, 0.4],
        );
        let mut walking = motif(
            "walking",
            Family::Sinusoid,
            1.2,
            0.35,
            [0.6, 0.4, 1.0],
            [0.0, 0.0, 0.35],
        );
        walking.harmonic = 0.5;
        let galloping = motif("galloping", Family::Square, 3.0, 1.5, [1.0, 0.4, 1.0], [0.0, 0.0, 0.8]);
        let trotting = motif("trotting", Family::Sinusoid, 2.0, 1.0, [0.3, 1.0, 0.4], [0.0, 0.5, 0.9]);
        let ruminating = motif(
            "ruminating",
            Family::Sinusoid,
            1.0,
            0.3,
            [0.0, 1.0, 0.0],
            [0.6, 0.0, 0.9],
        );
        let salting = motif("salting", Family::Square, 0.5, 0.5, [0.2, 0.2, 1.0], [-0.7, 0.0, -0.3]);
        SyntheticSpec {
            seed: 7,
            window_seconds: 2.0,
            windows_per_class: 200,
            subjects_per_species: 4,
            noise_std: 0.35,
            freq_jitter: 0.2,
            amp_jitter: 0.3,
            random_phase: true,
            motifs: vec![grazing, standing, walking, galloping, trotting, ruminating, salting],
            species: vec![
                SyntheticSpecies {
                    name: "horse".into(),
                    sampling_rate_hz: 100.0,
                    classes: classes(&[
                        ("grazing", 0),
                        ("galloping", 3),
                        ("standing", 1),
                        ("trotting", 4),
                        ("walking", 2),
                    ]),
                    amplitude_scale: 1.0,
                    freq_scale: 1.0,
                    rotation_deg: 0.0,
                    offset: [0.0; 3],
                },
                SyntheticSpecies {
                    name: "sheep".into(),
                    sampling_rate_hz: 12.5,
                    classes: classes(&[("grazing", 0), ("active", 2), ("inactive", 1)]),
                    amplitude_scale: 0.5,
                    freq_scale: 1.25,
                    rotation_deg: 35.0,
                    offset: [0.3, -0.3, 0.2],
                },
                SyntheticSpecies {
                    name: "cattle".into(),
                    sampling_rate_hz: 25.0,
                    classes: classes(&[
                        ("grazing", 0),
                        ("moving", 2),
                        ("resting", 1),
                        ("ruminating", 5),
                        ("salting", 6),
                    ]),
                    amplitude_scale: 1.6,
                    freq_scale: 0.8,
                    rotation_deg: -30.0,
                    offset: [-0.3, 0.3, 0.3],
                },
            ],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.species.is_empty() {
            return bad("no species".into());
        }
        if self.windows_per_class == 0 {
            return bad("windows_per_class must be positive".into());
        }
        if self.subjects_per_species == 0 {
            return bad("subjects_per_species must be positive".into());
        }
        if !(self.noise_std >= 0.0) || !(self.freq_jitter >= 0.0) || !(self.amp_jitter >= 0.0) {
            return bad("noise and jitter must be non-negative".into());
        }
        for sp in &self.species {
            if sp.classes.is_empty() {
                return bad(format!("species {} has no classes", sp.name));
            }
            if window_len(sp.sampling_rate_hz, self.window_seconds) < 2 {
                return bad(format!("species {} windows are shorter than 2 samples", sp.name));
            }
            if let Some(c) = sp.classes.iter().find(|c| c.motif >= self.motifs.len()) {
                return bad(format!("class {} refers to missing motif {}", c.name, c.motif));
            }
        }
        Ok(())
    }

    pub fn species_info(&self) -> Vec<SpeciesInfo> {
        self.species
            .iter()
            .map(|s| SpeciesInfo {
                name: s.name.clone(),
                sampling_rate_hz: s.sampling_rate_hz,
                classes: s.classes.iter().map(|c| c.name.clone()).collect(),
            })
            .collect()
    }

    /// Motif indices used by at least two species.
    pub fn shared_motifs(&self) -> Vec<usize> {
        (0..self.motifs.len())
            .filter(|&m| {
                self.species
                    .iter()
                    .filter(|s| s.classes.iter().any(|c| c.motif == m))
                    .count()
                    >= 2
            })
            .collect()
    }
}

fn waveform(m: &Motif, phase: f64, t: f64, freq: f64) -> f64 {
    let arg = 2.0 * PI * freq * t + phase;
    let base = match m.family {
        Family::Sinusoid => arg.sin(),
        Family::Square => {
            let s = arg.sin();
            if s >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        Family::Damped => {
            let period = 1.0 / m.burst_hz;
            let shift = phase / (2.0 * PI) * period;
            let local = (t + shift).rem_euclid(period);
            (-m.decay * local).exp() * (2.0 * PI * freq * local).sin()
        }
    };
    base + m.harmonic * (2.0 * arg).sin()
}

/// Samples of one window, `[x.., y.., z..]`, before noise.
fn render(
    spec: &SyntheticSpec,
    sp: &SyntheticSpecies,
    m: &Motif,
    n: usize,
    rng: &mut crate::rng::Rng,
) -> [Vec<f64>; 3] {
    let jitter = |rng: &mut crate::rng::Rng, width: f64| {
        if width > 0.0 {
            1.0 + rng.random_range(-width..=width)
        } else {
            1.0
        }
    };
    let freq = m.freq_hz * sp.freq_scale * jitter(rng, spec.freq_jitter);
    let amp = m.amplitude * sp.amplitude_scale * jitter(rng, spec.amp_jitter);
    let phase = if spec.random_phase {
        rng.random_range(0.0..2.0 * PI)
    } else {
        0.0
    };
    let (sin_r, cos_r) = sp.rotation_deg.to_radians().sin_cos();
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let t = i as f64 / sp.sampling_rate_hz;
        let w = waveform(m, phase, t, freq);
        let v: [f64; 3] = std::array::from_fn(|a| m.offset[a] + amp * m.gains[a] * w);
        out[0][i] = cos_r * v[0] - sin_r * v[1] + sp.offset[0];
        out[1][i] = sin_r * v[0] + cos_r * v[1] + sp.offset[1];
        out[2][i] = v[2] + sp.offset[2];
    }
    out
}

/// One recording per subject; windows of all classes are dealt to subjects
/// round-robin and concatenated in a seeded order, aligned to window
/// boundaries so windowing recovers them exactly.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<RawRecording>> {
    spec.validate()?;
    let mut recordings = Vec::new();
    for (s, sp) in spec.species.iter().enumerate() {
        let n = window_len(sp.sampling_rate_hz, spec.window_seconds);
        let mut rng = seeded(derive_seed(spec.seed, &[s as u64]));
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut items: Vec<(usize, [Vec<f64>; 3])> = Vec::new();
        for (c, class) in sp.classes.iter().enumerate() {
            let m = &spec.motifs[class.motif];
            for _ in 0..spec.windows_per_class {
                let mut w = render(spec, sp, m, n, &mut rng);
                if spec.noise_std > 0.0 {
                    for v in w.iter_mut().flatten() {
                        *v += noise.sample(&mut rng);
                    }
                }
                items.push((c, w));
            }
        }
        items.shuffle(&mut rng);
        let mut subjects: Vec<RawRecording> = (0..spec.subjects_per_species)
            .map(|j| RawRecording {
                species: s,
                sampling_rate_hz: sp.sampling_rate_hz,
                channels: [Vec::new(), Vec::new(), Vec::new()],
                labels: Vec::new(),
                subject: format!("{}-{j}", sp.name),
            })
            .collect();
        for (i, (c, w)) in items.into_iter().enumerate() {
            let rec = &mut subjects[i % spec.subjects_per_species];
            for (dst, src) in rec.channels.iter_mut().zip(w) {
                dst.extend(src);
            }
            rec.labels.extend(std::iter::repeat_n(Some(c), n));
        }
        recordings.extend(subjects.into_iter().filter(|r| !r.is_empty()));
    }
    Ok(recordings)
}

/// Generates, windows and resamples in one go.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<(Dataset, IngestReport)> {
    let recordings = generate(spec)?;
    let info = spec.species_info();
    let report = IngestReport::for_species(&info);
    build_dataset(info, &recordings, spec.window_seconds, DEFAULT_TARGET_LEN, report)
}

/// Stratified per-class subsample of `windows` keeping `round(fraction * n_c)`
/// members of each class. Subsets for smaller fractions are prefixes of the
/// same seeded permutation, so they nest inside those for larger ones.
pub fn scarcity_view<'a>(
    windows: &[&'a SampleWindow],
    num_classes: usize,
    fraction: f64,
    species: usize,
    seed: u64,
) -> Result<Vec<&'a SampleWindow>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} must lie in (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok(windows.to_vec());
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, w) in windows.iter().enumerate() {
        if w.label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: w.label,
                classes: num_classes,
            });
        }
        by_class[w.label].push(i);
    }
    let mut keep = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let n = (fraction * members.len() as f64).round() as usize;
        if n == 0 {
            return Err(Error::FractionTooSmall {
                fraction,
                species,
                class: c,
            });
        }
        members.shuffle(&mut seeded(derive_seed(seed, &[species as u64, c as u64])));
        keep.extend_from_slice(&members[..n]);
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| windows[i]).collect())
}
