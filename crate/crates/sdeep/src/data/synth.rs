//! Synthetic multispectral time-series corpus with known structure.
//!
//! Six channels in two correlated families, driven by two latent seasonal
//! curves:
//!
//! - `B2`, `B3`, `B4` are affine images of latent `g1`,
//! - `B8`, `NDVI` follow latent `g2`; `NDWI` follows it with a *negative*
//!   coefficient, so correlation grouping must use magnitudes.
//!
//! Class design (up to four classes):
//!
//! - classes 0 and 1 differ only in the sign of `g1`'s seasonal wave — the
//!   `B2/B3/B4` family separates them;
//! - classes 2 and 3 carry a *randomly phased* per-object wave on the
//!   `B2/B3/B4` family (informative for neither) and differ **only** on
//!   `NDWI` (channel 5), where class 3 adds a level lift plus a mid-season
//!   dome — a classifier must attend to that one channel to tell them apart;
//! - the `B8/NDVI` step (present for classes 0 and 1, absent for 2 and 3)
//!   separates the two pairs, so every other pair is easy.
//!
//! Each object draws a per-channel offset shared by its pixels, each cell
//! adds independent noise, and a cloud mask hides all channels of a pixel
//! at ~`cloud_fraction` of timesteps. Ground-truth "relevant channels" per
//! class — the channels distinguishing it from its nearest class — are
//! computed from the noise-free prototypes and returned alongside.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Pixel};

/// Channel names of the synthetic corpus, in channel order.
pub const CHANNELS: [&str; 6] = ["B2", "B3", "B4", "B8", "NDVI", "NDWI"];

/// `(slope, intercept, latent)` per channel; latent 0 is `g1`, 1 is `g2`.
const CHANNEL_MIX: [(f64, f64, usize); 6] = [
    (1.0, 0.0, 0),    // B2
    (0.8, 0.1, 0),    // B3
    (1.2, -0.05, 0),  // B4
    (1.0, 0.0, 1),    // B8
    (0.85, 0.05, 1),  // NDVI
    (-0.7, 0.9, 1),   // NDWI
];

/// Level lift on channel 5 that separates class 3 from class 2.
const CLASS3_NDWI_SHIFT: f64 = 0.30;

/// Mean amplitude of the mean-zero seasonal dome stacked on the lift: class
/// 3's water index swells mid-season, so the hard pair differs in dynamics
/// as well as level — but still on that single channel.
const CLASS3_NDWI_WAVE: f64 = 0.175;

/// Per-object uniform jitter of the dome amplitude. Objects with weak domes
/// sit close to class 2, so the pair stays genuinely hard for a while even
/// once the strong-dome objects are solved. The lift exceeds the worst-case
/// amplitude, keeping class 3 above class 2 at every timestep.
const CLASS3_NDWI_WAVE_JITTER: f64 = 0.075;

/// Seasonal dome shape: `-cos`, rising from the season edges to a mid-season
/// peak, with near-zero mean across the season.
fn dome_shape(t: usize, num_timesteps: usize) -> f64 {
    let tau = t as f64 / (num_timesteps - 1).max(1) as f64;
    -(2.0 * std::f64::consts::PI * tau).cos()
}

/// Amplitude of the randomly-phased seasonal wave classes 2 and 3 carry on
/// the `g1` family (`B2`/`B3`/`B4`). The phase is drawn per object with the
/// same distribution for both classes, so those channels stay useless for
/// telling the hard pair apart — they hold pixel-specific variation a
/// classifier is better off down-weighting.
const RANDOM_PHASE_WAVE: f64 = 0.15;

/// Reflectance floor; generated values are clipped to stay positive.
pub const VALUE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_timesteps")]
    pub num_timesteps: usize,
    #[serde(default = "d_objects")]
    pub objects_per_class: usize,
    #[serde(default = "d_pixels")]
    pub pixels_per_object: usize,
    /// Probability that a (pixel, timestep) is cloud-masked.
    #[serde(default = "d_clouds")]
    pub cloud_fraction: f64,
    /// Standard deviation of independent per-cell noise.
    #[serde(default = "d_noise")]
    pub noise_sd: f64,
    /// Standard deviation of the per-(object, channel) offset.
    #[serde(default = "d_offset")]
    pub object_offset_sd: f64,
}

fn d_classes() -> usize {
    4
}
fn d_timesteps() -> usize {
    21
}
fn d_objects() -> usize {
    200
}
fn d_pixels() -> usize {
    10
}
fn d_clouds() -> f64 {
    0.05
}
fn d_noise() -> f64 {
    0.02
}
fn d_offset() -> f64 {
    0.01
}

impl Default for SynthSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Inconsistent(msg));
        if !(2..=4).contains(&self.num_classes) {
            return bad(format!(
                "num_classes: generator defines 2 to 4 classes, asked for {}",
                self.num_classes
            ));
        }
        if self.num_timesteps < 4 {
            return bad(format!(
                "num_timesteps: need at least 4, asked for {}",
                self.num_timesteps
            ));
        }
        if self.objects_per_class == 0 {
            return bad("objects_per_class: must be positive".into());
        }
        if self.pixels_per_object == 0 {
            return bad("pixels_per_object: must be positive".into());
        }
        if !(0.0..1.0).contains(&self.cloud_fraction) {
            return bad(format!(
                "cloud_fraction: {} not in [0, 1)",
                self.cloud_fraction
            ));
        }
        if self.noise_sd < 0.0 {
            return bad(format!("noise_sd: {} must be non-negative", self.noise_sd));
        }
        if self.object_offset_sd < 0.0 {
            return bad(format!(
                "object_offset_sd: {} must be non-negative",
                self.object_offset_sd
            ));
        }
        Ok(())
    }
}

/// Latent seasonal curves; `tau` runs 0..1 across the season.
fn latents(class: usize, tau: f64) -> (f64, f64) {
    let wave = (2.0 * std::f64::consts::PI * tau).sin();
    let g1 = match class {
        0 => 0.5 + 0.15 * wave,
        1 => 0.5 - 0.15 * wave,
        _ => 0.5,
    };
    let g2 = match class {
        0 | 1 => {
            if tau < 0.5 {
                0.2
            } else {
                0.8
            }
        }
        _ => 0.5,
    };
    (g1, g2)
}

/// Noise-free value of `channel` for `class` at timestep `t`.
pub fn prototype(class: usize, channel: usize, t: usize, num_timesteps: usize) -> f64 {
    let tau = t as f64 / (num_timesteps - 1).max(1) as f64;
    let (g1, g2) = latents(class, tau);
    let (slope, intercept, latent) = CHANNEL_MIX[channel];
    let base = slope * if latent == 0 { g1 } else { g2 } + intercept;
    if class == 3 && channel == 5 {
        base + CLASS3_NDWI_SHIFT + CLASS3_NDWI_WAVE * dome_shape(t, num_timesteps)
    } else {
        base
    }
}

/// A generated corpus plus its ground truth.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    /// `[class][channel][t]` noise-free prototype values.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    /// Per class: the channels that distinguish it from its nearest class.
    pub relevant_channels: BTreeMap<usize, Vec<usize>>,
}

/// Channels on which two prototype rows differ, and their squared distance.
fn class_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let mut total = 0.0;
    let mut channels = Vec::new();
    for c in 0..a.len() {
        let d: f64 = a[c]
            .iter()
            .zip(&b[c])
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        total += d;
        if d > 1e-9 {
            channels.push(c);
        }
    }
    (total, channels)
}

pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthOutput, DataError> {
    spec.validate()?;
    let t_len = spec.num_timesteps;
    let c_len = CHANNELS.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE))
        .expect("finite std dev");
    let offset = Normal::new(0.0, spec.object_offset_sd.max(f64::MIN_POSITIVE))
        .expect("finite std dev");

    let prototypes: Vec<Vec<Vec<f64>>> = (0..spec.num_classes)
        .map(|class| {
            (0..c_len)
                .map(|c| (0..t_len).map(|t| prototype(class, c, t, t_len)).collect())
                .collect()
        })
        .collect();

    let mut pixels = Vec::new();
    let mut pixel_id = 0u64;
    for class in 0..spec.num_classes {
        for o in 0..spec.objects_per_class {
            let object_id = (class * spec.objects_per_class + o) as u64;
            let offsets: Vec<f64> = (0..c_len)
                .map(|_| {
                    if spec.object_offset_sd > 0.0 {
                        offset.sample(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect();
            // every object draws a dome deviation and a wave phase to keep
            // the stream layout uniform; the dome deviation only reaches
            // class 3's water index, the phase only classes 2 and 3
            let dome_dev =
                rng.gen_range(-CLASS3_NDWI_WAVE_JITTER..=CLASS3_NDWI_WAVE_JITTER);
            let wave_phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for _ in 0..spec.pixels_per_object {
                let mut values: Vec<Option<f64>> = Vec::with_capacity(c_len * t_len);
                for c in 0..c_len {
                    for t in 0..t_len {
                        let eps = if spec.noise_sd > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                        let mut v = prototypes[class][c][t] + offsets[c] + eps;
                        if class == 3 && c == 5 {
                            v += dome_dev * dome_shape(t, t_len);
                        }
                        if class >= 2 && CHANNEL_MIX[c].2 == 0 {
                            let tau = t as f64 / (t_len - 1).max(1) as f64;
                            v += CHANNEL_MIX[c].0
                                * RANDOM_PHASE_WAVE
                                * (std::f64::consts::TAU * tau + wave_phase).sin();
                        }
                        values.push(Some(v.max(VALUE_FLOOR)));
                    }
                }
                // clouds hide every channel of the pixel at once
                let mut clear = 0usize;
                for t in 0..t_len {
                    if rng.gen::<f64>() < spec.cloud_fraction {
                        for c in 0..c_len {
                            values[c * t_len + t] = None;
                        }
                    } else {
                        clear += 1;
                    }
                }
                if clear == 0 {
                    // keep at least one observation so interpolation can work
                    for c in 0..c_len {
                        let mut v = prototypes[class][c][0] + offsets[c];
                        if class == 3 && c == 5 {
                            v += dome_dev * dome_shape(0, t_len);
                        }
                        if class >= 2 && CHANNEL_MIX[c].2 == 0 {
                            v += CHANNEL_MIX[c].0 * RANDOM_PHASE_WAVE * wave_phase.sin();
                        }
                        values[c * t_len] = Some(v.max(VALUE_FLOOR));
                    }
                }
                pixels.push(Pixel {
                    pixel_id,
                    object_id,
                    label: class,
                    values,
                });
                pixel_id += 1;
            }
        }
    }

    let mut relevant_channels = BTreeMap::new();
    for a in 0..spec.num_classes {
        let mut nearest: Option<(f64, Vec<usize>)> = None;
        for b in 0..spec.num_classes {
            if a == b {
                continue;
            }
            let (d, channels) = class_distance(&prototypes[a], &prototypes[b]);
            if nearest.as_ref().is_none_or(|(best, _)| d < *best) {
                nearest = Some((d, channels));
            }
        }
        relevant_channels.insert(a, nearest.expect("at least two classes").1);
    }

    Ok(SynthOutput {
        dataset: Dataset {
            channel_names: CHANNELS.map(String::from).to_vec(),
            num_timesteps: t_len,
            pixels,
        },
        prototypes,
        relevant_channels,
    })
}
