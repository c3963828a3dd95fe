//! Satellite image time series data handling.
//!
//! A [`Dataset`] holds per-pixel multivariate series with optional
//! cloud-masked cells. The preprocessing pipeline applies, in order:
//!
//! 1. [`add_indexes`] — derive normalized-difference channels from the raw,
//!    unscaled band values (masked inputs stay masked),
//! 2. [`interpolate_clouds`] — fill masked cells per channel by piecewise
//!    linear interpolation over time, nearest-value at the edges,
//! 3. [`split_object_aware`] — partition pixels so no object straddles
//!    splits,
//! 4. [`ChannelScaling`] — per-channel min-max fitted on the training split
//!    only and applied everywhere with clamping,
//! 5. [`correlation_groups`] — group channels whose pooled Pearson
//!    correlation magnitude crosses a threshold, for weight sharing.

pub mod csv;
pub mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;
use crate::train::{LabeledSet, TrainError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error("spectral index undefined: denominator {0} is not positive")]
    IndexDenominator(f64),

    #[error("pixel {pixel_id} channel {channel} has no observed values to interpolate from")]
    EmptyChannelSeries { pixel_id: u64, channel: usize },

    #[error("dataset: {0}")]
    Inconsistent(String),

    #[error(transparent)]
    Train(#[from] TrainError),
}

/// One labeled pixel: a multivariate time series plus identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Pixel {
    pub pixel_id: u64,
    pub object_id: u64,
    pub label: usize,
    /// Channel-major cells, `values[c * timesteps + t]`; `None` is masked.
    pub values: Vec<Option<f64>>,
}

/// A collection of pixels sharing channel layout and time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channel_names: Vec<String>,
    pub num_timesteps: usize,
    pub pixels: Vec<Pixel>,
}

impl Dataset {
    pub fn num_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Highest label + 1.
    pub fn num_classes(&self) -> usize {
        self.pixels.iter().map(|p| p.label + 1).max().unwrap_or(0)
    }

    pub fn cell(&self, pixel: usize, channel: usize, t: usize) -> Option<f64> {
        self.pixels[pixel].values[channel * self.num_timesteps + t]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let cells = self.num_channels() * self.num_timesteps;
        if self.channel_names.is_empty() || self.num_timesteps == 0 {
            return Err(DataError::Inconsistent(
                "need at least one channel and one timestep".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.pixels {
            if p.values.len() != cells {
                return Err(DataError::Inconsistent(format!(
                    "pixel {} has {} cells, expected {cells}",
                    p.pixel_id,
                    p.values.len()
                )));
            }
            if !seen.insert(p.pixel_id) {
                return Err(DataError::Inconsistent(format!(
                    "duplicate pixel id {}",
                    p.pixel_id
                )));
            }
        }
        // an object must not span classes
        let mut object_label: BTreeMap<u64, usize> = BTreeMap::new();
        for p in &self.pixels {
            match object_label.get(&p.object_id) {
                Some(&l) if l != p.label => {
                    return Err(DataError::Inconsistent(format!(
                        "object {} carries labels {l} and {}",
                        p.object_id, p.label
                    )));
                }
                _ => {
                    object_label.insert(p.object_id, p.label);
                }
            }
        }
        Ok(())
    }

    /// Keeps the pixels selected by `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            channel_names: self.channel_names.clone(),
            num_timesteps: self.num_timesteps,
            pixels: indices.iter().map(|&i| self.pixels[i].clone()).collect(),
        }
    }

    /// Converts to a dense training set; fails if any cell is still masked.
    pub fn to_labeled_set(&self) -> Result<LabeledSet, DataError> {
        let (n, c, t) = (self.len(), self.num_channels(), self.num_timesteps);
        let mut data = Vec::with_capacity(n * c * t);
        for p in &self.pixels {
            for (i, cell) in p.values.iter().enumerate() {
                match cell {
                    Some(v) => data.push(*v),
                    None => {
                        return Err(DataError::Inconsistent(format!(
                            "pixel {} still has a masked cell at channel {} t {}",
                            p.pixel_id,
                            i / t,
                            i % t
                        )))
                    }
                }
            }
        }
        let x = Tensor::new(data, &[n, c, t])
            .map_err(|e| DataError::Inconsistent(e.to_string()))?;
        Ok(LabeledSet::new(x, self.pixels.iter().map(|p| p.label).collect())?)
    }
}

/// Normalized difference of two band values: `(x - y) / (x + y)`.
///
/// Defined only for a positive denominator, which reflectances guarantee.
pub fn spectral_index(x: f64, y: f64) -> Result<f64, DataError> {
    let denom = x + y;
    if !(denom > 0.0) {
        return Err(DataError::IndexDenominator(denom));
    }
    Ok((x - y) / denom)
}

/// The derived channels [`add_indexes`] appends, in order.
pub const DERIVED_CHANNELS: [(&str, &str, &str); 2] =
    [("NDVI", "B8", "B4"), ("NDWI", "B3", "B8")];

/// Appends NDVI and NDWI channels computed cell-by-cell from the raw band
/// values. Must run before interpolation and scaling; a masked operand
/// yields a masked result.
pub fn add_indexes(dataset: &Dataset) -> Result<Dataset, DataError> {
    let find = |band: &str| -> Result<usize, DataError> {
        dataset
            .channel_names
            .iter()
            .position(|n| n == band)
            .ok_or_else(|| {
                DataError::Inconsistent(format!("band {band} not present in the dataset"))
            })
    };
    let mut out = dataset.clone();
    let t_len = dataset.num_timesteps;
    for (name, plus, minus) in DERIVED_CHANNELS {
        if dataset.channel_names.iter().any(|n| n == name) {
            return Err(DataError::Inconsistent(format!(
                "channel {name} already exists; refusing to derive it again"
            )));
        }
        let (ci, cj) = (find(plus)?, find(minus)?);
        for (pi, p) in out.pixels.iter_mut().enumerate() {
            for t in 0..t_len {
                let cell = match (dataset.cell(pi, ci, t), dataset.cell(pi, cj, t)) {
                    (Some(a), Some(b)) => Some(spectral_index(a, b)?),
                    _ => None,
                };
                p.values.push(cell);
            }
        }
        out.channel_names.push(name.to_string());
    }
    Ok(out)
}

/// Fills every masked cell by linear interpolation along time within its
/// channel; cells before the first or after the last observation copy the
/// nearest one. A channel with no observations at all is an error.
pub fn interpolate_clouds(dataset: &Dataset) -> Result<Dataset, DataError> {
    let mut out = dataset.clone();
    let t_len = dataset.num_timesteps;
    for p in &mut out.pixels {
        for c in 0..dataset.channel_names.len() {
            let series = &mut p.values[c * t_len..(c + 1) * t_len];
            let known: Vec<(usize, f64)> = series
                .iter()
                .enumerate()
                .filter_map(|(t, v)| v.map(|x| (t, x)))
                .collect();
            if known.is_empty() {
                return Err(DataError::EmptyChannelSeries {
                    pixel_id: p.pixel_id,
                    channel: c,
                });
            }
            for t in 0..t_len {
                if series[t].is_some() {
                    continue;
                }
                let next = known.iter().find(|&&(kt, _)| kt > t);
                let prev = known.iter().rev().find(|&&(kt, _)| kt < t);
                series[t] = Some(match (prev, next) {
                    (Some(&(t0, v0)), Some(&(t1, v1))) => {
                        v0 + (v1 - v0) * (t - t0) as f64 / (t1 - t0) as f64
                    }
                    (Some(&(_, v0)), None) => v0,
                    (None, Some(&(_, v1))) => v1,
                    (None, None) => unreachable!("known is non-empty"),
                });
            }
        }
    }
    Ok(out)
}

/// Per-channel min-max ranges fitted on one split and applied to all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScaling {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl ChannelScaling {
    /// Scans every observed cell of `dataset` for per-channel extremes.
    pub fn fit(dataset: &Dataset) -> Result<Self, DataError> {
        let c_len = dataset.num_channels();
        let t_len = dataset.num_timesteps;
        let mut mins = vec![f64::INFINITY; c_len];
        let mut maxs = vec![f64::NEG_INFINITY; c_len];
        for p in &dataset.pixels {
            for c in 0..c_len {
                for t in 0..t_len {
                    if let Some(v) = p.values[c * t_len + t] {
                        mins[c] = mins[c].min(v);
                        maxs[c] = maxs[c].max(v);
                    }
                }
            }
        }
        for c in 0..c_len {
            if !mins[c].is_finite() || !maxs[c].is_finite() {
                return Err(DataError::Inconsistent(format!(
                    "channel {c} has no observed values to fit scaling on"
                )));
            }
        }
        Ok(ChannelScaling { mins, maxs })
    }

    /// Maps observed cells to `[0, 1]`, clamping values outside the fitted
    /// range; a constant channel maps to 0.5. Masked cells stay masked.
    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset, DataError> {
        if self.mins.len() != dataset.num_channels() {
            return Err(DataError::Inconsistent(format!(
                "scaling fitted for {} channels, dataset has {}",
                self.mins.len(),
                dataset.num_channels()
            )));
        }
        let mut out = dataset.clone();
        let t_len = dataset.num_timesteps;
        for p in &mut out.pixels {
            for c in 0..self.mins.len() {
                let (lo, hi) = (self.mins[c], self.maxs[c]);
                let range = hi - lo;
                for cell in &mut p.values[c * t_len..(c + 1) * t_len] {
                    if let Some(v) = cell {
                        *v = if range > 0.0 {
                            ((*v - lo) / range).clamp(0.0, 1.0)
                        } else {
                            0.5
                        };
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Pearson correlation between two channels pooled over every (pixel, t)
/// cell where both are observed; 0 when either side has no variance.
pub fn pooled_correlation(dataset: &Dataset, a: usize, b: usize) -> f64 {
    let t_len = dataset.num_timesteps;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for p in &dataset.pixels {
        for t in 0..t_len {
            if let (Some(x), Some(y)) = (p.values[a * t_len + t], p.values[b * t_len + t]) {
                xs.push(x);
                ys.push(y);
            }
        }
    }
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// Groups channels by connected components of the graph whose edges join
/// channel pairs with `|pooled correlation| >= threshold`. Components are
/// ordered by their smallest channel index; members are ascending.
pub fn correlation_groups(dataset: &Dataset, threshold: f64) -> Vec<Vec<usize>> {
    let c_len = dataset.num_channels();
    let mut adjacency = vec![Vec::new(); c_len];
    for a in 0..c_len {
        for b in (a + 1)..c_len {
            if pooled_correlation(dataset, a, b).abs() >= threshold {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
    }
    let mut visited = vec![false; c_len];
    let mut groups = Vec::new();
    for start in 0..c_len {
        if visited[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut group = Vec::new();
        visited[start] = true;
        while let Some(c) = stack.pop() {
            group.push(c);
            for &next in &adjacency[c] {
                if !visited[next] {
                    visited[next] = true;
                    stack.push(next);
                }
            }
        }
        group.sort_unstable();
        groups.push(group);
    }
    groups
}

/// Pixel and object tallies of one split, per class.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SplitTally {
    pub objects: [usize; 3],
    pub pixels: [usize; 3],
}

/// Outcome bookkeeping of [`split_object_aware`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct SplitSummary {
    /// Per-class `[train, val, test]` tallies.
    pub per_class: BTreeMap<usize, SplitTally>,
    /// Human-readable notes about degenerate classes.
    pub warnings: Vec<String>,
}

/// Splits by whole objects so no object appears in two splits, aiming at
/// the given pixel fractions per class. Objects are shuffled with `seed`
/// and assigned greedily to the split with the largest remaining pixel
/// deficit (ties prefer train, then validation). A class with a single
/// object goes entirely to train with a warning.
pub fn split_object_aware(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset, SplitSummary), DataError> {
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(DataError::Inconsistent("cannot split an empty dataset".into()));
    }
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| f < 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Inconsistent(format!(
            "split fractions {fr:?} must be non-negative and sum to 1"
        )));
    }

    // class -> object -> pixel indices (BTreeMaps for deterministic order)
    let mut by_class: BTreeMap<usize, BTreeMap<u64, Vec<usize>>> = BTreeMap::new();
    for (i, p) in dataset.pixels.iter().enumerate() {
        by_class
            .entry(p.label)
            .or_default()
            .entry(p.object_id)
            .or_default()
            .push(i);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(), Vec::new(), Vec::new()];
    let mut summary = SplitSummary::default();

    for (&class, objects) in &by_class {
        let tally = summary.per_class.entry(class).or_default();
        if objects.len() == 1 {
            let (_, pixels) = objects.iter().next().expect("one object");
            assignment[0].extend_from_slice(pixels);
            tally.objects[0] = 1;
            tally.pixels[0] = pixels.len();
            summary.warnings.push(format!(
                "class {class} has a single object; all {} pixels assigned to train",
                pixels.len()
            ));
            continue;
        }
        let class_pixels: usize = objects.values().map(Vec::len).sum();
        let targets = [
            fr[0] * class_pixels as f64,
            fr[1] * class_pixels as f64,
            fr[2] * class_pixels as f64,
        ];
        let mut object_ids: Vec<u64> = objects.keys().copied().collect();
        object_ids.shuffle(&mut rng);
        let mut assigned = [0usize; 3];
        for id in object_ids {
            let pixels = &objects[&id];
            let mut best = 0;
            for s in 1..3 {
                let deficit = targets[s] - assigned[s] as f64;
                let best_deficit = targets[best] - assigned[best] as f64;
                if deficit > best_deficit {
                    best = s;
                }
            }
            assignment[best].extend_from_slice(pixels);
            assigned[best] += pixels.len();
            tally.objects[best] += 1;
            tally.pixels[best] += pixels.len();
        }
    }

    // keep original dataset order within each split
    for split in &mut assignment {
        split.sort_unstable();
    }
    Ok((
        dataset.select(&assignment[0]),
        dataset.select(&assignment[1]),
        dataset.select(&assignment[2]),
        summary,
    ))
}

/// Everything evaluation must know to preprocess exactly like training did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineMeta {
    pub channel_names: Vec<String>,
    /// Whether derived index channels were appended before interpolation.
    pub add_indexes: bool,
    pub scaling: ChannelScaling,
    pub channel_groups: Vec<Vec<usize>>,
}

impl PipelineMeta {
    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("pipeline meta serializes")
    }

    pub fn from_value(value: &serde_json::Value) -> Result<Self, DataError> {
        serde_json::from_value(value.clone())
            .map_err(|e| DataError::Inconsistent(format!("pipeline metadata: {e}")))
    }

    /// Applies the recorded preprocessing to a raw dataset.
    pub fn preprocess(&self, raw: &Dataset) -> Result<Dataset, DataError> {
        let with_indexes = if self.add_indexes {
            add_indexes(raw)?
        } else {
            raw.clone()
        };
        if with_indexes.num_channels() != self.channel_names.len() {
            return Err(DataError::Inconsistent(format!(
                "dataset has {} channels after preprocessing, pipeline expects {}",
                with_indexes.num_channels(),
                self.channel_names.len()
            )));
        }
        let filled = interpolate_clouds(&with_indexes)?;
        self.scaling.apply(&filled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pixel(pixel_id: u64, object_id: u64, label: usize, values: Vec<Option<f64>>) -> Pixel {
        Pixel {
            pixel_id,
            object_id,
            label,
            values,
        }
    }

    fn some(values: &[f64]) -> Vec<Option<f64>> {
        values.iter().map(|&v| Some(v)).collect()
    }

    #[test]
    fn spectral_index_matches_definition_and_rejects_bad_denominators() {
        assert_eq!(spectral_index(5.0, 3.0).unwrap(), 0.25);
        assert_eq!(spectral_index(3.0, 3.0).unwrap(), 0.0);
        assert!(spectral_index(1.0, -1.0).is_err());
        assert!(spectral_index(-2.0, 1.0).is_err());
        // antisymmetry and scale invariance on a few sampled pairs
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: f64 = rng.gen_range(0.01..10.0);
            let y: f64 = rng.gen_range(0.01..10.0);
            let c: f64 = rng.gen_range(0.1..5.0);
            let f = spectral_index(x, y).unwrap();
            assert!((f + spectral_index(y, x).unwrap()).abs() < 1e-12);
            assert!((f - spectral_index(c * x, c * y).unwrap()).abs() < 1e-12);
            assert!(f.abs() <= 1.0);
        }
    }

    fn band_dataset() -> Dataset {
        // 4 raw bands, 2 timesteps, 2 pixels
        Dataset {
            channel_names: ["B2", "B3", "B4", "B8"].map(String::from).to_vec(),
            num_timesteps: 2,
            pixels: vec![
                pixel(0, 0, 0, some(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])),
                pixel(
                    1,
                    0,
                    0,
                    vec![
                        Some(2.0),
                        Some(2.0),
                        Some(3.0),
                        None, // B3 @ t1 masked
                        Some(1.0),
                        Some(1.0),
                        Some(4.0),
                        Some(4.0),
                    ],
                ),
            ],
        }
    }

    #[test]
    fn derived_channels_use_raw_cells_and_propagate_masks() {
        let ds = add_indexes(&band_dataset()).unwrap();
        assert_eq!(
            ds.channel_names,
            ["B2", "B3", "B4", "B8", "NDVI", "NDWI"].map(String::from).to_vec()
        );
        // pixel 0: NDVI = (B8 - B4)/(B8 + B4) per t
        let ndvi0 = spectral_index(7.0, 5.0).unwrap();
        let ndvi1 = spectral_index(8.0, 6.0).unwrap();
        assert_eq!(ds.cell(0, 4, 0), Some(ndvi0));
        assert_eq!(ds.cell(0, 4, 1), Some(ndvi1));
        // pixel 0: NDWI = (B3 - B8)/(B3 + B8)
        assert_eq!(ds.cell(0, 5, 0), Some(spectral_index(3.0, 7.0).unwrap()));
        // pixel 1: B3 masked at t1 -> NDWI masked at t1, NDVI unaffected
        assert_eq!(ds.cell(1, 5, 1), None);
        assert!(ds.cell(1, 4, 1).is_some());
        // refuses to derive twice
        assert!(add_indexes(&ds).is_err());
    }

    #[test]
    fn interpolation_fills_linear_gaps_exactly_and_is_idempotent() {
        let ds = Dataset {
            channel_names: vec!["a".into()],
            num_timesteps: 6,
            pixels: vec![pixel(
                0,
                0,
                0,
                vec![None, Some(2.0), None, None, Some(8.0), None],
            )],
        };
        let filled = interpolate_clouds(&ds).unwrap();
        let got: Vec<f64> = filled.pixels[0].values.iter().map(|v| v.unwrap()).collect();
        assert_eq!(got, vec![2.0, 2.0, 4.0, 6.0, 8.0, 8.0]);
        let twice = interpolate_clouds(&filled).unwrap();
        assert_eq!(twice, filled);
    }

    #[test]
    fn interpolation_requires_at_least_one_observation() {
        let ds = Dataset {
            channel_names: vec!["a".into(), "b".into()],
            num_timesteps: 2,
            pixels: vec![pixel(7, 0, 0, vec![Some(1.0), Some(1.0), None, None])],
        };
        match interpolate_clouds(&ds) {
            Err(DataError::EmptyChannelSeries { pixel_id, channel }) => {
                assert_eq!((pixel_id, channel), (7, 1));
            }
            other => panic!("expected empty-series error, got {other:?}"),
        }
    }

    #[test]
    fn scaling_maps_to_unit_interval_and_clamps_unseen_extremes() {
        let train = Dataset {
            channel_names: vec!["a".into(), "b".into()],
            num_timesteps: 2,
            pixels: vec![
                pixel(0, 0, 0, some(&[0.0, 10.0, 5.0, 5.0])),
                pixel(1, 1, 0, some(&[2.0, 8.0, 5.0, 5.0])),
            ],
        };
        let scaling = ChannelScaling::fit(&train).unwrap();
        assert_eq!(scaling.mins, vec![0.0, 5.0]);
        assert_eq!(scaling.maxs, vec![10.0, 5.0]);
        let scaled = scaling.apply(&train).unwrap();
        assert_eq!(scaled.cell(0, 0, 0), Some(0.0));
        assert_eq!(scaled.cell(0, 0, 1), Some(1.0));
        assert_eq!(scaled.cell(1, 0, 0), Some(0.2));
        // constant channel maps to the midpoint
        assert_eq!(scaled.cell(0, 1, 0), Some(0.5));

        let test = Dataset {
            channel_names: train.channel_names.clone(),
            num_timesteps: 2,
            pixels: vec![pixel(2, 2, 0, some(&[-5.0, 20.0, 4.0, 6.0]))],
        };
        let scaled = scaling.apply(&test).unwrap();
        assert_eq!(scaled.cell(0, 0, 0), Some(0.0)); // clamped
        assert_eq!(scaled.cell(0, 0, 1), Some(1.0)); // clamped
    }

    #[test]
    fn correlated_channels_group_including_negative_correlation() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let t_len = 10;
        let mut pixels = Vec::new();
        for i in 0..30u64 {
            let base: Vec<f64> = (0..t_len).map(|_| rng.gen_range(0.0..1.0)).collect();
            let indep: Vec<f64> = (0..t_len).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut values = Vec::new();
            values.extend(base.iter().map(|&v| Some(v)));
            values.extend(base.iter().map(|&v| Some(2.0 * v + 1.0))); // r = +1
            values.extend(base.iter().map(|&v| Some(-v + 0.3))); // r = -1
            values.extend(indep.iter().map(|&v| Some(v))); // independent
            pixels.push(pixel(i, i, 0, values));
        }
        let ds = Dataset {
            channel_names: (0..4).map(|c| format!("c{c}")).collect(),
            num_timesteps: t_len,
            pixels,
        };
        let groups = correlation_groups(&ds, 0.6);
        assert_eq!(groups, vec![vec![0, 1, 2], vec![3]]);
        // a constant channel correlates with nothing
        assert_eq!(pooled_correlation(&ds, 0, 0), 1.0);
    }

    fn split_fixture(classes: usize, objects_per_class: usize, pixels_per_object: usize) -> Dataset {
        let mut pixels = Vec::new();
        let mut pid = 0u64;
        for class in 0..classes {
            for o in 0..objects_per_class {
                let object_id = (class * objects_per_class + o) as u64;
                for _ in 0..pixels_per_object {
                    pixels.push(pixel(pid, object_id, class, some(&[0.1, 0.2])));
                    pid += 1;
                }
            }
        }
        Dataset {
            channel_names: vec!["a".into()],
            num_timesteps: 2,
            pixels,
        }
    }

    #[test]
    fn splits_keep_objects_whole_and_fractions_close() {
        let ds = split_fixture(3, 25, 8);
        let (train, val, test, summary) =
            split_object_aware(&ds, (0.6, 0.2, 0.2), 42).unwrap();
        assert_eq!(train.len() + val.len() + test.len(), ds.len());
        assert!(summary.warnings.is_empty());

        // object integrity
        let sets: Vec<std::collections::HashSet<u64>> = [&train, &val, &test]
            .iter()
            .map(|d| d.pixels.iter().map(|p| p.object_id).collect())
            .collect();
        assert!(sets[0].is_disjoint(&sets[1]));
        assert!(sets[0].is_disjoint(&sets[2]));
        assert!(sets[1].is_disjoint(&sets[2]));

        // per-class pixel fractions within one object of target
        for (class, tally) in &summary.per_class {
            let total: usize = tally.pixels.iter().sum();
            assert_eq!(total, 200, "class {class}");
            let frac = [
                tally.pixels[0] as f64 / total as f64,
                tally.pixels[1] as f64 / total as f64,
                tally.pixels[2] as f64 / total as f64,
            ];
            assert!((frac[0] - 0.6).abs() <= 0.05, "train frac {frac:?}");
            assert!((frac[1] - 0.2).abs() <= 0.05, "val frac {frac:?}");
            assert!((frac[2] - 0.2).abs() <= 0.05, "test frac {frac:?}");
        }
    }

    #[test]
    fn single_object_class_goes_to_train_with_a_warning() {
        let mut ds = split_fixture(2, 10, 4);
        // class 2 with one object
        let base = ds.len() as u64;
        for i in 0..5 {
            ds.pixels.push(pixel(base + i, 999, 2, some(&[0.3, 0.4])));
        }
        let (train, val, test, summary) =
            split_object_aware(&ds, (0.6, 0.2, 0.2), 7).unwrap();
        assert!(summary.warnings.iter().any(|w| w.contains("class 2")));
        let class2 = |d: &Dataset| d.pixels.iter().filter(|p| p.label == 2).count();
        assert_eq!(class2(&train), 5);
        assert_eq!(class2(&val) + class2(&test), 0);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let ds = split_fixture(2, 12, 3);
        let a = split_object_aware(&ds, (0.6, 0.2, 0.2), 5).unwrap();
        let b = split_object_aware(&ds, (0.6, 0.2, 0.2), 5).unwrap();
        let c = split_object_aware(&ds, (0.6, 0.2, 0.2), 6).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        let ids = |d: &Dataset| d.pixels.iter().map(|p| p.pixel_id).collect::<Vec<_>>();
        assert_ne!(ids(&a.0), ids(&c.0));
    }

    #[test]
    fn objects_spanning_classes_are_rejected() {
        let ds = Dataset {
            channel_names: vec!["a".into()],
            num_timesteps: 1,
            pixels: vec![
                pixel(0, 5, 0, some(&[0.1])),
                pixel(1, 5, 1, some(&[0.2])),
            ],
        };
        assert!(matches!(
            split_object_aware(&ds, (0.6, 0.2, 0.2), 0),
            Err(DataError::Inconsistent(_))
        ));
    }

    #[test]
    fn labeled_set_conversion_requires_dense_data() {
        let ds = Dataset {
            channel_names: vec!["a".into()],
            num_timesteps: 2,
            pixels: vec![pixel(0, 0, 1, vec![Some(0.5), None])],
        };
        assert!(ds.to_labeled_set().is_err());
        let filled = interpolate_clouds(&ds).unwrap();
        let set = filled.to_labeled_set().unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.labels, vec![1]);
        assert_eq!(set.x.shape(), &[1, 1, 2]);
    }

    #[test]
    fn pipeline_meta_round_trips_and_preprocesses() {
        let raw = band_dataset();
        let with_idx = add_indexes(&raw).unwrap();
        let filled = interpolate_clouds(&with_idx).unwrap();
        let scaling = ChannelScaling::fit(&filled).unwrap();
        let meta = PipelineMeta {
            channel_names: with_idx.channel_names.clone(),
            add_indexes: true,
            scaling,
            channel_groups: vec![vec![0, 1, 2], vec![3, 4, 5]],
        };
        let value = meta.to_value();
        let back = PipelineMeta::from_value(&value).unwrap();
        assert_eq!(back, meta);

        let processed = meta.preprocess(&raw).unwrap();
        assert_eq!(processed.num_channels(), 6);
        let set = processed.to_labeled_set().unwrap();
        for &v in set.x.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
