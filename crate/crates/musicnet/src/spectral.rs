//! Frequency-domain channel correlation: Lomb-Scargle periodograms on
//! irregular timestamps, squared-difference dynamic time warping between
//! them, and the conversion to a bounded channel-similarity matrix. An
//! interpolate-then-DTW comparator is included for correlation studies.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Uniform evaluation grid for periodograms.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    pub frequencies: Vec<f64>,
    pub f_min: f64,
    pub f_max: f64,
    pub oversampling: f64,
}

impl FrequencyGrid {
    pub fn new(f_min: f64, f_max: f64, count: usize) -> FrequencyGrid {
        assert!(f_min > 0.0, "f_min must be positive, got {}", f_min);
        assert!(f_max > f_min, "f_max {} must exceed f_min {}", f_max, f_min);
        assert!(count >= 2, "grid needs at least 2 frequencies");
        let step = (f_max - f_min) / (count - 1) as f64;
        let frequencies = (0..count).map(|i| f_min + i as f64 * step).collect();
        FrequencyGrid { frequencies, f_min, f_max, oversampling: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }
}

/// Spectral power on a frequency grid; nonnegative everywhere.
#[derive(Clone, Debug)]
pub struct Periodogram {
    pub grid: FrequencyGrid,
    pub power: Vec<f64>,
}

const GRID_OVERSAMPLING: f64 = 5.0;
const MAX_GRID_BINS: usize = 512;
const MIN_GRID_BINS: usize = 16;

fn median(xs: &mut [f64]) -> f64 {
    assert!(!xs.is_empty(), "median of empty slice");
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Data-driven evaluation grid: lowest frequency one cycle per median span,
/// highest the pseudo-Nyquist rate (half the median per-channel sampling
/// rate), oversampled 5x and capped at 512 bins. Covariant with time
/// rescaling.
pub fn default_grid(dataset: &Dataset) -> Result<FrequencyGrid> {
    if dataset.is_empty() {
        return Err(Error::data("cannot derive a frequency grid from an empty dataset"));
    }
    let mut spans: Vec<f64> = dataset
        .instances
        .iter()
        .filter_map(|i| i.time_span().map(|(lo, hi)| hi - lo))
        .filter(|s| *s > 0.0)
        .collect();
    if spans.is_empty() {
        return Err(Error::data("cannot derive a frequency grid: every instance has zero time span"));
    }
    let med_span = median(&mut spans);

    let mut channel_rates = Vec::with_capacity(dataset.num_channels);
    for d in 0..dataset.num_channels {
        let mut rates = Vec::new();
        for inst in &dataset.instances {
            if let Some((lo, hi)) = inst.time_span() {
                let span = hi - lo;
                let n = inst.channels[d].len();
                if span > 0.0 && n > 0 {
                    rates.push(n as f64 / span);
                }
            }
        }
        if !rates.is_empty() {
            channel_rates.push(rates.iter().sum::<f64>() / rates.len() as f64);
        }
    }
    if channel_rates.is_empty() {
        return Err(Error::data("cannot derive a frequency grid: no channel carries observations"));
    }
    let med_rate = median(&mut channel_rates);

    let f_min = 1.0 / med_span;
    let f_max = (0.5 * med_rate).max(f_min * 2.0);
    let count = ((GRID_OVERSAMPLING * med_span * f_max).round() as usize)
        .clamp(MIN_GRID_BINS, MAX_GRID_BINS);
    let mut grid = FrequencyGrid::new(f_min, f_max, count);
    grid.oversampling = GRID_OVERSAMPLING;
    Ok(grid)
}

/// Classic Scargle-normalized periodogram on mean-subtracted values; `None`
/// when the series has fewer than 2 points or zero variance (the degenerate
/// sentinel consumed by `correlation_matrix`).
pub fn lomb_scargle_power(times: &[f64], values: &[f64], freqs: &[f64]) -> Option<Vec<f64>> {
    let n = times.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let var = centered.iter().map(|x| x * x).sum::<f64>() / (n as f64 - 1.0);
    if var <= 0.0 {
        return None;
    }
    let mut power = Vec::with_capacity(freqs.len());
    for &f in freqs {
        let omega = std::f64::consts::TAU * f;
        let (mut s2, mut c2) = (0.0, 0.0);
        for &t in times {
            let (s, c) = (2.0 * omega * t).sin_cos();
            s2 += s;
            c2 += c;
        }
        let tau = s2.atan2(c2) / (2.0 * omega);
        let (mut xc, mut xs, mut cc, mut ss) = (0.0, 0.0, 0.0, 0.0);
        for (&t, &x) in times.iter().zip(&centered) {
            let (s, c) = (omega * (t - tau)).sin_cos();
            xc += x * c;
            xs += x * s;
            cc += c * c;
            ss += s * s;
        }
        let mut p = 0.0;
        if cc > 1e-300 {
            p += xc * xc / cc;
        }
        if ss > 1e-300 {
            p += xs * xs / ss;
        }
        power.push(0.5 * p / var);
    }
    Some(power)
}

pub fn lomb_scargle(series: &crate::data::ChannelSeries, grid: &FrequencyGrid) -> Option<Periodogram> {
    lomb_scargle_power(&series.times, &series.values, &grid.frequencies)
        .map(|power| Periodogram { grid: grid.clone(), power })
}

/// Dynamic time warping with squared-difference path cost over steps
/// {(1,0),(0,1),(1,1)}; returns the minimal cumulative cost (not rooted).
pub fn dtw(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "dtw: empty input sequence");
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &av in a {
        curr[0] = f64::INFINITY;
        for j in 1..=m {
            let d = av - b[j - 1];
            let best = prev[j].min(curr[j - 1]).min(prev[j - 1]);
            curr[j] = d * d + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m]
}

/// Channel-similarity weights plus the underlying DTW distances. Degenerate
/// channels (no usable signal anywhere in the training split) keep an
/// identity weight row with infinite off-diagonal distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub num_channels: usize,
    pub weights: Vec<f64>,
    pub raw_distances: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn identity(d: usize) -> CorrelationMatrix {
        let mut weights = vec![0.0; d * d];
        let mut raw = vec![f64::INFINITY; d * d];
        for i in 0..d {
            weights[i * d + i] = 1.0;
            raw[i * d + i] = 0.0;
        }
        CorrelationMatrix { num_channels: d, weights, raw_distances: raw }
    }

    pub fn ones(d: usize) -> CorrelationMatrix {
        CorrelationMatrix {
            num_channels: d,
            weights: vec![1.0; d * d],
            raw_distances: vec![0.0; d * d],
        }
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.num_channels + j]
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.raw_distances[i * self.num_channels + j]
    }
}

/// Convert a symmetric distance matrix into weights exp(-d / sigma), with
/// sigma the median finite off-diagonal distance (floored at 1 when the
/// median degenerates to 0).
fn distances_to_weights(d: usize, raw: &[f64], degenerate: &[bool]) -> Vec<f64> {
    let mut off: Vec<f64> = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .filter(|&(i, j)| i < j && raw[i * d + j].is_finite())
        .map(|(i, j)| raw[i * d + j])
        .collect();
    let sigma = if off.is_empty() {
        1.0
    } else {
        let m = median(&mut off);
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };
    let mut weights = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            weights[i * d + j] = if i == j {
                1.0
            } else if degenerate[i] || degenerate[j] {
                0.0
            } else {
                (-raw[i * d + j] / sigma).exp()
            };
        }
    }
    weights
}

fn build_matrix(
    d: usize,
    signals: Vec<Option<Vec<f64>>>,
) -> CorrelationMatrix {
    let degenerate: Vec<bool> = signals.iter().map(|s| s.is_none()).collect();
    let mut raw = vec![0.0; d * d];
    for i in 0..d {
        for j in i + 1..d {
            let dist = match (&signals[i], &signals[j]) {
                (Some(a), Some(b)) => dtw(a, b),
                _ => f64::INFINITY,
            };
            raw[i * d + j] = dist;
            raw[j * d + i] = dist;
        }
    }
    let weights = distances_to_weights(d, &raw, &degenerate);
    CorrelationMatrix { num_channels: d, weights, raw_distances: raw }
}

/// Dataset-level LSP-DTW correlation: average each channel's per-instance
/// periodograms over the training split, run DTW between the channel means,
/// and convert distances to bounded weights. Computed once before training.
pub fn correlation_matrix(train: &Dataset, grid: &FrequencyGrid) -> Result<CorrelationMatrix> {
    let d = train.num_channels;
    if d < 2 {
        return Err(Error::data(format!(
            "correlation matrix needs at least 2 channels, got {}",
            d
        )));
    }
    let nf = grid.len();
    let mut signals: Vec<Option<Vec<f64>>> = Vec::with_capacity(d);
    for c in 0..d {
        let mut acc = vec![0.0; nf];
        let mut count = 0usize;
        for inst in &train.instances {
            if let Some(p) = lomb_scargle_power(
                &inst.channels[c].times,
                &inst.channels[c].values,
                &grid.frequencies,
            ) {
                for (a, v) in acc.iter_mut().zip(&p) {
                    *a += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            signals.push(None);
        } else {
            for a in &mut acc {
                *a /= count as f64;
            }
            signals.push(Some(acc));
        }
    }
    Ok(build_matrix(d, signals))
}

const IDTW_GRID_POINTS: usize = 128;

/// Linear interpolation with edge extension onto `queries`.
pub fn interp_onto(times: &[f64], values: &[f64], queries: &[f64]) -> Vec<f64> {
    assert!(!times.is_empty(), "interp_onto: empty source");
    queries
        .iter()
        .map(|&q| {
            if q <= times[0] {
                return values[0];
            }
            if q >= times[times.len() - 1] {
                return values[values.len() - 1];
            }
            let hi = times.partition_point(|&t| t < q);
            let (t0, t1) = (times[hi - 1], times[hi]);
            let w = (q - t0) / (t1 - t0);
            values[hi - 1] * (1.0 - w) + values[hi] * w
        })
        .collect()
}

/// Interpolate-then-DTW comparator: each channel is linearly interpolated
/// onto a common 128-point grid per instance (edge-extended, then
/// z-scored), channel curves are averaged over the training split, and the
/// same DTW + weight conversion applies. Reproduces the fictitious
/// correlations that interpolation invents for sparse channels.
pub fn idtw_matrix(train: &Dataset) -> Result<CorrelationMatrix> {
    let d = train.num_channels;
    if d < 2 {
        return Err(Error::data(format!(
            "correlation matrix needs at least 2 channels, got {}",
            d
        )));
    }
    let mut signals: Vec<Option<Vec<f64>>> = Vec::with_capacity(d);
    for c in 0..d {
        let mut acc = vec![0.0; IDTW_GRID_POINTS];
        let mut count = 0usize;
        for inst in &train.instances {
            let chan = &inst.channels[c];
            if chan.is_empty() {
                continue;
            }
            let Some((lo, hi)) = inst.time_span() else { continue };
            if !(hi > lo) {
                continue;
            }
            let queries: Vec<f64> = (0..IDTW_GRID_POINTS)
                .map(|i| lo + (hi - lo) * i as f64 / (IDTW_GRID_POINTS - 1) as f64)
                .collect();
            let mut curve = interp_onto(&chan.times, &chan.values, &queries);
            let mean = curve.iter().sum::<f64>() / curve.len() as f64;
            for v in &mut curve {
                *v -= mean;
            }
            let sd = (curve.iter().map(|v| v * v).sum::<f64>() / curve.len() as f64).sqrt();
            if sd > 1e-12 {
                for v in &mut curve {
                    *v /= sd;
                }
            }
            for (a, v) in acc.iter_mut().zip(&curve) {
                *a += v;
            }
            count += 1;
        }
        if count == 0 {
            signals.push(None);
        } else {
            for a in &mut acc {
                *a /= count as f64;
            }
            signals.push(Some(acc));
        }
    }
    Ok(build_matrix(d, signals))
}
