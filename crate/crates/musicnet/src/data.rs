//! Data model for irregularly sampled multivariate series: CSV ingestion,
//! union-grid alignment with observation masks, dataset splitting, value/time
//! normalization, and a deterministic synthetic generator.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream_indexed;

/// One channel's observations: parallel (time, value) arrays with strictly
/// increasing times. May be empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChannelSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl ChannelSeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<ChannelSeries> {
        if times.len() != values.len() {
            return Err(Error::data(format!(
                "channel series length mismatch: {} times vs {} values",
                times.len(),
                values.len()
            )));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::data(format!(
                    "channel times not strictly increasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(ChannelSeries { times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// One sample: D channels of unequal length plus an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct IsmtsInstance {
    pub id: String,
    pub channels: Vec<ChannelSeries>,
    pub label: Option<usize>,
}

impl IsmtsInstance {
    pub fn num_obs(&self) -> usize {
        self.channels.iter().map(|c| c.len()).sum()
    }

    /// (min, max) over all observation times, if any exist.
    pub fn time_span(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.channels {
            for &t in &c.times {
                lo = lo.min(t);
                hi = hi.max(t);
            }
        }
        if lo.is_finite() {
            Some((lo, hi))
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub instances: Vec<IsmtsInstance>,
    pub num_channels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            num_channels: self.num_channels,
        }
    }

    pub fn has_labels(&self) -> bool {
        !self.instances.is_empty() && self.instances.iter().all(|i| i.label.is_some())
    }

    pub fn num_classes(&self) -> usize {
        self.instances
            .iter()
            .filter_map(|i| i.label)
            .max()
            .map(|m| m + 1)
            .unwrap_or(0)
    }
}

/// An instance placed on the union of its channel timestamps. `values` and
/// `obs_mask` are T×D row-major; cells without a real observation hold 0 and
/// must never influence attention or losses.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedInstance {
    pub grid: Vec<f64>,
    pub num_channels: usize,
    pub values: Vec<f64>,
    pub obs_mask: Vec<bool>,
}

impl AlignedInstance {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn value(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.num_channels + d]
    }

    pub fn observed(&self, t: usize, d: usize) -> bool {
        self.obs_mask[t * self.num_channels + d]
    }

    /// Observation count in channel `d`.
    pub fn channel_count(&self, d: usize) -> usize {
        (0..self.grid.len()).filter(|&t| self.observed(t, d)).count()
    }
}

/// Disjoint train/validation/test index lists covering a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

const OBS_HEADER: [&str; 4] = ["instance_id", "channel", "time", "value"];
const LABEL_HEADER: [&str; 2] = ["instance_id", "label"];

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse { line, msg: e.to_string() }
}

fn parse_field<T: std::str::FromStr>(s: &str, line: u64, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("non-numeric {}: {:?}", what, s) })
}

/// Load observation records (`instance_id,channel,time,value`). Instances
/// keep file order of first appearance; channel timestamps are sorted;
/// duplicate (instance, channel, time) rows and channel-index gaps are
/// rejected.
pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref()).map_err(csv_error)?;
    let headers = rdr.headers().map_err(csv_error)?.clone();
    if headers.iter().map(str::trim).ne(OBS_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {:?}, got {:?}", OBS_HEADER.join(","), headers),
        });
    }

    // (instance order, per-instance channel -> rows)
    let mut order: Vec<String> = Vec::new();
    let mut per_instance: BTreeMap<String, BTreeMap<usize, Vec<(f64, f64, u64)>>> = BTreeMap::new();
    let mut channel_first_line: BTreeMap<usize, u64> = BTreeMap::new();
    let mut seen: HashSet<(String, usize, u64)> = HashSet::new();

    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 4 {
            return Err(Error::Parse { line, msg: format!("expected 4 fields, got {}", rec.len()) });
        }
        let id = rec[0].trim().to_string();
        let channel: usize = parse_field(&rec[1], line, "channel index")?;
        let time: f64 = parse_field(&rec[2], line, "time")?;
        let value: f64 = parse_field(&rec[3], line, "value")?;
        if !time.is_finite() || !value.is_finite() {
            return Err(Error::Parse { line, msg: "non-finite time or value".into() });
        }
        if !seen.insert((id.clone(), channel, time.to_bits())) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate observation (instance {:?}, channel {}, time {})", id, channel, time),
            });
        }
        channel_first_line.entry(channel).or_insert(line);
        if !per_instance.contains_key(&id) {
            order.push(id.clone());
        }
        per_instance.entry(id).or_default().entry(channel).or_default().push((time, value, line));
    }

    if order.is_empty() {
        return Err(Error::data("observation file contains no records"));
    }
    let max_channel = *channel_first_line.keys().max().unwrap();
    for c in 0..=max_channel {
        if !channel_first_line.contains_key(&c) {
            let offending = channel_first_line
                .range(c..)
                .next()
                .map(|(_, &l)| l)
                .unwrap_or(0);
            return Err(Error::Parse {
                line: offending,
                msg: format!("non-contiguous channel indices: channel {} never appears", c),
            });
        }
    }
    let num_channels = max_channel + 1;

    let mut instances = Vec::with_capacity(order.len());
    for id in order {
        let mut chans = per_instance.remove(&id).unwrap();
        let mut channels = Vec::with_capacity(num_channels);
        for c in 0..num_channels {
            let mut rows = chans.remove(&c).unwrap_or_default();
            rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let times: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let values: Vec<f64> = rows.iter().map(|r| r.1).collect();
            channels.push(ChannelSeries::new(times, values)?);
        }
        instances.push(IsmtsInstance { id, channels, label: None });
    }
    Ok(Dataset { instances, num_channels })
}

/// Attach labels (`instance_id,label`) to an already-loaded dataset.
pub fn load_labels<P: AsRef<Path>>(path: P, dataset: &mut Dataset) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref()).map_err(csv_error)?;
    let headers = rdr.headers().map_err(csv_error)?.clone();
    if headers.iter().map(str::trim).ne(LABEL_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {:?}, got {:?}", LABEL_HEADER.join(","), headers),
        });
    }
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 2 {
            return Err(Error::Parse { line, msg: format!("expected 2 fields, got {}", rec.len()) });
        }
        let id = rec[0].trim();
        let label: usize = parse_field(&rec[1], line, "label")?;
        match dataset.instances.iter_mut().find(|i| i.id == id) {
            Some(inst) => inst.label = Some(label),
            None => {
                return Err(Error::Parse { line, msg: format!("label for unknown instance {:?}", id) })
            }
        }
    }
    Ok(())
}

/// Write observation records in the loader's format; floats print in
/// shortest round-trip form so write→load is lossless.
pub fn write_csv<P: AsRef<Path>>(dataset: &Dataset, path: P) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
    wtr.write_record(OBS_HEADER).map_err(csv_error)?;
    for inst in &dataset.instances {
        for (c, chan) in inst.channels.iter().enumerate() {
            for (&t, &v) in chan.times.iter().zip(&chan.values) {
                wtr.write_record(&[inst.id.clone(), c.to_string(), t.to_string(), v.to_string()])
                    .map_err(csv_error)?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_labels<P: AsRef<Path>>(dataset: &Dataset, path: P) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
    wtr.write_record(LABEL_HEADER).map_err(csv_error)?;
    for inst in &dataset.instances {
        if let Some(label) = inst.label {
            wtr.write_record(&[inst.id.clone(), label.to_string()]).map_err(csv_error)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Place an instance on the sorted, deduplicated union of its channel
/// timestamps. Every real observation lands exactly once; all other cells
/// are 0 with `obs_mask` false.
pub fn align(inst: &IsmtsInstance) -> Result<AlignedInstance> {
    if inst.num_obs() == 0 {
        return Err(Error::data(format!("empty instance {:?}: nothing to align", inst.id)));
    }
    let mut grid: Vec<f64> = inst.channels.iter().flat_map(|c| c.times.iter().copied()).collect();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    let t_len = grid.len();
    let d = inst.channels.len();
    let mut values = vec![0.0; t_len * d];
    let mut obs_mask = vec![false; t_len * d];
    for (c, chan) in inst.channels.iter().enumerate() {
        for (&t, &v) in chan.times.iter().zip(&chan.values) {
            let row = grid.partition_point(|&g| g < t);
            debug_assert!(grid[row] == t);
            values[row * d + c] = v;
            obs_mask[row * d + c] = true;
        }
    }
    Ok(AlignedInstance { grid, num_channels: d, values, obs_mask })
}

/// One sinusoidal component of a latent channel function.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Sinusoid {
    pub freq: f64,
    pub amp: f64,
    pub phase: f64,
}

impl Sinusoid {
    pub fn eval(&self, t: f64) -> f64 {
        self.amp * (TAU * self.freq * t + self.phase).sin()
    }
}

/// Latent function for one channel: a sum of sinusoids.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChannelSpec {
    pub sinusoids: Vec<Sinusoid>,
}

impl ChannelSpec {
    pub fn eval(&self, t: f64) -> f64 {
        self.sinusoids.iter().map(|s| s.eval(t)).sum()
    }
}

/// One generating class: a latent function per channel.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassSpec {
    pub channels: Vec<ChannelSpec>,
}

/// Synthetic-dataset recipe: per-class latent functions sampled at
/// channel-independent Poisson times with optional dropout, sensor outage,
/// and noise.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorSpec {
    pub classes: Vec<ClassSpec>,
    pub instances_per_class: usize,
    pub span: f64,
    pub rate_min: f64,
    pub rate_max: f64,
    #[serde(default)]
    pub dropout: f64,
    /// Probability that a channel records nothing at all for an instance
    /// (a whole-sensor outage, as opposed to `dropout`'s per-cell losses).
    /// At least one channel always survives per instance.
    #[serde(default)]
    pub outage: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl GeneratorSpec {
    pub fn num_channels(&self) -> usize {
        self.classes.first().map(|c| c.channels.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("generator needs at least one class"));
        }
        let d = self.num_channels();
        if d == 0 {
            return Err(Error::config("generator classes need at least one channel"));
        }
        if self.classes.iter().any(|c| c.channels.len() != d) {
            return Err(Error::config("generator classes disagree on channel count"));
        }
        if self.instances_per_class == 0 {
            return Err(Error::config("instances_per_class must be positive"));
        }
        if !(self.span > 0.0) {
            return Err(Error::config(format!("nonpositive span {}", self.span)));
        }
        if !(self.rate_min > 0.0) || !(self.rate_max >= self.rate_min) {
            return Err(Error::config(format!(
                "invalid sampling-rate range [{}, {}]",
                self.rate_min, self.rate_max
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1]", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.outage) {
            return Err(Error::config(format!("outage {} outside [0, 1)", self.outage)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config(format!("negative noise sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Standard normal draw (Box-Muller).
fn normal(rng: &mut impl Rng) -> f64 {
    let u1 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Poisson-process event times over [0, span) with the given rate.
fn poisson_times(rng: &mut impl Rng, rate: f64, span: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        let u = 1.0 - rng.gen::<f64>();
        let mut dt = -u.ln() / rate;
        if dt <= 0.0 {
            dt = f64::EPSILON;
        }
        t += dt;
        if t >= span {
            return out;
        }
        out.push(t);
    }
}

/// Generate a labelled dataset; a pure function of (spec, seed).
/// Dense-resampling nearest-centroid oracle for generated datasets: linearly
/// interpolate each channel onto `grid`, score it against every class's
/// latent curves, and pick the closest class. Returns the accuracy, which
/// upper-bounds how separable the generated task is before any training.
pub fn nearest_centroid_accuracy(spec: &GeneratorSpec, dataset: &Dataset, grid: &[f64]) -> f64 {
    let lerp = |times: &[f64], values: &[f64], q: f64| -> f64 {
        if times.is_empty() {
            return 0.0;
        }
        if q <= times[0] {
            return values[0];
        }
        if q >= *times.last().unwrap() {
            return *values.last().unwrap();
        }
        let hi = times.partition_point(|&t| t < q);
        let (t0, t1) = (times[hi - 1], times[hi]);
        let w = (q - t0) / (t1 - t0);
        values[hi - 1] * (1.0 - w) + values[hi] * w
    };
    let mut correct = 0usize;
    let mut total = 0usize;
    for inst in &dataset.instances {
        let Some(label) = inst.label else { continue };
        total += 1;
        let mut best = (f64::INFINITY, usize::MAX);
        for (ci, class) in spec.classes.iter().enumerate() {
            let mut err = 0.0;
            for (d, chan_spec) in class.channels.iter().enumerate() {
                let chan = &inst.channels[d];
                for &q in grid {
                    let diff = lerp(&chan.times, &chan.values, q) - chan_spec.eval(q);
                    err += diff * diff;
                }
            }
            if err < best.0 {
                best = (err, ci);
            }
        }
        if best.1 == label {
            correct += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    correct as f64 / total as f64
}

pub fn synth_generate(spec: &GeneratorSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.num_channels();
    let mut instances = Vec::with_capacity(spec.classes.len() * spec.instances_per_class);
    let mut global = 0u64;
    for (class_idx, class) in spec.classes.iter().enumerate() {
        for i in 0..spec.instances_per_class {
            let mut rng = substream_indexed(seed, "synth", global);
            global += 1;
            // Outage flags are drawn only when the feature is on, so specs
            // with `outage = 0` consume the random stream exactly as before.
            let mut out_flags = vec![false; d];
            if spec.outage > 0.0 {
                for flag in out_flags.iter_mut() {
                    *flag = rng.gen::<f64>() < spec.outage;
                }
                if out_flags.iter().all(|&f| f) {
                    let survivor = rng.gen_range(0..d);
                    out_flags[survivor] = false;
                }
            }
            let mut channels = Vec::with_capacity(d);
            for (chan_spec, &out) in class.channels.iter().zip(&out_flags) {
                if out {
                    channels.push(ChannelSeries::default());
                    continue;
                }
                let rate = rng.gen_range(spec.rate_min..=spec.rate_max);
                let raw_times = poisson_times(&mut rng, rate, spec.span);
                let mut times = Vec::with_capacity(raw_times.len());
                let mut values = Vec::with_capacity(raw_times.len());
                for t in raw_times {
                    let noise = normal(&mut rng);
                    let keep = rng.gen::<f64>() >= spec.dropout;
                    if keep {
                        times.push(t);
                        values.push(chan_spec.eval(t) + spec.noise_sigma * noise);
                    }
                }
                channels.push(ChannelSeries::new(times, values)?);
            }
            let inst = IsmtsInstance {
                id: format!("synth-{}-{}", class_idx, i),
                channels,
                label: Some(class_idx),
            };
            if inst.num_obs() == 0 {
                return Err(Error::data(format!("empty instance {:?}: every observation dropped", inst.id)));
            }
            instances.push(inst);
        }
    }
    Ok(Dataset { instances, num_channels: d })
}

/// Allocate `n` slots across buckets proportionally by largest remainder;
/// ties go to earlier buckets.
fn largest_remainder(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [exact[0].floor() as usize, exact[1].floor() as usize, exact[2].floor() as usize];
    let mut rem: Vec<(f64, usize)> =
        (0..3).map(|i| (exact[i] - exact[i].floor(), i)).collect();
    rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut leftover = n - counts.iter().sum::<usize>();
    for &(_, i) in &rem {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

/// Deterministic shuffle-and-allocate split, stratified by label when every
/// instance carries one.
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|&r| r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {:?} must be nonnegative and sum to 1", ratios)));
    }
    if dataset.is_empty() {
        return Err(Error::data("cannot split an empty dataset"));
    }
    let mut rng = crate::rng::substream(seed, "split");
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();

    let mut groups: Vec<Vec<usize>> = if dataset.has_labels() {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, inst) in dataset.instances.iter().enumerate() {
            by_class.entry(inst.label.unwrap()).or_default().push(i);
        }
        for (class, members) in &by_class {
            if members.len() < 3 {
                return Err(Error::data(format!(
                    "stratification error: class {} has {} samples, fewer than the 3 splits",
                    class,
                    members.len()
                )));
            }
        }
        by_class.into_values().collect()
    } else {
        vec![(0..dataset.len()).collect()]
    };

    for group in &mut groups {
        for i in (1..group.len()).rev() {
            let j = rng.gen_range(0..=i);
            group.swap(i, j);
        }
        let counts = largest_remainder(group.len(), &ratios);
        train.extend_from_slice(&group[..counts[0]]);
        validation.extend_from_slice(&group[counts[0]..counts[0] + counts[1]]);
        test.extend_from_slice(&group[counts[0] + counts[1]..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit { train, validation, test, seed })
}

/// Per-channel z-normalization statistics fitted on observed entries of the
/// training split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Normalizer {
    pub fn fit(dataset: &Dataset, train_indices: &[usize]) -> Normalizer {
        let d = dataset.num_channels;
        let mut sums = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut counts = vec![0usize; d];
        for &i in train_indices {
            for (c, chan) in dataset.instances[i].channels.iter().enumerate() {
                for &v in &chan.values {
                    sums[c] += v;
                    sq[c] += v * v;
                    counts[c] += 1;
                }
            }
        }
        let mut means = vec![0.0; d];
        let mut stds = vec![1.0; d];
        for c in 0..d {
            if counts[c] > 0 {
                let m = sums[c] / counts[c] as f64;
                let var = (sq[c] / counts[c] as f64 - m * m).max(0.0);
                means[c] = m;
                let s = var.sqrt();
                stds[c] = if s > 1e-12 { s } else { 1.0 };
            }
        }
        Normalizer { means, stds }
    }

    pub fn apply(&self, inst: &IsmtsInstance) -> IsmtsInstance {
        let channels = inst
            .channels
            .iter()
            .enumerate()
            .map(|(c, chan)| ChannelSeries {
                times: chan.times.clone(),
                values: chan.values.iter().map(|v| (v - self.means[c]) / self.stds[c]).collect(),
            })
            .collect();
        IsmtsInstance { id: inst.id.clone(), channels, label: inst.label }
    }

    /// Undo `apply` for a single channel's value.
    pub fn denorm(&self, channel: usize, v: f64) -> f64 {
        v * self.stds[channel] + self.means[channel]
    }
}

/// Map an instance's timestamps affinely onto [0, 1]; a zero-span instance
/// maps every time to 0.
pub fn normalize_times(inst: &IsmtsInstance) -> IsmtsInstance {
    let Some((lo, hi)) = inst.time_span() else {
        return inst.clone();
    };
    let span = hi - lo;
    let channels = inst
        .channels
        .iter()
        .map(|chan| ChannelSeries {
            times: chan
                .times
                .iter()
                .map(|&t| if span > 0.0 { (t - lo) / span } else { 0.0 })
                .collect(),
            values: chan.values.clone(),
        })
        .collect();
    IsmtsInstance { id: inst.id.clone(), channels, label: inst.label }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn two_class_spec() -> GeneratorSpec {
        let class = |f: f64| ClassSpec {
            channels: vec![
                ChannelSpec { sinusoids: vec![Sinusoid { freq: f, amp: 1.0, phase: 0.0 }] },
                ChannelSpec { sinusoids: vec![Sinusoid { freq: f, amp: 1.0, phase: 0.7 }] },
            ],
        };
        GeneratorSpec {
            classes: vec![class(0.05), class(0.12)],
            instances_per_class: 20,
            span: 100.0,
            rate_min: 1.5,
            rate_max: 2.5,
            dropout: 0.0,
            outage: 0.0,
            noise_sigma: 0.05,
        }
    }

    #[test]
    fn load_three_rows_one_instance_one_channel() {
        let f = write_temp("instance_id,channel,time,value\na,0,1.0,2.0\na,0,2.0,3.0\na,0,3.5,-1.0\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.num_channels, 1);
        assert_eq!(ds.instances[0].channels[0].len(), 3);
        assert_eq!(ds.instances[0].channels[0].times, vec![1.0, 2.0, 3.5]);
    }

    #[test]
    fn load_rejects_channel_gap() {
        let f = write_temp("instance_id,channel,time,value\na,0,1.0,2.0\na,2,1.0,2.0\n");
        let err = load_csv(f.path()).unwrap_err();
        assert!(err.to_string().contains("non-contiguous channel indices"), "{}", err);
    }

    #[test]
    fn load_rejects_duplicate_observation_with_line() {
        let f = write_temp("instance_id,channel,time,value\na,0,1.0,2.0\na,0,1.0,5.0\n");
        let err = load_csv(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("duplicate observation"), "{}", msg);
    }

    #[test]
    fn load_rejects_non_numeric_with_line() {
        let f = write_temp("instance_id,channel,time,value\na,0,1.0,2.0\na,0,oops,5.0\n");
        let err = load_csv(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("non-numeric"), "{}", msg);
    }

    #[test]
    fn load_sorts_shuffled_rows_per_channel() {
        let f = write_temp("instance_id,channel,time,value\na,0,3.0,30.0\na,0,1.0,10.0\na,0,2.0,20.0\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.instances[0].channels[0].times, vec![1.0, 2.0, 3.0]);
        assert_eq!(ds.instances[0].channels[0].values, vec![10.0, 20.0, 30.0]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = synth_generate(&two_class_spec(), 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let obs = dir.path().join("obs.csv");
        let labels = dir.path().join("labels.csv");
        write_csv(&ds, &obs).unwrap();
        write_labels(&ds, &labels).unwrap();
        let mut back = load_csv(&obs).unwrap();
        load_labels(&labels, &mut back).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn align_two_disjoint_channels() {
        let inst = IsmtsInstance {
            id: "x".into(),
            channels: vec![
                ChannelSeries::new(vec![1.0, 3.0], vec![10.0, 30.0]).unwrap(),
                ChannelSeries::new(vec![2.0], vec![20.0]).unwrap(),
            ],
            label: None,
        };
        let a = align(&inst).unwrap();
        assert_eq!(a.grid, vec![1.0, 2.0, 3.0]);
        assert_eq!(a.obs_mask, vec![true, false, false, true, true, false]);
        assert_eq!(a.values, vec![10.0, 0.0, 0.0, 20.0, 30.0, 0.0]);
    }

    #[test]
    fn align_single_channel_is_identity() {
        let inst = IsmtsInstance {
            id: "x".into(),
            channels: vec![ChannelSeries::new(vec![1.0, 2.0, 5.0], vec![1.0, 2.0, 3.0]).unwrap()],
            label: None,
        };
        let a = align(&inst).unwrap();
        assert_eq!(a.grid, vec![1.0, 2.0, 5.0]);
        assert!(a.obs_mask.iter().all(|&m| m));
        assert_eq!(a.values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn align_rejects_empty_instance() {
        let inst = IsmtsInstance {
            id: "x".into(),
            channels: vec![ChannelSeries::default()],
            label: None,
        };
        assert!(align(&inst).is_err());
    }

    #[test]
    fn align_matches_set_union_oracle_and_never_fabricates() {
        let ds = synth_generate(&two_class_spec(), 5).unwrap();
        for inst in &ds.instances {
            let a = align(inst).unwrap();
            // Set-union oracle for the grid.
            let mut set: Vec<u64> =
                inst.channels.iter().flat_map(|c| c.times.iter().map(|t| t.to_bits())).collect();
            set.sort_unstable();
            set.dedup();
            assert_eq!(a.grid.len(), set.len());
            // Mask count = total observations minus cross-channel collisions.
            let collisions = inst.num_obs() - set.len();
            let popcount = a.obs_mask.iter().filter(|&&m| m).count();
            assert_eq!(popcount + collisions, inst.num_obs());
            // Every observation appears exactly once, bit-exact.
            for (c, chan) in inst.channels.iter().enumerate() {
                for (&t, &v) in chan.times.iter().zip(&chan.values) {
                    let row = a.grid.iter().position(|&g| g == t).unwrap();
                    assert!(a.observed(row, c));
                    assert_eq!(a.value(row, c), v);
                }
            }
        }
    }

    #[test]
    fn synth_full_dropout_is_empty_instance_error() {
        let mut spec = two_class_spec();
        spec.dropout = 1.0;
        let err = synth_generate(&spec, 1).unwrap_err();
        assert!(err.to_string().contains("empty instance"), "{}", err);
    }

    #[test]
    fn synth_noiseless_values_follow_the_latent_exactly() {
        let mut spec = two_class_spec();
        spec.noise_sigma = 0.0;
        spec.classes.truncate(1);
        spec.classes[0].channels.truncate(1);
        spec.instances_per_class = 3;
        let ds = synth_generate(&spec, 7).unwrap();
        let s = &spec.classes[0].channels[0].sinusoids[0];
        for inst in &ds.instances {
            let chan = &inst.channels[0];
            assert!(!chan.is_empty());
            for (&t, &v) in chan.times.iter().zip(&chan.values) {
                assert_eq!(v, s.eval(t));
            }
        }
    }

    #[test]
    fn synth_is_pure_in_spec_and_seed() {
        let spec = two_class_spec();
        assert_eq!(synth_generate(&spec, 42).unwrap(), synth_generate(&spec, 42).unwrap());
        assert_ne!(synth_generate(&spec, 42).unwrap(), synth_generate(&spec, 43).unwrap());
    }

    #[test]
    fn synth_outage_empties_whole_channels_but_never_an_instance() {
        let mut spec = two_class_spec();
        spec.outage = 0.45;
        let ds = synth_generate(&spec, 11).unwrap();
        let empty_channels: usize = ds
            .instances
            .iter()
            .map(|i| i.channels.iter().filter(|c| c.is_empty()).count())
            .sum();
        // 40 instances x 2 channels at 45%: emptiness must show up often.
        assert!(empty_channels >= 10, "only {empty_channels} empty channels");
        for inst in &ds.instances {
            assert!(inst.num_obs() > 0, "instance {} lost every channel", inst.id);
        }
        // Determinism holds with the outage path active.
        assert_eq!(ds, synth_generate(&spec, 11).unwrap());
    }

    #[test]
    fn synth_zero_outage_never_empties_a_channel() {
        // At rate >= 1.5 over span 100 with no dropout, an empty channel
        // can only come from the outage path.
        let ds = synth_generate(&two_class_spec(), 42).unwrap();
        for inst in &ds.instances {
            for chan in &inst.channels {
                assert!(!chan.is_empty());
            }
        }
    }

    #[test]
    fn synth_rejects_outage_of_one() {
        let mut spec = two_class_spec();
        spec.outage = 1.0;
        assert!(synth_generate(&spec, 1).unwrap_err().to_string().contains("outage"));
    }

    #[test]
    fn generator_toml_defaults_outage_to_zero() {
        let toml_src = r#"
            instances_per_class = 2
            span = 10.0
            rate_min = 1.0
            rate_max = 2.0
            [[classes]]
            [[classes.channels]]
            sinusoids = [{ freq = 0.1, amp = 1.0, phase = 0.0 }]
        "#;
        let spec: GeneratorSpec = toml::from_str(toml_src).unwrap();
        assert_eq!(spec.outage, 0.0);
        assert_eq!(spec.dropout, 0.0);
    }

    #[test]
    fn synth_rejects_bad_rate_and_sigma() {
        let mut spec = two_class_spec();
        spec.rate_min = 0.0;
        assert!(synth_generate(&spec, 1).unwrap_err().to_string().contains("rate"));
        let mut spec = two_class_spec();
        spec.noise_sigma = -0.1;
        assert!(synth_generate(&spec, 1).unwrap_err().to_string().contains("sigma"));
    }

    #[test]
    fn nearest_centroid_oracle_certifies_two_class_task() {
        let spec = two_class_spec();
        let ds = synth_generate(&spec, 1234).unwrap();
        let grid: Vec<f64> = (0..=200).map(|i| i as f64 * 0.5).collect();
        let acc = nearest_centroid_accuracy(&spec, &ds, &grid);
        assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn split_ten_instances_is_8_1_1() {
        let mut spec = two_class_spec();
        spec.classes.truncate(1);
        spec.instances_per_class = 10;
        let mut ds = synth_generate(&spec, 3).unwrap();
        // Single-class labels make stratification trivial; also check the
        // unlabeled path.
        for inst in &mut ds.instances {
            inst.label = None;
        }
        let s = split(&ds, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<usize> =
            s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_same_seed_is_identical() {
        let ds = synth_generate(&two_class_spec(), 3).unwrap();
        assert_eq!(split(&ds, [0.8, 0.1, 0.1], 7).unwrap(), split(&ds, [0.8, 0.1, 0.1], 7).unwrap());
    }

    #[test]
    fn split_stratification_stays_within_one_sample() {
        let mut spec = two_class_spec();
        spec.instances_per_class = 30;
        let mut ds = synth_generate(&spec, 3).unwrap();
        // Unbalance: drop 10 of class 1.
        ds.instances.truncate(50);
        let s = split(&ds, [0.8, 0.1, 0.1], 11).unwrap();
        for class in 0..2 {
            let total = ds.instances.iter().filter(|i| i.label == Some(class)).count() as f64;
            let in_train =
                s.train.iter().filter(|&&i| ds.instances[i].label == Some(class)).count() as f64;
            let expect = total * 0.8;
            assert!((in_train - expect).abs() <= 1.0, "class {class}: {in_train} vs {expect}");
        }
    }

    #[test]
    fn split_rejects_tiny_class() {
        let mut spec = two_class_spec();
        spec.instances_per_class = 2;
        let ds = synth_generate(&spec, 3).unwrap();
        let err = split(&ds, [0.8, 0.1, 0.1], 7).unwrap_err();
        assert!(err.to_string().contains("stratification"), "{}", err);
    }

    #[test]
    fn normalizer_zeroes_train_statistics() {
        let ds = synth_generate(&two_class_spec(), 21).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let norm = Normalizer::fit(&ds, &idx);
        let mut sums = vec![0.0; ds.num_channels];
        let mut sq = vec![0.0; ds.num_channels];
        let mut counts = vec![0usize; ds.num_channels];
        for inst in &ds.instances {
            let z = norm.apply(inst);
            for (c, chan) in z.channels.iter().enumerate() {
                for &v in &chan.values {
                    sums[c] += v;
                    sq[c] += v * v;
                    counts[c] += 1;
                }
            }
        }
        for c in 0..ds.num_channels {
            let mean = sums[c] / counts[c] as f64;
            let var = sq[c] / counts[c] as f64 - mean * mean;
            assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "channel {c} var {var}");
        }
        assert!((norm.denorm(0, 1.5) - (1.5 * norm.stds[0] + norm.means[0])).abs() < 1e-15);
    }

    #[test]
    fn normalize_times_lands_in_unit_interval() {
        let ds = synth_generate(&two_class_spec(), 8).unwrap();
        for inst in &ds.instances {
            let n = normalize_times(inst);
            let (lo, hi) = n.time_span().unwrap();
            assert!(lo >= 0.0 && hi <= 1.0);
            assert!((hi - 1.0).abs() < 1e-12 || inst.num_obs() < 2);
        }
    }
}
