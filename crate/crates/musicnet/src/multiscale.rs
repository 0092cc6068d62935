//! Coarse-to-fine hierarchy over an aligned instance: equal-width window
//! pooling with observation-aware means, the window-halving rule that picks
//! the number of scales, per-scale random masks, and per-scale reference
//! points.

use rand::Rng;

use crate::data::AlignedInstance;
use crate::rng::substream_indexed;

/// Base window count at the coarsest level (the span is initially quartered).
const BASE_WINDOWS: usize = 4;
/// Clamp range for the dataset-level scale count.
pub const MIN_SCALES: usize = 2;
pub const MAX_SCALES: usize = 8;

/// Random-mask settings: each observed cell is held out independently with
/// probability `ratio`, per level, derived from `seed`.
#[derive(Clone, Copy, Debug)]
pub struct MaskingConfig {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> MaskingConfig {
        MaskingConfig { ratio: 0.1, seed: 0 }
    }
}

/// Equal-width window layout of one pooled level.
#[derive(Clone, Copy, Debug)]
pub struct WindowPartition {
    pub lo: f64,
    pub width: f64,
    pub count: usize,
}

impl WindowPartition {
    /// Window index containing time `t` (clamped to the edge windows).
    pub fn window_of(&self, t: f64) -> usize {
        if self.width <= 0.0 {
            return 0;
        }
        let idx = ((t - self.lo) / self.width).floor();
        (idx.max(0.0) as usize).min(self.count - 1)
    }
}

/// One level of the hierarchy: pooled grid/values/observation mask, the
/// held-out random mask M (true = hidden from the encoder, scored by the
/// reconstruction loss), and the level's reference-point count.
#[derive(Clone, Debug)]
pub struct ScaleLevel {
    pub data: AlignedInstance,
    pub random_mask: Vec<bool>,
    pub ref_count: usize,
    /// `None` for the raw (finest) level, which bypasses pooling.
    pub windows: Option<WindowPartition>,
}

/// Levels ordered coarse to fine; the last level is the raw instance.
#[derive(Clone, Debug)]
pub struct ScaleHierarchy {
    pub levels: Vec<ScaleLevel>,
}

impl ScaleHierarchy {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// For level index `li` (0-based, >= 1), map each of its grid rows to the
    /// containing window row of the next-coarser level.
    pub fn assignment_to_coarser(&self, li: usize) -> Vec<usize> {
        assert!(li >= 1 && li < self.levels.len(), "no coarser level for index {}", li);
        let part = self.levels[li - 1]
            .windows
            .expect("coarser level is always window-pooled");
        self.levels[li].data.grid.iter().map(|&t| part.window_of(t)).collect()
    }
}

/// Fraction of (window, channel) cells with no observation when `inst` is
/// partitioned into `count` equal-width windows.
fn empty_cell_fraction(inst: &AlignedInstance, lo: f64, span: f64, count: usize) -> f64 {
    let d = inst.num_channels;
    let part = WindowPartition { lo, width: span / count as f64, count };
    let mut occupied = vec![false; count * d];
    for (row, &t) in inst.grid.iter().enumerate() {
        let w = part.window_of(t);
        for c in 0..d {
            if inst.observed(row, c) {
                occupied[w * d + c] = true;
            }
        }
    }
    let filled = occupied.iter().filter(|&&o| o).count();
    1.0 - filled as f64 / (count * d) as f64
}

/// Per-instance scale count: accept the initial span/4 window size, halve
/// while more than half of the (window, channel) cells at the next halving
/// would still contain an observation, and add one for the raw scale.
pub fn choose_num_scales(inst: &AlignedInstance) -> usize {
    assert!(!inst.grid.is_empty(), "choose_num_scales: empty instance");
    let lo = inst.grid[0];
    let span = inst.grid[inst.grid.len() - 1] - lo;
    let mut accepted = 1;
    let mut windows = BASE_WINDOWS;
    // The clamp caps the useful answer at MAX_SCALES; probing a little past
    // it keeps the per-instance value meaningful for the median.
    while accepted < 2 * MAX_SCALES {
        let next = windows * 2;
        if empty_cell_fraction(inst, lo, span, next) > 0.5 {
            break;
        }
        windows = next;
        accepted += 1;
    }
    accepted + 1
}

/// Dataset-level scale count: lower median of the per-instance values over
/// the training instances, clamped to [MIN_SCALES, MAX_SCALES].
pub fn choose_num_scales_median(instances: &[AlignedInstance]) -> usize {
    assert!(!instances.is_empty(), "choose_num_scales_median: no instances");
    let mut ls: Vec<usize> = instances.iter().map(choose_num_scales).collect();
    ls.sort_unstable();
    ls[(ls.len() - 1) / 2].clamp(MIN_SCALES, MAX_SCALES)
}

/// Reference-point count for 1-based level `l` of `l_total`:
/// `max(4, max_refs / 2^(l_total - l))`.
pub fn ref_count(l: usize, l_total: usize, max_refs: usize) -> usize {
    assert!(l >= 1 && l <= l_total, "level {} outside 1..={}", l, l_total);
    let shift = l_total - l;
    let halved = if shift >= usize::BITS as usize { 0 } else { max_refs >> shift };
    halved.max(4)
}

/// Equally spaced reference times over the normalized span [0, 1] for the
/// given level.
pub fn ref_points(l: usize, l_total: usize, max_refs: usize) -> Vec<f64> {
    let k = ref_count(l, l_total, max_refs);
    (0..k).map(|i| i as f64 / (k - 1) as f64).collect()
}

/// Build the `l_total`-level hierarchy for one aligned instance. Levels
/// 1..l_total-1 pool into 4·2^(l-1) equal-width windows (observation-aware
/// means, window-center timestamps); level l_total is the raw instance. Each
/// level draws its own random mask.
pub fn build_hierarchy(
    inst: &AlignedInstance,
    l_total: usize,
    mask_cfg: &MaskingConfig,
    max_refs: usize,
) -> ScaleHierarchy {
    assert!(l_total >= 2, "hierarchy needs at least 2 levels, got {}", l_total);
    assert!(!inst.grid.is_empty(), "build_hierarchy: empty instance");
    let d = inst.num_channels;
    let lo = inst.grid[0];
    let span = inst.grid[inst.grid.len() - 1] - lo;

    let mut levels = Vec::with_capacity(l_total);
    for l in 1..=l_total {
        let (data, windows) = if l == l_total {
            (inst.clone(), None)
        } else {
            let count = BASE_WINDOWS << (l - 1);
            let part = WindowPartition { lo, width: span / count as f64, count };
            let mut sums = vec![0.0; count * d];
            let mut hits = vec![0usize; count * d];
            for (row, &t) in inst.grid.iter().enumerate() {
                let w = part.window_of(t);
                for c in 0..d {
                    if inst.observed(row, c) {
                        sums[w * d + c] += inst.value(row, c);
                        hits[w * d + c] += 1;
                    }
                }
            }
            let mut values = vec![0.0; count * d];
            let mut obs_mask = vec![false; count * d];
            for i in 0..count * d {
                if hits[i] > 0 {
                    values[i] = sums[i] / hits[i] as f64;
                    obs_mask[i] = true;
                }
            }
            let grid: Vec<f64> =
                (0..count).map(|w| lo + (w as f64 + 0.5) * part.width).collect();
            (AlignedInstance { grid, num_channels: d, values, obs_mask }, Some(part))
        };

        let mut rng = substream_indexed(mask_cfg.seed, "mask-level", l as u64);
        let random_mask: Vec<bool> = data
            .obs_mask
            .iter()
            .map(|&obs| obs && rng.gen::<f64>() < mask_cfg.ratio)
            .collect();

        levels.push(ScaleLevel {
            data,
            random_mask,
            ref_count: ref_count(l, l_total, max_refs),
            windows,
        });
    }
    ScaleHierarchy { levels }
}
