//! Adaptive densification: the clone/split candidates are the top λ% of
//! Gaussians by mean screen-space gradient, so the threshold follows each
//! scene's own gradient scale instead of a fixed constant.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{quat_to_mat, GaussianCloud};
use crate::real::{logit, Real};
use crate::raster::RenderOutput;

/// Running per-Gaussian gradient statistics since the last densification.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub accum_grad: Vec<f64>,
    pub denom: Vec<f64>,
    pub max_radius: Vec<f64>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            accum_grad: vec![0.0; n],
            denom: vec![0.0; n],
            max_radius: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.accum_grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accum_grad.is_empty()
    }

    /// Adds one view's screen-space gradient norms for visible Gaussians.
    pub fn record<T: Real>(&mut self, out: &RenderOutput<T>) {
        for i in 0..self.len() {
            if out.visibility[i] {
                self.accum_grad[i] += out.screen_grad_norm[i].as_f64();
                self.denom[i] += 1.0;
                self.max_radius[i] = self.max_radius[i].max(out.radii[i].as_f64());
            }
        }
    }

    /// Mean accumulated gradient, with `0/0 → 0`.
    pub fn mean(&self, i: usize) -> f64 {
        if self.denom[i] > 0.0 {
            self.accum_grad[i] / self.denom[i]
        } else {
            0.0
        }
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.mean(i)).collect()
    }

    pub fn reset(&mut self, n: usize) {
        *self = Self::new(n);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    /// λ: percentage of Gaussians selected per densification, in (0, 100].
    pub top_percent: f64,
    pub interval: u64,
    pub prune_opacity: f64,
    /// Selected Gaussians whose largest scale is below this are cloned,
    /// others are split. World units.
    pub split_scale_threshold: f64,
    pub split_factor: usize,
    pub opacity_reset_interval: u64,
    /// No densification at or after this step.
    pub stop_step: u64,
}

pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            top_percent: 2.5,
            interval: 100,
            prune_opacity: 0.005,
            split_scale_threshold: 0.05,
            split_factor: 2,
            opacity_reset_interval: 3000,
            stop_step: 15_000,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_percent > 0.0 && self.top_percent <= 100.0) {
            return Err(Error::Config(format!("top_percent must be in (0, 100], got {}", self.top_percent)));
        }
        if self.interval == 0 {
            return Err(Error::Config("densify interval must be at least 1".into()));
        }
        if self.split_factor == 0 {
            return Err(Error::Config("split_factor must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether `step` (1-based count of completed steps) triggers densification.
    pub fn is_due(&self, step: u64) -> bool {
        step > 0 && step < self.stop_step && step.is_multiple_of(self.interval)
    }
}

/// `ceil(λ/100 · N)`, at least one and at most N. A tiny slack absorbs the
/// representation error of decimal percentages.
pub fn selection_count(top_percent: f64, n: usize) -> usize {
    let k = (top_percent * n as f64 / 100.0 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// The k-th largest mean gradient.
    pub threshold: f64,
    /// Selected indices, highest gradient first (ties: lower index first).
    pub indices: Vec<usize>,
}

/// Selects the top λ% of Gaussians by mean accumulated gradient.
pub fn adaptive_threshold(stats: &DensifyStats, top_percent: f64) -> Result<Selection> {
    let n = stats.len();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    if !(top_percent > 0.0 && top_percent <= 100.0) {
        return Err(Error::Config(format!("top_percent must be in (0, 100], got {top_percent}")));
    }
    let k = selection_count(top_percent, n);
    let means = stats.means();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(Selection {
        threshold: means[order[k - 1]],
        indices: order,
    })
}

/// Where each row of the new cloud came from, so per-Gaussian optimizer
/// state can follow the topology change.
#[derive(Clone, Debug, PartialEq)]
pub struct TopologyChange {
    /// Old index per new row.
    pub source: Vec<usize>,
    /// Whether the row is an unmodified copy (its optimizer state carries over).
    pub carries_state: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub threshold: f64,
}

/// Clones small and splits large selected Gaussians, then prunes
/// near-transparent ones. Resets `stats` to the new size.
pub fn densify_step<T: Real>(
    cloud: &mut GaussianCloud<T>,
    stats: &mut DensifyStats,
    config: &DensifyConfig,
    rng: &mut impl Rng,
) -> Result<(TopologyChange, DensifyReport)> {
    if stats.len() != cloud.len() {
        return Err(Error::Shape(format!("stats for {} gaussians, cloud has {}", stats.len(), cloud.len())));
    }
    let sel = adaptive_threshold(stats, config.top_percent)?;
    let n = cloud.len();
    let mut split_mask = vec![false; n];
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    // a Gaussian that never received gradient has nothing to refine
    for &i in sel.indices.iter().filter(|&&i| stats.mean(i) > 0.0) {
        let max_scale = cloud.log_scales[i].iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64().exp()));
        if max_scale < config.split_scale_threshold {
            clones.push(i);
        } else {
            split_mask[i] = true;
            splits.push(i);
        }
    }
    // selection order is by gradient; lay out new rows by index
    clones.sort_unstable();
    splits.sort_unstable();

    let mut next = GaussianCloud::empty(cloud.sh_degree);
    let mut source = Vec::with_capacity(n + clones.len() + splits.len() * config.split_factor);
    let mut carries = Vec::with_capacity(source.capacity());
    for i in (0..n).filter(|&i| !split_mask[i]) {
        next.push(cloud.positions[i], cloud.log_scales[i], cloud.rotations[i], cloud.opacity_logits[i], cloud.sh_of(i));
        source.push(i);
        carries.push(true);
    }
    for &i in &clones {
        next.push(cloud.positions[i], cloud.log_scales[i], cloud.rotations[i], cloud.opacity_logits[i], cloud.sh_of(i));
        source.push(i);
        carries.push(false);
    }
    let shrink = T::c(SPLIT_SCALE_DIVISOR.ln());
    for &i in &splits {
        let r = quat_to_mat(&crate::gaussian::normalize_quat(&cloud.rotations[i]));
        let s = cloud.scale(i);
        for _ in 0..config.split_factor {
            let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let local = [0, 1, 2].map(|k| s[k] * T::c(z[k]));
            let p = cloud.positions[i];
            let pos = [0, 1, 2].map(|row| p[row] + r[row][0] * local[0] + r[row][1] * local[1] + r[row][2] * local[2]);
            let ls = cloud.log_scales[i].map(|v| v - shrink);
            next.push(pos, ls, cloud.rotations[i], cloud.opacity_logits[i], cloud.sh_of(i));
            source.push(i);
            carries.push(false);
        }
    }

    let keep: Vec<usize> = (0..next.len())
        .filter(|&j| next.opacity(j).as_f64() >= config.prune_opacity)
        .collect();
    let pruned = next.len() - keep.len();
    if keep.is_empty() {
        return Err(Error::Config("densification removed every gaussian; lower prune_opacity".into()));
    }
    *cloud = next.clone_subset(&keep)?;
    let change = TopologyChange {
        source: keep.iter().map(|&j| source[j]).collect(),
        carries_state: keep.iter().map(|&j| carries[j]).collect(),
    };
    stats.reset(cloud.len());
    Ok((
        change,
        DensifyReport {
            cloned: clones.len(),
            split: splits.len(),
            pruned,
            threshold: sel.threshold,
        },
    ))
}

/// Caps every opacity at `ceiling` (in activated units). Returns the indices
/// whose logits changed.
pub fn reset_opacity<T: Real>(cloud: &mut GaussianCloud<T>, ceiling: f64) -> Vec<usize> {
    let cap = T::c(logit(ceiling));
    let mut changed = Vec::new();
    for (i, l) in cloud.opacity_logits.iter_mut().enumerate() {
        if *l > cap {
            *l = cap;
            changed.push(i);
        }
    }
    changed
}

/// Equal-width histogram of `ln(mean gradient + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub const HIST_EPS: f64 = 1e-12;

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s
    }

    /// Bin indices that are strict local maxima of the counts (plateaus count once).
    pub fn modes(&self) -> Vec<usize> {
        let c = &self.counts;
        let mut out = Vec::new();
        let mut i = 0;
        while i < c.len() {
            let mut j = i;
            while j + 1 < c.len() && c[j + 1] == c[i] {
                j += 1;
            }
            let left = if i == 0 { 0 } else { c[i - 1] };
            let right = if j + 1 == c.len() { 0 } else { c[j + 1] };
            if c[i] > 0 && c[i] > left && c[i] > right {
                out.push((i + j) / 2);
            }
            i = j + 1;
        }
        out
    }

    pub fn center(&self, bin: usize) -> f64 {
        0.5 * (self.edges[bin] + self.edges[bin + 1])
    }
}

pub fn gradient_histogram(stats: &DensifyStats, bins: usize) -> Result<Histogram> {
    log_histogram(&stats.means(), bins)
}

/// Histogram of `ln(v + ε)` over the observed range. A zero-width range is
/// widened to one unit so everything lands in a single bin.
pub fn log_histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let logs: Vec<f64> = values.iter().map(|v| (v.max(0.0) + HIST_EPS).ln()).collect();
    let mut lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0; bins];
    for v in logs {
        let b = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats_from(means: &[f64]) -> DensifyStats {
        DensifyStats {
            accum_grad: means.to_vec(),
            denom: vec![1.0; means.len()],
            max_radius: vec![0.0; means.len()],
        }
    }

    /// Brute force: rank by value then index, exact integer arithmetic for k.
    fn oracle(means: &[f64], lambda_milli: u64) -> Vec<usize> {
        let n = means.len() as u64;
        let k = (lambda_milli * n).div_ceil(100_000).max(1) as usize;
        let mut idx: Vec<usize> = (0..means.len()).collect();
        for i in 0..idx.len() {
            for j in i + 1..idx.len() {
                let (a, b) = (idx[i], idx[j]);
                if means[b] > means[a] || (means[b] == means[a] && b < a) {
                    idx.swap(i, j);
                }
            }
        }
        idx.truncate(k);
        idx
    }

    #[test]
    fn top_two_and_a_half_percent_of_one_to_hundred() {
        let means: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let sel = adaptive_threshold(&stats_from(&means), 2.5).unwrap();
        assert_eq!(sel.indices, vec![99, 98, 97]);
        assert_eq!(sel.threshold, 98.0);
        assert_eq!(sel.indices, oracle(&means, 2500));
    }

    #[test]
    fn full_and_minimal_selection() {
        let means = vec![0.3; 9];
        assert_eq!(adaptive_threshold(&stats_from(&means), 100.0).unwrap().indices.len(), 9);
        assert_eq!(selection_count(2.5, 7), 1);
        let zero = adaptive_threshold(&stats_from(&[0.0; 7]), 2.5).unwrap();
        assert_eq!(zero.indices, vec![0]);
        assert_eq!(zero.threshold, 0.0);
    }

    #[test]
    fn zero_denominator_means_zero() {
        let s = DensifyStats {
            accum_grad: vec![0.0, 4.0],
            denom: vec![0.0, 2.0],
            max_radius: vec![0.0; 2],
        };
        assert_eq!(s.means(), vec![0.0, 2.0]);
    }

    #[test]
    fn rejects_bad_percentages() {
        let s = stats_from(&[1.0]);
        assert!(adaptive_threshold(&s, 0.0).is_err());
        assert!(adaptive_threshold(&s, 100.5).is_err());
        assert!(adaptive_threshold(&DensifyStats::new(0), 10.0).is_err());
    }

    fn cloud_of(n: usize, log_scale: f32, opacity_logit: f32) -> GaussianCloud<f32> {
        let mut c = GaussianCloud::empty(0);
        for i in 0..n {
            c.push([i as f32, 0.0, 0.0], [log_scale; 3], [1.0, 0.0, 0.0, 0.0], opacity_logit, &[0.1, 0.2, 0.3]);
        }
        c
    }

    #[test]
    fn small_selected_gaussian_is_cloned() {
        let mut c = cloud_of(10, (0.01f32).ln(), 2.0);
        let mut s = stats_from(&[0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let cfg = DensifyConfig {
            top_percent: 10.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (change, rep) = densify_step(&mut c, &mut s, &cfg, &mut rng).unwrap();
        assert_eq!(c.len(), 11);
        assert_eq!(rep.cloned, 1);
        assert_eq!(c.positions[10], [3.0, 0.0, 0.0]);
        assert_eq!(change.source[10], 3);
        assert!(!change.carries_state[10]);
        assert_eq!(s.len(), 11);
        assert!(s.accum_grad.iter().chain(&s.denom).all(|&v| v == 0.0));
    }

    #[test]
    fn large_selected_gaussian_is_split() {
        let mut c = cloud_of(10, (0.5f32).ln(), 2.0);
        let mut s = stats_from(&[0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let cfg = DensifyConfig {
            top_percent: 10.0,
            split_factor: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (change, rep) = densify_step(&mut c, &mut s, &cfg, &mut rng).unwrap();
        assert_eq!(rep.split, 1);
        assert_eq!(c.len(), 11);
        let expect = 0.5f32.ln() - 1.6f32.ln();
        for child in [9, 10] {
            assert_eq!(change.source[child], 1);
            for v in c.log_scales[child] {
                assert!((v - expect).abs() < 1e-6);
            }
        }
        // the parent row is gone
        assert!(!c.positions.iter().any(|p| *p == [1.0, 0.0, 0.0]));
    }

    #[test]
    fn transparent_gaussians_are_pruned() {
        let mut c = cloud_of(4, (0.01f32).ln(), 2.0);
        c.opacity_logits[2] = logit(0.001);
        let mut s = stats_from(&[1.0, 0.0, 0.0, 0.0]);
        let cfg = DensifyConfig {
            top_percent: 25.0,
            prune_opacity: 0.005,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (change, rep) = densify_step(&mut c, &mut s, &cfg, &mut rng).unwrap();
        assert_eq!(rep.pruned, 1);
        assert_eq!(c.len(), 4);
        assert!(!change.source.contains(&2));
    }

    #[test]
    fn pruning_everything_is_fatal() {
        let mut c = cloud_of(3, 0.0, -20.0);
        let mut s = stats_from(&[1.0, 2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(densify_step(&mut c, &mut s, &DensifyConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn equal_gradients_fill_one_bin() {
        let h = log_histogram(&[3.0; 17], 10).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 17);
    }

    #[test]
    fn zero_gradients_land_in_lowest_bin() {
        let h = log_histogram(&[0.0, 0.0, 5.0, 10.0], 8).unwrap();
        assert_eq!(h.counts[0], 2);
        assert!(h.edges.iter().all(|e| e.is_finite()));
        let csv = h.to_csv();
        assert!(csv.starts_with("bin_left,bin_right,count\n"));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn two_cluster_population_has_two_log_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut v = Vec::new();
        for (mu, n) in [(3.7f64, 4000), (5.0, 4000)] {
            for _ in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                v.push((mu + 0.15 * z).exp());
            }
        }
        let h = log_histogram(&v, 24).unwrap();
        // smooth away sampling noise before looking for peaks
        let smoothed: Vec<usize> = (0..h.counts.len())
            .map(|i| (i.saturating_sub(1)..=(i + 1).min(h.counts.len() - 1)).map(|j| h.counts[j]).sum())
            .collect();
        let modes = Histogram { edges: h.edges.clone(), counts: smoothed }.modes();
        assert_eq!(modes.len(), 2, "{:?}", h.counts);
        assert!((h.center(modes[0]) - 3.7).abs() < 0.2);
        assert!((h.center(modes[1]) - 5.0).abs() < 0.2);
    }

    proptest! {
        #[test]
        fn selection_size_and_oracle(vals in proptest::collection::vec(0.0f64..1000.0, 1..300), lambda_milli in 1u64..=100_000) {
            let lambda = lambda_milli as f64 / 1000.0;
            let sel = adaptive_threshold(&stats_from(&vals), lambda).unwrap();
            let expect = oracle(&vals, lambda_milli);
            prop_assert_eq!(sel.indices.len(), expect.len());
            prop_assert_eq!(sel.indices, expect);
        }

        #[test]
        fn selection_is_scale_equivariant(vals in proptest::collection::vec(0.0f64..50.0, 1..200), c in 1e-3f64..1e3, lambda in 0.1f64..100.0) {
            let a = adaptive_threshold(&stats_from(&vals), lambda).unwrap();
            let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
            let b = adaptive_threshold(&stats_from(&scaled), lambda).unwrap();
            prop_assert_eq!(a.indices, b.indices);
        }
    }
}
