//! Hierarchical Laplace perturbation over chunks of `r` readings.
//!
//! A chunk of `r` readings is covered by `⌈r / b^(h−1)⌉` trees whose nodes on
//! height `ℓ` (leaf height 1) aggregate `b^(ℓ−1)` readings, with
//! `h = ⌈log_b r⌉`. When the bottom `s` levels are delegated to the smoother,
//! the active leaves are groups of `b^s` readings and only heights `s+1..=h`
//! receive noise, each with budget `ε/(h−s)`.
//!
//! All noise of a tree is drawn before its first reading arrives and is made
//! consistent (every internal node equals the sum of its children). Since the
//! true aggregates are consistent by construction, publishing
//! `group sum + consistent leaf noise` yields the same leaves that offline
//! consistency over the full noisy tree would, without waiting for the chunk
//! to finish.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::mechanisms::{laplace_sample, LaplaceParams};
use crate::rng::RandomSource;
use crate::threshold::StreamConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierarchyPlan {
    fanout: u32,
    range: u64,
    height: u32,
    smoothed: u32,
    epsilon: f64,
}

/// Plan for a stream with the given config and `s` smoothed-away levels.
pub fn plan_hierarchy(config: &StreamConfig, smoothed: u32) -> Result<HierarchyPlan> {
    HierarchyPlan::new(config.fanout, config.range, config.epsilon, smoothed)
}

impl HierarchyPlan {
    pub fn new(fanout: u32, range: u64, epsilon: f64, smoothed: u32) -> Result<Self> {
        if fanout < 2 {
            return Err(Error::invalid("fan-out must be at least 2"));
        }
        if range < fanout as u64 {
            return Err(Error::invalid("range r must be at least the fan-out"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        let height = math::ceil_log(fanout as u64, range);
        if smoothed >= height {
            return Err(Error::invalid(alloc::format!(
                "smoothed levels s = {smoothed} must be below the height h = {height}"
            )));
        }
        Ok(Self {
            fanout,
            range,
            height,
            smoothed,
            epsilon,
        })
    }

    pub fn fanout(&self) -> u32 {
        self.fanout
    }

    pub fn range(&self) -> u64 {
        self.range
    }

    /// `h = ⌈log_b r⌉`.
    pub fn height(&self) -> u32 {
        self.height
    }

    /// `s`.
    pub fn smoothed(&self) -> u32 {
        self.smoothed
    }

    /// `h − s`.
    pub fn active_levels(&self) -> u32 {
        self.height - self.smoothed
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn level_epsilon(&self) -> f64 {
        self.epsilon / self.active_levels() as f64
    }

    /// Per-node Laplace scale for truncation threshold `θ`.
    pub fn noise_scale(&self, theta: f64) -> f64 {
        theta / self.level_epsilon()
    }

    /// Readings per active leaf, `b^s`.
    pub fn group_size(&self) -> u64 {
        math::upow(self.fanout as u64, self.smoothed)
    }

    /// Readings under one tree root, `b^(h−1)`.
    pub fn tree_span(&self) -> u64 {
        math::upow(self.fanout as u64, self.height - 1)
    }

    pub fn leaves_per_tree(&self) -> u64 {
        math::upow(self.fanout as u64, self.active_levels() - 1)
    }

    pub fn trees_per_chunk(&self) -> u64 {
        self.range.div_ceil(self.tree_span())
    }

    pub fn groups_per_chunk(&self) -> u64 {
        self.range.div_ceil(self.group_size())
    }
}

/// Noise values of one tree, stored level by level from the active leaves up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseTree {
    fanout: u32,
    levels: Vec<Vec<f64>>,
    consistent: bool,
}

impl NoiseTree {
    /// Zero noise on a tree with `active_levels` levels.
    pub fn zeros(fanout: u32, active_levels: u32) -> Self {
        let levels = (0..active_levels)
            .map(|j| vec![0.0; math::upow(fanout as u64, active_levels - 1 - j) as usize])
            .collect();
        Self {
            fanout,
            levels,
            consistent: true,
        }
    }

    /// A tree from explicit level values, leaves first. Each level must be `b` times smaller.
    pub fn from_levels(fanout: u32, levels: Vec<Vec<f64>>) -> Result<Self> {
        if fanout < 2 || levels.is_empty() {
            return Err(Error::invalid("tree needs a fan-out of at least 2 and one level"));
        }
        let top = levels.len() - 1;
        if levels[top].len() != 1 {
            return Err(Error::invalid("top level must hold exactly the root"));
        }
        for j in 0..top {
            if levels[j].len() != levels[j + 1].len() * fanout as usize {
                return Err(Error::invalid("level sizes must shrink by the fan-out"));
            }
        }
        Ok(Self {
            fanout,
            levels,
            consistent: false,
        })
    }

    pub fn fanout(&self) -> u32 {
        self.fanout
    }

    /// Number of levels, i.e. the height of the root.
    pub fn height(&self) -> usize {
        self.levels.len()
    }

    /// Values at relative height `ℓ` (leaf = 1).
    pub fn level(&self, height: usize) -> &[f64] {
        &self.levels[height - 1]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn leaves(&self) -> &[f64] {
        &self.levels[0]
    }

    pub fn root(&self) -> f64 {
        self.levels[self.levels.len() - 1][0]
    }

    pub fn is_consistent(&self) -> bool {
        self.consistent
    }

    /// Index range of the children of node `index` at height `height ≥ 2`.
    pub fn children(&self, index: usize) -> core::ops::Range<usize> {
        let b = self.fanout as usize;
        index * b..index * b + b
    }

    pub fn parent(&self, index: usize) -> usize {
        index / self.fanout as usize
    }

    /// Largest `|N(x) − Σ chd N(y)| / (1 + |N(x)|)` over internal nodes.
    pub fn consistency_gap(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 1..self.levels.len() {
            for (i, &v) in self.levels[j].iter().enumerate() {
                let sum: f64 = self.levels[j - 1][self.children(i)].iter().sum();
                worst = worst.max(math::abs(v - sum) / (1.0 + math::abs(v)));
            }
        }
        worst
    }
}

/// Draw independent `Lap(θ/ε_layer)` noise for every node of one tree.
pub fn build_noise_tree(plan: &HierarchyPlan, theta: f64, rng: &mut RandomSource) -> Result<NoiseTree> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::invalid("threshold must be positive; zero signals a failed threshold stage"));
    }
    let params = LaplaceParams::new(plan.noise_scale(theta))?;
    let active = plan.active_levels();
    let levels = (0..active)
        .map(|j| {
            let n = math::upow(plan.fanout() as u64, active - 1 - j) as usize;
            (0..n).map(|_| laplace_sample(params, rng)).collect()
        })
        .collect();
    Ok(NoiseTree {
        fanout: plan.fanout(),
        levels,
        consistent: false,
    })
}

/// Weighted bottom-up pass followed by the top-down redistribution.
///
/// Bottom-up, for height `ℓ = 2..=h`:
/// `z(x) = (b^ℓ − b^(ℓ−1))/(b^ℓ − 1)·N(x) + (b^(ℓ−1) − 1)/(b^ℓ − 1)·Σ chd z(y)`.
/// Top-down, for `ℓ = h−1..=1`, with siblings read from the bottom-up values:
/// `N(x) = (b−1)/b·z(x) + (1/b)·(N(prt x) − Σ sbl z(y))`.
pub fn make_consistent(mut tree: NoiseTree) -> NoiseTree {
    consistency_passes(tree.fanout, &mut tree.levels);
    tree.consistent = true;
    tree
}

fn consistency_passes(fanout: u32, levels: &mut [Vec<f64>]) {
    let b = fanout as f64;
    let b_us = fanout as usize;
    let height = levels.len();

    for j in 1..height {
        let ell = (j + 1) as u32;
        let top = math::powi(b, ell);
        let below = math::powi(b, ell - 1);
        let own = (top - below) / (top - 1.0);
        let kids = (below - 1.0) / (top - 1.0);
        let (lower, upper) = levels.split_at_mut(j);
        let children = &lower[j - 1];
        for (i, v) in upper[0].iter_mut().enumerate() {
            let sum: f64 = children[i * b_us..i * b_us + b_us].iter().sum();
            *v = own * *v + kids * sum;
        }
    }

    for j in (0..height - 1).rev() {
        let (lower, upper) = levels.split_at_mut(j + 1);
        let parents = &upper[0];
        let level = &mut lower[j];
        for (p, chunk) in level.chunks_mut(b_us).enumerate() {
            let sum: f64 = chunk.iter().sum();
            let correction = (parents[p] - sum) / b;
            for v in chunk.iter_mut() {
                *v += correction;
            }
        }
    }
}

/// Offline consistency applied directly to full noisy values `H = T + N`.
///
/// Written node by node with explicit parent and sibling lookups; used as the
/// reference that the online route is checked against.
pub fn offline_consistency_reference(fanout: u32, noisy: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let b = fanout as usize;
    let bf = fanout as f64;
    let height = noisy.len();

    let mut z: Vec<Vec<f64>> = noisy.to_vec();
    for ell in 2..=height {
        let top = math::powi(bf, ell as u32);
        let below = math::powi(bf, ell as u32 - 1);
        for x in 0..z[ell - 1].len() {
            let mut child_sum = 0.0;
            for c in 0..b {
                child_sum += z[ell - 2][x * b + c];
            }
            z[ell - 1][x] = (top - below) / (top - 1.0) * noisy[ell - 1][x] + (below - 1.0) / (top - 1.0) * child_sum;
        }
    }

    let mut out = z.clone();
    for ell in (1..height).rev() {
        for x in 0..out[ell - 1].len() {
            let parent = x / b;
            let mut sibling_sum = 0.0;
            for y in parent * b..parent * b + b {
                if y != x {
                    sibling_sum += z[ell - 1][y];
                }
            }
            out[ell - 1][x] = (bf - 1.0) / bf * z[ell - 1][x] + (out[ell][parent] - sibling_sum) / bf;
        }
    }
    out
}

/// The generator of tree `tree` in chunk `chunk`.
pub fn tree_rng(base: &RandomSource, chunk: u64, tree: u64) -> RandomSource {
    base.derive(chunk).derive(tree)
}

/// One released active-leaf aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PublishedAggregate {
    pub chunk: u64,
    /// Group index inside the chunk.
    pub group: u64,
    /// Readings summed into this group (`b^s` except for a partial final group).
    pub readings: u64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NoiseSource {
    Laplace,
    Disabled,
}

/// Ingestion state for one chunk of `r` readings.
#[derive(Debug, Clone)]
pub struct HierarchyChunk {
    plan: HierarchyPlan,
    theta: f64,
    index: u64,
    base: RandomSource,
    noise: NoiseSource,
    consistent: bool,
    trees: Vec<Option<NoiseTree>>,
    consumed: u64,
    group: u64,
    group_fill: u64,
    group_sum: f64,
}

impl HierarchyChunk {
    fn new(plan: HierarchyPlan, theta: f64, index: u64, base: RandomSource, noise: NoiseSource, consistent: bool) -> Self {
        Self {
            plan,
            theta,
            index,
            base,
            noise,
            consistent,
            trees: vec![None; plan.trees_per_chunk() as usize],
            consumed: 0,
            group: 0,
            group_fill: 0,
            group_sum: 0.0,
        }
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn is_full(&self) -> bool {
        self.consumed == self.plan.range()
    }

    /// Noise trees generated so far (trees are generated on first use).
    pub fn trees(&self) -> impl Iterator<Item = (u64, &NoiseTree)> {
        self.trees
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.as_ref().map(|t| (i as u64, t)))
    }

    fn leaf_noise(&mut self, group: u64) -> Result<f64> {
        let per_tree = self.plan.leaves_per_tree();
        let tree = (group / per_tree) as usize;
        if self.trees[tree].is_none() {
            let built = match self.noise {
                NoiseSource::Disabled => NoiseTree::zeros(self.plan.fanout(), self.plan.active_levels()),
                NoiseSource::Laplace => {
                    let mut rng = tree_rng(&self.base, self.index, tree as u64);
                    let raw = build_noise_tree(&self.plan, self.theta, &mut rng)?;
                    if self.consistent {
                        make_consistent(raw)
                    } else {
                        raw
                    }
                }
            };
            self.trees[tree] = Some(built);
        }
        let leaves = self.trees[tree].as_ref().map(NoiseTree::leaves).unwrap_or(&[]);
        Ok(leaves[(group % per_tree) as usize])
    }

    fn emit(&mut self) -> Result<PublishedAggregate> {
        let noise = self.leaf_noise(self.group)?;
        let out = PublishedAggregate {
            chunk: self.index,
            group: self.group,
            readings: self.group_fill,
            value: self.group_sum + noise,
        };
        self.group += 1;
        self.group_fill = 0;
        self.group_sum = 0.0;
        Ok(out)
    }

    /// Add one truncated reading. Returns the group aggregate when the reading completes a group.
    pub fn ingest(&mut self, v: f64) -> Result<Option<PublishedAggregate>> {
        if self.is_full() {
            return Err(Error::invalid("chunk is full"));
        }
        self.consumed += 1;
        self.group_sum += v;
        self.group_fill += 1;
        if self.group_fill == self.plan.group_size() || self.is_full() {
            return self.emit().map(Some);
        }
        Ok(None)
    }

    /// Release a partially filled final group, if any.
    pub fn flush(&mut self) -> Result<Option<PublishedAggregate>> {
        if self.group_fill == 0 {
            return Ok(None);
        }
        self.emit().map(Some)
    }
}

/// Online perturber over an unbounded stream: a fresh chunk every `r` readings.
#[derive(Debug, Clone)]
pub struct Perturber {
    plan: HierarchyPlan,
    theta: f64,
    base: RandomSource,
    noise: NoiseSource,
    consistent: bool,
    chunk: HierarchyChunk,
    ingested: u64,
}

impl Perturber {
    /// Consistent-noise perturber. `theta` must be positive.
    pub fn new(plan: HierarchyPlan, theta: f64, rng: RandomSource) -> Result<Self> {
        Self::with_options(plan, theta, rng, true)
    }

    /// `consistent = false` publishes raw Laplace leaf noise.
    pub fn with_options(plan: HierarchyPlan, theta: f64, rng: RandomSource, consistent: bool) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::invalid("threshold must be positive; zero signals a failed threshold stage"));
        }
        let chunk = HierarchyChunk::new(plan, theta, 0, rng.clone(), NoiseSource::Laplace, consistent);
        Ok(Self {
            plan,
            theta,
            base: rng,
            noise: NoiseSource::Laplace,
            consistent,
            chunk,
            ingested: 0,
        })
    }

    /// Perturber that adds no noise. Test hook for exactness checks.
    pub fn noiseless(plan: HierarchyPlan, theta: f64) -> Self {
        let rng = RandomSource::new(0, 0);
        let chunk = HierarchyChunk::new(plan, theta, 0, rng.clone(), NoiseSource::Disabled, true);
        Self {
            plan,
            theta,
            base: rng,
            noise: NoiseSource::Disabled,
            consistent: true,
            chunk,
            ingested: 0,
        }
    }

    pub fn plan(&self) -> &HierarchyPlan {
        &self.plan
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn current_chunk(&self) -> &HierarchyChunk {
        &self.chunk
    }

    /// Ingest one reading already truncated to `[0, θ]`.
    pub fn ingest(&mut self, v: f64) -> Result<Option<PublishedAggregate>> {
        if !(v >= 0.0 && v <= self.theta) {
            return Err(Error::DataContract {
                index: self.ingested as usize,
                reason: alloc::format!("value {v} outside [0, θ = {}]; truncate before ingesting", self.theta),
            });
        }
        if self.chunk.is_full() {
            let next = self.chunk.index() + 1;
            self.chunk = HierarchyChunk::new(self.plan, self.theta, next, self.base.clone(), self.noise, self.consistent);
        }
        self.ingested += 1;
        self.chunk.ingest(v)
    }

    pub fn flush(&mut self) -> Result<Option<PublishedAggregate>> {
        self.chunk.flush()
    }
}

/// Every node of a noisy hierarchy over a finite stream, kept for range queries
/// answered by canonical node decomposition.
#[derive(Debug, Clone)]
pub struct HierarchyRelease {
    plan: HierarchyPlan,
    groups: u64,
    /// `chunks[c][t]` is tree `t` of chunk `c` holding `T + N`, leaves first.
    chunks: Vec<Vec<Vec<Vec<f64>>>>,
}

impl HierarchyRelease {
    /// Release for the truncated readings `values` (each in `[0, θ]`), with noise drawn
    /// exactly as [`Perturber`] draws it from the same `rng`.
    pub fn build(plan: HierarchyPlan, theta: f64, values: &[f64], rng: &RandomSource, consistent: bool) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !(*v >= 0.0 && *v <= theta)) {
            return Err(Error::DataContract {
                index,
                reason: alloc::format!("value {} outside [0, θ = {theta}]", values[index]),
            });
        }
        let group_size = plan.group_size() as usize;
        let groups_per_chunk = plan.groups_per_chunk() as usize;
        let range = plan.range() as usize;
        let per_tree = plan.leaves_per_tree() as usize;
        let fanout = plan.fanout() as usize;

        let mut group_sums = Vec::new();
        for chunk in values.chunks(range) {
            for g in chunk.chunks(group_size) {
                group_sums.push(g.iter().sum::<f64>());
            }
        }
        let groups = group_sums.len() as u64;

        let mut chunks = Vec::new();
        for (c, chunk_sums) in group_sums.chunks(groups_per_chunk).enumerate() {
            let mut trees = Vec::new();
            for (t, tree_sums) in chunk_sums.chunks(per_tree).enumerate() {
                let mut tree_rng = tree_rng(rng, c as u64, t as u64);
                let noise = build_noise_tree(&plan, theta, &mut tree_rng)?;
                let noise = if consistent { make_consistent(noise) } else { noise };
                let mut levels: Vec<Vec<f64>> = Vec::with_capacity(noise.height());
                let mut truth = vec![0.0; per_tree];
                truth[..tree_sums.len()].copy_from_slice(tree_sums);
                for (j, nl) in noise.levels().iter().enumerate() {
                    if j > 0 {
                        truth = truth.chunks(fanout).map(|c| c.iter().sum()).collect();
                    }
                    levels.push(truth.iter().zip(nl).map(|(a, b)| a + b).collect());
                }
                trees.push(levels);
            }
            chunks.push(trees);
        }
        Ok(Self { plan, groups, chunks })
    }

    pub fn plan(&self) -> &HierarchyPlan {
        &self.plan
    }

    pub fn groups(&self) -> u64 {
        self.groups
    }

    /// `chunks()[c][t][ℓ]` is level `ℓ` (leaves first) of tree `t` in chunk `c`.
    pub fn chunks(&self) -> &[Vec<Vec<Vec<f64>>>] {
        &self.chunks
    }

    /// Active-leaf values in stream order.
    pub fn leaves(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.groups as usize);
        for trees in &self.chunks {
            for tree in trees {
                out.extend_from_slice(&tree[0]);
            }
        }
        out.truncate(self.groups as usize);
        out
    }

    /// Noisy sum over groups `first..=last` (0-based) using the fewest tree nodes.
    pub fn answer_groups(&self, first: u64, last: u64) -> Result<f64> {
        if first > last || last >= self.groups {
            return Err(Error::InvalidQuery {
                start: first as usize,
                end: last as usize,
                reason: alloc::format!("outside the {} released groups", self.groups),
            });
        }
        let per_chunk = self.plan.groups_per_chunk();
        let mut total = 0.0;
        let mut lo = first;
        while lo <= last {
            let chunk = lo / per_chunk;
            let chunk_end = ((chunk + 1) * per_chunk - 1).min(last);
            total += self.decompose(chunk as usize, lo - chunk * per_chunk, chunk_end - chunk * per_chunk + 1);
            lo = chunk_end + 1;
        }
        Ok(total)
    }

    // Sum nodes covering leaf range [lo, hi) within one chunk.
    fn decompose(&self, chunk: usize, mut lo: u64, mut hi: u64) -> f64 {
        let trees = &self.chunks[chunk];
        let b = self.plan.fanout() as u64;
        let height = trees[0].len();
        let node = |level: usize, i: u64| -> f64 {
            let per = trees[0][level].len() as u64;
            trees[(i / per) as usize][level][(i % per) as usize]
        };
        let mut sum = 0.0;
        for level in 0..height {
            if level + 1 == height {
                for i in lo..hi {
                    sum += node(level, i);
                }
                break;
            }
            while lo < hi && lo % b != 0 {
                sum += node(level, lo);
                lo += 1;
            }
            while lo < hi && hi % b != 0 {
                hi -= 1;
                sum += node(level, hi);
            }
            if lo >= hi {
                break;
            }
            lo /= b;
            hi /= b;
        }
        sum
    }
}
