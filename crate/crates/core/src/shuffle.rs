//! Channel permutation search for N:M pruning.
//!
//! The objective of an order is the metric mass the N:M mask keeps: reorder
//! the metric's columns, cut them into consecutive groups of `M`, and sum the
//! `N` largest scores of every row in every group. The total score is fixed,
//! so maximizing kept mass is the same as minimizing pruned mass.
//!
//! The search runs in two stages. The global stage sorts channels by their
//! mean score and deals them round-robin across groups, so channels with
//! similar means end up in different groups. The local stage splits the
//! order into blocks and, inside each block, repeatedly applies the channel
//! swap with the largest improvement until none improves.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricMatrix;
use crate::pattern::SparsityPattern;

pub const DEFAULT_BLOCK_SIZE: usize = 256;

/// Relative improvement a swap needs before it is accepted.
pub const IMPROVEMENT_TOLERANCE: f64 = 1e-9;

/// Swap cap per block when no explicit limit is given, as a multiple of the block size.
pub const DEFAULT_ITERS_PER_CHANNEL: usize = 10;

/// One accepted swap of the local stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Swap {
    /// Positions in the order (not channel ids) that were exchanged.
    pub a: usize,
    pub b: usize,
    /// Retained objective of the whole order right after this swap.
    pub objective: f64,
}

/// A channel order: position `j` of the permuted layer holds channel `order[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Permutation {
    pub order: Vec<usize>,
    pub global_applied: bool,
    pub local_applied: bool,
    /// The global stage ran but scored below identity, so it was discarded.
    pub global_rejected: bool,
    pub objective_before: f64,
    pub objective_after: f64,
    pub swaps: Vec<Swap>,
}

impl Permutation {
    pub fn identity(channels: usize) -> Self {
        Permutation {
            order: (0..channels).collect(),
            global_applied: false,
            local_applied: false,
            global_rejected: false,
            objective_before: 0.0,
            objective_after: 0.0,
            swaps: Vec::new(),
        }
    }

    /// Wraps an existing order, checking that it is a bijection.
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        if !is_bijection(&order) {
            return Err(Error::InvalidArgument(
                "order is not a permutation of 0..C".into(),
            ));
        }
        Ok(Permutation {
            order,
            ..Permutation::identity(0)
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &c)| i == c)
    }

    /// `inverse[c]` is the position that channel `c` occupies.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (pos, &c) in self.order.iter().enumerate() {
            inv[c] = pos;
        }
        inv
    }

    pub fn permute_columns<T: Clone>(&self, m: ArrayView2<'_, T>) -> Array2<T> {
        m.select(Axis(1), &self.order)
    }

    pub fn unpermute_columns<T: Clone>(&self, m: ArrayView2<'_, T>) -> Array2<T> {
        m.select(Axis(1), &self.inverse())
    }
}

pub fn is_bijection(order: &[usize]) -> bool {
    let mut seen = vec![false; order.len()];
    for &c in order {
        if c >= order.len() || std::mem::replace(&mut seen[c], true) {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ShuffleMode {
    None,
    Global,
    #[default]
    Full,
}

impl fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShuffleMode::None => "none",
            ShuffleMode::Global => "global",
            ShuffleMode::Full => "full",
        })
    }
}

impl FromStr for ShuffleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ShuffleMode::None),
            "global" => Ok(ShuffleMode::Global),
            "full" => Ok(ShuffleMode::Full),
            other => Err(Error::InvalidArgument(format!(
                "unknown shuffle mode {other:?} (expected none, global or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShuffleConfig {
    pub mode: ShuffleMode,
    pub block_size: usize,
    /// Swap cap per block; `None` means `10 * block length`.
    pub max_iters: Option<usize>,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        ShuffleConfig {
            mode: ShuffleMode::Full,
            block_size: DEFAULT_BLOCK_SIZE,
            max_iters: None,
        }
    }
}

impl ShuffleConfig {
    pub fn with_mode(mode: ShuffleMode) -> Self {
        ShuffleConfig {
            mode,
            ..Self::default()
        }
    }
}

/// Sum of the `n` largest values; `buf` is scratch space and gets reordered.
#[inline]
fn top_n_sum(buf: &mut [f64], n: usize) -> f64 {
    if n >= buf.len() {
        return buf.iter().sum();
    }
    buf.sort_unstable_by(|a, b| b.total_cmp(a));
    buf[..n].iter().sum()
}

fn check_order(xi: &MetricMatrix, order: &[usize]) -> Result<()> {
    if order.len() != xi.channels() {
        return Err(Error::Shape(format!(
            "order has {} entries, metric has {} channels",
            order.len(),
            xi.channels()
        )));
    }
    if !is_bijection(order) {
        return Err(Error::InvalidArgument("order is not a permutation".into()));
    }
    Ok(())
}

/// Metric mass kept by the N:M mask when channels are arranged in `order`.
pub fn retained_objective(xi: &MetricMatrix, order: &[usize], pat: SparsityPattern) -> Result<f64> {
    let groups = pat.check_channels(xi.channels())?;
    check_order(xi, order)?;
    let m = pat.m_group();
    let mut buf = vec![0.0; m];
    let mut total = 0.0;
    for row in xi.scores.rows() {
        for g in 0..groups {
            for (slot, b) in buf.iter_mut().enumerate() {
                *b = row[order[g * m + slot]];
            }
            total += top_n_sum(&mut buf, pat.n_keep());
        }
    }
    Ok(total)
}

/// Metric mass removed by the N:M mask under `order`.
pub fn pruned_objective(xi: &MetricMatrix, order: &[usize], pat: SparsityPattern) -> Result<f64> {
    let groups = pat.check_channels(xi.channels())?;
    check_order(xi, order)?;
    let m = pat.m_group();
    let mut buf = vec![0.0; m];
    let mut total = 0.0;
    for row in xi.scores.rows() {
        for g in 0..groups {
            for (slot, b) in buf.iter_mut().enumerate() {
                *b = row[order[g * m + slot]];
            }
            buf.sort_unstable_by(|a, b| b.total_cmp(a));
            total += buf[pat.n_keep()..].iter().sum::<f64>();
        }
    }
    Ok(total)
}

/// Per-channel mean of the metric over rows.
pub fn channel_means(xi: &MetricMatrix) -> Vec<f64> {
    let rows = xi.rows().max(1) as f64;
    xi.scores
        .sum_axis(Axis(0))
        .iter()
        .map(|s| s / rows)
        .collect()
}

/// Sorts channels by mean score and deals them round-robin over the groups.
///
/// With `G = C / M` groups, the channel of descending rank `i` goes to group
/// `i % G` at slot `i / G`. Equal means keep their original relative order;
/// when every mean is equal there is nothing to spread and the identity is
/// returned.
pub fn global_naive_shuffle(xi: &MetricMatrix, pat: SparsityPattern) -> Result<Permutation> {
    let c = xi.channels();
    let groups = pat.check_channels(c)?;
    let means = channel_means(xi);
    let identity_objective = retained_objective(xi, &(0..c).collect::<Vec<_>>(), pat)?;

    let mut order: Vec<usize> = (0..c).collect();
    if means.windows(2).any(|w| w[0] != w[1]) {
        let mut ranked: Vec<usize> = (0..c).collect();
        ranked.sort_by(|&a, &b| means[b].total_cmp(&means[a]));
        let m = pat.m_group();
        for (rank, &ch) in ranked.iter().enumerate() {
            order[(rank % groups) * m + rank / groups] = ch;
        }
    }
    let objective_after = retained_objective(xi, &order, pat)?;
    Ok(Permutation {
        order,
        global_applied: true,
        objective_before: identity_objective,
        objective_after,
        ..Permutation::identity(0)
    })
}

/// Greedy best-swap search inside one block of consecutive positions.
struct BlockSearch {
    rows: usize,
    n_keep: usize,
    m_group: usize,
    /// Column-major copy of the block: `cols[id * rows + r]`.
    cols: Vec<f64>,
    /// `members[pos]` is the local channel id at block position `pos`.
    members: Vec<usize>,
    group_obj: Vec<f64>,
    /// `replace[(g * M + slot) * L + id]`: objective of group `g` with the
    /// channel at `slot` replaced by local channel `id`.
    replace: Vec<f64>,
}

impl BlockSearch {
    fn new(xi: &Array2<f64>, channels: &[usize], pat: SparsityPattern) -> Self {
        let rows = xi.nrows();
        let len = channels.len();
        let mut cols = vec![0.0; len * rows];
        for (id, &ch) in channels.iter().enumerate() {
            for (r, v) in xi.column(ch).iter().enumerate() {
                cols[id * rows + r] = *v;
            }
        }
        let mut s = BlockSearch {
            rows,
            n_keep: pat.n_keep(),
            m_group: pat.m_group(),
            cols,
            members: (0..len).collect(),
            group_obj: vec![0.0; len / pat.m_group()],
            replace: vec![0.0; len * len],
        };
        let mut buf = vec![0.0; s.m_group];
        for g in 0..s.group_obj.len() {
            s.refresh_group(g, &mut buf);
        }
        s
    }

    fn len(&self) -> usize {
        self.members.len()
    }

    fn group_value(&self, g: usize, replaced: Option<(usize, usize)>, buf: &mut [f64]) -> f64 {
        let m = self.m_group;
        let mut total = 0.0;
        for r in 0..self.rows {
            for (slot, b) in buf.iter_mut().enumerate() {
                let id = match replaced {
                    Some((s, id)) if s == slot => id,
                    _ => self.members[g * m + slot],
                };
                *b = self.cols[id * self.rows + r];
            }
            total += top_n_sum(buf, self.n_keep);
        }
        total
    }

    /// Recomputes group `g` and its replacement row of the cache.
    ///
    /// With the channel at `slot` removed, let `S` be the top-`n` sum of the
    /// remaining `M - 1` values of a row and `t` their `n`-th largest. A
    /// replacement value `v` then yields `S + max(0, v - t)`. Scores are
    /// non-negative, so `t = 0` covers the keep-all pattern.
    fn refresh_group(&mut self, g: usize, buf: &mut [f64]) {
        let (m, n, rows, len) = (self.m_group, self.n_keep, self.rows, self.len());
        self.group_obj[g] = self.group_value(g, None, buf);
        let mut cut = vec![0.0; rows];
        for slot in 0..m {
            let mut base = 0.0;
            for (r, t) in cut.iter_mut().enumerate() {
                for (k, other) in (0..m).filter(|&o| o != slot).enumerate() {
                    buf[k] = self.cols[self.members[g * m + other] * rows + r];
                }
                let others = &mut buf[..m - 1];
                others.sort_unstable_by(|a, b| b.total_cmp(a));
                if n >= m {
                    base += others.iter().sum::<f64>();
                    *t = 0.0;
                } else {
                    base += others[..n].iter().sum::<f64>();
                    *t = others[n - 1];
                }
            }
            for pos in 0..len {
                if pos / m == g {
                    continue;
                }
                let id = self.members[pos];
                let col = &self.cols[id * rows..(id + 1) * rows];
                let extra: f64 = col.iter().zip(&cut).map(|(v, t)| (v - t).max(0.0)).sum();
                self.replace[(g * m + slot) * len + id] = base + extra;
            }
        }
    }

    fn objective(&self) -> f64 {
        self.group_obj.iter().sum()
    }

    /// Largest strictly improving swap as `(pos_a, pos_b, gain)`.
    fn best_swap(&self, threshold: f64) -> Option<(usize, usize, f64)> {
        let m = self.m_group;
        let len = self.len();
        let mut best: Option<(usize, usize, f64)> = None;
        for pa in 0..len {
            let (ga, sa, ca) = (pa / m, pa % m, self.members[pa]);
            for pb in (ga + 1) * m..len {
                let (gb, sb, cb) = (pb / m, pb % m, self.members[pb]);
                let gain = self.replace[(ga * m + sa) * len + cb]
                    + self.replace[(gb * m + sb) * len + ca]
                    - self.group_obj[ga]
                    - self.group_obj[gb];
                if gain > threshold && best.is_none_or(|(_, _, g)| gain > g) {
                    best = Some((pa, pb, gain));
                }
            }
        }
        best
    }

    /// Runs to a fixed point or `max_swaps`; returns `(pos_a, pos_b, block objective)` per swap.
    fn run(&mut self, max_swaps: usize) -> Vec<(usize, usize, f64)> {
        let m = self.m_group;
        let mut buf = vec![0.0; m];
        let mut trace = Vec::new();
        while trace.len() < max_swaps {
            let threshold = IMPROVEMENT_TOLERANCE * self.objective().abs();
            let Some((pa, pb, _)) = self.best_swap(threshold) else {
                break;
            };
            self.members.swap(pa, pb);
            self.refresh_group(pa / m, &mut buf);
            self.refresh_group(pb / m, &mut buf);
            trace.push((pa, pb, self.objective()));
        }
        trace
    }
}

/// Position ranges of the local-search blocks.
fn block_ranges(channels: usize, block_size: usize) -> Vec<std::ops::Range<usize>> {
    (0..channels)
        .step_by(block_size)
        .map(|s| s..(s + block_size).min(channels))
        .collect()
}

/// Greedy pairwise-swap refinement of `start`, independently per block of
/// `block_size` consecutive positions.
pub fn local_block_shuffle(
    xi: &MetricMatrix,
    start: &Permutation,
    pat: SparsityPattern,
    block_size: usize,
    max_iters: Option<usize>,
) -> Result<Permutation> {
    let c = xi.channels();
    pat.check_channels(c)?;
    check_order(xi, &start.order)?;
    if block_size == 0 || !block_size.is_multiple_of(pat.m_group()) {
        return Err(Error::InvalidArgument(format!(
            "block size {block_size} is not a positive multiple of group size {}",
            pat.m_group()
        )));
    }
    let objective_before = retained_objective(xi, &start.order, pat)?;

    let blocks = block_ranges(c, block_size);
    let searched: Vec<_> = blocks
        .par_iter()
        .map(|range| {
            let mut search = BlockSearch::new(&xi.scores, &start.order[range.clone()], pat);
            let start_obj = search.objective();
            let cap = max_iters.unwrap_or(DEFAULT_ITERS_PER_CHANNEL * range.len());
            let trace = search.run(cap);
            (start_obj, search.members, trace)
        })
        .collect();

    let mut order = start.order.clone();
    let mut swaps = start.swaps.clone();
    let mut running = objective_before;
    for (range, (start_obj, members, trace)) in blocks.iter().zip(searched) {
        let base = &start.order[range.clone()];
        for (pos, id) in members.into_iter().enumerate() {
            order[range.start + pos] = base[id];
        }
        let mut prev = start_obj;
        for (pa, pb, block_obj) in trace {
            running += block_obj - prev;
            prev = block_obj;
            swaps.push(Swap {
                a: range.start + pa,
                b: range.start + pb,
                objective: running,
            });
        }
    }
    let objective_after = retained_objective(xi, &order, pat)?;
    Ok(Permutation {
        order,
        global_applied: start.global_applied,
        local_applied: true,
        global_rejected: start.global_rejected,
        objective_before,
        objective_after,
        swaps,
    })
}

/// Global stage, identity guardrail, then local stage, as selected by `cfg.mode`.
///
/// `objective_before` of the result is the identity order's objective, so
/// `objective_after >= objective_before` always holds.
pub fn channel_shuffle(
    xi: &MetricMatrix,
    pat: SparsityPattern,
    cfg: &ShuffleConfig,
) -> Result<Permutation> {
    let c = xi.channels();
    pat.check_channels(c)?;
    let identity = Permutation::identity(c);
    let identity_objective = retained_objective(xi, &identity.order, pat)?;

    if cfg.mode == ShuffleMode::None {
        return Ok(Permutation {
            objective_before: identity_objective,
            objective_after: identity_objective,
            ..identity
        });
    }

    let global = global_naive_shuffle(xi, pat)?;
    let start = if global.objective_after >= identity_objective {
        global
    } else {
        log::debug!(
            "global shuffle objective {} below identity {}; starting from identity",
            global.objective_after,
            identity_objective
        );
        Permutation {
            global_rejected: true,
            objective_before: identity_objective,
            objective_after: identity_objective,
            ..identity
        }
    };

    let mut result = match cfg.mode {
        ShuffleMode::Global => start,
        _ => local_block_shuffle(xi, &start, pat, cfg.block_size, cfg.max_iters)?,
    };
    result.objective_before = identity_objective;
    Ok(result)
}
