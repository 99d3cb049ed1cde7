//! Adaptive cache pruning: rank positions, reduce the attention tail to
//! one row, and halt retention where the relative Frobenius-norm loss
//! drops below the threshold.
//!
//! The pipeline runs once after prefill, per layer and per KV head:
//!
//! 1. [`rank_positions`] orders cache positions sink-first, then from
//!    the most recent position backwards.
//! 2. [`reduce_attention`] averages the last `k` attention rows into a
//!    single score per position, dividing by the number of rows that
//!    actually attend to it.
//! 3. [`halt_index`] squares the reduced row, reorders it by rank,
//!    takes a running cumulative sum, and stops at the first prefix
//!    whose norm is within `threshold` of the full norm.
//!
//! Frozen layers (by default the bottom two) skip the halting search
//! and keep their full cache. Decisions are pure functions of the rows
//! and the config; applying them to a cache only flips validity bits,
//! and compaction is a separate, equivalence-preserving step.

use crate::error::Error;
use crate::model::{AttentionTail, KvCache};
use crate::trace::TraceRows;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// How many of the final attention rows feed the reduced row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KRows {
    Count(usize),
    /// Fraction of the prompt length; resolves to `max(1, round(f*n))`.
    Fraction(f64),
}

/// Reduction across the query heads sharing one KV head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GqaReduce {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunerConfig {
    /// Relative norm-loss bound; retention halts at the first ranked
    /// prefix whose loss is strictly below it.
    pub threshold: f64,
    /// Number of leading positions ranked first (attention sinks).
    pub sink_count: usize,
    pub reduce_rows: KRows,
    /// Layers whose cache is always kept whole.
    pub frozen_layers: BTreeSet<usize>,
    /// Optional lower bound on the retained count per head.
    pub min_retain_floor: Option<usize>,
    pub gqa_reduce: GqaReduce,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        PrunerConfig {
            threshold: 0.01,
            sink_count: 4,
            reduce_rows: KRows::Count(1),
            frozen_layers: [0, 1].into_iter().collect(),
            min_retain_floor: None,
            gqa_reduce: GqaReduce::Mean,
        }
    }
}

impl PrunerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidInput(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        match self.reduce_rows {
            KRows::Count(c) if c == 0 => {
                return Err(Error::InvalidInput("reduce_rows count must be >= 1".into()))
            }
            KRows::Fraction(f) if !(0.0 < f && f <= 1.0) => {
                return Err(Error::InvalidInput(format!(
                    "reduce_rows fraction {f} outside (0, 1]"
                )))
            }
            _ => {}
        }
        Ok(())
    }

    /// Rows of the attention tail to consume for a prompt of length `n`.
    pub fn resolve_k(&self, n: usize) -> usize {
        let k = match self.reduce_rows {
            KRows::Count(c) => c,
            KRows::Fraction(f) => (f * n as f64).round() as usize,
        };
        k.max(1).min(n)
    }
}

/// Permutation of cache positions in retention order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedOrder {
    order: Vec<usize>,
}

impl RankedOrder {
    /// Builds an order from an explicit permutation of `0..n`.
    pub fn from_permutation(order: Vec<usize>) -> Result<RankedOrder> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &p in &order {
            if p >= n || seen[p] {
                return Err(Error::InvalidInput(format!(
                    "order is not a permutation of 0..{n}"
                )));
            }
            seen[p] = true;
        }
        Ok(RankedOrder { order })
    }

    pub fn positions(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Position ranking: the first `m` positions in ascending order, then
/// the remaining positions from the end backwards.
///
/// For `n = 7, m = 4` this is `[0, 1, 2, 3, 6, 5, 4]`; with `n <= m` it
/// degenerates to the identity.
pub fn rank_positions(n: usize, m: usize) -> Result<RankedOrder> {
    if n == 0 {
        return Err(Error::InvalidInput("cannot rank zero positions".into()));
    }
    let sinks = m.min(n);
    let mut order: Vec<usize> = (0..sinks).collect();
    order.extend((sinks..n).rev());
    Ok(RankedOrder { order })
}

/// Reduced attention scores for one (layer, head): the metric's raw input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    scores: Vec<f64>,
}

impl AttentionRow {
    pub fn new(scores: Vec<f64>) -> AttentionRow {
        AttentionRow { scores }
    }

    pub fn values(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Averages the last `k` attention rows into one score per position.
///
/// A position's score is the sum of its scores across the rows, divided
/// by the number of rows with a nonzero score there (causally masked
/// entries are stored as exact zeros). Positions attended by no row get
/// score zero. With `k = 1` this is the last row unchanged.
pub fn reduce_attention(rows: &[&[f32]]) -> Result<AttentionRow> {
    let k = rows.len();
    if k == 0 {
        return Err(Error::InvalidInput("no attention rows to reduce".into()));
    }
    let n = rows[0].len();
    if n == 0 {
        return Err(Error::InvalidInput("empty attention rows".into()));
    }
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::shape("reduce_attention", "rows of unequal length"));
    }
    if k > n {
        return Err(Error::InvalidInput(format!(
            "cannot reduce {k} rows over only {n} positions"
        )));
    }
    let mut scores = vec![0.0f64; n];
    for (i, s) in scores.iter_mut().enumerate() {
        let mut sum = 0.0f64;
        let mut count = 0u32;
        for row in rows {
            let v = row[i];
            if v != 0.0 {
                sum += v as f64;
                count += 1;
            }
        }
        if count > 0 {
            *s = sum / count as f64;
        }
    }
    Ok(AttentionRow { scores })
}

/// Result of the halting search over one reduced row.
#[derive(Debug, Clone)]
pub struct HaltOutcome {
    /// Number of ranked positions to retain (1-based prefix length).
    pub i_prune: usize,
    /// Frobenius norm of the full reduced row.
    pub norm_full: f64,
    /// Norm of the retained prefix.
    pub norm_at_halt: f64,
    /// `1 - norm(prefix_j)/norm_full` for `j = 1..=n`; non-increasing.
    pub loss_curve: Vec<f64>,
    /// Set when the row was entirely zero, which makes the loss ratio
    /// undefined; the whole row is retained.
    pub degenerate: bool,
}

/// Finds the shortest ranked prefix whose norm loss is strictly below
/// `threshold`.
///
/// The row is squared first, then permuted by `order`, then cumulated
/// with 64-bit accumulation; `norm_full` is computed directly from the
/// unpermuted row. If no prefix of length `< n` satisfies the bound,
/// everything is retained. An all-zero row is flagged degenerate and
/// retained whole.
pub fn halt_index(row: &AttentionRow, order: &RankedOrder, threshold: f64) -> Result<HaltOutcome> {
    let n = row.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty attention row".into()));
    }
    if order.len() != n {
        return Err(Error::shape(
            "halt_index",
            format!("row length {n} vs order length {}", order.len()),
        ));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }

    let squares: Vec<f64> = row.values().iter().map(|&v| v * v).collect();
    let norm_full = squares.iter().sum::<f64>().sqrt();
    if norm_full == 0.0 {
        return Ok(HaltOutcome {
            i_prune: n,
            norm_full: 0.0,
            norm_at_halt: 0.0,
            loss_curve: vec![0.0; n],
            degenerate: true,
        });
    }

    let mut loss_curve = Vec::with_capacity(n);
    let mut running = 0.0f64;
    let mut halt: Option<(usize, f64)> = None;
    for (j, &pos) in order.positions().iter().enumerate() {
        running += squares[pos];
        let prefix_norm = running.sqrt();
        let loss = 1.0 - prefix_norm / norm_full;
        loss_curve.push(loss);
        if halt.is_none() && loss < threshold {
            halt = Some((j + 1, prefix_norm));
        }
    }
    let (i_prune, norm_at_halt) = halt.unwrap_or((n, running.sqrt()));
    Ok(HaltOutcome {
        i_prune,
        norm_full,
        norm_at_halt,
        loss_curve,
        degenerate: false,
    })
}

/// Retention decision for one (layer, kv head).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneDecision {
    pub layer: usize,
    pub head: usize,
    /// Number of ranked positions retained.
    pub i_prune: usize,
    /// Retained original positions, ascending.
    pub retained: Vec<usize>,
    /// Cache length the decision was computed over.
    pub total: usize,
    /// `retained / total`.
    pub budget: f64,
    pub norm_full: f64,
    pub norm_at_halt: f64,
    pub degenerate: bool,
}

impl PruneDecision {
    fn full_retention(layer: usize, head: usize, n: usize, norm_full: f64, degenerate: bool) -> Self {
        PruneDecision {
            layer,
            head,
            i_prune: n,
            retained: (0..n).collect(),
            total: n,
            budget: 1.0,
            norm_full,
            norm_at_halt: norm_full,
            degenerate,
        }
    }
}

/// Decisions for every KV head of one layer.
///
/// Frozen layers return full retention. Otherwise each head reduces its
/// tail rows, ranks positions, and halts independently; the optional
/// retain floor is applied afterwards.
pub fn prune_layer(rows: &TraceRows, layer: usize, config: &PrunerConfig) -> Result<Vec<PruneDecision>> {
    config.validate()?;
    if layer >= rows.n_layers {
        return Err(Error::shape(
            "prune_layer",
            format!("layer {layer} out of range {}", rows.n_layers),
        ));
    }
    let n = rows.seq_len;
    let k_use = config.resolve_k(n).min(rows.k_rows);
    let mut decisions = Vec::with_capacity(rows.n_kv_heads);
    for head in 0..rows.n_kv_heads {
        let all_rows = rows.head_rows(layer, head);
        let used = &all_rows[rows.k_rows - k_use..];
        let reduced = reduce_attention(used)?;
        if config.frozen_layers.contains(&layer) {
            let norm_full = reduced
                .values()
                .iter()
                .map(|&v| v * v)
                .sum::<f64>()
                .sqrt();
            decisions.push(PruneDecision::full_retention(
                layer,
                head,
                n,
                norm_full,
                norm_full == 0.0,
            ));
            continue;
        }
        let order = rank_positions(n, config.sink_count)?;
        let outcome = halt_index(&reduced, &order, config.threshold)?;
        let mut i_prune = outcome.i_prune;
        if let Some(floor) = config.min_retain_floor {
            i_prune = i_prune.max(floor.min(n));
        }
        let norm_at_halt = if i_prune == outcome.i_prune {
            outcome.norm_at_halt
        } else {
            (1.0 - outcome.loss_curve[i_prune - 1]) * outcome.norm_full
        };
        let mut retained: Vec<usize> = order.positions()[..i_prune].to_vec();
        retained.sort_unstable();
        decisions.push(PruneDecision {
            layer,
            head,
            i_prune,
            retained,
            total: n,
            budget: i_prune as f64 / n as f64,
            norm_full: outcome.norm_full,
            norm_at_halt,
            degenerate: outcome.degenerate,
        });
    }
    Ok(decisions)
}

/// Decisions for all layers, ordered by (layer, head).
pub fn plan(rows: &TraceRows, config: &PrunerConfig) -> Result<Vec<PruneDecision>> {
    let mut out = Vec::with_capacity(rows.n_layers * rows.n_kv_heads);
    for layer in 0..rows.n_layers {
        out.extend(prune_layer(rows, layer, config)?);
    }
    Ok(out)
}

/// Averages (or max-reduces) the per-query-head attention tail down to
/// one set of rows per KV head, rounding to the 32-bit precision the
/// trace format stores. Pruning always consumes these rounded rows, so
/// in-process decisions match decisions recomputed from a trace file
/// bit for bit.
pub fn reduce_heads(tail: &AttentionTail, n_kv_heads: usize, mode: GqaReduce) -> Result<TraceRows> {
    let n_q = tail.n_q_heads();
    if n_q % n_kv_heads != 0 {
        return Err(Error::shape(
            "reduce_heads",
            format!("{n_q} query heads not divisible by {n_kv_heads} kv heads"),
        ));
    }
    let group = n_q / n_kv_heads;
    let n_layers = tail.n_layers();
    let mut rows = TraceRows::zeros(n_layers, n_kv_heads, tail.seq_len, tail.k_rows);
    for layer in 0..n_layers {
        for kv in 0..n_kv_heads {
            for r in 0..tail.k_rows {
                let out = rows.row_mut(layer, kv, r);
                for pos in 0..out.len() {
                    let mut acc = match mode {
                        GqaReduce::Mean => 0.0f64,
                        GqaReduce::Max => f64::MIN,
                    };
                    for h in kv * group..(kv + 1) * group {
                        let v = tail.row(layer, h, r)[pos];
                        match mode {
                            GqaReduce::Mean => acc += v,
                            GqaReduce::Max => acc = acc.max(v),
                        }
                    }
                    out[pos] = match mode {
                        GqaReduce::Mean => (acc / group as f64) as f32,
                        GqaReduce::Max => acc as f32,
                    };
                }
            }
        }
    }
    Ok(rows)
}

/// Marks cache validity according to the decisions.
///
/// Exactly the retained positions stay valid; original position ids are
/// untouched. Entries appended after the decision's window (decode
/// tokens) keep their validity. Storage is not compacted here, so a
/// full-retention decision leaves the cache bit-identical.
pub fn apply_decisions(cache: &mut KvCache, decisions: &[PruneDecision]) -> Result<()> {
    let expected = cache.n_layers() * cache.n_kv_heads();
    let mut seen = BTreeSet::new();
    for d in decisions {
        if d.layer >= cache.n_layers() || d.head >= cache.n_kv_heads() {
            return Err(Error::shape(
                "apply_decisions",
                format!("decision for ({}, {}) outside cache shape", d.layer, d.head),
            ));
        }
        if !seen.insert((d.layer, d.head)) {
            return Err(Error::shape(
                "apply_decisions",
                format!("duplicate decision for ({}, {})", d.layer, d.head),
            ));
        }
    }
    if seen.len() != expected {
        return Err(Error::shape(
            "apply_decisions",
            format!("{} decisions for {expected} heads", seen.len()),
        ));
    }

    for d in decisions {
        let mut keep = vec![false; d.total];
        for &pos in &d.retained {
            if pos >= d.total {
                return Err(Error::shape(
                    "apply_decisions",
                    format!("retained position {pos} outside total {}", d.total),
                ));
            }
            keep[pos] = true;
        }
        let head = cache.head_mut(d.layer, d.head);
        let mut found = 0usize;
        for slot in 0..head.len() {
            let pos = head.position_ids[slot];
            if pos < d.total {
                head.valid[slot] = keep[pos];
                if keep[pos] {
                    found += 1;
                }
            }
        }
        if found != d.retained.len() {
            return Err(Error::shape(
                "apply_decisions",
                format!(
                    "cache head ({}, {}) holds {found} of {} retained positions",
                    d.layer,
                    d.head,
                    d.retained.len()
                ),
            ));
        }
    }
    Ok(())
}

/// Result of pruning a padded batch.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// Per-sample decisions, identical to running each sample alone.
    pub decisions: Vec<Vec<PruneDecision>>,
    /// Per-layer padded storage length across samples and heads.
    pub padded_len: Vec<usize>,
}

/// Prunes every sample independently, compacts, and pads each layer's
/// storage to the longest retained head across the batch. Padded slots
/// are invalid and ignored by attention.
pub fn prune_batch(
    caches: &mut [KvCache],
    rows: &[TraceRows],
    config: &PrunerConfig,
) -> Result<BatchOutcome> {
    if caches.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if caches.len() != rows.len() {
        return Err(Error::shape(
            "prune_batch",
            format!("{} caches vs {} row sets", caches.len(), rows.len()),
        ));
    }
    let mut decisions = Vec::with_capacity(caches.len());
    for (cache, sample_rows) in caches.iter_mut().zip(rows.iter()) {
        let plan = plan(sample_rows, config)?;
        apply_decisions(cache, &plan)?;
        cache.compact();
        decisions.push(plan);
    }
    let n_layers = caches[0].n_layers();
    let n_heads = caches[0].n_kv_heads();
    let mut padded_len = vec![0usize; n_layers];
    for cache in caches.iter() {
        for (layer, padded) in padded_len.iter_mut().enumerate() {
            for head in 0..n_heads {
                *padded = (*padded).max(cache.head(layer, head).len());
            }
        }
    }
    for cache in caches.iter_mut() {
        for (layer, &padded) in padded_len.iter().enumerate() {
            for head in 0..n_heads {
                cache.pad_head_to(layer, head, padded);
            }
        }
    }
    Ok(BatchOutcome {
        decisions,
        padded_len,
    })
}

/// Mean retained fraction over all decisions, frozen layers included.
pub fn mean_budget(decisions: &[PruneDecision]) -> f64 {
    if decisions.is_empty() {
        return 1.0;
    }
    decisions.iter().map(|d| d.budget).sum::<f64>() / decisions.len() as f64
}

/// Mean retained fraction per layer.
pub fn per_layer_budgets(decisions: &[PruneDecision], n_layers: usize) -> Vec<f64> {
    let mut sums = vec![0.0f64; n_layers];
    let mut counts = vec![0usize; n_layers];
    for d in decisions {
        if d.layer < n_layers {
            sums[d.layer] += d.budget;
            counts[d.layer] += 1;
        }
    }
    sums.iter()
        .zip(counts.iter())
        .map(|(&s, &c)| if c == 0 { 1.0 } else { s / c as f64 })
        .collect()
}
