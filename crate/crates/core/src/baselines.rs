//! Fixed-budget eviction baselines.
//!
//! All of these are one-shot, post-prefill policies: sink+recency
//! retention, accumulated-attention top-k, observation-window pooled
//! top-k, and a variant of the adaptive pipeline that ranks positions
//! by attention score instead of position. Every policy retains the
//! final position (decoding needs the query-adjacent token), resolves
//! its budget to an exact retained count, and breaks score ties toward
//! the lower position index so results are deterministic.

use crate::error::Error;
use crate::pruner::{halt_index, AttentionRow, PruneDecision, RankedOrder};
use crate::Result;
use serde::{Deserialize, Serialize};

/// Default recency window protected by the accumulated-attention policy.
pub const H2O_RECENT_DEFAULT: usize = 8;
/// Default observation window of the pooled-window policy.
pub const SNAPKV_WINDOW_DEFAULT: usize = 32;
/// Width of the max-pooling neighborhood applied to window scores.
pub const SNAPKV_POOL_WIDTH: usize = 7;

/// Fixed cache budget, as a fraction of the prompt or an absolute count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSpec {
    Fraction(f64),
    Count(usize),
}

impl BudgetSpec {
    /// Retained count for a prompt of length `n`, clamped to `[1, n]`.
    pub fn resolve(&self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(Error::InvalidInput("cannot budget zero positions".into()));
        }
        let raw = match *self {
            BudgetSpec::Fraction(f) => {
                if !(0.0 < f && f <= 1.0) {
                    return Err(Error::InvalidInput(format!(
                        "budget fraction {f} outside (0, 1]"
                    )));
                }
                (f * n as f64).ceil() as usize
            }
            BudgetSpec::Count(c) => c,
        };
        Ok(raw.clamp(1, n))
    }
}

/// Sink-plus-recency retention: the first `sink` positions and the most
/// recent positions, filling the budget exactly.
///
/// The final position is always kept, so when the budget is smaller
/// than the sink count one sink slot is given up for it.
pub fn streaming_llm(n: usize, budget: &BudgetSpec, sink: usize) -> Result<Vec<usize>> {
    let b = budget.resolve(n)?;
    let sinks_kept = sink.min(b - 1).min(n);
    let recent = b - sinks_kept;
    let mut retained: Vec<usize> = (0..sinks_kept).collect();
    retained.extend(n - recent..n);
    Ok(retained)
}

/// Accumulated attention received per column, normalized by the number
/// of rows that actually attend to it (stored rows hold exact zeros for
/// masked entries).
pub fn accumulated_scores(attn_rows: &[&[f32]]) -> Vec<f64> {
    if attn_rows.is_empty() {
        return Vec::new();
    }
    let n = attn_rows[0].len();
    let mut scores = vec![0.0f64; n];
    for (j, s) in scores.iter_mut().enumerate() {
        let mut sum = 0.0f64;
        let mut count = 0u32;
        for row in attn_rows {
            let v = row[j];
            if v != 0.0 {
                sum += v as f64;
                count += 1;
            }
        }
        if count > 0 {
            *s = sum / count as f64;
        }
    }
    scores
}

/// Heavy-hitter retention: the most recent `recent` positions plus the
/// top accumulated-attention positions, up to the budget.
pub fn h2o_like(attn_rows: &[&[f32]], budget: &BudgetSpec, recent: usize) -> Result<Vec<usize>> {
    if attn_rows.is_empty() {
        return Err(Error::InvalidInput("no attention rows".into()));
    }
    let n = attn_rows[0].len();
    let b = budget.resolve(n)?;
    let scores = accumulated_scores(attn_rows);
    let recent_kept = recent.max(1).min(b).min(n);
    let mut keep = vec![false; n];
    for pos in n - recent_kept..n {
        keep[pos] = true;
    }
    let mut candidates: Vec<usize> = (0..n - recent_kept).collect();
    candidates.sort_by(|&a, &c| {
        scores[c]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&c))
    });
    for &pos in candidates.iter().take(b - recent_kept) {
        keep[pos] = true;
    }
    Ok((0..n).filter(|&p| keep[p]).collect())
}

/// Scores pooled over a neighborhood: each position takes the maximum
/// of the raw scores within `width` centered on it.
pub fn max_pool(scores: &[f64], width: usize) -> Vec<f64> {
    let radius = width / 2;
    (0..scores.len())
        .map(|j| {
            let lo = j.saturating_sub(radius);
            let hi = (j + radius + 1).min(scores.len());
            scores[lo..hi].iter().cloned().fold(f64::MIN, f64::max)
        })
        .collect()
}

/// Observation-window retention: the last `window` positions are always
/// kept (they are the observers); prefix positions are scored by pooled
/// mean attention received from the window rows.
///
/// Prompts no longer than the window are retained whole.
pub fn snapkv_like(
    window_rows: &[&[f32]],
    n: usize,
    budget: &BudgetSpec,
    window: usize,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidInput("cannot prune zero positions".into()));
    }
    if n <= window {
        return Ok((0..n).collect());
    }
    if window_rows.is_empty() {
        return Err(Error::InvalidInput("no observation-window rows".into()));
    }
    if window_rows.iter().any(|r| r.len() != n) {
        return Err(Error::shape("snapkv_like", "window rows of unequal length"));
    }
    let w = window.min(window_rows.len().max(1));
    let b = budget.resolve(n)?;
    if b <= w {
        return Ok((n - b..n).collect());
    }
    let prefix_len = n - w;
    let mut raw = vec![0.0f64; prefix_len];
    for (j, r) in raw.iter_mut().enumerate() {
        for row in window_rows {
            *r += row[j] as f64;
        }
    }
    let pooled = max_pool(&raw, SNAPKV_POOL_WIDTH);
    let mut candidates: Vec<usize> = (0..prefix_len).collect();
    candidates.sort_by(|&a, &c| {
        pooled[c]
            .partial_cmp(&pooled[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&c))
    });
    let mut retained: Vec<usize> = candidates.into_iter().take(b - w).collect();
    retained.extend(n - w..n);
    retained.sort_unstable();
    Ok(retained)
}

/// Ranks positions by descending score, ties toward the lower index.
pub fn attn_rank_order(row: &AttentionRow) -> RankedOrder {
    let mut order: Vec<usize> = (0..row.len()).collect();
    let values = row.values();
    order.sort_by(|&a, &c| {
        values[c]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&c))
    });
    RankedOrder::from_permutation(order).expect("sorted indices form a permutation")
}

/// The adaptive pipeline with score-based instead of position-based
/// ranking: identical norm halting, different retention order. Exists
/// to show that this ranking over-prunes.
pub fn attn_ranked_decision(
    row: &AttentionRow,
    threshold: f64,
    layer: usize,
    head: usize,
) -> Result<PruneDecision> {
    let n = row.len();
    let order = attn_rank_order(row);
    let outcome = halt_index(row, &order, threshold)?;
    let mut retained: Vec<usize> = order.positions()[..outcome.i_prune].to_vec();
    retained.sort_unstable();
    Ok(PruneDecision {
        layer,
        head,
        i_prune: outcome.i_prune,
        retained,
        total: n,
        budget: outcome.i_prune as f64 / n as f64,
        norm_full: outcome.norm_full,
        norm_at_halt: outcome.norm_at_halt,
        degenerate: outcome.degenerate,
    })
}
