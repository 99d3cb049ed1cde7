//! Brute-force reference implementations.
//!
//! Every fast-path result has an oracle here that recomputes it the
//! slow, obvious way with its own arithmetic: per-prefix masked norms
//! recomputed from scratch, exhaustive subset enumeration, and pruned
//! generation over physically rebuilt caches. The oracles deliberately
//! share no numeric routines with the fast paths, so agreement is
//! evidence rather than tautology.

use crate::error::Error;
use crate::model::{argmax, KvCache, Model};
use crate::pruner::{AttentionRow, RankedOrder};
use crate::rng::Rng;
use crate::Result;
use serde::Serialize;

/// Outcome of checking one case against its oracle.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub case: String,
    pub fast: String,
    pub oracle: String,
    pub agree: bool,
    pub discrepancy: f64,
}

impl OracleReport {
    pub fn new(
        case: impl Into<String>,
        fast: impl Into<String>,
        oracle: impl Into<String>,
        agree: bool,
        discrepancy: f64,
    ) -> Self {
        OracleReport {
            case: case.into(),
            fast: fast.into(),
            oracle: oracle.into(),
            agree,
            discrepancy,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Literal halting search: for each prefix length `j`, zero out every
/// entry beyond the ranked prefix, recompute the Frobenius norm from
/// scratch in natural index order, and return the first `j` whose loss
/// is strictly below `t`. Returns `n` when no prefix qualifies.
pub fn naive_halt(row: &AttentionRow, order: &RankedOrder, t: f64) -> usize {
    let n = row.len();
    let values = row.values();
    let mut norm_full_sq = 0.0f64;
    for &v in values {
        norm_full_sq += v * v;
    }
    let norm_full = norm_full_sq.sqrt();
    if norm_full == 0.0 {
        return n;
    }
    for j in 1..=n {
        let mut masked = vec![0.0f64; n];
        for &pos in &order.positions()[..j] {
            masked[pos] = values[pos];
        }
        let mut sq = 0.0f64;
        for &v in &masked {
            sq += v * v;
        }
        let loss = 1.0 - sq.sqrt() / norm_full;
        if loss < t {
            return j;
        }
    }
    n
}

/// Exhaustively finds the smallest retained set that loses less than
/// `t` of the row's norm, over all subsets containing the final
/// position (the query-adjacent token, which decoding needs).
///
/// Returns `n` when no subset qualifies (t = 0) or the row is all zero.
pub fn exhaustive_min_subset(row: &AttentionRow, t: f64) -> Result<usize> {
    let n = row.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty attention row".into()));
    }
    if n > 16 {
        return Err(Error::InvalidInput(format!(
            "exhaustive enumeration capped at n = 16, got {n}"
        )));
    }
    let values = row.values();
    let mut norm_full_sq = 0.0f64;
    for &v in values {
        norm_full_sq += v * v;
    }
    if norm_full_sq == 0.0 {
        return Ok(n);
    }
    let norm_full = norm_full_sq.sqrt();
    let last_bit = 1u32 << (n - 1);
    let mut best = n;
    for mask in 0u32..(1 << n) {
        if mask & last_bit == 0 {
            continue;
        }
        let size = mask.count_ones() as usize;
        if size >= best {
            continue;
        }
        let mut sq = 0.0f64;
        for (i, &v) in values.iter().enumerate() {
            if mask & (1 << i) != 0 {
                sq += v * v;
            }
        }
        if 1.0 - sq.sqrt() / norm_full < t {
            best = size;
        }
    }
    Ok(best)
}

/// Re-runs pruned generation with physically rebuilt caches and no
/// validity masks.
///
/// `retained` holds one set of original positions per (layer, kv head),
/// layer-major. The pruned caches are constructed here by direct copy
/// from a fresh prefill, independent of the mask-and-compact path this
/// oracle validates.
pub fn naive_masked_generation(
    model: &Model,
    tokens: &[u32],
    retained: &[Vec<usize>],
    steps: usize,
) -> Result<Vec<u32>> {
    let cfg = model.config();
    if retained.len() != cfg.n_layers * cfg.n_kv_heads {
        return Err(Error::shape(
            "naive_masked_generation",
            format!(
                "{} retained sets for {} heads",
                retained.len(),
                cfg.n_layers * cfg.n_kv_heads
            ),
        ));
    }
    let (full_cache, step) = model.prefill(tokens)?;
    let mut cache = full_cache.clone();
    for layer in 0..cfg.n_layers {
        for kv in 0..cfg.n_kv_heads {
            let keep = &retained[layer * cfg.n_kv_heads + kv];
            let src = full_cache.head(layer, kv);
            let dst = cache.head_mut(layer, kv);
            dst.keys.clear();
            dst.values.clear();
            dst.position_ids.clear();
            dst.valid.clear();
            for slot in 0..src.len() {
                if keep.contains(&src.position_ids[slot]) {
                    dst.keys.push(src.keys[slot].clone());
                    dst.values.push(src.values[slot].clone());
                    dst.position_ids.push(src.position_ids[slot]);
                    dst.valid.push(true);
                }
            }
        }
    }
    let mut out = Vec::with_capacity(steps);
    let mut tok = argmax(&step.logits);
    for _ in 0..steps {
        let step = model.decode_step(&mut cache, tok)?;
        tok = argmax(&step.logits);
        out.push(tok);
    }
    Ok(out)
}

/// Greedy decode over an already-pruned cache; shared by the harness
/// and the oracle suites for the fast side of generation checks.
///
/// Returns the tokens produced by each decode step (the first input
/// token comes from the prefill logits and is not included) along with
/// each step's logits.
pub fn greedy_decode(
    model: &Model,
    cache: &mut KvCache,
    first: u32,
    steps: usize,
) -> Result<(Vec<u32>, Vec<Vec<f32>>)> {
    let mut tokens = Vec::with_capacity(steps);
    let mut logits_per_step = Vec::with_capacity(steps);
    let mut tok = first;
    for _ in 0..steps {
        let step = model.decode_step(cache, tok)?;
        tok = argmax(&step.logits);
        tokens.push(tok);
        logits_per_step.push(step.logits);
    }
    Ok((tokens, logits_per_step))
}

/// Random softmax row from seeded logits; `spread` controls peakedness.
pub fn random_softmax_row(rng: &mut Rng, n: usize, spread: f64) -> AttentionRow {
    let logits: Vec<f64> = (0..n).map(|_| rng.next_f64() * spread).collect();
    softmax(&logits)
}

/// Random softmax row whose final entry is the largest.
///
/// This mirrors causal last-row attention, where the query position
/// dominates its own row. It also guarantees the final position carries
/// at least `1/n` of the squared mass, which makes the ranked prefix a
/// member of the family `exhaustive_min_subset` enumerates whenever the
/// prefix halts early; without that floor the subset bound is not a
/// theorem.
pub fn recency_peaked_row(rng: &mut Rng, n: usize, spread: f64) -> AttentionRow {
    let mut logits: Vec<f64> = (0..n).map(|_| rng.next_f64() * spread).collect();
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    logits[n - 1] = max + 0.5;
    softmax(&logits)
}

fn softmax(logits: &[f64]) -> AttentionRow {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    AttentionRow::new(exps.iter().map(|&e| e / sum).collect())
}
