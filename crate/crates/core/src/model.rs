//! Deterministic toy decoder-only transformer with a per-layer,
//! per-head KV cache.
//!
//! The model exists to exercise cache pruning, not to be a good
//! language model: weights come from a counter-based PRNG, so the same
//! config always rebuilds bit-identical weights. Rotary embeddings are
//! applied to Q and K at cache-write time using absolute position ids,
//! which means evicting cache entries never requires re-encoding the
//! survivors. Grouped-query attention is supported; several query heads
//! may share one KV head.

use crate::error::Error;
use crate::rng::{uniform_f32, Rng};
use crate::tensor::{attention, CausalMask, Matrix};
use crate::Result;
use serde::{Deserialize, Serialize};

const ROTARY_BASE: f64 = 10000.0;
const RMSNORM_EPS: f64 = 1e-6;
// Extra gain on the Q/K projections; sharpens attention enough that
// rows are not uniformly flat on structured prompts.
const QK_GAIN: f32 = 3.0;

/// Stream ids for counter-based weight generation.
mod stream {
    pub const EMBED: u64 = 1;
    pub const WQ: u64 = 3;
    pub const WV: u64 = 5;
    pub const WO: u64 = 6;
    pub const W_UP: u64 = 7;
    pub const W_DOWN: u64 = 8;

    pub fn layered(kind: u64, layer: usize) -> u64 {
        (kind << 32) | layer as u64
    }
}

/// Shape and seed of a toy model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Toy scale: big enough that per-layer effects are visible, small
    /// enough for millisecond tests.
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            n_q_heads: 4,
            n_kv_heads: 4,
            head_dim: 32,
            vocab_size: 512,
            max_seq: 1024,
            seed: 0xC0FFEE,
        }
    }
}

impl ModelConfig {
    /// Smaller shape used by sweeps and comparison tests where many
    /// generations run back to back.
    pub fn small() -> Self {
        ModelConfig {
            n_layers: 6,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            vocab_size: 256,
            max_seq: 512,
            seed: 0xC0FFEE,
        }
    }

    pub fn d_model(&self) -> usize {
        self.n_q_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn ffn_dim(&self) -> usize {
        2 * self.d_model()
    }

    /// Query heads served by each KV head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_q_heads == 0
            || self.n_kv_heads == 0
            || self.head_dim == 0
            || self.vocab_size == 0
            || self.max_seq == 0
        {
            return Err(Error::InvalidInput(
                "model dimensions must all be nonzero".into(),
            ));
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::InvalidInput(format!(
                "n_q_heads {} not divisible by n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "head_dim {} must be even for rotary pairs",
                self.head_dim
            )));
        }
        Ok(())
    }
}

struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}

/// Immutable model; safe to share across threads once built.
pub struct Model {
    config: ModelConfig,
    embed: Matrix,
    unembed: Matrix,
    layers: Vec<LayerWeights>,
}

fn gen_matrix(seed: u64, stream_id: u64, rows: usize, cols: usize, scale: f32) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m.set(i, j, uniform_f32(seed, stream_id, (i * cols + j) as u64, scale));
        }
    }
    m
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let d = config.d_model();
        let kv = config.kv_dim();
        let ffn = config.ffn_dim();
        let seed = config.seed;
        let proj = 1.0 / (d as f32).sqrt();
        let qk = QK_GAIN / (d as f32).sqrt();

        let embed = gen_matrix(seed, stream::EMBED, config.vocab_size, d, 1.0);
        // Output head tied to the embedding (transposed, scaled): token
        // logits follow the residual stream's alignment with token
        // embeddings, which keeps greedy argmax gaps well above the
        // perturbations cache eviction introduces.
        let mut unembed = Matrix::zeros(d, config.vocab_size);
        for t in 0..config.vocab_size {
            for j in 0..d {
                unembed.set(j, t, embed.get(t, j) * proj);
            }
        }
        let layers = (0..config.n_layers)
            .map(|l| {
                let wq = gen_matrix(seed, stream::layered(stream::WQ, l), d, d, qk);
                // Each KV head shares its projection with the first
                // query head it serves. Identical tokens then produce
                // aligned q/k vectors whose rotary phases match at
                // distance zero, so attention becomes content-dependent:
                // repetitive prompts concentrate it near the query,
                // random prompts keep it broad.
                let group = config.group_size();
                let hd = config.head_dim;
                let mut wk = Matrix::zeros(d, kv);
                for g in 0..config.n_kv_heads {
                    let q_col = g * group * hd;
                    for i in 0..d {
                        for j in 0..hd {
                            wk.set(i, g * hd + j, wq.get(i, q_col + j));
                        }
                    }
                }
                LayerWeights {
                    wq,
                    wk,
                    wv: gen_matrix(seed, stream::layered(stream::WV, l), d, kv, proj),
                    wo: gen_matrix(seed, stream::layered(stream::WO, l), d, d, proj),
                    w_up: gen_matrix(seed, stream::layered(stream::W_UP, l), d, ffn, proj),
                    w_down: gen_matrix(
                        seed,
                        stream::layered(stream::W_DOWN, l),
                        ffn,
                        d,
                        1.0 / (ffn as f32).sqrt(),
                    ),
                }
            })
            .collect();

        Ok(Model {
            config,
            embed,
            unembed,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Runs the full prompt, filling a fresh cache; the returned
    /// [`StepOutput`] describes the final prompt position.
    pub fn prefill(&self, tokens: &[u32]) -> Result<(KvCache, StepOutput)> {
        let (cache, step, _) = self.prefill_with_tail(tokens, 1)?;
        Ok((cache, step))
    }

    /// Like [`Model::prefill`] but also captures the last `k_rows`
    /// attention rows per (layer, query head) for the pruning stage.
    pub fn prefill_with_tail(
        &self,
        tokens: &[u32],
        k_rows: usize,
    ) -> Result<(KvCache, StepOutput, AttentionTail)> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if n > self.config.max_seq {
            return Err(Error::SequenceOverflow {
                position: n,
                max_seq: self.config.max_seq,
            });
        }
        if k_rows == 0 || k_rows > n {
            return Err(Error::InvalidInput(format!(
                "k_rows {k_rows} out of range for prompt length {n}"
            )));
        }
        self.check_tokens(tokens)?;

        let cfg = &self.config;
        let d = cfg.d_model();
        let hd = cfg.head_dim;
        let scale = 1.0 / (hd as f32).sqrt();
        let mask = CausalMask::new(n);

        let mut cache = KvCache::new(cfg);
        let mut tail = AttentionTail::new(cfg.n_layers, cfg.n_q_heads, k_rows, n);
        let mut last_rows = vec![vec![Vec::new(); cfg.n_q_heads]; cfg.n_layers];

        // Residual stream, one row per prompt position.
        let mut x = Matrix::zeros(n, d);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.embed.row(t as usize));
        }

        for (layer_idx, layer) in self.layers.iter().enumerate() {
            let xn = rmsnorm_rows(&x);
            let mut q_all = xn.matmul(&layer.wq)?;
            // Keys read the previous position's content (position 0
            // keys from zeros): a query matches positions that FOLLOW
            // earlier occurrences of its own token, never trivially
            // itself. Repetitive prompts concentrate attention on
            // nearby repeats; noise prompts have nothing to match and
            // stay broad.
            let mut k_input = Matrix::zeros(n, d);
            for pos in 1..n {
                k_input.row_mut(pos).copy_from_slice(xn.row(pos - 1));
            }
            let mut k_all = k_input.matmul(&layer.wk)?;
            let v_all = xn.matmul(&layer.wv)?;
            for pos in 0..n {
                for h in 0..cfg.n_q_heads {
                    rotate_slice(&mut q_all.row_mut(pos)[h * hd..(h + 1) * hd], pos);
                }
                for g in 0..cfg.n_kv_heads {
                    rotate_slice(&mut k_all.row_mut(pos)[g * hd..(g + 1) * hd], pos);
                }
            }

            // Write this layer's K/V into the cache; remember the last
            // position's normalized stream, which the next decoded
            // token's key will read.
            for g in 0..cfg.n_kv_heads {
                let head = cache.head_mut(layer_idx, g);
                for pos in 0..n {
                    head.keys.push(k_all.row(pos)[g * hd..(g + 1) * hd].to_vec());
                    head.values.push(v_all.row(pos)[g * hd..(g + 1) * hd].to_vec());
                    head.position_ids.push(pos);
                    head.valid.push(true);
                }
            }
            cache.prev_hidden[layer_idx].copy_from_slice(xn.row(n - 1));

            let mut attn_out = Matrix::zeros(n, d);
            for h in 0..cfg.n_q_heads {
                let g = h / cfg.group_size();
                let q_h = column_block(&q_all, h * hd, hd);
                let head = cache.head(layer_idx, g);
                let k_h = rows_matrix(&head.keys, hd);
                let v_h = rows_matrix(&head.values, hd);
                let (out_h, probs_h) = attention(&q_h, &k_h, &v_h, &mask, scale)?;
                for pos in 0..n {
                    attn_out.row_mut(pos)[h * hd..(h + 1) * hd].copy_from_slice(out_h.row(pos));
                }
                for r in 0..k_rows {
                    tail.set_row(layer_idx, h, r, probs_h.row(n - k_rows + r));
                }
                last_rows[layer_idx][h] = probs_h.row(n - 1).to_vec();
            }
            let projected = attn_out.matmul(&layer.wo)?;
            add_in_place(&mut x, &projected);

            let xn2 = rmsnorm_rows(&x);
            let mut hidden = xn2.matmul(&layer.w_up)?;
            silu_in_place(&mut hidden);
            let mlp_out = hidden.matmul(&layer.w_down)?;
            add_in_place(&mut x, &mlp_out);
        }

        cache.next_position = n;
        let logits = self.project_logits(x.row(n - 1))?;
        Ok((
            cache,
            StepOutput {
                logits,
                last_attention_rows: last_rows,
            },
            tail,
        ))
    }

    /// Appends one token to the cache and returns its logits plus the
    /// attention row it produced over every cache slot.
    ///
    /// Tokens appended during decode are always valid and are never
    /// pruned; attention only reads valid cache entries.
    pub fn decode_step(&self, cache: &mut KvCache, token: u32) -> Result<StepOutput> {
        cache.check_shape(&self.config)?;
        self.check_tokens(&[token])?;
        let pos = cache.next_position;
        if pos >= self.config.max_seq {
            return Err(Error::SequenceOverflow {
                position: pos + 1,
                max_seq: self.config.max_seq,
            });
        }

        let cfg = &self.config;
        let d = cfg.d_model();
        let hd = cfg.head_dim;
        let scale = 1.0 / (hd as f32).sqrt();

        let mut x: Vec<f32> = self.embed.row(token as usize).to_vec();
        let mut last_rows = vec![vec![Vec::new(); cfg.n_q_heads]; cfg.n_layers];

        for (layer_idx, layer) in self.layers.iter().enumerate() {
            let xn = rmsnorm_vec(&x);
            let mut q = matvec(&xn, &layer.wq);
            let mut k = matvec(&cache.prev_hidden[layer_idx], &layer.wk);
            let v = matvec(&xn, &layer.wv);
            cache.prev_hidden[layer_idx].copy_from_slice(&xn);
            for h in 0..cfg.n_q_heads {
                rotate_slice(&mut q[h * hd..(h + 1) * hd], pos);
            }
            for g in 0..cfg.n_kv_heads {
                rotate_slice(&mut k[g * hd..(g + 1) * hd], pos);
            }
            for g in 0..cfg.n_kv_heads {
                let head = cache.head_mut(layer_idx, g);
                head.keys.push(k[g * hd..(g + 1) * hd].to_vec());
                head.values.push(v[g * hd..(g + 1) * hd].to_vec());
                head.position_ids.push(pos);
                head.valid.push(true);
            }

            let mut attn_out = vec![0.0f32; d];
            for h in 0..cfg.n_q_heads {
                let g = h / cfg.group_size();
                let head = cache.head(layer_idx, g);
                let q_h = &q[h * hd..(h + 1) * hd];
                let probs = attend_single(q_h, head, scale);
                let out = weighted_values(&probs, head, hd);
                attn_out[h * hd..(h + 1) * hd].copy_from_slice(&out);
                last_rows[layer_idx][h] = probs;
            }
            let projected = matvec(&attn_out, &layer.wo);
            for (xv, pv) in x.iter_mut().zip(projected.iter()) {
                *xv += pv;
            }

            let xn2 = rmsnorm_vec(&x);
            let mut hidden = matvec(&xn2, &layer.w_up);
            for h in hidden.iter_mut() {
                *h = silu(*h);
            }
            let mlp_out = matvec(&hidden, &layer.w_down);
            for (xv, mv) in x.iter_mut().zip(mlp_out.iter()) {
                *xv += mv;
            }
        }

        cache.next_position = pos + 1;
        let logits = self.project_logits(&x)?;
        Ok(StepOutput {
            logits,
            last_attention_rows: last_rows,
        })
    }

    fn project_logits(&self, x_last: &[f32]) -> Result<Vec<f32>> {
        let xn = rmsnorm_vec(x_last);
        let logits = matvec(&xn, &self.unembed);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Model::project_logits"));
        }
        Ok(logits)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token id {t} out of vocab range {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }
}

/// Output of one model step (or of prefill's final position).
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    /// `[layer][q_head]` attention row over cache slots; invalid slots
    /// hold exact zeros.
    pub last_attention_rows: Vec<Vec<Vec<f64>>>,
}

/// Last `k_rows` attention rows per (layer, query head), captured at
/// prefill. Row `r` belongs to query position `seq_len - k_rows + r`;
/// entries beyond a row's causal limit are exact zeros.
#[derive(Debug, Clone)]
pub struct AttentionTail {
    n_q_heads: usize,
    pub k_rows: usize,
    pub seq_len: usize,
    rows: Vec<Vec<f64>>, // (layer * n_q_heads + head) * k_rows + r
}

impl AttentionTail {
    fn new(n_layers: usize, n_q_heads: usize, k_rows: usize, seq_len: usize) -> AttentionTail {
        AttentionTail {
            n_q_heads,
            k_rows,
            seq_len,
            rows: vec![vec![0.0; seq_len]; n_layers * n_q_heads * k_rows],
        }
    }

    fn idx(&self, layer: usize, q_head: usize, r: usize) -> usize {
        (layer * self.n_q_heads + q_head) * self.k_rows + r
    }

    fn set_row(&mut self, layer: usize, q_head: usize, r: usize, row: &[f64]) {
        let idx = self.idx(layer, q_head, r);
        self.rows[idx].copy_from_slice(row);
    }

    pub fn row(&self, layer: usize, q_head: usize, r: usize) -> &[f64] {
        &self.rows[self.idx(layer, q_head, r)]
    }

    pub fn n_layers(&self) -> usize {
        self.rows.len() / (self.n_q_heads * self.k_rows)
    }

    pub fn n_q_heads(&self) -> usize {
        self.n_q_heads
    }
}

/// Key/value storage for one (layer, kv_head).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
    /// Original absolute positions; rotary phases were computed from
    /// these, so eviction must never rewrite them.
    pub position_ids: Vec<usize>,
    pub valid: Vec<bool>,
}

impl HeadCache {
    fn new() -> HeadCache {
        HeadCache {
            keys: Vec::new(),
            values: Vec::new(),
            position_ids: Vec::new(),
            valid: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Per-layer, per-KV-head cache of past keys and values, with a
/// validity mask and the original position ids.
#[derive(Debug, Clone)]
pub struct KvCache {
    n_layers: usize,
    n_kv_heads: usize,
    head_dim: usize,
    next_position: usize,
    heads: Vec<HeadCache>, // layer-major
    /// Per-layer normalized stream of the last processed position; the
    /// next token's key is computed from it. Not subject to eviction.
    prev_hidden: Vec<Vec<f32>>,
}

impl KvCache {
    fn new(config: &ModelConfig) -> KvCache {
        KvCache {
            n_layers: config.n_layers,
            n_kv_heads: config.n_kv_heads,
            head_dim: config.head_dim,
            next_position: 0,
            heads: (0..config.n_layers * config.n_kv_heads)
                .map(|_| HeadCache::new())
                .collect(),
            prev_hidden: vec![vec![0.0; config.d_model()]; config.n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    /// Absolute position the next decoded token will occupy.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn head(&self, layer: usize, kv_head: usize) -> &HeadCache {
        &self.heads[layer * self.n_kv_heads + kv_head]
    }

    pub fn head_mut(&mut self, layer: usize, kv_head: usize) -> &mut HeadCache {
        &mut self.heads[layer * self.n_kv_heads + kv_head]
    }

    /// Physically removes invalid entries. Position ids of the
    /// survivors are preserved, so attention results are unchanged.
    pub fn compact(&mut self) {
        for head in &mut self.heads {
            let keep: Vec<bool> = head.valid.clone();
            let mut slot = 0;
            head.keys.retain(|_| {
                let k = keep[slot];
                slot += 1;
                k
            });
            slot = 0;
            head.values.retain(|_| {
                let k = keep[slot];
                slot += 1;
                k
            });
            slot = 0;
            head.position_ids.retain(|_| {
                let k = keep[slot];
                slot += 1;
                k
            });
            head.valid = vec![true; head.keys.len()];
        }
    }

    /// Appends invalid zero slots to one head until it holds `len` entries.
    pub fn pad_head_to(&mut self, layer: usize, kv_head: usize, len: usize) {
        let hd = self.head_dim;
        let head = self.head_mut(layer, kv_head);
        while head.len() < len {
            head.keys.push(vec![0.0; hd]);
            head.values.push(vec![0.0; hd]);
            head.position_ids.push(0);
            head.valid.push(false);
        }
    }

    fn check_shape(&self, config: &ModelConfig) -> Result<()> {
        if self.n_layers != config.n_layers
            || self.n_kv_heads != config.n_kv_heads
            || self.head_dim != config.head_dim
        {
            return Err(Error::shape(
                "KvCache::check_shape",
                format!(
                    "cache {}x{} (head_dim {}) vs model {}x{} (head_dim {})",
                    self.n_layers,
                    self.n_kv_heads,
                    self.head_dim,
                    config.n_layers,
                    config.n_kv_heads,
                    config.head_dim
                ),
            ));
        }
        Ok(())
    }

    /// Checks the structural invariants: parallel arrays per head and
    /// strictly increasing position ids among valid entries.
    pub fn validate(&self) -> Result<()> {
        for (idx, head) in self.heads.iter().enumerate() {
            let len = head.keys.len();
            if head.values.len() != len || head.position_ids.len() != len || head.valid.len() != len
            {
                return Err(Error::Invariant(format!(
                    "head {idx}: ragged parallel arrays"
                )));
            }
            let mut last: Option<usize> = None;
            for slot in 0..len {
                if !head.valid[slot] {
                    continue;
                }
                if let Some(prev) = last {
                    if head.position_ids[slot] <= prev {
                        return Err(Error::Invariant(format!(
                            "head {idx}: position ids not strictly increasing among valid entries"
                        )));
                    }
                }
                last = Some(head.position_ids[slot]);
            }
        }
        Ok(())
    }
}

/// Greedy argmax with ties broken toward the lower token id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Fixed-temperature multinomial sample over the logits, driven by the
/// provided deterministic generator.
pub fn sample_multinomial(logits: &[f32], temperature: f64, rng: &mut Rng) -> u32 {
    if temperature <= 0.0 {
        return argmax(logits);
    }
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> = logits
        .iter()
        .map(|&v| ((v as f64 - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut target = rng.next_f64() * total;
    for (i, w) in weights.iter().enumerate() {
        target -= w;
        if target <= 0.0 {
            return i as u32;
        }
    }
    (logits.len() - 1) as u32
}

// ── forward-pass helpers ────────────────────────────────────────────────────

fn rmsnorm_vec(x: &[f32]) -> Vec<f32> {
    let mut ss = 0.0f64;
    for &v in x {
        ss += v as f64 * v as f64;
    }
    let denom = (ss / x.len() as f64 + RMSNORM_EPS).sqrt();
    x.iter().map(|&v| (v as f64 / denom) as f32).collect()
}

fn rmsnorm_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&rmsnorm_vec(x.row(i)));
    }
    out
}

fn silu(v: f32) -> f32 {
    let x = v as f64;
    (x / (1.0 + (-x).exp())) as f32
}

fn silu_in_place(m: &mut Matrix) {
    for i in 0..m.rows() {
        for v in m.row_mut(i) {
            *v = silu(*v);
        }
    }
}

fn add_in_place(x: &mut Matrix, delta: &Matrix) {
    for i in 0..x.rows() {
        let row = x.row_mut(i);
        for (xv, dv) in row.iter_mut().zip(delta.row(i)) {
            *xv += dv;
        }
    }
}

/// Row-vector times matrix with `f64` accumulation; the decode-path
/// twin of `Matrix::matmul` (same per-element accumulation order).
fn matvec(x: &[f32], w: &Matrix) -> Vec<f32> {
    let mut out = vec![0.0f32; w.cols()];
    let mut acc = vec![0.0f64; w.cols()];
    for (t, &xv) in x.iter().enumerate() {
        let row = w.row(t);
        for (a, &wv) in acc.iter_mut().zip(row.iter()) {
            *a += xv as f64 * wv as f64;
        }
    }
    for (o, a) in out.iter_mut().zip(acc.iter()) {
        *o = *a as f32;
    }
    out
}

fn column_block(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&m.row(i)[start..start + width]);
    }
    out
}

fn rows_matrix(rows: &[Vec<f32>], width: usize) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), width);
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(r);
    }
    out
}

/// Rotary position embedding applied in place to one head vector.
fn rotate_slice(v: &mut [f32], position: usize) {
    let half_pairs = v.len() / 2;
    for p in 0..half_pairs {
        let theta = position as f64 * ROTARY_BASE.powf(-((2 * p) as f64) / v.len() as f64);
        let (sin, cos) = theta.sin_cos();
        let a = v[2 * p] as f64;
        let b = v[2 * p + 1] as f64;
        v[2 * p] = (a * cos - b * sin) as f32;
        v[2 * p + 1] = (a * sin + b * cos) as f32;
    }
}

/// Softmax attention row for a single query over the valid entries of
/// one cache head. Invalid slots come back as exact zeros.
fn attend_single(q: &[f32], head: &HeadCache, scale: f32) -> Vec<f64> {
    let len = head.len();
    let mut scores = vec![0.0f32; len];
    for slot in 0..len {
        if !head.valid[slot] {
            continue;
        }
        let mut acc = 0.0f64;
        for (qv, kv) in q.iter().zip(head.keys[slot].iter()) {
            acc += *qv as f64 * *kv as f64;
        }
        scores[slot] = (acc as f32) * scale;
    }
    let mut max = f32::NEG_INFINITY;
    for slot in 0..len {
        if head.valid[slot] {
            max = max.max(scores[slot]);
        }
    }
    let mut probs = vec![0.0f64; len];
    if max == f32::NEG_INFINITY {
        return probs;
    }
    let mut sum = 0.0f64;
    for slot in 0..len {
        if head.valid[slot] {
            sum += ((scores[slot] - max) as f64).exp();
        }
    }
    for slot in 0..len {
        if head.valid[slot] {
            probs[slot] = ((scores[slot] - max) as f64).exp() / sum;
        }
    }
    probs
}

fn weighted_values(probs: &[f64], head: &HeadCache, hd: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; hd];
    for (slot, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (a, &v) in acc.iter_mut().zip(head.values[slot].iter()) {
            *a += p * v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}
