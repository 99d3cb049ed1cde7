//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with the measured values (run with `--nocapture` to
//! see them on success).

use kvtrim::harness::{
    self, analyze_trace, run_generate, run_sweep, PromptSource, RunConfig,
    DEFAULT_SWEEP_THRESHOLDS,
};
use kvtrim::model::{argmax, Model, ModelConfig};
use kvtrim::oracle;
use kvtrim::prompts::{self, PromptFamily};
use kvtrim::pruner::{
    apply_decisions, halt_index, plan, rank_positions, reduce_attention, reduce_heads, GqaReduce,
    PrunerConfig,
};
use kvtrim::rng::Rng;
use kvtrim::trace::{read_trace, write_trace, TraceRows};
use std::time::Instant;

const ORACLE_THRESHOLDS: [f64; 5] = [0.0, 1e-3, 1e-2, 1e-1, 1.0];

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn small_run(family: PromptFamily, count: usize, len: usize, steps: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig::small(),
        prompts: PromptSource::Synthetic { family, count, len },
        decode_steps: steps,
        ..RunConfig::default()
    }
}

#[test]
fn criterion_01_halting_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = Rng::new(0xC1);
    let rows = 10_000usize;
    let mut mismatches = 0usize;
    for _ in 0..rows {
        let n = 1 + rng.next_below(128) as usize;
        let row = oracle::random_softmax_row(&mut rng, n, 6.0);
        let order = rank_positions(n, 4).unwrap();
        for &t in &ORACLE_THRESHOLDS {
            let fast = halt_index(&row, &order, t).unwrap().i_prune;
            let slow = oracle::naive_halt(&row, &order, t);
            if fast != slow {
                mismatches += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = mismatches == 0 && secs < 60.0;
    println!(
        "acceptance 01 halting-oracle-equivalence: {} ({rows} rows x {} thresholds, {mismatches} mismatches, {secs:.1} s)",
        verdict(ok),
        ORACLE_THRESHOLDS.len()
    );
    assert!(ok, "{mismatches} mismatches in {secs:.1} s");
}

#[test]
fn criterion_02_norm_identity() {
    let mut rng = Rng::new(0xC2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 1 + rng.next_below(128) as usize;
        let row = oracle::random_softmax_row(&mut rng, n, 6.0);
        let order = rank_positions(n, 4).unwrap();
        // With t = 0 the halt never fires early, so norm_at_halt is the
        // full cumulative square-sum in ranked order.
        let cumsum_norm = halt_index(&row, &order, 0.0).unwrap().norm_at_halt;
        let direct = row.values().iter().map(|&v| v * v).sum::<f64>().sqrt();
        worst = worst.max((cumsum_norm - direct).abs() / direct);
    }
    let ok = worst < 1e-6;
    println!(
        "acceptance 02 norm-identity: {} (1000 rows, worst relative error {worst:.3e})",
        verdict(ok)
    );
    assert!(ok, "worst relative error {worst}");
}

#[test]
fn criterion_03_lossless_mode() {
    let t0 = Instant::now();
    let mut config = RunConfig {
        prompts: PromptSource::Synthetic {
            family: PromptFamily::Mixed,
            count: 1,
            len: 256,
        },
        decode_steps: 64,
        ..RunConfig::default()
    };
    config.pruner.threshold = 0.0;
    let report = run_generate(&config).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let ok = report.agreement == 1.0
        && report.mean_budget == 1.0
        && report.max_logit_divergence == 0.0
        && secs < 5.0;
    println!(
        "acceptance 03 lossless-mode: {} (agreement {:.3}, budget {:.3}, divergence {:.1e}, {secs:.1} s)",
        verdict(ok),
        report.agreement,
        report.mean_budget,
        report.max_logit_divergence
    );
    assert!(ok);
}

#[test]
fn criterion_04_threshold_monotonicity() {
    let config = small_run(PromptFamily::Mixed, 32, 64, 16);
    let records = run_sweep(&config, &DEFAULT_SWEEP_THRESHOLDS).unwrap();
    let mut monotone = true;
    for w in records.windows(2) {
        if w[1].mean_budget > w[0].mean_budget + 1e-12 {
            monotone = false;
        }
    }
    let first = records.first().unwrap();
    let last = records.last().unwrap();
    let ok = monotone && first.agreement >= last.agreement;
    println!(
        "acceptance 04 threshold-monotonicity: {} (budgets {:?}, agreement {:.3} at {:.1}% vs {:.3} at {:.0}%)",
        verdict(ok),
        records
            .iter()
            .map(|r| (r.mean_budget * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>(),
        first.agreement,
        first.threshold * 100.0,
        last.agreement,
        last.threshold * 100.0
    );
    assert!(ok);
}

#[test]
fn criterion_05_frozen_layers_in_csv() {
    let dir = tempfile::tempdir().unwrap();
    // One generate run, one sweep run, one trace analysis; every CSV
    // they produce must report layers 0 and 1 at budget 1.000000.
    let mut gen_cfg = small_run(PromptFamily::Mixed, 4, 64, 8);
    gen_cfg.emit_traces = true;
    gen_cfg.out_dir = Some(dir.path().join("gen"));
    run_generate(&gen_cfg).unwrap();

    let mut sweep_cfg = small_run(PromptFamily::Mixed, 4, 64, 8);
    sweep_cfg.out_dir = Some(dir.path().join("sweep"));
    run_sweep(&sweep_cfg, &DEFAULT_SWEEP_THRESHOLDS).unwrap();

    analyze_trace(
        &dir.path().join("gen").join("sample_0.kvpt"),
        &PrunerConfig::default(),
        &DEFAULT_SWEEP_THRESHOLDS,
        Some(&dir.path().join("analyze")),
    )
    .unwrap();

    let mut checked_rows = 0usize;
    let mut ok = true;
    for budget_csv in [
        dir.path().join("gen").join("budget.csv"),
        dir.path().join("analyze").join("budget.csv"),
    ] {
        let text = std::fs::read_to_string(&budget_csv).unwrap();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let layer: usize = fields[1].parse().unwrap();
            if layer < 2 {
                checked_rows += 1;
                if fields[5] != "1.000000" {
                    ok = false;
                }
            }
        }
    }
    for sweep_csv in [
        dir.path().join("sweep").join("sweep.csv"),
        dir.path().join("analyze").join("trace_sweep.csv"),
    ] {
        let text = std::fs::read_to_string(&sweep_csv).unwrap();
        let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        let l0 = header.iter().position(|&h| h == "layer_0").unwrap();
        let l1 = header.iter().position(|&h| h == "layer_1").unwrap();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            checked_rows += 2;
            if fields[l0] != "1.000000" || fields[l1] != "1.000000" {
                ok = false;
            }
        }
    }
    println!(
        "acceptance 05 frozen-layers: {} ({checked_rows} frozen-layer CSV cells, all 1.000000: {ok})",
        verdict(ok)
    );
    assert!(ok);
}

#[test]
fn criterion_06_ranking_formula() {
    let mut ok = rank_positions(7, 4).unwrap().positions() == [0, 1, 2, 3, 6, 5, 4];
    let mut checked = 0usize;
    for n in 1..=64usize {
        for m in 0..=8usize {
            let order = rank_positions(n, m).unwrap();
            let mut seen = vec![false; n];
            for &p in order.positions() {
                if p >= n || seen[p] {
                    ok = false;
                }
                seen[p] = true;
            }
            let sinks = m.min(n);
            for (i, &p) in order.positions()[..sinks].iter().enumerate() {
                if p != i {
                    ok = false;
                }
            }
            checked += 1;
        }
    }
    println!(
        "acceptance 06 ranking-formula: {} (rank(7,4) and {checked} (n,m) permutation checks)",
        verdict(ok)
    );
    assert!(ok);
}

#[test]
fn criterion_07_combinatorial_bound() {
    // Rows mirror causal last-row attention: the query position carries
    // the largest score, which keeps the ranked prefix inside the
    // enumerated family (subsets containing the final position).
    let mut rng = Rng::new(0xC7);
    let mut violations = 0usize;
    let cases = 500usize;
    for _ in 0..cases {
        let n = 2 + rng.next_below(11) as usize; // 2..=12
        let row = oracle::recency_peaked_row(&mut rng, n, 4.0);
        let order = rank_positions(n, 4).unwrap();
        let i_prune = halt_index(&row, &order, 0.01).unwrap().i_prune;
        let min = oracle::exhaustive_min_subset(&row, 0.01).unwrap();
        if min > i_prune {
            violations += 1;
        }
    }
    let ok = violations == 0;
    println!(
        "acceptance 07 combinatorial-bound: {} ({cases} enumerated rows, {violations} violations)",
        verdict(ok)
    );
    assert!(ok);
}

#[test]
fn criterion_08_batch_consistency() {
    let model = Model::build(ModelConfig::small()).unwrap();
    let vocab = model.config().vocab_size;
    let mut rng = Rng::new(0xC8);
    // Different lengths per sample exercise the padding path.
    let prompts: Vec<Vec<u32>> = [40usize, 48, 56, 64]
        .iter()
        .map(|&len| prompts::uniform_prompt(len, vocab, &mut rng))
        .collect();
    let config = PrunerConfig::default();
    let steps = 12usize;

    let mut single_decisions = Vec::new();
    let mut single_tokens = Vec::new();
    let mut batch_caches = Vec::new();
    let mut batch_rows = Vec::new();
    let mut firsts = Vec::new();
    for prompt in &prompts {
        let (cache, step, tail) = model.prefill_with_tail(prompt, 1).unwrap();
        let rows = reduce_heads(&tail, model.config().n_kv_heads, GqaReduce::Mean).unwrap();
        let first = argmax(&step.logits);
        let mut masked = cache.clone();
        let decisions = plan(&rows, &config).unwrap();
        apply_decisions(&mut masked, &decisions).unwrap();
        let (tokens, _) = oracle::greedy_decode(&model, &mut masked, first, steps).unwrap();
        single_decisions.push(decisions);
        single_tokens.push(tokens);
        batch_caches.push(cache);
        batch_rows.push(rows);
        firsts.push(first);
    }

    let outcome = kvtrim::pruner::prune_batch(&mut batch_caches, &batch_rows, &config).unwrap();
    let decisions_equal = outcome.decisions == single_decisions;
    let mut tokens_equal = true;
    let mut padding_ok = true;
    for (layer, &padded) in outcome.padded_len.iter().enumerate() {
        for cache in &batch_caches {
            for head in 0..model.config().n_kv_heads {
                if cache.head(layer, head).len() != padded {
                    padding_ok = false;
                }
            }
        }
    }
    for ((cache, &first), single) in batch_caches
        .iter_mut()
        .zip(firsts.iter())
        .zip(single_tokens.iter())
    {
        let (tokens, _) = oracle::greedy_decode(&model, cache, first, steps).unwrap();
        if &tokens != single {
            tokens_equal = false;
        }
    }
    let ok = decisions_equal && tokens_equal && padding_ok;
    println!(
        "acceptance 08 batch-consistency: {} (decisions equal: {decisions_equal}, generations equal: {tokens_equal}, padding uniform: {padding_ok})",
        verdict(ok)
    );
    assert!(ok);
}

#[test]
fn criterion_09_compaction_equivalence() {
    let cfg = ModelConfig {
        n_layers: 4,
        n_q_heads: 4,
        n_kv_heads: 2,
        head_dim: 16,
        vocab_size: 128,
        max_seq: 128,
        seed: 0xC9,
    };
    let model = Model::build(cfg.clone()).unwrap();
    let mut rng = Rng::new(0xC9);
    let mut worst = 0.0f64;
    let cases = 100usize;
    let prompt_len = 24usize;
    let steps = 4usize;
    for _ in 0..cases {
        let prompt: Vec<u32> = (0..prompt_len)
            .map(|_| rng.next_below(cfg.vocab_size as u64) as u32)
            .collect();
        let (cache, step) = model.prefill(&prompt).unwrap();
        let mut masked = cache.clone();
        for layer in 0..cfg.n_layers {
            for head in 0..cfg.n_kv_heads {
                let hc = masked.head_mut(layer, head);
                let mut any = false;
                for slot in 0..hc.len() {
                    let keep = rng.next_f64() < 0.6;
                    hc.valid[slot] = keep;
                    any |= keep;
                }
                if !any {
                    let last = hc.len() - 1;
                    hc.valid[last] = true;
                }
            }
        }
        let mut compacted = masked.clone();
        compacted.compact();
        let first = argmax(&step.logits);
        let (_, masked_logits) =
            oracle::greedy_decode(&model, &mut masked, first, steps).unwrap();
        let (_, compact_logits) =
            oracle::greedy_decode(&model, &mut compacted, first, steps).unwrap();
        for (a, b) in masked_logits.iter().zip(compact_logits.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((*x as f64 - *y as f64).abs());
            }
        }
    }
    let ok = worst < 1e-9;
    println!(
        "acceptance 09 compaction-equivalence: {} ({cases} decision sets, max logit deviation {worst:.2e})",
        verdict(ok)
    );
    assert!(ok);
}

#[test]
fn criterion_10_skew_sensitivity() {
    let run = |family| {
        let config = RunConfig {
            prompts: PromptSource::Synthetic {
                family,
                count: 8,
                len: 96,
            },
            decode_steps: 24,
            ..RunConfig::default()
        };
        run_generate(&config).unwrap()
    };
    let uniform = run(PromptFamily::Uniform);
    let skewed = run(PromptFamily::Skewed);
    let gap = uniform.mean_budget - skewed.mean_budget;
    let ok = gap >= 0.20 && uniform.agreement >= 0.95 && skewed.agreement >= 0.95;
    println!(
        "acceptance 10 skew-sensitivity: {} (uniform budget {:.4} agr {:.3}, skewed budget {:.4} agr {:.3}, gap {:.1} pp)",
        verdict(ok),
        uniform.mean_budget,
        uniform.agreement,
        skewed.mean_budget,
        skewed.agreement,
        gap * 100.0
    );
    assert!(ok);
}

#[test]
fn criterion_11_trace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_run(PromptFamily::Mixed, 3, 56, 8);
    config.emit_traces = true;
    config.out_dir = Some(dir.path().to_path_buf());
    let report = run_generate(&config).unwrap();

    let mut round_trip_ok = true;
    let mut budgets_ok = true;
    for i in 0..3usize {
        let path = dir.path().join(format!("sample_{i}.kvpt"));
        let rows = read_trace(&path).unwrap();
        let rewritten = dir.path().join(format!("rewrite_{i}.kvpt"));
        write_trace(&rows, &rewritten).unwrap();
        if std::fs::read(&path).unwrap() != std::fs::read(&rewritten).unwrap() {
            round_trip_ok = false;
        }
        let analysis = analyze_trace(&path, &config.pruner, &[], None).unwrap();
        if analysis.decisions != report.decisions[i] {
            budgets_ok = false;
        }
    }
    let ok = round_trip_ok && budgets_ok;
    println!(
        "acceptance 11 trace-round-trip: {} (bytes identical: {round_trip_ok}, decisions bit-equal: {budgets_ok})",
        verdict(ok)
    );
    assert!(ok);
}

#[test]
fn criterion_12_row_reduction_from_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hand.kvpt");
    let mut rows = TraceRows::zeros(1, 1, 3, 2);
    rows.row_mut(0, 0, 0).copy_from_slice(&[0.4, 0.6, 0.0]);
    rows.row_mut(0, 0, 1).copy_from_slice(&[0.2, 0.3, 0.5]);
    write_trace(&rows, &path).unwrap();
    let back = read_trace(&path).unwrap();
    let reduced = reduce_attention(&back.head_rows(0, 0)).unwrap();

    // Scalar-loop reference over the same stored f32 values.
    let r2 = back.row(0, 0, 0);
    let r3 = back.row(0, 0, 1);
    let mut oracle_s = [0.0f64; 3];
    for i in 0..3 {
        let mut sum = 0.0;
        let mut count = 0;
        for row in [r2, r3] {
            if row[i] != 0.0 {
                sum += row[i] as f64;
                count += 1;
            }
        }
        oracle_s[i] = if count > 0 { sum / count as f64 } else { 0.0 };
    }
    let mut worst_oracle = 0.0f64;
    for (got, want) in reduced.values().iter().zip(oracle_s.iter()) {
        worst_oracle = worst_oracle.max((got - want).abs());
    }
    // The literal [0.3, 0.45, 0.5] is reachable only to f32 precision:
    // the trace stores 32-bit floats and 0.4, 0.2, etc. are not exactly
    // representable.
    let literal = [0.3f64, 0.45, 0.5];
    let mut worst_literal = 0.0f64;
    for (got, want) in reduced.values().iter().zip(literal.iter()) {
        worst_literal = worst_literal.max((got - want).abs());
    }
    let ok = worst_oracle < 1e-12 && worst_literal < 1e-6;
    println!(
        "acceptance 12 row-reduction-from-trace: {} (vs scalar oracle {worst_oracle:.2e}, vs literal {worst_literal:.2e})",
        verdict(ok)
    );
    assert!(ok);
}

#[test]
fn oracle_check_default_run_is_clean() {
    // The oracle-check command's own default-scale run: zero mismatches.
    let params = harness::OracleCheckParams {
        cases: 2_000,
        max_n: 128,
        enumerate_cases: 200,
        enumerate_n: 12,
        ..Default::default()
    };
    let mut sink = std::io::sink();
    let summary = harness::run_oracle_check(&params, &mut sink).unwrap();
    let ok = summary.total_mismatches == 0;
    println!(
        "acceptance oracle-check: {} ({} suites, {} mismatches)",
        verdict(ok),
        summary.suites.len(),
        summary.total_mismatches
    );
    assert!(ok);
}
