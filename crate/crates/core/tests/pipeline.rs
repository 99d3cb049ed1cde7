//! Cross-module integration tests: the pruning pipeline driven end to
//! end through the harness, traces, baselines, and oracles together.

use kvtrim::harness::{
    analyze_trace, run_compare, run_generate, BaselineKind, PromptSource, RunConfig,
};
use kvtrim::model::{argmax, Model, ModelConfig};
use kvtrim::oracle;
use kvtrim::prompts::PromptFamily;
use kvtrim::pruner::{
    apply_decisions, plan, reduce_heads, GqaReduce, KRows, PruneDecision, PrunerConfig,
};
use kvtrim::rng::Rng;
use kvtrim::trace::{write_trace, TraceRows};

#[test]
fn masked_fast_path_matches_physical_rebuild_generation() {
    // Random retained sets on the 8-layer model: the mask-based fast
    // path and the oracle's physically rebuilt caches generate the
    // same tokens.
    let model = Model::build(ModelConfig::default()).unwrap();
    let cfg = model.config().clone();
    let mut rng = Rng::new(0xAB);
    let prompt: Vec<u32> = (0..64)
        .map(|_| rng.next_below(cfg.vocab_size as u64) as u32)
        .collect();
    let steps = 16usize;

    let retained: Vec<Vec<usize>> = (0..cfg.n_layers * cfg.n_kv_heads)
        .map(|_| {
            let mut set: Vec<usize> = (0..prompt.len())
                .filter(|_| rng.next_f64() < 0.5)
                .collect();
            if set.is_empty() {
                set.push(prompt.len() - 1);
            }
            set
        })
        .collect();

    let oracle_tokens = oracle::naive_masked_generation(&model, &prompt, &retained, steps).unwrap();

    let (mut cache, step) = model.prefill(&prompt).unwrap();
    for layer in 0..cfg.n_layers {
        for head in 0..cfg.n_kv_heads {
            let keep = &retained[layer * cfg.n_kv_heads + head];
            let hc = cache.head_mut(layer, head);
            for slot in 0..hc.len() {
                hc.valid[slot] = keep.contains(&hc.position_ids[slot]);
            }
        }
    }
    let first = argmax(&step.logits);
    let (fast_tokens, _) = oracle::greedy_decode(&model, &mut cache, first, steps).unwrap();
    assert_eq!(oracle_tokens, fast_tokens);
}

#[test]
fn retrieval_prompts_punish_fixed_window_eviction() {
    // The payload block sits mid-prompt, outside both the sinks and the
    // 20% recency window; the adaptive pruner keeps enough norm mass to
    // preserve generation while the fixed window drifts off it.
    let config = RunConfig {
        model: ModelConfig::small(),
        prompts: PromptSource::Synthetic {
            family: PromptFamily::Retrieval,
            count: 8,
            len: 128,
        },
        decode_steps: 48,
        budgets: vec![0.2],
        baselines: vec![BaselineKind::Slm],
        slm_frozen: true,
        ..RunConfig::default()
    };
    let rows = run_compare(&config).unwrap();
    let by_method = |name: &str| rows.iter().find(|r| r.method == name).unwrap();
    let adaptive = by_method("adaptive");
    let slm = by_method("slm");
    assert!(
        slm.agreement < adaptive.agreement,
        "slm {} vs adaptive {}",
        slm.agreement,
        adaptive.agreement
    );
    assert!(adaptive.agreement >= 0.95);
    // The frozen-layer variant is present and retains more than its
    // nominal budget.
    let slm_frozen = by_method("slm-frozen");
    assert!(slm_frozen.mean_budget > slm.mean_budget);
}

#[test]
fn compare_lists_every_requested_method() {
    let config = RunConfig {
        model: ModelConfig::small(),
        prompts: PromptSource::Synthetic {
            family: PromptFamily::Mixed,
            count: 3,
            len: 64,
        },
        decode_steps: 8,
        budgets: vec![0.9, 0.5],
        ..RunConfig::default()
    };
    let rows = run_compare(&config).unwrap();
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert!(methods.contains(&"full"));
    assert!(methods.contains(&"adaptive"));
    assert!(methods.contains(&"attn-rank"));
    // Two budgets for each fixed-budget baseline.
    assert_eq!(methods.iter().filter(|&&m| m == "slm").count(), 2);
    assert_eq!(methods.iter().filter(|&&m| m == "h2o").count(), 2);
    assert_eq!(methods.iter().filter(|&&m| m == "snapkv").count(), 2);
    // The attention-ranked variant over-prunes relative to the
    // position-ranked pipeline at the same threshold.
    let adaptive = rows.iter().find(|r| r.method == "adaptive").unwrap();
    let attn = rows.iter().find(|r| r.method == "attn-rank").unwrap();
    assert!(attn.mean_budget < adaptive.mean_budget);
}

#[test]
fn uniform_trace_halts_at_closed_form() {
    // A head with uniform attention over n positions halts at the first
    // j with 1 - sqrt(j/n) below the threshold.
    let n = 64usize;
    let n_layers = 4usize;
    let mut rows = TraceRows::zeros(n_layers, 2, n, 1);
    for layer in 0..n_layers {
        for head in 0..2 {
            let row = rows.row_mut(layer, head, 0);
            row.iter_mut().for_each(|v| *v = 1.0 / n as f32);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("uniform.kvpt");
    write_trace(&rows, &path).unwrap();
    let analysis = analyze_trace(&path, &PrunerConfig::default(), &[], None).unwrap();
    let expect = (n as f64 * 0.99f64.powi(2)).floor() as usize + 1; // 63
    for d in &analysis.decisions {
        if d.layer < 2 {
            assert_eq!(d.i_prune, n);
        } else {
            assert_eq!(d.i_prune, expect, "layer {} head {}", d.layer, d.head);
        }
    }
}

#[test]
fn multi_row_trace_reduction_path() {
    // k_rows > 1 runs through the row-averaging path end to end, both
    // in process and from a trace file.
    let mut config = RunConfig {
        model: ModelConfig::small(),
        prompts: PromptSource::Synthetic {
            family: PromptFamily::Mixed,
            count: 2,
            len: 48,
        },
        decode_steps: 4,
        ..RunConfig::default()
    };
    config.pruner.reduce_rows = KRows::Count(4);
    let dir = tempfile::tempdir().unwrap();
    config.emit_traces = true;
    config.out_dir = Some(dir.path().to_path_buf());
    let report = run_generate(&config).unwrap();

    let trace = kvtrim::trace::read_trace(&dir.path().join("sample_0.kvpt")).unwrap();
    assert_eq!(trace.k_rows, 4);
    let analysis = analyze_trace(
        &dir.path().join("sample_0.kvpt"),
        &config.pruner,
        &[],
        None,
    )
    .unwrap();
    assert_eq!(analysis.decisions, report.decisions[0]);
}

#[test]
fn fractional_k_rows_resolve_against_prompt_length() {
    let mut config = RunConfig {
        model: ModelConfig::small(),
        prompts: PromptSource::Synthetic {
            family: PromptFamily::Uniform,
            count: 1,
            len: 64,
        },
        decode_steps: 2,
        ..RunConfig::default()
    };
    config.pruner.reduce_rows = KRows::Fraction(0.05); // 5% of 64 -> 3 rows
    let dir = tempfile::tempdir().unwrap();
    config.emit_traces = true;
    config.out_dir = Some(dir.path().to_path_buf());
    run_generate(&config).unwrap();
    let trace = kvtrim::trace::read_trace(&dir.path().join("sample_0.kvpt")).unwrap();
    assert_eq!(trace.k_rows, 3);
}

#[test]
fn budget_csv_mean_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig {
        model: ModelConfig::small(),
        prompts: PromptSource::Synthetic {
            family: PromptFamily::Mixed,
            count: 4,
            len: 56,
        },
        decode_steps: 4,
        out_dir: Some(dir.path().to_path_buf()),
        ..RunConfig::default()
    };
    let report = run_generate(&config).unwrap();
    let text = std::fs::read_to_string(dir.path().join("budget.csv")).unwrap();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let retained: f64 = fields[3].parse().unwrap();
        let total: f64 = fields[4].parse().unwrap();
        sum += retained / total;
        count += 1;
    }
    let csv_mean = sum / count as f64;
    assert!(
        (csv_mean - report.mean_budget).abs() < 1e-9,
        "csv {} vs report {}",
        csv_mean,
        report.mean_budget
    );
}

#[test]
fn gqa_aggregation_mean_and_max_differ() {
    // Both reductions are valid config points; with grouped heads they
    // generally disagree, and only mean preserves row normalization.
    let model = Model::build(ModelConfig::small()).unwrap();
    let prompt: Vec<u32> = (0..40).map(|i| (i * 7 % 250) as u32).collect();
    let (_, _, tail) = model.prefill_with_tail(&prompt, 1).unwrap();
    let mean_rows = reduce_heads(&tail, 2, GqaReduce::Mean).unwrap();
    let max_rows = reduce_heads(&tail, 2, GqaReduce::Max).unwrap();
    assert!(mean_rows.validate().is_ok());
    let mean_sum: f64 = mean_rows.row(2, 0, 0).iter().map(|&v| v as f64).sum();
    assert!((mean_sum - 1.0).abs() < 1e-4);
    let max_sum: f64 = max_rows.row(2, 0, 0).iter().map(|&v| v as f64).sum();
    assert!(max_sum >= mean_sum);
}

#[test]
fn decode_steps_are_never_pruned() {
    // Decisions computed at prefill leave later decode entries valid.
    let model = Model::build(ModelConfig::small()).unwrap();
    let prompt: Vec<u32> = (0..32).map(|i| (i * 3 % 200) as u32).collect();
    let (mut cache, step, tail) = model.prefill_with_tail(&prompt, 1).unwrap();
    let rows = reduce_heads(&tail, 2, GqaReduce::Mean).unwrap();
    let decisions = plan(&rows, &PrunerConfig::default()).unwrap();

    let mut tok = argmax(&step.logits);
    for _ in 0..4 {
        let s = model.decode_step(&mut cache, tok).unwrap();
        tok = argmax(&s.logits);
    }
    apply_decisions(&mut cache, &decisions).unwrap();
    for layer in 0..model.config().n_layers {
        for head in 0..model.config().n_kv_heads {
            let hc = cache.head(layer, head);
            for slot in 0..hc.len() {
                if hc.position_ids[slot] >= prompt.len() {
                    assert!(hc.valid[slot], "decode entry was pruned");
                }
            }
        }
    }
    cache.validate().unwrap();
}

#[test]
fn decisions_serialize_for_replay() {
    let d = PruneDecision {
        layer: 2,
        head: 1,
        i_prune: 5,
        retained: vec![0, 1, 2, 3, 31],
        total: 32,
        budget: 5.0 / 32.0,
        norm_full: 0.5,
        norm_at_halt: 0.499,
        degenerate: false,
    };
    let json = serde_json::to_string(&d).unwrap();
    assert!(json.contains("\"i_prune\":5"));
}
