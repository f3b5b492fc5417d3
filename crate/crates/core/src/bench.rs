//! Single-threaded latency benchmark over seeded synthetic images.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::pipeline::{Pipeline, PipelineError, STAGES};
use crate::synth;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n: usize,
    pub warmup: usize,
    pub stages: BTreeMap<String, Percentiles>,
    pub end_to_end: Percentiles,
    pub budget_ms: f64,
    pub p50_within_budget: bool,
}

impl BenchReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "latency over {} samples ({} warmup discarded), single-threaded\n",
            self.n, self.warmup
        ));
        out.push_str(&format!("{:<16} {:>10} {:>10}\n", "stage", "p50 ms", "p95 ms"));
        for (stage, p) in &self.stages {
            out.push_str(&format!("{stage:<16} {:>10.3} {:>10.3}\n", p.p50, p.p95));
        }
        out.push_str(&format!(
            "{:<16} {:>10.3} {:>10.3}\n",
            "end_to_end", self.end_to_end.p50, self.end_to_end.p95
        ));
        out.push_str(&format!(
            "budget {} ms: {}\n",
            self.budget_ms,
            if self.p50_within_budget { "within" } else { "exceeded" }
        ));
        out
    }
}

/// Nearest-rank percentile of an unsorted sample set.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    debug_assert!(!samples.is_empty());
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Caption `n` seeded synthetic images after `warmup` discarded runs and
/// report per-stage and end-to-end p50/p95 wall times.
pub fn bench(
    pipeline: &Pipeline,
    n: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport, PipelineError> {
    let corpus = synth::generate_corpus::<crate::F>(seed, n + warmup, 0.25)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut per_stage: BTreeMap<String, Vec<f64>> = STAGES
        .iter()
        .map(|s| (s.to_string(), Vec::with_capacity(n)))
        .collect();
    let mut totals = Vec::with_capacity(n);
    for (i, example) in corpus.iter().enumerate() {
        let t = Instant::now();
        let result = pipeline.caption_image(&example.image)?;
        let total = t.elapsed().as_secs_f64() * 1e3;
        if i < warmup {
            continue;
        }
        totals.push(total);
        for (stage, ms) in &result.stage_latencies {
            per_stage.get_mut(stage).expect("known stage").push(*ms);
        }
    }
    let stages = per_stage
        .into_iter()
        .map(|(stage, samples)| {
            (
                stage,
                Percentiles {
                    p50: percentile(&samples, 0.50),
                    p95: percentile(&samples, 0.95),
                },
            )
        })
        .collect();
    let end_to_end = Percentiles {
        p50: percentile(&totals, 0.50),
        p95: percentile(&totals, 0.95),
    };
    Ok(BenchReport {
        n,
        warmup,
        stages,
        end_to_end,
        budget_ms: pipeline.config.latency_budget_ms,
        p50_within_budget: end_to_end.p50 <= pipeline.config.latency_budget_ms,
    })
}
