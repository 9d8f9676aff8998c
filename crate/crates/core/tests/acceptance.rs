//! One pass/fail line per acceptance criterion. Runs as a plain binary
//! (`harness = false`) so the lines come out in order and unbuffered.

mod support;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use genrec_core::synthetic::{generate, prepare, small_experiment, SyntheticConfig};
use genrec_core::trainer::{
    audit, pretrain, read_jsonl, run_ablation, train, AuditEvent, ExperimentConfig, Record, TrainData, TrainOutcome,
    Variant, AUDIT_FILE, METRICS_FILE,
};
use genrec_core::tokenizer::Tokenizer;

use support::{ensure, Check};

const UNIFORM_R10: f64 = 0.05;
const SEEDS: [u64; 3] = [1, 2, 3];

fn report(n: usize, outcome: Check, secs: f64) -> bool {
    match outcome {
        Ok(detail) => {
            println!("criterion {n}: PASS: {detail} ({secs:.1}s)");
            true
        }
        Err(detail) => {
            println!("criterion {n}: FAIL: {detail} ({secs:.1}s)");
            false
        }
    }
}

fn timed(n: usize, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let out = f();
    report(n, out, t.elapsed().as_secs_f64())
}

struct Synthetic {
    data: TrainData,
}

impl Synthetic {
    fn new() -> Self {
        let syn = generate(&SyntheticConfig::default()).expect("synthetic corpus");
        Self { data: prepare(&syn, 8).expect("prepared corpus") }
    }

    fn config(&self, seed: u64, variant: Variant) -> ExperimentConfig {
        small_experiment(self.data.table.dim(), seed, variant)
    }

    fn pretrained(&self, seed: u64) -> Result<Tokenizer, String> {
        pretrain(&self.config(seed, Variant::Full), &self.data.table).map(|(t, _)| t).map_err(|e| e.to_string())
    }
}

fn end_to_end(syn: &Synthetic, dir: &Path, tok: &Tokenizer) -> Result<(TrainOutcome, f64), String> {
    let t = Instant::now();
    let out = train(&syn.config(1, Variant::Full), &syn.data, tok, Some(dir), false).map_err(|e| e.to_string())?;
    Ok((out, t.elapsed().as_secs_f64()))
}

fn criterion6(out: &TrainOutcome, secs: f64) -> Check {
    let r10 = out.test.recall_at(10);
    let cycles = out.state.cycle;
    ensure(r10 >= 3.0 * UNIFORM_R10, || format!("test Recall@10 {r10:.4} below {:.2}", 3.0 * UNIFORM_R10))?;
    ensure(cycles <= 30, || format!("{cycles} cycles"))?;
    ensure(secs < 1800.0, || format!("run took {secs:.0}s"))?;
    Ok(format!("test Recall@10 {r10:.4} (uniform {UNIFORM_R10}) after {cycles} cycles in {secs:.0}s"))
}

fn criterion7(syn: &Synthetic, seed1: (&Tokenizer, &TrainOutcome)) -> Check {
    let variants = [Variant::Full, Variant::NoSia, Variant::NoPsa, Variant::NoBoth];
    let mut sums = [0.0; 4];
    let mut lines = Vec::new();
    for seed in SEEDS {
        let owned;
        let tok = if seed == 1 {
            seed1.0
        } else {
            owned = syn.pretrained(seed)?;
            &owned
        };
        let mut row = Vec::new();
        for (i, v) in variants.iter().enumerate() {
            let r = if seed == 1 && *v == Variant::Full {
                seed1.1.test.recall_at(10)
            } else {
                run_ablation(*v, &syn.config(seed, *v), &syn.data, tok, None).map_err(|e| e.to_string())?.test.recall_at(10)
            };
            sums[i] += r;
            row.push(format!("{v} {r:.4}"));
        }
        lines.push(format!("seed {seed}: {}", row.join(", ")));
    }
    let means: Vec<f64> = sums.iter().map(|s| s / SEEDS.len() as f64).collect();
    for l in &lines {
        println!("  {l}");
    }
    let summary = variants.iter().zip(&means).map(|(v, m)| format!("{v} {m:.4}")).collect::<Vec<_>>().join(", ");
    for (v, m) in variants.iter().zip(&means).skip(1) {
        ensure(means[0] >= *m, || format!("mean Recall@10 {summary}; full below {v}"))?;
    }
    Ok(format!("mean Recall@10 {summary}"))
}

fn criterion8(dir: &Path) -> Check {
    let syn = generate(&SyntheticConfig { users: 400, ..Default::default() }).map_err(|e| e.to_string())?;
    let data = prepare(&syn, 8).map_err(|e| e.to_string())?;
    let mut cfg = small_experiment(data.table.dim(), 5, Variant::Full);
    cfg.schedule.max_cycles = 10;
    cfg.schedule.epsilon = 0.0;
    cfg.schedule.tokenizer_lr = 1e-3;
    cfg.schedule.pretrain_epochs = 100;
    cfg.schedule.max_final_epochs = 1;
    let (tok, _) = pretrain(&cfg, &data.table).map_err(|e| e.to_string())?;
    let out = train(&cfg, &data, &tok, Some(dir), false).map_err(|e| e.to_string())?;
    ensure(out.state.cycle == 10, || format!("stopped after {} cycles", out.state.cycle))?;
    let logged: Vec<AuditEvent> = read_jsonl(&dir.join(AUDIT_FILE)).map_err(|e| e.to_string())?;
    ensure(logged == out.state.audit, || "audit log on disk differs from the in-memory trail".into())?;
    let violations = audit(&logged);
    ensure(violations.is_empty(), || format!("{} violations, first: {}", violations.len(), violations[0]))?;
    let steps = logged.iter().filter(|e| matches!(e, AuditEvent::Step { .. })).count();
    let retok = logged.iter().filter(|e| matches!(e, AuditEvent::Retokenize { .. })).count();
    ensure(retok == 10, || format!("{retok} re-tokenizations over 10 cycles"))?;
    Ok(format!("10 cycles, {steps} audited steps, {retok} re-tokenizations, 0 violations"))
}

fn criterion9(syn: &Synthetic, tok: &Tokenizer, first: &Path, second: &Path) -> Check {
    train(&syn.config(1, Variant::Full), &syn.data, tok, Some(second), false).map_err(|e| e.to_string())?;
    let a = fs::read(first.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let b = fs::read(second.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    ensure(!a.is_empty(), || "empty metric log".into())?;
    ensure(a == b, || format!("metric logs differ ({} vs {} bytes)", a.len(), b.len()))?;
    let records: Vec<Record> = read_jsonl(&first.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    Ok(format!("{} records, {} bytes, identical", records.len(), a.len()))
}

fn main() -> ExitCode {
    // `cargo test` passes filter arguments; this target always runs everything.
    let mut ok = true;
    ok &= timed(1, || support::quantization_oracle(500, 11));
    ok &= timed(2, support::loss_formulas);
    ok &= timed(3, || support::gradient_checks(5));
    ok &= timed(4, || support::beam_matches_exhaustive(20));
    ok &= timed(5, || support::metric_oracles(1000, 3));

    let scratch = tempfile::tempdir().expect("scratch directory");
    let run_a = scratch.path().join("full-a");
    let run_b = scratch.path().join("full-b");
    let syn = Synthetic::new();
    let t = Instant::now();
    let seed1 = syn.pretrained(1).and_then(|tok| end_to_end(&syn, &run_a, &tok).map(|r| (tok, r)));
    match &seed1 {
        Ok((_, (out, secs))) => ok &= report(6, criterion6(out, *secs), t.elapsed().as_secs_f64()),
        Err(e) => ok &= report(6, Err(e.clone()), t.elapsed().as_secs_f64()),
    }
    match &seed1 {
        Ok((tok, (out, _))) => {
            ok &= timed(7, || criterion7(&syn, (tok, out)));
        }
        Err(e) => ok &= report(7, Err(format!("no full run: {e}")), 0.0),
    }
    ok &= timed(8, || criterion8(&scratch.path().join("schedule")));
    match &seed1 {
        Ok((tok, _)) => ok &= timed(9, || criterion9(&syn, tok, &run_a, &run_b)),
        Err(e) => ok &= report(9, Err(format!("no full run: {e}")), 0.0),
    }
    println!("criterion 10: SKIP: needs the external Instrument dataset and 256-d embeddings; not gating");

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
