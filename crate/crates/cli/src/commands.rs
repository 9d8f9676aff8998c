use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;

use genrec_core::data::{
    apply_k_core, derive_embeddings_svd, load_embeddings, load_interactions, split_leave_one_out, write_embeddings,
    write_interactions, write_split_manifest, CorpusStats, EmbeddingTable, InteractionCorpus, Split,
};
use genrec_core::evaldecode::{evaluate as run_eval, EvalOptions, EvalReport};
use genrec_core::recommender::Recommender;
use genrec_core::synthetic::{generate, SyntheticConfig};
use genrec_core::tokenizer::{tokenize_corpus, IdentifierMap, Tokenizer};
use genrec_core::trainer::{
    self, train_on_frozen_ids, TrainData, Variant, IDS_FILE, METRICS_FILE, RECOMMENDER_FILE, TOKENIZER_FILE,
};

use crate::config::{Overrides, RunConfig};
use crate::Common;

pub const CORPUS_FILE: &str = "corpus.tsv";
pub const SPLITS_FILE: &str = "splits.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PRETRAIN_REPORT: &str = "pretrain.json";

fn effective(common: &Common, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply(o);
    Ok(cfg)
}

/// Refuses to clobber `artifact` unless `--force` was given.
fn guard(artifact: &Path, force: bool) -> Result<()> {
    if artifact.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", artifact.display());
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn load_prepared(dir: &Path) -> Result<(InteractionCorpus, EmbeddingTable)> {
    let corpus = load_interactions(dir.join(CORPUS_FILE))?;
    let table = load_embeddings(dir.join(EMBEDDINGS_FILE), &corpus, false)?;
    Ok((corpus, table))
}

#[derive(Serialize)]
struct PrepareSummary {
    raw: CorpusStats,
    filtered: CorpusStats,
    k_core: usize,
    train_examples: usize,
    valid_examples: usize,
    test_examples: usize,
    skipped_users: usize,
    embedding_dim: usize,
    embeddings: String,
}

pub fn prepare(common: &Common, o: &Overrides, out: &Path) -> Result<()> {
    let cfg = effective(common, o)?;
    cfg.validate()?;
    let Some(path) = cfg.data.interactions.clone() else {
        bail!("no interaction file given (--interactions or data.interactions)");
    };
    guard(&out.join(SUMMARY_FILE), common.force)?;
    cfg.echo(out, "prepare")?;

    let raw = load_interactions(&path)?;
    let corpus = apply_k_core(&raw, cfg.data.k_core)?;
    let splits = split_leave_one_out(&corpus, cfg.experiment.recommender.max_len);
    let (mut table, source) = match &cfg.data.embeddings {
        Some(p) => (load_embeddings(p, &corpus, false)?, p.display().to_string()),
        None => (derive_embeddings_svd(&corpus, cfg.data.svd_dim, cfg.data.svd_window)?, "svd".to_string()),
    };
    if cfg.data.normalize {
        table.l2_normalize()?;
    }
    write_interactions(&corpus, out.join(CORPUS_FILE))?;
    write_split_manifest(&splits, out.join(SPLITS_FILE))?;
    write_embeddings(&table, out.join(EMBEDDINGS_FILE))?;
    let summary = PrepareSummary {
        raw: raw.stats(),
        filtered: corpus.stats(),
        k_core: cfg.data.k_core,
        train_examples: splits.of(Split::Train).count(),
        valid_examples: splits.of(Split::Valid).count(),
        test_examples: splits.of(Split::Test).count(),
        skipped_users: splits.skipped_users,
        embedding_dim: table.dim(),
        embeddings: source,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    let s = &summary.filtered;
    println!("users {}  items {}  interactions {}  sparsity {:.3}%", s.users, s.items, s.interactions, 100.0 * s.sparsity);
    println!(
        "examples: train {}  valid {}  test {}  (skipped users {})",
        summary.train_examples, summary.valid_examples, summary.test_examples, summary.skipped_users
    );
    println!("wrote {}", out.display());
    Ok(())
}

pub fn pretrain(common: &Common, o: &Overrides, data: &Path, out: &Path) -> Result<()> {
    let mut cfg = effective(common, o)?;
    let (_, table) = load_prepared(data)?;
    cfg.fit_to_dim(table.dim());
    cfg.validate()?;
    guard(&out.join(TOKENIZER_FILE), common.force)?;
    cfg.echo(out, "pretrain")?;

    let (tok, report) = trainer::pretrain(&cfg.experiment, &table)?;
    tok.save(out.join(TOKENIZER_FILE))?;
    write_json(&out.join(PRETRAIN_REPORT), &report)?;
    let label = if report.epochs.is_empty() { "init" } else { "final" };
    println!("reconstruction error ({label}): {:.6}", report.final_recon);
    let k = cfg.experiment.tokenizer.codebook_size;
    for (l, u) in report.utilization.iter().enumerate() {
        let total: f64 = u.fractions.iter().sum();
        println!("level {}: {}/{k} codes used, fractions sum to {total:.6}", l + 1, u.used_codes);
    }
    println!("wrote {}", out.join(TOKENIZER_FILE).display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    variant: Variant,
    cycles: usize,
    converged: bool,
    valid: EvalReport,
    test: EvalReport,
}

pub fn train(
    common: &Common,
    o: &Overrides,
    data: &Path,
    pretrained: &Path,
    frozen_from: Option<&Path>,
    resume: bool,
    out: &Path,
) -> Result<()> {
    let mut cfg = effective(common, o)?;
    let (corpus, table) = load_prepared(data)?;
    cfg.fit_to_dim(table.dim());
    cfg.validate()?;
    if !resume {
        guard(&out.join(METRICS_FILE), common.force)?;
        if out.join(METRICS_FILE).exists() {
            fs::remove_dir_all(out).with_context(|| format!("cannot clear {}", out.display()))?;
        }
    }
    cfg.echo(out, if resume { "train-resume" } else { "train" })?;

    let splits = split_leave_one_out(&corpus, cfg.experiment.recommender.max_len);
    let data = TrainData::from_splits(table, &splits)?;
    let exp = &cfg.experiment;
    let outcome = if exp.variant == Variant::NoEte {
        let Some(dir) = frozen_from else {
            bail!("no_ete retrains on a finished run's identifiers; pass --frozen-from <run dir>");
        };
        let tok = Tokenizer::load(dir.join(TOKENIZER_FILE))?;
        train_on_frozen_ids(exp, &data, &tok, Some(out))?
    } else {
        let tok = Tokenizer::load(pretrained.join(TOKENIZER_FILE))?;
        if tok.config() != &exp.tokenizer {
            bail!("pretrained tokenizer in {} was built with a different tokenizer config", pretrained.display());
        }
        trainer::train(exp, &data, &tok, Some(out), resume)?
    };
    let summary = TrainSummary {
        variant: exp.variant,
        cycles: outcome.state.cycle,
        converged: outcome.state.converged,
        valid: outcome.valid,
        test: outcome.test,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    println!("{} cycles, converged: {}", summary.cycles, summary.converged);
    print!("{}", metrics_table(&[("valid", &summary.valid), ("test", &summary.test)]));
    println!("wrote {}", out.display());
    Ok(())
}

/// Fixed-width table with one Recall and one NDCG column per cutoff.
pub fn metrics_table(rows: &[(&str, &EvalReport)]) -> String {
    let ks: Vec<usize> = rows.first().map(|(_, r)| r.recall.keys().copied().collect()).unwrap_or_default();
    let mut out = format!("{:<6} {:>7}", "split", "users");
    for k in &ks {
        out += &format!(" {:>10}", format!("Recall@{k}"));
    }
    for k in &ks {
        out += &format!(" {:>10}", format!("NDCG@{k}"));
    }
    out.push('\n');
    for (name, r) in rows {
        out += &format!("{name:<6} {:>7}", r.users);
        for k in &ks {
            out += &format!(" {:>10.4}", r.recall_at(*k));
        }
        for k in &ks {
            out += &format!(" {:>10.4}", r.ndcg_at(*k));
        }
        out.push('\n');
    }
    out
}

pub fn evaluate(common: &Common, o: &Overrides, data: &Path, run: &Path) -> Result<()> {
    let cfg = effective(common, o)?;
    cfg.validate()?;
    let (corpus, table) = load_prepared(data)?;
    let tok = Tokenizer::load(run.join(TOKENIZER_FILE))?;
    let rec = Recommender::load(run.join(RECOMMENDER_FILE))?;
    let mut ids = IdentifierMap::read_text(run.join(IDS_FILE))?;
    // the saved map is current only if the checkpoint still produces it
    let fresh = tokenize_corpus(&table, &tok)?;
    if fresh.identifiers() == ids.identifiers() {
        ids.tokenizer_hash = fresh.tokenizer_hash.clone();
    }
    let ev = &cfg.evaluate;
    cfg.echo(run, &format!("evaluate-{}", ev.split))?;
    let split = if ev.split == "valid" { Split::Valid } else { Split::Test };
    let examples: Vec<_> = split_leave_one_out(&corpus, rec.config().max_len).of(split).cloned().collect();
    let opts = EvalOptions { ks: ev.ks.clone(), beam: ev.beam, batch_size: cfg.experiment.schedule.eval_batch_size };
    let report = run_eval(&rec, &tok, &ids, &examples, &opts)?;
    let table = metrics_table(&[(ev.split.as_str(), &report)]);
    write_json(&run.join(format!("eval-{}.json", ev.split)), &report)?;
    fs::write(run.join(format!("eval-{}.txt", ev.split)), &table)?;
    print!("{table}");
    if report.skipped > 0 {
        println!("skipped {} example(s) with targets outside the catalog", report.skipped);
    }
    Ok(())
}

pub fn export_ids(common: &Common, data: &Path, tokenizer: &Path, out: &Path) -> Result<()> {
    let cfg = effective(common, &Overrides::default())?;
    let path = if tokenizer.is_dir() { tokenizer.join(TOKENIZER_FILE) } else { tokenizer.to_path_buf() };
    let tok = Tokenizer::load(&path)?;
    let (_, table) = load_prepared(data)?;
    guard(out, common.force)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    cfg.echo(dir, "export-ids")?;
    let ids = tokenize_corpus(&table, &tok)?;
    ids.write_text(out)?;
    println!("{} items, {} levels, largest suffix {}", ids.len(), ids.levels(), ids.max_suffix());
    println!("collision groups (size: count)");
    print!("{}", histogram_lines(&ids.collision_histogram()));
    println!("wrote {}", out.display());
    Ok(())
}

pub fn histogram_lines(hist: &BTreeMap<usize, usize>) -> String {
    hist.iter().map(|(size, n)| format!("  {size}: {n}\n")).collect()
}

pub fn synth(common: &Common, users: usize, out: &Path) -> Result<()> {
    let seed = common.seed.unwrap_or(SyntheticConfig::default().seed);
    let cfg = SyntheticConfig { users, seed, ..Default::default() };
    let interactions = out.join("interactions.tsv");
    guard(&interactions, common.force)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join("synthetic.toml"), toml::to_string_pretty(&cfg)?)?;
    let data = generate(&cfg)?;
    write_interactions(&data.corpus, &interactions)?;
    write_embeddings(&data.embeddings, out.join("embeddings.txt"))?;
    info!("{} users over {} items in {} clusters", users, cfg.items, cfg.clusters);
    println!("wrote {}", out.display());
    Ok(())
}
