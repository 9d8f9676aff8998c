use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use genrec_core::data::{load_embeddings, load_interactions};
use genrec_core::tokenizer::{tokenize_corpus, IdentifierMap, Tokenizer};
use genrec_core::trainer::{read_jsonl, Phase, Record, METRICS_FILE, TOKENIZER_FILE};

const TINY: &str = r#"
[data]
k_core = 2
svd_dim = 8

[tokenizer]
levels = 2
codebook_size = 4
code_dim = 4
hidden = [16]
suffix_capacity = 80

[recommender]
encoder_layers = 1
decoder_layers = 1
d_model = 16
ffn_dim = 32
heads = 2
head_dim = 8
max_len = 5

[schedule]
max_cycles = 2
max_final_epochs = 1
patience = 1
batch_size = 64
pretrain_epochs = 5
pretrain_batch_size = 32
valid_users = 30
eval_beam = 10
eval_batch_size = 32
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self { dir: tempfile::tempdir().unwrap() };
        fs::write(ws.config(), TINY).unwrap();
        ws
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn config(&self) -> PathBuf {
        self.root().join("tiny.toml")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_genrec"))
            .args(args)
            .env("GENREC_OUTPUT_ROOT", self.root())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn with_config(&self, args: &[&str]) -> String {
        let cfg = self.config();
        let mut all = args.to_vec();
        all.extend(["--config", cfg.to_str().unwrap()]);
        self.ok(&all)
    }

    /// synth → prepare → pretrain, all on the tiny config.
    fn prepared(&self) {
        self.ok(&["synth", "--users", "150"]);
        let inter = self.root().join("synthetic/interactions.tsv");
        let emb = self.root().join("synthetic/embeddings.txt");
        self.with_config(&["prepare", "--interactions", inter.to_str().unwrap(), "--embeddings", emb.to_str().unwrap()]);
        self.with_config(&["pretrain"]);
    }
}

fn epoch_phases(dir: &Path) -> Vec<(usize, Phase)> {
    let recs: Vec<Record> = read_jsonl(&dir.join(METRICS_FILE)).unwrap();
    recs.iter()
        .filter_map(|r| match r {
            Record::Epoch { phase, cycle, .. } if *phase != Phase::Final => Some((*cycle, *phase)),
            _ => None,
        })
        .collect()
}

#[test]
fn missing_input_exits_with_two() {
    let ws = Workspace::new();
    let out = ws.run(&["prepare", "--interactions", "/nonexistent/raw.tsv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/raw.tsv"));
    let out = ws.run(&["pretrain", "--data", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline() {
    let ws = Workspace::new();
    ws.prepared();
    let data = ws.root().join("data");
    for f in ["corpus.tsv", "splits.jsonl", "embeddings.txt", "summary.json", "prepare.toml"] {
        assert!(data.join(f).exists(), "{f}");
    }
    // the echoed config is the effective one
    let echoed = fs::read_to_string(data.join("prepare.toml")).unwrap();
    assert!(echoed.contains("k_core = 2") && echoed.contains("codebook_size = 4"), "{echoed}");

    // rerun without --force refuses, with --force succeeds
    let inter = ws.root().join("synthetic/interactions.tsv");
    let emb = ws.root().join("synthetic/embeddings.txt");
    let cfg = ws.config();
    let again = [
        "prepare",
        "--interactions",
        inter.to_str().unwrap(),
        "--embeddings",
        emb.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ];
    let out = ws.run(&again);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    let mut forced = again.to_vec();
    forced.push("--force");
    let summary = ws.ok(&forced);
    assert!(summary.contains("sparsity"), "{summary}");

    let out = ws.with_config(&["train", "--cycle-length", "3", "--seed", "4"]);
    assert!(out.contains("Recall@10"), "{out}");
    let run = ws.root().join("train-full");
    let phases = epoch_phases(&run);
    let cycles = phases.last().unwrap().0 + 1;
    let mut want = Vec::new();
    for c in 0..cycles {
        want.push((c, Phase::Tokenizer));
        want.push((c, Phase::Recommender));
        want.push((c, Phase::Recommender));
    }
    assert_eq!(phases, want);
    assert!(run.join("train.toml").exists());

    let table = ws.with_config(&["evaluate"]);
    let header = table.lines().next().unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(cols, ["split", "users", "Recall@5", "Recall@10", "NDCG@5", "NDCG@10"]);
    assert!(run.join("eval-test.json").exists());

    let out = ws.ok(&["export-ids", "--out", "ids-export.tsv"]);
    assert!(out.contains("collision groups"), "{out}");
    let exported = IdentifierMap::read_text(ws.root().join("ids-export.tsv")).unwrap();
    let corpus = load_interactions(data.join("corpus.tsv")).unwrap();
    let table = load_embeddings(data.join("embeddings.txt"), &corpus, false).unwrap();
    let tok = Tokenizer::load(run.join(TOKENIZER_FILE)).unwrap();
    assert_eq!(exported.identifiers(), tokenize_corpus(&table, &tok).unwrap().identifiers());

    ws.ok(&["plot"]);
    let svg = fs::read_to_string(run.join("curves.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"), "{}", &svg[..svg.len().min(200)]);

    // resume of a finished run with a different config is refused
    let out = ws.run(&["train", "--resume", "--seed", "5", "--config", cfg.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));

    // identical seeds give identical metric logs
    ws.with_config(&["train", "--cycle-length", "3", "--seed", "4", "--out", "again"]);
    let a = fs::read(run.join(METRICS_FILE)).unwrap();
    let b = fs::read(ws.root().join("again").join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pretrain_with_zero_epochs_reports_init() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--users", "150"]);
    let inter = ws.root().join("synthetic/interactions.tsv");
    ws.with_config(&["prepare", "--interactions", inter.to_str().unwrap()]);
    let out = ws.with_config(&["pretrain", "--epochs", "0"]);
    assert!(out.contains("(init)"), "{out}");
    assert!(ws.root().join("pretrain").join(TOKENIZER_FILE).exists());
    // every level's assignment fractions add up to one
    let sums: Vec<f64> = out
        .lines()
        .filter(|l| l.starts_with("level"))
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(sums.len(), 2);
    assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-9), "{sums:?}");
}

#[test]
fn duplicate_embeddings_collide_with_suffixes() {
    let ws = Workspace::new();
    let raw = ws.root().join("raw.tsv");
    let mut lines = String::new();
    for u in 0..6 {
        for (t, item) in ["a", "b", "c", "d"].iter().enumerate() {
            lines += &format!("u{u}\t{item}\t{}\n", 10 * t + u);
        }
    }
    fs::write(&raw, lines).unwrap();
    let emb = ws.root().join("emb.txt");
    fs::write(&emb, "4 3\na 1 0 0\nb 1 0 0\nc 0 1 0\nd 0 0 1\n").unwrap();
    ws.with_config(&["prepare", "--interactions", raw.to_str().unwrap(), "--embeddings", emb.to_str().unwrap()]);
    ws.with_config(&["pretrain", "--epochs", "0"]);
    let out = ws.ok(&["export-ids", "--tokenizer", "pretrain", "--out", "ids.tsv"]);
    assert!(out.contains("2: "), "{out}");
    let ids = IdentifierMap::read_text(ws.root().join("ids.tsv")).unwrap();
    let (a, b) = (ids.get("a").unwrap(), ids.get("b").unwrap());
    assert_eq!(a.tokens, b.tokens);
    assert_eq!((a.suffix, b.suffix), (0, 1));
}
