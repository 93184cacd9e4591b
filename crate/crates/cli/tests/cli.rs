mod common;

use std::fs;

use common::{code, stderr, Workspace, CONFIG};
use finesent::checkpoint::Checkpoint;
use finesent_cli::exit;

fn prepared(ws: &Workspace) {
    ws.ok("prepare", &[]);
    ws.ok("vocab", &[]);
}

#[test]
fn prepare_exports_sentences_and_stats() {
    let ws = Workspace::new([12, 5, 4], 1);
    let out = ws.ok("prepare", &[]);
    assert!(out.contains("sentences = 21\n"), "{out}");
    assert_eq!(ws.read("out/prepared/dev.txt").lines().count(), 5);
    let json: serde_json::Value =
        serde_json::from_str(&ws.read("out/prepared/stats.json")).unwrap();
    assert_eq!(json["sentences"], 21);
    assert_eq!(ws.read("out/prepared/stats.txt"), out);
    let copy = ws.read("out/prepared/prepare.config.ini");
    assert!(
        copy.contains("seed=7") || copy.contains("seed = 7"),
        "{copy}"
    );
}

#[test]
fn outputs_are_never_silently_overwritten() {
    let ws = Workspace::new([12, 5, 4], 1);
    ws.ok("prepare", &[]);
    let before = ws.bytes("out/prepared/stats.json");
    let again = ws.run(&["prepare", "--config", "run.ini"]);
    assert_eq!(code(&again), exit::USAGE);
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    ws.ok("prepare", &["--force"]);
    assert_eq!(ws.bytes("out/prepared/stats.json"), before);
    for split in ["train", "dev", "test"] {
        assert!(!ws.read(&format!("out/prepared/{split}.txt")).is_empty());
    }
}

#[test]
fn missing_dev_file_is_a_data_error_naming_it() {
    let ws = Workspace::new([12, 5, 4], 1);
    fs::remove_file(ws.path("data/sst/dev.txt")).unwrap();
    let out = ws.run(&["prepare", "--config", "run.ini"]);
    assert_eq!(code(&out), exit::DATA);
    assert!(stderr(&out).contains("dev.txt"), "{}", stderr(&out));
}

#[test]
fn usage_errors_and_help() {
    let ws = Workspace::new([4, 2, 2], 1);
    assert_eq!(code(&ws.run(&["prepare"])), exit::USAGE);
    assert_eq!(
        code(&ws.run(&["prepare", "--config", "run.ini", "--bogus"])),
        exit::USAGE
    );
    assert_eq!(
        code(&ws.run(&["eval", "--config", "run.ini", "--task", "sst3"])),
        exit::USAGE
    );
    assert_eq!(
        code(&ws.run(&["eval", "--config", "run.ini", "--scope", "all,leaf"])),
        exit::USAGE
    );
    assert_eq!(
        code(&ws.run(&["prepare", "--config", "run.ini", "--preset", "huge"])),
        exit::USAGE
    );
    assert_eq!(code(&ws.run(&["--help"])), exit::SUCCESS);
    assert_eq!(code(&ws.run(&["--version"])), exit::SUCCESS);

    ws.write("bad.ini", &format!("{CONFIG}\n[model]\nlayers = 3\n"));
    let out = ws.run(&["prepare", "--config", "bad.ini"]);
    assert_eq!(code(&out), exit::USAGE);
    assert!(
        stderr(&out).contains("unknown key model.layers"),
        "{}",
        stderr(&out)
    );
    let out = ws.run(&["prepare", "--config", "nope.ini"]);
    assert_eq!(code(&out), exit::USAGE);
}

#[test]
fn vocab_file_layout_and_determinism() {
    let ws = Workspace::new([40, 5, 5], 2);
    prepared(&ws);
    let text = ws.read("out/vocab.txt");
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 300);
    assert_eq!(lines[..5], ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]);
    ws.ok("vocab", &["--force"]);
    assert_eq!(ws.read("out/vocab.txt"), text);
}

#[test]
fn pipeline_reports_and_prediction() {
    let ws = Workspace::new([60, 20, 10], 3);
    ws.pipeline();

    let csv = ws.read("out/pretrain_loss.csv");
    assert!(csv.starts_with("step,mlm_loss,nsp_loss\n"), "{csv}");
    let summary: serde_json::Value =
        serde_json::from_str(&ws.read("out/reports/finetune_summary.json")).unwrap();
    assert!(summary["best_epoch"].as_u64().is_some());
    assert_eq!(summary["epochs"].as_array().unwrap().len(), 3);

    // Report holds exactly the requested cells; TSV and JSON agree.
    let tsv = ws.read("out/reports/eval_dev.tsv");
    let json: serde_json::Value =
        serde_json::from_str(&ws.read("out/reports/eval_dev.json")).unwrap();
    let rows: Vec<&str> = tsv
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .collect();
    let cells = json["cells"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(cells.len(), 2);
    for (row, cell) in rows.iter().zip(cells) {
        let f: Vec<&str> = row.split('\t').collect();
        assert_eq!(f[0], cell["task"].as_str().unwrap());
        assert_eq!(f[1], cell["scope"].as_str().unwrap());
        assert_eq!(f[2], cell["n"].to_string());
        let acc = cell["accuracy"].as_f64().unwrap();
        assert_eq!(f[3], format!("{:.1}", 100.0 * acc));
    }
    ws.ok("eval", &["--scope", "root", "--force"]);
    assert_eq!(
        ws.read("out/reports/eval_dev.tsv")
            .lines()
            .filter(|l| l.starts_with("sst5"))
            .count(),
        1
    );

    // Prediction: five named classes summing to 1.000, stable across runs.
    let a = ws.ok("predict", &["--text", "a very good film"]);
    let b = ws.ok("predict", &["--text", "a very good film"]);
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 6);
    let names: Vec<&str> = lines[..5]
        .iter()
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "very negative",
            "negative",
            "neutral",
            "positive",
            "very positive"
        ]
    );
    let total: f64 = lines[..5]
        .iter()
        .map(|l| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() <= 1e-3 + 1e-12, "{total}");
    assert!(lines[5].starts_with("label\t"));

    let empty = ws.run(&["predict", "--config", "run.ini", "--text", ""]);
    assert_eq!(code(&empty), exit::SUCCESS);
    assert!(stderr(&empty).contains("empty input"), "{}", stderr(&empty));

    // Checkpoints round-trip to identical bytes.
    for name in ["out/pretrain.sstb", "out/classifier.sstb"] {
        let bytes = ws.bytes(name);
        assert_eq!(&bytes[..4], b"SSTB");
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes(), bytes);
        assert_eq!(ck.meta["provenance.seed"], "7");
    }
}

#[test]
fn binary_task_and_frozen_mode() {
    let ws = Workspace::new([30, 10, 5], 4);
    prepared(&ws);
    ws.ok("pretrain", &[]);
    ws.ok("finetune", &["--task", "sst2"]);
    let out = ws.ok("eval", &["--task", "sst2"]);
    assert!(out.lines().any(|l| l.starts_with("sst2\troot\t")), "{out}");
    let pred = ws.ok("predict", &["--text", "not bad"]);
    assert_eq!(pred.lines().count(), 3);

    // A binary checkpoint cannot serve sst5 cells.
    let out = ws.run(&["eval", "--config", "run.ini", "--force"]);
    assert_eq!(code(&out), exit::DATA);

    ws.write(
        "frozen.ini",
        &CONFIG.replace("epochs = 3", "epochs = 2\nfreeze_encoder = true"),
    );
    let out = ws.run(&["finetune", "--config", "frozen.ini", "--force"]);
    assert_eq!(code(&out), exit::SUCCESS, "{}", stderr(&out));
}

#[test]
fn refuses_mismatched_checkpoints() {
    let ws = Workspace::new([30, 10, 5], 5);
    prepared(&ws);
    ws.ok("pretrain", &[]);
    let out = ws.run(&["finetune", "--config", "run.ini", "--preset", "base"]);
    assert_eq!(code(&out), exit::DATA);
    assert!(stderr(&out).contains("preset base"), "{}", stderr(&out));

    ws.ok("finetune", &[]);
    // A different vocab invalidates the classifier.
    ws.write(
        "small.ini",
        &CONFIG.replace("vocab_size = 300", "vocab_size = 250"),
    );
    let out = ws.run(&["vocab", "--config", "small.ini", "--force"]);
    assert_eq!(code(&out), exit::SUCCESS);
    let out = ws.run(&["predict", "--config", "run.ini", "--text", "good"]);
    assert_eq!(code(&out), exit::DATA);
    assert!(stderr(&out).contains("different vocab"), "{}", stderr(&out));

    // A pretraining checkpoint is not a classifier.
    let out = ws.run(&[
        "predict",
        "--config",
        "run.ini",
        "--checkpoint",
        "out/pretrain.sstb",
        "--text",
        "x",
    ]);
    assert_eq!(code(&out), exit::DATA);

    fs::write(ws.path("out/broken.sstb"), b"SSTB\x02\0\0\0").unwrap();
    let out = ws.run(&[
        "eval",
        "--config",
        "run.ini",
        "--checkpoint",
        "out/broken.sstb",
    ]);
    assert_eq!(code(&out), exit::DATA);
    assert!(stderr(&out).contains("version 2"), "{}", stderr(&out));
}

#[test]
fn pretraining_resumes_step_counter() {
    let ws = Workspace::new([48, 5, 5], 6);
    prepared(&ws);
    ws.ok("pretrain", &[]);
    let first = ws.read("out/pretrain_loss.csv");
    let last_step: u64 = first
        .lines()
        .last()
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    let ck = Checkpoint::load(&ws.path("out/pretrain.sstb")).unwrap();
    assert_eq!(ck.meta["provenance.step"], last_step.to_string());

    let resumed = CONFIG
        .replace("corpus_dir = data/sst", "corpus_dir = data/sst\npretrain_checkpoint = out/resume/resumed.sstb\npretrain_log = out/resume/resumed.csv")
        .replace("max_len = 32\n\n[finetune]", "max_len = 32\nresume_from = out/pretrain.sstb\n\n[finetune]");
    ws.write("resume.ini", &resumed);
    let out = ws.run(&["pretrain", "--config", "resume.ini"]);
    assert_eq!(code(&out), exit::SUCCESS, "{}", stderr(&out));
    let csv = ws.read("out/resume/resumed.csv");
    let steps: Vec<u64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps[0], last_step + 1);
    assert_eq!(steps.len() as u64, last_step);
    let ck = Checkpoint::load(&ws.path("out/resume/resumed.sstb")).unwrap();
    assert_eq!(ck.meta["provenance.step"], (2 * last_step).to_string());
}

#[test]
fn divergent_training_exits_with_numeric_code() {
    let ws = Workspace::with_config(
        [30, 5, 5],
        7,
        &CONFIG.replace(
            "lr = 0.001\nmax_len = 32\n\n[finetune]",
            "lr = 1e30\nmax_len = 32\n\n[finetune]",
        ),
    );
    prepared(&ws);
    let out = ws.run(&["pretrain", "--config", "run.ini"]);
    assert_eq!(code(&out), exit::NUMERIC, "{}", stderr(&out));
    assert!(!ws.path("out/pretrain.sstb").exists());
}

#[test]
fn oracle_fit_scores_full_marks() {
    let config = CONFIG
        .replace(
            "epochs = 3\nbatch_size = 16",
            "epochs = 60\nbatch_size = 4\ntrain_scope = root",
        )
        .replace("split = dev", "split = train\nscopes = root");
    let ws = Workspace::with_config([8, 4, 4], 8, &config);
    // Model selection sees the same sentences it is scored on.
    fs::copy(ws.path("data/sst/train.txt"), ws.path("data/sst/dev.txt")).unwrap();
    prepared(&ws);
    ws.ok("pretrain", &[]);
    ws.ok("finetune", &[]);
    let out = ws.ok("eval", &[]);
    assert!(out.contains("sst5\troot\t8\t100.0"), "{out}");
}
