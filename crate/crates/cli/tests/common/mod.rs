//! Shared fixture: a temp directory holding a synthetic treebank and a
//! small toy-model config, plus a runner for the `finesent` binary.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use finesent::synth;
use finesent::treebank::Split;

pub const CONFIG: &str = "\
[run]
seed = 7

[paths]
corpus_dir = data/sst

[model]
preset = toy
vocab_size = 300

[pretrain]
epochs = 1
batch_size = 16
lr = 0.001
max_len = 32

[finetune]
task = sst5
epochs = 3
batch_size = 16
lr = 0.001
max_len = 32

[eval]
split = dev
";

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    /// Synthetic splits of the given sizes and the default config.
    pub fn new(sizes: [usize; 3], seed: u64) -> Self {
        Self::with_config(sizes, seed, CONFIG)
    }

    pub fn with_config(sizes: [usize; 3], seed: u64, config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data/sst");
        fs::create_dir_all(&data).unwrap();
        for (split, n) in Split::ALL.into_iter().zip(sizes) {
            let corpus = synth::corpus(split, n, seed);
            fs::write(
                data.join(split.file_name()),
                synth::distribution_text(&corpus),
            )
            .unwrap();
        }
        let ws = Self { dir };
        ws.write("run.ini", config);
        ws
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn write(&self, rel: &str, text: &str) {
        fs::write(self.path(rel), text).unwrap();
    }

    pub fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.path(rel)).unwrap()
    }

    pub fn bytes(&self, rel: &str) -> Vec<u8> {
        fs::read(self.path(rel)).unwrap()
    }

    /// Runs the binary inside the workspace.
    pub fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_finesent"))
            .current_dir(self.root())
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    /// Runs `command --config run.ini extra...`, asserting success.
    pub fn ok(&self, command: &str, extra: &[&str]) -> String {
        let mut args = vec![command, "--config", "run.ini"];
        args.extend_from_slice(extra);
        let out = self.run(&args);
        assert!(
            out.status.success(),
            "{command} failed ({:?}): {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// prepare, vocab, pretrain, finetune, eval in order.
    pub fn pipeline(&self) {
        for c in ["prepare", "vocab", "pretrain", "finetune", "eval"] {
            self.ok(c, &[]);
        }
    }
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}
