#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mathcept::corpus::{ingest, Dataset, Format};
use mathcept::gateway::{Cassette, Exchange};
use mathcept::prompting::{build_prompt, PromptTemplate, TemplateVersion};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn pilot() -> Dataset {
    let raw = std::fs::read(fixture("pilot.jsonl")).unwrap();
    ingest(&raw, Format::Jsonl, "pilot").unwrap().dataset
}

/// Canned replies keyed by sentence id.
pub fn replies() -> Vec<(String, String)> {
    let text = std::fs::read_to_string(fixture("pilot_replies.jsonl")).unwrap();
    text.lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (
                v["id"].as_str().unwrap().to_string(),
                v["reply"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}

/// Write a cassette answering the pilot prompts for `version`, leaving out
/// the sentences in `skip`.
pub fn write_cassette(path: &Path, version: TemplateVersion, skip: &[&str]) {
    let template = PromptTemplate::builtin(version);
    let data = pilot();
    let cassette = Cassette::open(path).unwrap();
    for (id, reply) in replies() {
        if skip.contains(&id.as_str()) {
            continue;
        }
        let s = data.sentences.iter().find(|s| s.id == id).unwrap();
        let mut ex = Exchange::new(&build_prompt(s, &template), &reply, "gpt-3.5-turbo");
        ex.timestamp = chrono::DateTime::UNIX_EPOCH;
        cassette.append(&ex).unwrap();
    }
}

pub struct Cli {
    pub store: PathBuf,
}

impl Cli {
    pub fn new(store: &Path) -> Self {
        Cli {
            store: store.to_path_buf(),
        }
    }

    pub fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mathcept"))
            .arg("--store")
            .arg(&self.store)
            .args(args)
            .env_remove("MATHCEPT_STORE")
            .env_remove("MATHCEPT_API_TOKEN")
            .output()
            .unwrap()
    }

    /// Run and expect exit 0; returns stdout.
    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed ({:?}): {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    pub fn json(&self, args: &[&str]) -> serde_json::Value {
        serde_json::from_str(&self.ok(args)).unwrap()
    }
}
