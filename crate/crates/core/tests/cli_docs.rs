//! Runs the `console` blocks of docs/cli.md against the built binary.

use std::path::Path;
use std::process::Command;

enum Step {
    File {
        name: String,
        body: String,
    },
    Run {
        args: Vec<String>,
        expect: Vec<String>,
    },
}

fn parse(doc: &str) -> Vec<Step> {
    let mut steps = Vec::new();
    let mut lines = doc.lines();
    while let Some(line) = lines.next() {
        let Some(info) = line.strip_prefix("```") else {
            continue;
        };
        let block: Vec<&str> = lines
            .by_ref()
            .take_while(|l| !l.starts_with("```"))
            .collect();
        if info == "console" {
            for l in block {
                if let Some(cmd) = l.strip_prefix("$ clickseg") {
                    let args = cmd.split_whitespace().map(str::to_owned).collect();
                    steps.push(Step::Run {
                        args,
                        expect: Vec::new(),
                    });
                } else if let Some(Step::Run { expect, .. }) = steps.last_mut() {
                    expect.push(l.to_owned());
                }
            }
        } else if let Some(rest) = info.split_once("title=\"") {
            let name = rest.1.trim_end_matches('"').to_owned();
            steps.push(Step::File {
                name,
                body: block.join("\n"),
            });
        }
    }
    steps
}

#[test]
fn documented_commands_run() {
    let doc_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/cli.md");
    let doc = std::fs::read_to_string(&doc_path).unwrap();
    let steps = parse(&doc);
    assert!(
        steps
            .iter()
            .filter(|s| matches!(s, Step::Run { .. }))
            .count()
            >= 6
    );

    let dir = tempfile::tempdir().unwrap();
    for step in steps {
        match step {
            Step::File { name, body } => std::fs::write(dir.path().join(name), body).unwrap(),
            Step::Run { args, expect } => {
                let out = Command::new(env!("CARGO_BIN_EXE_clickseg"))
                    .args(&args)
                    .current_dir(dir.path())
                    .env("RUST_LOG", "warn")
                    .output()
                    .unwrap();
                let stdout = String::from_utf8_lossy(&out.stdout);
                assert!(
                    out.status.success(),
                    "clickseg {} failed:\n{stdout}\n{}",
                    args.join(" "),
                    String::from_utf8_lossy(&out.stderr)
                );
                for e in expect {
                    assert!(
                        stdout.contains(&e),
                        "clickseg {}: expected {e:?} in\n{stdout}",
                        args.join(" ")
                    );
                }
            }
        }
    }
    for produced in [
        "run/final.ckpt",
        "run/loss.csv",
        "eval/metrics.json",
        "eval/plot.csv",
        "result.json",
    ] {
        assert!(dir.path().join(produced).exists(), "{produced} missing");
    }
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_clickseg"))
        .args([
            "infer",
            "--model",
            "missing.ckpt",
            "--scene",
            "missing.json",
            "--clicks",
            "c.json",
            "--out",
            "r.json",
        ])
        .current_dir(std::env::temp_dir())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
