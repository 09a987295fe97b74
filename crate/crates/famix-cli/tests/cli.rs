//! End-to-end CLI checks: artifact determinism, exit codes and the
//! machine-readable error record.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn famix() -> Command {
    Command::new(env!("CARGO_BIN_EXE_famix"))
}

fn run(args: &[&str]) -> Output {
    famix().args(args).output().expect("spawn famix")
}

fn assert_ok(out: &Output, context: &str) {
    assert!(
        out.status.success(),
        "{context} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_kind(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let record: serde_json::Value =
        serde_json::from_str(stderr.trim()).unwrap_or_else(|e| panic!("stderr not JSON ({e}): {stderr}"));
    record["error"]["kind"].as_str().unwrap_or_default().to_string()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus");
        let out = run(&["synth", "--out", corpus.to_str().unwrap(), "--seed", "5"]);
        assert_ok(&out, "synth");
        Self {
            _dir: dir,
            root,
            corpus,
        }
    }

    fn write_config(&self, name: &str, body: &str) -> PathBuf {
        let path = self.root.join(name);
        let header = format!(
            "out_dir = \"{}\"\n[dataset]\nmanifest = \"{}\"\nclass_names = \"{}\"\n",
            self.root.join("out").display(),
            self.corpus.join("manifest.tsv").display(),
            self.corpus.join("classes.tsv").display(),
        );
        std::fs::write(&path, format!("{body}\n{header}")).unwrap();
        path
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.root.join("out").join(rel)
    }
}

fn prompts_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/prompts/r1_styles.txt")
}

fn rcp_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/prompts/r2_random_chars.txt")
}

#[test]
fn mine_is_byte_identical_across_reruns() {
    let ws = Workspace::new();
    let config = ws.write_config(
        "mine.toml",
        &format!(
            "seed = 3\nprompts = \"{}\"\n[mining]\npin_steps = 2\npin_step_size = 0.2\n",
            prompts_path().display()
        ),
    );
    let out = run(&["mine", "--config", config.to_str().unwrap()]);
    assert_ok(&out, "mine");
    let first = std::fs::read(ws.out("bank.famixbank")).unwrap();
    let log_first = std::fs::read(ws.out("mine_log.json")).unwrap();
    let out = run(&["mine", "--config", config.to_str().unwrap()]);
    assert_ok(&out, "mine rerun");
    let second = std::fs::read(ws.out("bank.famixbank")).unwrap();
    assert_eq!(first, second, "bank files must be byte-identical");
    assert_eq!(log_first, std::fs::read(ws.out("mine_log.json")).unwrap());
    // a different seed produces a different bank
    let out = run(&["mine", "--config", config.to_str().unwrap(), "--seed", "4"]);
    assert_ok(&out, "mine with new seed");
    assert_ne!(first, std::fs::read(ws.out("bank.famixbank")).unwrap());
}

#[test]
fn train_eval_pipeline_produces_reports() {
    let ws = Workspace::new();
    let mine_config = ws.write_config(
        "mine.toml",
        &format!(
            "seed = 3\nprompts = \"{}\"\n[mining]\npin_steps = 2\npin_step_size = 0.2\n",
            prompts_path().display()
        ),
    );
    assert_ok(&run(&["mine", "--config", mine_config.to_str().unwrap()]), "mine");
    let train_config = ws.write_config(
        "train.toml",
        &format!(
            "seed = 3\nbank = \"{}\"\n[schedule]\niterations = 8\nbatch_size = 2\n",
            ws.out("bank.famixbank").display()
        ),
    );
    assert_ok(&run(&["train", "--config", train_config.to_str().unwrap()]), "train");
    let checkpoint = ws.out("checkpoint.famixckpt");
    assert!(checkpoint.is_file());
    // identical config + seed reproduces the artifacts byte for byte
    let first_ckpt = std::fs::read(&checkpoint).unwrap();
    let first_log = std::fs::read(ws.out("train_log.jsonl")).unwrap();
    assert_ok(&run(&["train", "--config", train_config.to_str().unwrap()]), "train rerun");
    assert_eq!(first_ckpt, std::fs::read(&checkpoint).unwrap());
    assert_eq!(first_log, std::fs::read(ws.out("train_log.jsonl")).unwrap());
    let log = std::fs::read_to_string(ws.out("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["iteration", "loss", "lr_backbone", "lr_decoder", "alpha"] {
        assert!(first.get(key).is_some(), "log line missing {key}");
    }
    // resuming a finished run is a no-op that still exits 0
    let out = run(&[
        "train",
        "--config",
        train_config.to_str().unwrap(),
        "--resume",
        checkpoint.to_str().unwrap(),
    ]);
    assert_ok(&out, "resume");
    let eval_out = run(&[
        "eval",
        "--config",
        train_config.to_str().unwrap(),
        "--checkpoint",
        checkpoint.to_str().unwrap(),
    ]);
    assert_ok(&eval_out, "eval");
    let stdout = String::from_utf8_lossy(&eval_out.stdout);
    assert!(stdout.contains("eval_source"));
    assert!(stdout.contains("eval_shifted"));
    // the TSV column order follows the class-names file
    let tsv = std::fs::read_to_string(ws.out("eval_eval_source.tsv")).unwrap();
    let header = tsv.lines().next().unwrap();
    assert_eq!(header, "run\tground\tfoliage\tsky\tstructure\tmIoU");
    assert!(tsv.lines().any(|l| l.starts_with("mean")));
    assert!(tsv.lines().any(|l| l.starts_with("std")));
    assert!(ws.out("eval_report.json").is_file());
}

#[test]
fn invalid_configs_fail_with_machine_readable_records() {
    let ws = Workspace::new();
    // unknown freeze preset: caught by validation before any compute
    let config = ws.write_config(
        "bad.toml",
        &format!(
            "seed = 1\nfreeze = \"everything\"\nprompts = \"{}\"\n",
            prompts_path().display()
        ),
    );
    let out = run(&["mine", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(error_kind(&out), "config");
    // train without the bank its mode requires
    let config = ws.write_config("nobank.toml", "seed = 1\n");
    let out = run(&["train", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(error_kind(&out), "config");
    // eval without checkpoints
    let out = run(&["eval", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(error_kind(&out), "config");
    // missing config file
    let out = run(&["mine", "--config", ws.root.join("absent.toml").to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(error_kind(&out), "config");
}

#[test]
fn components_sweep_emits_eight_arms() {
    let ws = Workspace::new();
    let config = ws.write_config(
        "ablate.toml",
        &format!(
            "seed = 2\nprompts = \"{}\"\n[mining]\npin_steps = 1\npin_step_size = 0.2\ncardinality = 1\n[schedule]\niterations = 4\nbatch_size = 2\n",
            prompts_path().display()
        ),
    );
    let out = run(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--sweep",
        "components",
    ]);
    assert_ok(&out, "ablate components");
    let tsv = std::fs::read_to_string(ws.out("components/results.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 8, "component grid must have 8 arms:\n{tsv}");
    for freeze in ["on", "off"] {
        for augment in ["on", "off"] {
            for mix in ["on", "off"] {
                let name = format!("freeze-{freeze}_augment-{augment}_mix-{mix}");
                assert!(rows.iter().any(|r| r.starts_with(&name)), "missing {name}");
            }
        }
    }
    assert!(ws.out("components/results.json").is_file());
    // report re-renders the consolidated outputs
    let out = run(&["report", "--dir", ws.root.join("out").to_str().unwrap()]);
    assert_ok(&out, "report");
}

#[test]
fn cardinality_sweep_plots_and_prompt_sweep_reports_partial_failure() {
    let ws = Workspace::new();
    let config = ws.write_config(
        "card.toml",
        &format!(
            "seed = 2\nprompts = \"{}\"\n[mining]\npin_steps = 1\npin_step_size = 0.2\n[schedule]\niterations = 4\nbatch_size = 2\n",
            prompts_path().display()
        ),
    );
    let out = run(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--sweep",
        "cardinality",
    ]);
    assert_ok(&out, "ablate cardinality");
    let svg = std::fs::read_to_string(ws.out("cardinality/sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("polyline"));
    let tsv = std::fs::read_to_string(ws.out("cardinality/results.tsv")).unwrap();
    assert_eq!(tsv.lines().skip(1).count(), 4, "cardinality arms 1,5,10,20");
    // prompt-construction sweep without an RCP set: rcp arms fail, the rest
    // succeed, and the exit is nonzero with a partial-failure record
    let out = run(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--sweep",
        "prompts",
    ]);
    assert!(!out.status.success());
    assert_eq!(error_kind(&out), "ablate_partial_failure");
    let results: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(ws.out("prompt_construction/results.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(results["failed"].as_array().unwrap().len(), 2);
    assert_eq!(results["arms"].as_array().unwrap().len(), 3);
    // with the RCP set supplied every arm runs
    let config = ws.write_config(
        "prompts_full.toml",
        &format!(
            "seed = 2\nprompts = \"{}\"\nprompts_rcp = \"{}\"\n[mining]\npin_steps = 1\npin_step_size = 0.2\ncardinality = 2\n[schedule]\niterations = 4\nbatch_size = 2\n",
            prompts_path().display(),
            rcp_path().display()
        ),
    );
    let out = run(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--sweep",
        "prompts",
    ]);
    assert_ok(&out, "ablate prompts with rcp");
    let results: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(ws.out("prompt_construction/results.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(results["arms"].as_array().unwrap().len(), 5);
}
