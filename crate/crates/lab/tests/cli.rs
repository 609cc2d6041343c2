use std::path::Path;
use std::process::Command;

use querysynth::records::{self, LabelBatch, QueryRecord};
use querysynth::rundir::RunDir;
use querysynth::{params, results, runner};
use querysynth_core::harness::Experiment;
use querysynth_core::reward_model::LabeledTransition;

const TINY: &str = r#"
budget = 8
[synthesis]
iterations = 30
restarts = 2
[retrain]
warm_min_steps = 20
warm_max_steps = 40
[retrain.train]
min_steps = 100
max_steps = 300
[eval]
episodes = 1
train_episodes = 1
expert_episodes = 5
random_episodes = 10
grid_resolution = 11
demo_reference_episodes = 3
[eval.planner]
horizon = 60
iterations = 20
replan_interval = 5
[planner]
horizon = 60
iterations = 20
replan_interval = 5
[nav]
episode_cap = 80
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_querysynth"))
}

fn ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{:?} failed:\n{}", cmd, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn run_writes_a_complete_replayable_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let stdout = ok(bin().arg("run").arg("-c").arg(&cfg).args(["--seed", "3"]).arg("-o").arg(&out));
    let last: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(last["labels"], 8);

    let dir = RunDir::open(&out).unwrap();
    let config = dir.read_config().unwrap();
    assert_eq!(config.seed, 3);
    let dataset: Vec<LabeledTransition> = records::read(&dir.dataset()).unwrap();
    let batches: Vec<LabelBatch> = records::read(&dir.labels()).unwrap();
    let queries: Vec<QueryRecord> = records::read(&dir.queries()).unwrap();
    assert_eq!(batches.len(), 2);
    assert_eq!(queries.len(), 8, "one trajectory per AF per round");
    assert!(queries.iter().all(|q| !q.trace.is_empty() && q.lambda == 0.0));
    assert_eq!(dataset.iter().filter(|t| t.source != "demo").count(), 8);

    let curve = results::read_curve(std::fs::File::open(dir.curve()).unwrap()).unwrap();
    assert_eq!(curve.first().unwrap().labels, 0);
    assert_eq!(curve.last().unwrap().labels, 8);
    assert!(curve.last().unwrap().success_rate.is_some());
    let report = runner::read_report(&dir).unwrap();
    assert_eq!(report.curve, curve);

    // the recorded label batches rebuild the exact dataset and ensemble
    let pairs: Vec<Vec<(u64, usize)>> = batches.iter().map(LabelBatch::pairs).collect();
    let replayed = Experiment::replay(config, dir.read_generative().unwrap(), &pairs).unwrap();
    assert_eq!(replayed.dataset(), dataset.as_slice());
    assert_eq!(params::write_ensemble(replayed.ensemble()), std::fs::read_to_string(dir.ensemble()).unwrap());
}

#[test]
fn eval_scores_a_saved_ensemble_like_the_run_did() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    ok(bin().arg("run").arg("-c").arg(&cfg).arg("-o").arg(&out));
    let eps = tmp.path().join("eps.jsonl");
    let stdout = ok(bin().arg("eval").arg("--run").arg(&out).arg("--episodes").arg("--episodes-out").arg(&eps));
    let rec: querysynth_core::harness::MetricRecord = serde_json::from_str(&stdout).unwrap();
    let report = runner::read_report(&RunDir::open(&out).unwrap()).unwrap();
    assert_eq!(&rec, report.final_record().unwrap());
    let lines: Vec<querysynth::records::EpisodeRecord> = records::read(&eps).unwrap();
    assert_eq!(lines.len(), 2, "one test and one train episode");
}

#[test]
fn sweep_and_export_produce_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let gen = tmp.path().join("gen.params");
    ok(bin().arg("train-gen").arg("-c").arg(&cfg).arg("-o").arg(&gen));
    let out = tmp.path().join("sweep");
    ok(bin().arg("sweep").arg("-c").arg(&cfg).args(["--axis", "lambda=0,inf", "--seeds", "0,1", "--threads", "2", "--set", "budget=4"]).arg("--generative").arg(&gen).arg("-o").arg(&out));
    for cell in ["0-seed0", "0-seed1", "inf-seed0", "inf-seed1"] {
        assert!(out.join(cell).join("report.json").is_file(), "{cell}");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("key,metric,labels,mean,se,n\n"));
    assert!(summary.lines().any(|l| l.starts_with("inf,success_rate,4,") && l.ends_with(",2")));

    let table = ok(bin().arg("export").arg(out.join("0-seed0")).arg(out.join("0-seed1")).arg("--summary").arg(tmp.path().join("s.csv")));
    assert!(table.starts_with("key,seed,domain,method,labels,round,"));
    assert!(table.lines().skip(1).all(|l| l.starts_with("0,")));
    let exported = std::fs::read_to_string(tmp.path().join("s.csv")).unwrap();
    let swept: Vec<&str> = summary.lines().filter(|l| l.starts_with("0,")).collect();
    assert_eq!(exported.lines().skip(1).collect::<Vec<_>>(), swept);
}

#[test]
fn config_prints_resolved_values_and_rejects_bad_ones() {
    let text = ok(bin().args(["config", "--domain", "gaussclass", "--set", "knn_k=7"]));
    let c = querysynth::config::parse(&text).unwrap();
    assert_eq!(c.knn_k, 7);
    assert_eq!(c.budget, 500);
    let out = bin().args(["config", "--set", "round_size=0"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("round_size"));
}
