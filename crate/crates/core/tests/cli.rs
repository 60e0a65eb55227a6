//! Binary-level tests: exit codes, config resolution, file formats, and
//! cross-invocation consistency of the `alignlab` executable.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use alignlab::data::{PromptRecord, RolloutRecord};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_alignlab")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(path: PathBuf) -> String {
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// gen-task + rollout + annotate in `dir`, returning the task path.
fn seed_pipeline(dir: &Path) -> String {
    let out = run_in(
        dir,
        &["gen-task", "--vocab", "16", "--n", "24", "--out", "task"],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let out = run_in(
        dir,
        &[
            "rollout",
            "--prompts",
            "task/prompts.jsonl",
            "--vocab",
            "16",
            "--out",
            "roll",
        ],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let out = run_in(
        dir,
        &[
            "annotate",
            "--prompts",
            "task/prompts.jsonl",
            "--vocab",
            "16",
            "--rollouts",
            "roll/rollouts.jsonl",
            "--out",
            "ann",
        ],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    "task/prompts.jsonl".into()
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        let out = Command::new(bin()).arg(flag).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{flag}");
    }
}

#[test]
fn missing_required_key_exits_two_and_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["gen-task", "--out", "t"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("`vocab`") && err.contains("--vocab"), "{err}");
}

#[test]
fn unknown_subcommand_and_flag_exit_two() {
    let out = Command::new(bin()).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(bin())
        .args(["gen-task", "--no-such-flag", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_dynamics_mode_exits_two_naming_the_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["dynamics", "--mode", "sideways", "--out", "d"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("sideways"));
}

#[test]
fn unknown_config_key_exits_two_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "vocab = 16\nbogus_key = 1\n").unwrap();
    let out = run_in(
        dir.path(),
        &["gen-task", "--config", "run.cfg", "--out", "t"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("bogus_key"), "{}", stderr_of(&out));
}

#[test]
fn oversized_integration_step_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "dynamics",
            "--mode",
            "offpolicy",
            "--vocab",
            "6",
            "--halluc",
            "1",
            "--target",
            "0",
            "--step",
            "60",
            "--out",
            "d",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr_of(&out).contains("step"), "{}", stderr_of(&out));
}

#[test]
fn unconstructible_probe_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "dynamics",
            "--mode",
            "support-probe",
            "--max-len",
            "3",
            "--seed",
            "9",
            "--out",
            "d",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr_of(&out));
}

#[test]
fn flags_override_config_file_values() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "vocab = 16\nn = 8\n").unwrap();
    let out = run_in(
        dir.path(),
        &["gen-task", "--config", "run.cfg", "--n", "12", "--out", "t"],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let prompts: Vec<PromptRecord> =
        alignlab::data::read_jsonl(&dir.path().join("t/prompts.jsonl")).unwrap();
    assert_eq!(prompts.len(), 12);
    let resolved = read(dir.path().join("t/run.config"));
    assert!(resolved.contains("n = 12\n"), "{resolved}");
    assert!(resolved.contains("vocab = 16\n"));
    // Execution facts stay out of the experiment record.
    assert!(!resolved.contains("workers") && !resolved.contains("out ="));
}

#[test]
fn resolved_config_reproduces_the_run_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "gen-task", "--vocab", "20", "--n", "9", "--seed", "3", "--out", "a",
        ],
    );
    assert!(out.status.success());
    let out = run_in(
        dir.path(),
        &["gen-task", "--config", "a/run.config", "--out", "b"],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert_eq!(
        std::fs::read(dir.path().join("a/prompts.jsonl")).unwrap(),
        std::fs::read(dir.path().join("b/prompts.jsonl")).unwrap()
    );
    assert_eq!(
        read(dir.path().join("a/run.config")),
        read(dir.path().join("b/run.config"))
    );
}

#[test]
fn generated_tasks_reparse_and_respect_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["gen-task", "--vocab", "24", "--n", "40", "--out", "t"],
    );
    assert!(out.status.success());
    let prompts: Vec<PromptRecord> =
        alignlab::data::read_jsonl(&dir.path().join("t/prompts.jsonl")).unwrap();
    assert_eq!(prompts.len(), 40);
    for (ix, p) in prompts.iter().enumerate() {
        assert_eq!(p.id, ix as u64);
        assert!(
            p.halluc_set.windows(2).all(|w| w[0] < w[1]),
            "sorted, unique"
        );
        assert!(p.halluc_set.iter().all(|t| (*t as usize) < 24));
        assert!(p.gt_tokens.iter().all(|t| (*t as usize) < 24));
        assert!(
            !p.contains_hallucination(&p.gt_tokens),
            "ground truth is clean"
        );
        assert_eq!(
            *p.gt_tokens.last().unwrap(),
            23,
            "terminated by the end token"
        );
    }
}

#[test]
fn rollouts_log_their_own_sampling_probability() {
    let dir = tempfile::tempdir().unwrap();
    seed_pipeline(dir.path());
    let rollouts: Vec<RolloutRecord> =
        alignlab::data::read_jsonl(&dir.path().join("roll/rollouts.jsonl")).unwrap();
    assert_eq!(rollouts.len(), 24 * 5);
    for r in &rollouts {
        assert!(r.log_prob.is_finite() && r.log_prob < 0.0);
        assert!(!r.tokens.is_empty());
    }
}

#[test]
fn select_and_report_emit_the_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let task = seed_pipeline(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "select",
            "--rollouts",
            "roll/rollouts.jsonl",
            "--annotations",
            "ann/annotations.jsonl",
            "--out",
            "sel",
        ],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stats = read(dir.path().join("sel/select_stats.csv"));
    assert!(stats.starts_with("admitted,all_clean,all_hallucinated,degenerate\n"));

    let out = run_in(
        dir.path(),
        &[
            "report",
            "--prompts",
            &task,
            "--rollouts",
            "roll/rollouts.jsonl",
            "--annotations",
            "ann/annotations.jsonl",
            "--pairs",
            "sel/pairs.jsonl",
            "--out",
            "rep",
        ],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let report = read(dir.path().join("rep/report.csv"));
    assert!(report.starts_with(
        "prompt_id,rollouts,hallucinated,halluc_rate,p_chosen,p_rejected,chosen_len,rejected_len\n"
    ));
    let summary = read(dir.path().join("rep/summary.csv"));
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "prompts,rollouts,annotations,hallucinated,halluc_rate,pairs"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "24");
    assert_eq!(row[1], "120");
}

#[test]
fn preset_recipe_emits_a_baseline_row_and_two_training_rows() {
    let dir = tempfile::tempdir().unwrap();
    let task = seed_pipeline(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "align",
            "--prompts",
            &task,
            "--vocab",
            "16",
            "--recipe",
            "paper",
            "--out",
            "al",
        ],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let table = read(dir.path().join("al/iterations.csv"));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 4, "{table}");
    assert!(rows[1].starts_with("0,init,"));
    assert!(rows[2].starts_with("1,off_policy_gt,"));
    assert!(rows[3].starts_with("2,on_policy,"));
    // Two per-iteration checkpoints plus the final policy.
    for name in ["policy_iter_001.txt", "policy_iter_002.txt", "policy.txt"] {
        assert!(dir.path().join("al").join(name).exists(), "{name}");
    }
    let final_rate: f64 = rows[3].rsplit(',').next().unwrap().parse().unwrap();
    let initial_rate: f64 = rows[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!(final_rate <= initial_rate);
}

#[test]
fn unit_tie_strength_flag_reproduces_the_plain_loss_column() {
    let dir = tempfile::tempdir().unwrap();
    let task = seed_pipeline(dir.path());
    let base = [
        "align",
        "--prompts",
        "task/prompts.jsonl",
        "--vocab",
        "16",
        "--epochs",
        "3",
    ];
    let out = run_in(dir.path(), &[&base[..], &["--out", "plain"]].concat());
    assert!(out.status.success(), "{}", stderr_of(&out));
    let out = run_in(
        dir.path(),
        &[&base[..], &["--nu", "1", "--out", "weighted"]].concat(),
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let loss_column = |name: &str| -> Vec<String> {
        read(dir.path().join(name).join("epochs.csv"))
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().to_string())
            .collect()
    };
    let plain = loss_column("plain");
    assert_eq!(plain.len(), 3);
    assert_eq!(plain, loss_column("weighted"));
    let _ = task;
}

#[test]
fn sweep_flag_switches_align_to_the_sweep_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let task = seed_pipeline(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "align",
            "--prompts",
            &task,
            "--vocab",
            "16",
            "--epochs",
            "1",
            "--sweep-nus",
            "1,3",
            "--out",
            "sw",
        ],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(dir.path().join("sw/sweep_curve.csv").exists());
    assert!(dir.path().join("sw/sweep_runs.csv").exists());
    assert!(!dir.path().join("sw/epochs.csv").exists());
    let runs = read(dir.path().join("sw/sweep_runs.csv"));
    assert_eq!(runs.lines().count(), 3, "{runs}");
}

#[test]
fn trajectory_seeds_are_independent_of_trajectory_count() {
    let dir = tempfile::tempdir().unwrap();
    let base = [
        "dynamics",
        "--mode",
        "offpolicy",
        "--vocab",
        "8",
        "--halluc",
        "2",
        "--target",
        "0",
    ];
    let out = run_in(
        dir.path(),
        &[&base[..], &["--trajectories", "2", "--out", "two"]].concat(),
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let out = run_in(
        dir.path(),
        &[&base[..], &["--trajectories", "3", "--out", "three"]].concat(),
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let two = read(dir.path().join("two/summary.jsonl"));
    let three = read(dir.path().join("three/summary.jsonl"));
    assert_eq!(two.lines().count(), 2);
    assert_eq!(three.lines().count(), 3);
    let prefix: Vec<&str> = three.lines().take(2).collect();
    assert_eq!(two.lines().collect::<Vec<_>>(), prefix);
    // The first trajectory is also the one exported as CSV.
    assert_eq!(
        read(dir.path().join("two/trajectory.csv")),
        read(dir.path().join("three/trajectory.csv"))
    );
}

#[test]
fn classifier_annotations_can_replace_the_oracle_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let task = seed_pipeline(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "train-classifier",
            "--prompts",
            &task,
            "--vocab",
            "16",
            "--examples",
            "600",
            "--epochs",
            "150",
            "--out",
            "clf",
        ],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let summary = read(dir.path().join("clf/classifier_summary.csv"));
    let accuracy: f64 = summary
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(accuracy > 0.8, "weak classifier: {accuracy}");
    let out = run_in(
        dir.path(),
        &[
            "annotate",
            "--prompts",
            &task,
            "--vocab",
            "16",
            "--rollouts",
            "roll/rollouts.jsonl",
            "--judge",
            "classifier",
            "--classifier",
            "clf/classifier.txt",
            "--out",
            "ann2",
        ],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let out = run_in(
        dir.path(),
        &[
            "select",
            "--rollouts",
            "roll/rollouts.jsonl",
            "--annotations",
            "ann2/annotations.jsonl",
            "--out",
            "sel2",
        ],
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(dir.path().join("sel2/pairs.jsonl").exists());
}

#[test]
fn machine_output_goes_to_files_not_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["gen-task", "--vocab", "16", "--n", "4", "--out", "t"],
    );
    assert!(out.status.success());
    assert!(out.stdout.is_empty(), "stdout must stay clean");
    assert!(!out.stderr.is_empty(), "progress goes to stderr");
}
