use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rlhf_kernel::environments::{cartpole_step, CartPoleParams, CartPoleState, Push};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rlhf-kernel"));
    c.env_remove("RLHF_KERNEL_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_owned).collect();
    let rows = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn sub(dir: &TempDir, command: &str, config: &Path, out: &str, extra: &[&str]) -> Output {
    let out = dir.path().join(out);
    let mut args = vec![
        command,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

const RM: &str =
    r#"{"head_kind": "sequence", "feature_spec": {"vocab_size": 6}, "weights": [0.0, 1.0, -0.5, 0.3, 0.2, -1.0]}"#;

#[test]
fn missing_config_is_a_usage_error() {
    let out = run(&["train-rl"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--config"), "{err}");
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn unknown_flag_and_subcommand_exit_2() {
    assert_eq!(
        run(&["train-rl", "--config", "x.json", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["train-everything"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn validation_failure_names_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"algorithm": "grpo", "beta": -1.0}"#);
    let out = sub(&dir, "train-rl", &cfg, "o", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta"));

    let cfg = write(
        dir.path(),
        "d.json",
        r#"{"algorithm": "dpo", "preference_data": "nope.jsonl"}"#,
    );
    let out = sub(&dir, "train-dpo", &cfg, "o", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("preference_data"));

    let cfg = write(dir.path(), "e.json", r#"{"algorithm": "grpo", "learning_rat": 0.1}"#);
    let out = sub(&dir, "train-rl", &cfg, "o", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    let out = run(&["train-rl", "--config", dir.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_rl_writes_artifacts_and_seed_override_changes_output() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        &format!(r#"{{"algorithm": "ppo", "steps": 5, "seed": 3, "reward_model": {RM}}}"#),
    );
    assert_eq!(sub(&dir, "train-rl", &cfg, "a", &[]).status.code(), Some(0));
    for f in ["config.json", "metrics.csv", "model.json"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
    let (header, rows) = read_csv(&dir.path().join("a/metrics.csv"));
    assert_eq!(header[..4], ["step", "objective", "loss", "mean_reward"]);
    assert_eq!(rows.len(), 5);

    assert_eq!(
        sub(&dir, "train-rl", &cfg, "b", &["--seed", "3"]).status.code(),
        Some(0)
    );
    assert_eq!(
        sub(&dir, "train-rl", &cfg, "c", &["--seed", "4"]).status.code(),
        Some(0)
    );
    let a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/metrics.csv")).unwrap());
    assert_ne!(a, fs::read(dir.path().join("c/metrics.csv")).unwrap());

    // The environment variable sits between the flag and the file.
    let out = dir.path().join("d");
    let status = bin()
        .env("RLHF_KERNEL_SEED", "4")
        .args([
            "train-rl",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        fs::read(out.join("metrics.csv")).unwrap(),
        fs::read(dir.path().join("c/metrics.csv")).unwrap()
    );
    let echo: serde_json::Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 4);
}

#[test]
fn trained_policy_can_seed_the_next_stage() {
    let dir = TempDir::new().unwrap();
    let sft = write(
        dir.path(),
        "sft.jsonl",
        "{\"messages\": [{\"role\": \"user\", \"content\": [1]}, {\"role\": \"assistant\", \"content\": [2, 3, 0]}]}\n\
         {\"messages\": [{\"role\": \"user\", \"content\": [2]}, {\"role\": \"assistant\", \"content\": [3, 0]}]}\n",
    );
    let cfg = write(
        dir.path(),
        "sft.json",
        &format!(
            r#"{{"sft_data": "{}", "epochs": 30, "learning_rate": 0.5}}"#,
            sft.display()
        ),
    );
    assert_eq!(sub(&dir, "train-sft", &cfg, "sft", &[]).status.code(), Some(0));
    let (_, rows) = read_csv(&dir.path().join("sft/metrics.csv"));
    assert!(rows.last().unwrap()[1] < rows[0][1]);

    let policy = dir.path().join("sft/model.json");
    let cfg = write(
        dir.path(),
        "rl.json",
        &format!(
            r#"{{"algorithm": "grpo", "steps": 3, "initial_policy": "{}", "reward_model": {RM}}}"#,
            policy.display()
        ),
    );
    let out = sub(&dir, "train-rl", &cfg, "rl", &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

fn preference_file(dir: &Path) -> PathBuf {
    let mut body = String::new();
    for i in 0..40 {
        let (c, r) = if i % 2 == 0 {
            ("[1, 1, 0]", "[5, 0]")
        } else {
            ("[3, 0]", "[2, 5, 0]")
        };
        body.push_str(&format!(
            "{{\"prompt\": [{}], \"chosen\": {c}, \"rejected\": {r}}}\n",
            1 + i % 2
        ));
    }
    write(dir, "prefs.jsonl", &body)
}

#[test]
fn train_rm_and_dpo_variants() {
    let dir = TempDir::new().unwrap();
    let prefs = preference_file(dir.path());
    let cfg = write(
        dir.path(),
        "rm.json",
        &format!(
            r#"{{"preference_data": "{}", "epochs": 5, "batch_size": 8}}"#,
            prefs.display()
        ),
    );
    assert_eq!(sub(&dir, "train-rm", &cfg, "rm", &[]).status.code(), Some(0));
    let model: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("rm/model.json")).unwrap()).unwrap();
    assert_eq!(model["weights"].as_array().unwrap().len(), 6);
    let (header, rows) = read_csv(&dir.path().join("rm/metrics.csv"));
    assert_eq!(header, ["step", "loss"]);
    assert_eq!(rows.len(), 25);

    for alg in ["dpo", "ipo", "cdpo", "dpo_nll"] {
        let cfg = write(
            dir.path(),
            &format!("{alg}.json"),
            &format!(
                r#"{{"algorithm": "{alg}", "preference_data": "{}", "steps": 20}}"#,
                prefs.display()
            ),
        );
        let out = sub(&dir, "train-dpo", &cfg, alg, &[]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{alg}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let (header, rows) = read_csv(&dir.path().join(alg).join("metrics.csv"));
        assert_eq!(
            header,
            [
                "step",
                "dpo_loss",
                "margin",
                "logp_chosen",
                "logp_rejected",
                "implicit_reward_accuracy"
            ]
        );
        assert_eq!(rows.len(), 20);
    }
    let cfg = write(
        dir.path(),
        "bad.json",
        &format!(r#"{{"algorithm": "ppo", "preference_data": "{}"}}"#, prefs.display()),
    );
    assert_eq!(sub(&dir, "train-dpo", &cfg, "bad", &[]).status.code(), Some(1));
}

#[test]
fn reject_sample_writes_selection() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        &format!(r#"{{"prompts": [[1], [2], [3]], "n_samples": 4, "epochs": 3, "reward_model": {RM}}}"#),
    );
    assert_eq!(sub(&dir, "reject-sample", &cfg, "a", &[]).status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("a/selected.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r["source_row"], i);
        assert_eq!(r["messages"][0]["role"], "user");
        assert_eq!(r["messages"][1]["role"], "assistant");
    }

    let cfg = write(
        dir.path(),
        "k.json",
        &format!(r#"{{"prompts": [[1], [2], [3]], "n_samples": 4, "top_k": 5, "reward_model": {RM}}}"#),
    );
    assert_eq!(sub(&dir, "reject-sample", &cfg, "k", &[]).status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("k/selected.jsonl")).unwrap();
    let rewards: Vec<f64> = text
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["reward"]
                .as_f64()
                .unwrap()
        })
        .collect();
    assert_eq!(rewards.len(), 5);
    assert!(rewards.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn simulate_env_matches_cartpole_oracle() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"environment": {"kind": "cartpole", "initial_state": {"x": 0.0, "x_dot": 0.1, "theta": 0.03, "theta_dot": -0.2},
            "actions": ["left", "right", "right", "left", "right", "right", "right", "left"], "steps": 8}}"#,
    );
    assert_eq!(sub(&dir, "simulate-env", &cfg, "a", &[]).status.code(), Some(0));
    let (header, rows) = read_csv(&dir.path().join("a/metrics.csv"));
    assert_eq!(
        header,
        ["step", "x", "x_dot", "theta", "theta_dot", "force", "reward", "done"]
    );
    assert_eq!(rows.len(), 8);

    let p = CartPoleParams::<f64>::default();
    let mut s = CartPoleState {
        x: 0.0,
        x_dot: 0.1,
        theta: 0.03,
        theta_dot: -0.2,
    };
    let actions = [0, 1, 1, 0, 1, 1, 1, 0];
    for (row, &a) in rows.iter().zip(&actions) {
        let push = if a == 1 { Push::Right } else { Push::Left };
        let (next, reward, done) = cartpole_step(s, push, &p).unwrap();
        // CSV values carry 12 significant digits.
        for (got, want) in row[1..5].iter().zip([next.x, next.x_dot, next.theta, next.theta_dot]) {
            assert!((got - want).abs() <= 1e-11 * want.abs().max(1e-3), "{got} vs {want}");
        }
        assert_eq!(row[6], reward);
        assert_eq!(row[7], if done { 1.0 } else { 0.0 });
        s = next;
    }

    let cfg = write(
        dir.path(),
        "t.json",
        r#"{"environment": {"kind": "thermostat", "initial_temperature": 15.0, "steps": 12}}"#,
    );
    assert_eq!(sub(&dir, "simulate-env", &cfg, "t", &[]).status.code(), Some(0));
    let (header, rows) = read_csv(&dir.path().join("t/metrics.csv"));
    assert_eq!(header, ["step", "temperature", "heater", "reward"]);
    assert_eq!(rows.len(), 12);

    let cfg = write(dir.path(), "none.json", "{}");
    assert_eq!(sub(&dir, "simulate-env", &cfg, "n", &[]).status.code(), Some(1));
}

#[test]
fn overopt_writes_both_curves() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"steps": 5, "learning_rate": 2.0, "beta": 0.0}"#,
    );
    let out = sub(&dir, "overopt", &cfg, "a", &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    assert!(text.starts_with("step,train_rm,test_rm,kl\n"));
    let (header, rows) = read_csv(&dir.path().join("a/kl_curve.csv"));
    assert_eq!(header, ["kl", "train_rm", "test_rm"]);
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0][0], 0.0);

    let cfg = write(
        dir.path(),
        "small.json",
        r#"{"overopt": {"pairs": 10, "min_split": 100}}"#,
    );
    let out = sub(&dir, "overopt", &cfg, "b", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("preference_data"));
}
