use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use sake_core::config::{EncoderConfig, KgIndexFile, Resources};
use sake_core::eval::{evaluate, EvalReport, QaDataset};
use sake_core::grpo::{evaluate_batch, recorded_logprobs, GrpoConfig, LogprobRecord};
use sake_core::kg::{KnowledgeGraph, TripletFormat};
use sake_core::policy::ScriptedPolicy;
use sake_core::reward::{curriculum_reward, RewardBreakdown, RewardSchedule};
use sake_core::rollout::{run_rollout, RolloutConfig, Trajectory};
use serde_json::Value;

const QUESTION: &str = "Can melatonin help treat insomnia?";

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn sake(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sake"))
        .args(args)
        .env_remove("SAKE_KG_INDEX")
        .env_remove("SAKE_BIND")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn toy_resources() -> Resources {
    let kg = KnowledgeGraph::ingest_path(&fixture("toy_kg.tsv"), TripletFormat::Tsv).unwrap();
    let enc = EncoderConfig::Table {
        path: fixture("toy_embeddings.json"),
    };
    Resources::build(kg, enc.build().unwrap()).unwrap()
}

fn melatonin_policy() -> ScriptedPolicy {
    ScriptedPolicy::from_json_path(&fixture("melatonin_script.json")).unwrap()
}

/// Flags shared by every command that needs the toy graph and policy.
fn toy_flags() -> Vec<String> {
    vec![
        "--kg".into(),
        p(&fixture("toy_kg.tsv")).into(),
        "--embeddings".into(),
        p(&fixture("toy_embeddings.json")).into(),
        "--script".into(),
        p(&fixture("melatonin_script.json")).into(),
    ]
}

fn with_toy<'a>(head: &[&'a str], toy: &'a [String]) -> Vec<&'a str> {
    head.iter().copied().chain(toy.iter().map(String::as_str)).collect()
}

#[test]
fn ingest_writes_a_loadable_index() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("toy.json");
    let out = sake(&["ingest", "--format", "tsv", "--input", p(&fixture("toy_kg.tsv")), "--output", p(&index)]);
    let line: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(line["node_count"], 12);
    assert_eq!(line["edge_count"], 14);
    assert_eq!(line["embedded"], false);

    let loaded = KgIndexFile::load(&index).unwrap();
    let direct = KnowledgeGraph::ingest_path(&fixture("toy_kg.tsv"), TripletFormat::Tsv).unwrap();
    assert_eq!(KnowledgeGraph::from(loaded.graph), direct);
}

#[test]
fn ingest_with_embeddings_uses_the_config_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("toy.json");
    let config = dir.path().join("sake.toml");
    std::fs::write(&config, "[encoder]\nkind = \"hash\"\ndim = 16\nseed = 7\n").unwrap();
    let out = sake(&[
        "--config",
        p(&config),
        "ingest",
        "--input",
        p(&fixture("toy_kg.tsv")),
        "--output",
        p(&index),
        "--embed",
    ]);
    stdout(&out);
    let file = KgIndexFile::load(&index).unwrap();
    let emb = file.embeddings.expect("vectors stored");
    assert_eq!(emb.dim(), 16);
    assert_eq!(emb.len(), 12);
}

#[test]
fn malformed_triplets_exit_1_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "a\tr\tb\nonly\ttwo\n").unwrap();
    let out = sake(&["ingest", "--input", p(&bad), "--output", p(&dir.path().join("o.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn rollout_matches_library_output() {
    let toy = toy_flags();
    let out = sake(&with_toy(&["rollout", "--question", QUESTION, "--id", "melatonin"], &toy));
    let mut direct = run_rollout(&melatonin_policy(), QUESTION, toy_resources().view(), &RolloutConfig::default()).unwrap();
    direct.id = Some("melatonin".into());
    assert_eq!(stdout(&out), format!("{}\n", direct.to_json_line()));
}

#[test]
fn batch_rollout_keeps_dataset_order_across_workers() {
    let toy = toy_flags();
    let ds = fixture("toy_qa.jsonl");
    let out = sake(&with_toy(&["rollout", "--batch", p(&ds), "--workers", "3"], &toy));
    let dataset = QaDataset::from_path(&ds).unwrap();
    let res = toy_resources();
    let expected: String = dataset
        .items
        .iter()
        .map(|item| {
            let mut t = run_rollout(&melatonin_policy(), &item.question, res.view(), &RolloutConfig::default()).unwrap();
            t.id = Some(item.id.clone());
            t.to_json_line() + "\n"
        })
        .collect();
    assert_eq!(stdout(&out), expected);
}

#[test]
fn rollout_flags_override_the_config() {
    let toy = toy_flags();
    let out = sake(&with_toy(
        &["rollout", "--question", QUESTION, "--variant", "no_filtering", "--p", "2"],
        &toy,
    ));
    let t: Trajectory = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(t.config.p, 2);
    assert_eq!(t.policy_calls(), 2);
    assert!(t.groups.iter().all(|g| g.members.len() <= 3));
}

#[test]
fn unreachable_backend_exits_2() {
    let out = sake(&[
        "rollout",
        "--question",
        QUESTION,
        "--kg",
        p(&fixture("toy_kg.tsv")),
        "--policy-endpoint",
        "http://127.0.0.1:9/v1",
        "--model",
        "m",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

fn write_trajectories(dir: &Path) -> (PathBuf, Vec<Trajectory>) {
    let res = toy_resources();
    let ds = QaDataset::from_path(&fixture("toy_qa.jsonl")).unwrap();
    let ts: Vec<Trajectory> = ds
        .items
        .iter()
        .map(|item| {
            let mut t = run_rollout(&melatonin_policy(), &item.question, res.view(), &RolloutConfig::default()).unwrap();
            t.id = Some(item.id.clone());
            t
        })
        .collect();
    let path = dir.join("trajectories.jsonl");
    let text: String = ts.iter().map(|t| t.to_json_line() + "\n").collect();
    std::fs::write(&path, text).unwrap();
    (path, ts)
}

#[test]
fn reward_replay_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ts) = write_trajectories(dir.path());
    let ds = QaDataset::from_path(&fixture("toy_qa.jsonl")).unwrap();
    let sched = RewardSchedule::new(10, 20).unwrap();
    for step in [0u64, 15, 25] {
        let step_s = step.to_string();
        let out = sake(&[
            "reward-replay",
            "--trajectories",
            p(&path),
            "--dataset",
            p(&fixture("toy_qa.jsonl")),
            "--step",
            &step_s,
            "--s1",
            "10",
            "--s2",
            "20",
        ]);
        let lines: Vec<Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), ts.len());
        for ((line, t), item) in lines.iter().zip(&ts).zip(&ds.items) {
            let want = curriculum_reward(&t.text(), &item.gold, step, &sched);
            let got: RewardBreakdown = serde_json::from_value(line.clone()).unwrap();
            assert_eq!(got, want);
            assert_eq!(line["id"], item.id.as_str());
            assert_eq!(line["step"], step);
        }
    }
}

#[test]
fn eval_matches_library_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ts) = write_trajectories(dir.path());
    let report_path = dir.path().join("report.json");
    let out = sake(&[
        "eval",
        "--trajectories",
        p(&path),
        "--dataset",
        p(&fixture("toy_qa.jsonl")),
        "--report",
        p(&report_path),
    ]);
    let got: EvalReport = serde_json::from_str(stdout(&out).trim()).unwrap();
    let ds = QaDataset::from_path(&fixture("toy_qa.jsonl")).unwrap();
    let want = evaluate(&ts, &ds).unwrap();
    assert_eq!(got, want);
    let written: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(written, want);
}

#[test]
fn eval_pools_several_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ts) = write_trajectories(dir.path());
    let all = QaDataset::from_path(&fixture("toy_qa.jsonl")).unwrap();
    let (a, b) = all.items.split_at(2);
    let a_path = dir.path().join("first.jsonl");
    let b_path = dir.path().join("second.jsonl");
    for (items, file) in [(a, &a_path), (b, &b_path)] {
        let text: String = items.iter().map(|i| serde_json::to_string(i).unwrap() + "\n").collect();
        std::fs::write(file, text).unwrap();
    }
    let out = sake(&["eval", "--trajectories", p(&path), "--dataset", p(&a_path), "--dataset", p(&b_path)]);
    let got: EvalReport = serde_json::from_str(stdout(&out).trim()).unwrap();
    let da = QaDataset::from_path(&a_path).unwrap();
    let db = QaDataset::from_path(&b_path).unwrap();
    let want = EvalReport::merge([evaluate(&ts[..2], &da).unwrap(), evaluate(&ts[2..], &db).unwrap()]);
    assert_eq!(got, want);
    assert_eq!(got.per_dataset.len(), 2);
}

#[test]
fn grpo_consumes_batch_files() {
    let dir = tempfile::tempdir().unwrap();
    let res = toy_resources();
    // Two questions, three rollouts each, differing in the token budget.
    let mut ts = Vec::new();
    for q in [QUESTION, "Is cortisol a hormone?"] {
        for (k, budget) in [1024usize, 12, 30].into_iter().enumerate() {
            let cfg = RolloutConfig {
                max_tokens_per_turn: budget,
                ..RolloutConfig::default()
            };
            let mut t = run_rollout(&melatonin_policy(), q, res.view(), &cfg).unwrap();
            t.id = Some(format!("{q}#{k}"));
            ts.push(t);
        }
    }
    let records: Vec<LogprobRecord> = ts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let old = recorded_logprobs(t);
            LogprobRecord {
                id: t.id.clone(),
                reward: [1.0, 0.0, 0.5][i % 3],
                logprobs_current: old.iter().map(|x| x + 0.01 * (i as f64 - 2.0)).collect(),
                logprobs_old: None,
                logprobs_ref: old.iter().map(|x| x - 0.02).collect(),
            }
        })
        .collect();
    let tpath = dir.path().join("t.jsonl");
    let lpath = dir.path().join("lp.jsonl");
    std::fs::write(&tpath, ts.iter().map(|t| t.to_json_line() + "\n").collect::<String>()).unwrap();
    std::fs::write(
        &lpath,
        records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect::<String>(),
    )
    .unwrap();

    let out = sake(&["grpo", "--trajectories", p(&tpath), "--logprobs", p(&lpath), "--kl-beta", "0.01"]);
    let cfg = GrpoConfig {
        kl_beta: 0.01,
        ..GrpoConfig::default()
    };
    let want = evaluate_batch(ts, records.clone(), &cfg).unwrap();
    let expected: String = want.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    assert_eq!(stdout(&out), expected);
    assert_eq!(want.len(), 2);

    // Drop a record: the batch no longer lines up.
    std::fs::write(
        &lpath,
        records[1..].iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect::<String>(),
    )
    .unwrap();
    let out = sake(&["grpo", "--trajectories", p(&tpath), "--logprobs", p(&lpath)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn demo_prints_annotated_melatonin_and_reward() {
    let toy = toy_flags();
    let out = sake(&with_toy(
        &["demo", "--question", QUESTION, "--gold", "yes", "--step", "500"],
        &toy,
    ));
    let text = stdout(&out);
    for label in ["== Turn 1", "== Tool 1", "== Turn 2", "== Tool 2", "== Turn 3"] {
        assert!(text.contains(label), "missing {label}\n{text}");
    }
    assert!(text.contains("<answer> yes </answer>"));
    let reward: RewardBreakdown = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(reward.phase, 3);
    assert_eq!(reward.total, 1);
}

#[test]
fn demo_step_selects_curriculum_phase() {
    let toy = toy_flags();
    let phase = |step: &str| -> RewardBreakdown {
        let out = sake(&with_toy(&["demo", "--question", QUESTION, "--gold", "no", "--step", step], &toy));
        serde_json::from_str(stdout(&out).lines().last().unwrap()).unwrap()
    };
    let early = phase("0");
    let late = phase("500");
    assert_eq!(early.phase, 1);
    assert_eq!(late.phase, 3);
    // Well formatted but wrong: rewarded early, not late.
    assert_eq!((early.total, late.total), (1, 0));
}

#[test]
fn missing_kg_exits_1_and_names_the_path() {
    let out = sake(&[
        "demo",
        "--question",
        QUESTION,
        "--gold",
        "yes",
        "--kg",
        "/nonexistent/umls.tsv",
        "--script",
        p(&fixture("melatonin_script.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/umls.tsv"));
    assert!(out.stdout.is_empty());
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(sake(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sake(&["rollout"]).status.code(), Some(1));
    let out = sake(&[
        "reward-replay",
        "--trajectories",
        "x",
        "--gold",
        "yes",
        "--step",
        "1",
        "--s1",
        "5",
        "--s2",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(sake(&["--help"]).status.code(), Some(0));
}

/// Kills the child on drop so a failed assertion never leaks a server.
struct Running(Child);

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn serve_reads_config_and_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("toy_index.json");
    stdout(&sake(&["ingest", "--input", p(&fixture("toy_kg.tsv")), "--output", p(&index)]));
    let config = dir.path().join("sake.toml");
    std::fs::write(
        &config,
        format!(
            "kg_index = \"does_not_exist.json\"\n[encoder]\nkind = \"table\"\npath = \"{}\"\n[policy]\nkind = \"scripted\"\npath = \"{}\"\n",
            p(&fixture("toy_embeddings.json")),
            p(&fixture("melatonin_script.json")),
        ),
    )
    .unwrap();
    let bind = format!("127.0.0.1:{}", free_port());
    let child = Command::new(env!("CARGO_BIN_EXE_sake"))
        .args(["--config", p(&config), "serve"])
        .env("SAKE_KG_INDEX", &index)
        .env("SAKE_BIND", &bind)
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut child = Running(child);

    let base = format!("http://{bind}");
    let deadline = Instant::now() + Duration::from_secs(20);
    let health = loop {
        match ureq::get(&format!("{base}/healthz")).call() {
            Ok(r) => break r.into_string().unwrap(),
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => {
                let _ = child.0.kill();
                let mut err = String::new();
                child.0.stderr.take().unwrap().read_to_string(&mut err).unwrap();
                panic!("server never came up: {e}\n{err}");
            }
        }
    };
    let health: Value = serde_json::from_str(&health).unwrap();
    assert_eq!(health["stats"]["node_count"], 12);
    assert_eq!(health["policy_configured"], true);

    let body = ureq::post(&format!("{base}/rollout"))
        .send_json(serde_json::json!({"question": QUESTION}))
        .unwrap()
        .into_string()
        .unwrap();
    let direct = run_rollout(&melatonin_policy(), QUESTION, toy_resources().view(), &RolloutConfig::default()).unwrap();
    assert_eq!(body, direct.to_json_line());
}
