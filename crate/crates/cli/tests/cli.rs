//! End-to-end runs of the `silm` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use silm_cli::format::{read_predictions, write_predictions, AgentRecord, ModeRecord, PredictionRecord};
use silm_core::scene::{read_scenes, write_scenes, Scene};
use silm_core::train::synth::SyntheticSpec;
use silm_core::train::TrainConfig;
use tempfile::TempDir;

fn silm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_silm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = silm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32) -> String {
    let out = silm(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self { dir: TempDir::new().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn json<T: serde::Serialize>(&self, name: &str, value: &T) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, serde_json::to_string(value).unwrap()).unwrap();
        p
    }

    fn small_spec(&self) -> PathBuf {
        let spec = SyntheticSpec {
            n_scenes: 6,
            agents_per_scene: [1, 3],
            t_f: 3,
            ..SyntheticSpec::default()
        };
        self.json("spec.json", &spec)
    }

    fn micro_config(&self, epochs: usize) -> PathBuf {
        let cfg = TrainConfig {
            epochs,
            batch_size: 4,
            val_fraction: 0.2,
            ..TrainConfig::micro()
        };
        self.json("train.json", &cfg)
    }

    /// Generated corpus, trained checkpoint.
    fn trained(&self) -> (PathBuf, PathBuf) {
        let data = self.path("scenes.jsonl");
        let ck = self.path("model.json");
        ok(&["gen", "--config", s(&self.small_spec()), "--seed", "3", "--out", s(&data)]);
        ok(&["train", "--config", s(&self.micro_config(2)), "--data", s(&data), "--out", s(&ck)]);
        (data, ck)
    }
}

fn scenes(p: &Path) -> Vec<Scene> {
    read_scenes(std::io::BufReader::new(fs::File::open(p).unwrap())).unwrap()
}

fn records(p: &Path) -> Vec<PredictionRecord> {
    read_predictions(std::io::BufReader::new(fs::File::open(p).unwrap())).unwrap()
}

#[test]
fn gen_is_deterministic_and_sized() {
    let ws = Workspace::new();
    let spec = ws.small_spec();
    let (a, b, c) = (ws.path("a.jsonl"), ws.path("b.jsonl"), ws.path("c.jsonl"));
    ok(&["gen", "--config", s(&spec), "--seed", "9", "--out", s(&a)]);
    ok(&["gen", "--config", s(&spec), "--seed", "9", "--out", s(&b)]);
    ok(&["gen", "--config", s(&spec), "--seed", "10", "--out", s(&c)]);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_ne!(text, fs::read_to_string(&c).unwrap());
    assert!(scenes(&a).iter().all(Scene::is_labeled));
}

#[test]
fn gen_rejects_malformed_spec() {
    let ws = Workspace::new();
    let bad = ws.path("bad.json");
    fs::write(&bad, r#"{"n_scenes": 4, "bogus": 1}"#).unwrap();
    let err = fails(&["gen", "--config", s(&bad), "--out", s(&ws.path("x.jsonl"))], 2);
    assert!(err.contains("bogus"), "{err}");
    fs::write(&bad, r#"{"n_scenes": "many"}"#).unwrap();
    let err = fails(&["gen", "--config", s(&bad), "--out", s(&ws.path("x.jsonl"))], 2);
    assert!(err.contains("n_scenes"), "{err}");
}

#[test]
fn missing_input_is_io_error() {
    let ws = Workspace::new();
    fails(
        &["train", "--data", s(&ws.path("none.jsonl")), "--out", s(&ws.path("m.json"))],
        1,
    );
}

#[test]
fn train_echoes_defaults_and_seed_override() {
    let ws = Workspace::new();
    let data = ws.path("scenes.jsonl");
    ok(&["gen", "--config", s(&ws.small_spec()), "--out", s(&data)]);
    let partial = ws.path("partial.json");
    fs::write(
        &partial,
        r#"{"epochs": 1, "d_h": 8, "heads": 2, "M": 2, "T_f": 3, "batch_size": 8}"#,
    )
    .unwrap();
    let ck = ws.path("m.json");
    let out = ok(&[
        "train", "--config", s(&partial), "--seed", "42", "--data", s(&data), "--out", s(&ck),
    ]);
    let line = out.lines().find_map(|l| l.strip_prefix("config: ")).unwrap();
    let echoed: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(echoed["learning_rate"], 5e-4);
    assert_eq!(echoed["weight_decay"], 1e-4);
    assert_eq!(echoed["alpha"], 0.5);
    assert_eq!(echoed["seed"], 42);
    assert_eq!(echoed["d_h"], 8);
    assert!(ck.exists());
    assert!(ws.path("m.log.csv").exists());
    let log = fs::read_to_string(ws.path("m.log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), silm_core::train::LOG_HEADER);
}

#[test]
fn train_rejects_unlabeled_data() {
    let ws = Workspace::new();
    let data = ws.path("scenes.jsonl");
    ok(&["gen", "--config", s(&ws.small_spec()), "--out", s(&data)]);
    let mut sc = scenes(&data);
    sc[2].tracks[0].future = None;
    write_scenes(fs::File::create(&data).unwrap(), &sc).unwrap();
    let err = fails(
        &["train", "--config", s(&ws.micro_config(1)), "--data", s(&data), "--out", s(&ws.path("m.json"))],
        2,
    );
    assert!(err.contains("future missing"), "{err}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ws = Workspace::new();
    let data = ws.path("scenes.jsonl");
    ok(&["gen", "--config", s(&ws.small_spec()), "--seed", "4", "--out", s(&data)]);
    let full = ws.path("full.json");
    ok(&["train", "--config", s(&ws.micro_config(4)), "--data", s(&data), "--out", s(&full)]);
    let half = ws.path("half.json");
    ok(&["train", "--config", s(&ws.micro_config(2)), "--data", s(&data), "--out", s(&half)]);
    let resumed = ws.path("resumed.json");
    ok(&[
        "train", "--config", s(&ws.micro_config(4)), "--data", s(&data), "--out", s(&resumed), "--resume", s(&half),
    ]);
    let load = |p: &Path| {
        let ck = silm_core::model::checkpoint::Checkpoint::load(p).unwrap();
        ck.params
    };
    let (a, b) = (load(&full), load(&resumed));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    let worst = a
        .iter()
        .flat_map(|(k, v)| v.data.iter().zip(&b[k].data))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-9, "resumed parameters differ by {worst}");
}

#[test]
fn predict_shapes_and_determinism() {
    let ws = Workspace::new();
    let (data, ck) = ws.trained();
    let (p1, p2) = (ws.path("p1.jsonl"), ws.path("p2.jsonl"));
    ok(&["predict", "--checkpoint", s(&ck), "--scenes", s(&data), "--out", s(&p1)]);
    ok(&["predict", "--threads", "1", "--checkpoint", s(&ck), "--scenes", s(&data), "--out", s(&p2)]);
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    let sc = scenes(&data);
    let recs = records(&p1);
    assert_eq!(recs.len(), sc.len());
    for (r, scene) in recs.iter().zip(&sc) {
        assert_eq!(r.scene_id, scene.scene_id);
        assert_eq!(r.agents.len(), scene.tracks.len());
        for a in &r.agents {
            assert_eq!(a.modes.len(), 2);
            let total: f64 = a.modes.iter().map(|m| m.prob).sum();
            assert!((total - 1.0).abs() <= 1e-6);
            for m in &a.modes {
                assert_eq!(m.points.len(), 3);
                assert!(m.points.iter().all(|p| p[2] > 0.0 && p[3] > 0.0));
            }
        }
    }

    let pf = ws.path("pf.jsonl");
    ok(&["predict", "--precision", "f32", "--checkpoint", s(&ck), "--scenes", s(&data), "--out", s(&pf)]);
    let worst = recs
        .iter()
        .zip(records(&pf))
        .flat_map(|(a, b)| {
            let pa: Vec<f64> = a.agents.iter().flat_map(|x| &x.modes).flat_map(|m| m.points.iter().flatten().copied()).collect();
            let pb: Vec<f64> = b.agents.iter().flat_map(|x| &x.modes).flat_map(|m| m.points.iter().flatten().copied()).collect();
            pa.into_iter().zip(pb).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    assert!(worst < 1e-2, "f32 drift {worst}");
}

#[test]
fn predict_rejects_history_mismatch() {
    let ws = Workspace::new();
    let (_, ck) = ws.trained();
    let spec = SyntheticSpec {
        n_scenes: 2,
        t_h: 6,
        t_f: 3,
        ..SyntheticSpec::default()
    };
    let long = ws.path("long.jsonl");
    ok(&["gen", "--config", s(&ws.json("long.json", &spec)), "--out", s(&long)]);
    let err = fails(
        &["predict", "--checkpoint", s(&ck), "--scenes", s(&long), "--out", s(&ws.path("p.jsonl"))],
        2,
    );
    assert!(err.contains("T_h"), "{err}");
}

/// Predictions equal to the ground truth, one mode per agent.
fn oracle(sc: &[Scene]) -> Vec<PredictionRecord> {
    sc.iter()
        .map(|scene| PredictionRecord {
            scene_id: scene.scene_id.clone(),
            agents: scene
                .tracks
                .iter()
                .map(|t| AgentRecord {
                    agent_id: t.agent_id.clone(),
                    modes: vec![ModeRecord {
                        prob: 1.0,
                        points: t.future.as_ref().unwrap().iter().map(|p| [p[0], p[1], 1.0, 1.0]).collect(),
                    }],
                })
                .collect(),
        })
        .collect()
}

#[test]
fn eval_perfect_oracle_scores_zero() {
    let ws = Workspace::new();
    let data = ws.path("scenes.jsonl");
    ok(&["gen", "--config", s(&ws.small_spec()), "--out", s(&data)]);
    let preds = ws.path("oracle.jsonl");
    write_predictions(fs::File::create(&preds).unwrap(), &oracle(&scenes(&data))).unwrap();
    let (json, csv) = (ws.path("r.json"), ws.path("r.csv"));
    let table = ok(&[
        "eval", "--predictions", s(&preds), "--scenes", s(&data), "--json", s(&json), "--csv", s(&csv),
    ]);
    assert!(table.contains("agents"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    for key in ["minADE_k", "minFDE_k", "WSADE", "WSFDE", "MR"] {
        assert_eq!(report[key], 0.0, "{key}");
    }
    let n_agents: usize = scenes(&data).iter().map(|s| s.tracks.len()).sum();
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), n_agents + 1);
}

#[test]
fn eval_reports_missing_agent() {
    let ws = Workspace::new();
    let data = ws.path("scenes.jsonl");
    ok(&["gen", "--config", s(&ws.small_spec()), "--out", s(&data)]);
    let sc = scenes(&data);
    let mut recs = oracle(&sc);
    let scene = sc.iter().position(|s| s.tracks.len() > 1).unwrap();
    let dropped = recs[scene].agents.pop().unwrap().agent_id;
    let preds = ws.path("p.jsonl");
    write_predictions(fs::File::create(&preds).unwrap(), &recs).unwrap();
    let err = fails(&["eval", "--predictions", s(&preds), "--scenes", s(&data)], 2);
    assert!(err.contains(&format!("{}/{dropped}", sc[scene].scene_id)), "{err}");
}

#[test]
fn eval_hand_fixture() {
    let ws = Workspace::new();
    let data = ws.path("scenes.jsonl");
    let spec = SyntheticSpec {
        n_scenes: 1,
        agents_per_scene: [1, 1],
        t_f: 3,
        ..SyntheticSpec::default()
    };
    ok(&["gen", "--config", s(&ws.json("one.json", &spec)), "--out", s(&data)]);
    let mut recs = oracle(&scenes(&data));
    for p in &mut recs[0].agents[0].modes[0].points {
        p[0] += 3.0;
        p[1] += 4.0;
    }
    let preds = ws.path("p.jsonl");
    write_predictions(fs::File::create(&preds).unwrap(), &recs).unwrap();
    let out = ok(&["eval", "--predictions", s(&preds), "--scenes", s(&data), "--tau", "4.5"]);
    let json: serde_json::Value = serde_json::from_str(&out[out.find('{').unwrap()..]).unwrap();
    let close = |k: &str, v: f64| (json[k].as_f64().unwrap() - v).abs() < 1e-12;
    assert!(close("minADE_k", 5.0) && close("minFDE_k", 5.0) && close("WSADE", 5.0), "{json}");
    assert_eq!(json["MR"], 1.0);
}

#[test]
fn bench_writes_one_row_per_agent_count() {
    let ws = Workspace::new();
    let (_, ck) = ws.trained();
    let out = ok(&[
        "bench", "--checkpoint", s(&ck), "--agents", "1,4", "--repeats", "5", "--warmup", "1",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], silm_cli::cmd::bench::CSV_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("4,"));
}
