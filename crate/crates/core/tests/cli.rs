use std::path::Path;
use std::process::{Command, Output};

use lpat::archive;
use lpat::bench::read_csv;
use lpat::config::RunConfig;
use lpat::harness::{gen_sequence, track_sequence, train_toy, TrainConfig};
use lpat::model::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lpat(args: &[&str]) -> Output {
    lpat_env(args, &[])
}

fn lpat_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lpat"));
    cmd.args(args).env_remove("LPAT_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("lpat runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gradcheck_passes_and_is_deterministic() {
    let args = ["gradcheck", "--only", "matmul,softmax_rows,layer_norm"];
    let a = lpat(&args);
    let b = lpat(&args);
    assert_eq!(code(&a), 0, "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let text = stdout(&a);
    assert!(text.lines().last().unwrap().starts_with("PASS at tol"));
    assert!(text.contains("worst: "));
}

#[test]
fn gradcheck_zero_tolerance_fails_with_one() {
    let o = lpat(&["gradcheck", "--only", "matmul", "--tol", "0"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).lines().last().unwrap().starts_with("FAIL"));
}

#[test]
fn gradcheck_unknown_case_is_an_error() {
    assert_eq!(code(&lpat(&["gradcheck", "--only", "no_such_case"])), 2);
    assert_eq!(code(&lpat(&["gradcheck", "--eps", "0"])), 2);
}

#[test]
fn oracle_small_sweep() {
    let args = [
        "oracle",
        "--trials",
        "30",
        "--max-grid",
        "4",
        "--limit-seeds",
        "3",
    ];
    let a = lpat(&args);
    assert_eq!(code(&a), 0, "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&lpat(&args)));
    assert!(stdout(&a).contains("nonzero outside scope = 0"));
    assert_eq!(code(&lpat(&["oracle", "--max-grid", "0"])), 2);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let o = lpat(&["bench", "--sizes", "16,64", "--reps", "3", "--out", p(&out)]);
    // 1 only when the machine is too noisy for a stable timing
    assert!(matches!(code(&o), 0 | 1), "{}", stdout(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("n,k,lra_ns,global_ns,lra_scores_counted\n"));
    let rows = read_csv(&out).unwrap();
    assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), [16, 64]);
    assert_eq!(rows[0].lra_scores_counted, 100);
    assert!(rows
        .iter()
        .all(|r| r.k == 3 && r.lra_ns > 0.0 && r.global_ns > 0.0));

    assert_eq!(
        code(&lpat(&["bench", "--sizes", "16,20", "--out", p(&out)])),
        2
    );
}

#[test]
fn train_zero_steps_saves_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = lpat(&["train-toy", "--steps", "0", "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let saved = archive::load::<f32>(run.join("weights.lpat")).unwrap();
    let cfg = RunConfig::default();
    let model = Model::new(cfg.model()).unwrap();
    let init_seed: u64 = ChaCha8Rng::seed_from_u64(cfg.harness.seed).random();
    assert!(saved.bit_eq(&model.init_params::<f32>(init_seed)));
    let written = RunConfig::load(run.join("config.json")).unwrap();
    assert_eq!(written.harness.train.steps, 0);
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.trim(), "step,total,cls1,cls2,reg");
}

fn short_config(dir: &Path, precision: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{precision}.json"));
    let doc = format!(
        r#"{{ "tensor": {{ "precision": "{precision}" }},
             "harness": {{ "train": {{ "steps": 3, "sequences": 4, "eval_pairs": 2 }},
                          "track": {{ "frames": 4 }} }} }}"#
    );
    std::fs::write(&path, doc).unwrap();
    path
}

#[test]
fn train_then_track_matches_in_memory() {
    let dir = tempfile::tempdir().unwrap();
    for precision in ["f32", "f64"] {
        let cfg_path = short_config(dir.path(), precision);
        let run = dir.path().join(format!("run_{precision}"));
        let o = lpat(&["train-toy", "--config", p(&cfg_path), "--out", p(&run)]);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
        let track_out = dir.path().join(format!("track_{precision}.json"));
        let weights = run.join("weights.lpat");
        let o = lpat(&[
            "track",
            "--weights",
            p(&weights),
            "--config",
            p(&cfg_path),
            "--seq-seed",
            "7",
            "--out",
            p(&track_out),
        ]);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&track_out).unwrap()).unwrap();
        assert_eq!(doc["seq_seed"], 7);

        let cfg = RunConfig::load(&cfg_path).unwrap();
        let model = Model::new(cfg.model()).unwrap();
        let seq = gen_sequence(&cfg.harness.track.sequence(), 7).unwrap();
        let expect = if precision == "f32" {
            let o = train_toy::<f32>(&model, &cfg.harness.train, cfg.harness.seed).unwrap();
            track_sequence(&model, &o.params, &seq).unwrap()
        } else {
            let o = train_toy::<f64>(&model, &cfg.harness.train, cfg.harness.seed).unwrap();
            track_sequence(&model, &o.params, &seq).unwrap()
        };
        assert_eq!(doc["mean_iou"].as_f64().unwrap(), expect.mean_iou);
        let frames = doc["frames"].as_array().unwrap();
        assert_eq!(frames.len(), 3);
        for (f, e) in frames.iter().zip(&expect.frames) {
            assert_eq!(f["x1"].as_f64().unwrap(), e.x1);
            assert_eq!(f["y2"].as_f64().unwrap(), e.y2);
            assert_eq!(f["iou"].as_f64().unwrap(), e.iou);
        }
    }
}

#[test]
fn thread_count_does_not_change_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = short_config(dir.path(), "f32");
    let mut archives = Vec::new();
    for threads in ["1", "3"] {
        let run = dir.path().join(format!("t{threads}"));
        let o = lpat_env(
            &["train-toy", "--config", p(&cfg_path), "--out", p(&run)],
            &[("LPAT_THREADS", threads)],
        );
        assert_eq!(code(&o), 0, "{}", stdout(&o));
        archives.push(std::fs::read(run.join("weights.lpat")).unwrap());
    }
    assert_eq!(archives[0], archives[1]);
}

#[test]
fn bad_thread_env_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = lpat_env(
        &["train-toy", "--steps", "0", "--out", p(&run)],
        &[("LPAT_THREADS", "0")],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("thread"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"attention": {"kk": 3}}"#).unwrap();
    let o = lpat(&["train-toy", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("attention.kk"));

    let o = lpat(&["track", "--weights", p(&dir.path().join("missing.lpat"))]);
    assert_eq!(code(&o), 2);

    let even_k = dir.path().join("even.json");
    std::fs::write(&even_k, r#"{"attention": {"k": 4}}"#).unwrap();
    assert_eq!(code(&lpat(&["train-toy", "--config", p(&even_k)])), 2);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&lpat(&["no-such-command"])), 2);
    assert_eq!(code(&lpat(&["--help"])), 0);
}

#[test]
fn default_train_config_is_the_documented_one() {
    let t = TrainConfig::default();
    assert_eq!((t.steps, t.lr, t.momentum), (300, 0.005, 0.9));
}
