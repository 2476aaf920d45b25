use gpssm::cli::{cmd_eval, cmd_export, cmd_generate, cmd_train};
use gpssm::config::{model_from_checkpoint, Config, Metric};
use gpssm::data::{load_checkpoint, load_dataset, save_checkpoint};
use gpssm::rollout::{free_simulate, tip_error, InitialState};
use std::path::{Path, PathBuf};
use std::process::Command;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!("output_dir = {:?}\n{body}", dir.join("runs").display().to_string());
    std::fs::write(&path, text).unwrap();
    path
}

const KINK: &str = r#"
[model]
num_inducing = 5
emission = "fixed"

[recognition]
hidden = 3

[training]
steps = 4
batch_size = 2
log_every = 0

[data.generator]
kind = "kink"
n_episodes = 3
length = 6
seed = 2
test_episodes = 2

[rollout]
samples = 5
prefix = 2

[export]
points = [7]
"#;

const CARTPOLE: &str = r#"
[model]
state_dim = 4
num_inducing = 6
emission = "fixed"

[recognition]
hidden = 3

[training]
steps = 2
batch_size = 2
log_every = 0

[data.generator]
kind = "cartpole"
n_episodes = 2
length = 8
seed = 1
test_episodes = 2

[rollout]
samples = 4
prefix = 3

[eval]
metric = "tip"
write_rollouts = false
"#;

fn gpssm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gpssm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::load(&write_config(dir.path(), KINK), &[]).unwrap();
    let a = cmd_generate(&cfg).unwrap();
    let b = cmd_generate(&cfg).unwrap();
    assert_ne!(a.dir, b.dir);
    assert_eq!(std::fs::read(&a.train).unwrap(), std::fs::read(&b.train).unwrap());
    let test = load_dataset(a.test.as_ref().unwrap()).unwrap();
    assert_eq!(test.len(), 2);
    assert_ne!(test, load_dataset(&a.train).unwrap().subset(&[0, 1]));
    let name = a.dir.file_name().unwrap().to_str().unwrap();
    assert!(name.starts_with(&cfg.hash()), "{name}");
}

#[test]
fn smallest_problem_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let body = KINK
        .replace("n_episodes = 3", "n_episodes = 1")
        .replace("length = 6", "length = 1")
        .replace("test_episodes = 2", "test_episodes = 1")
        .replace("num_inducing = 5", "num_inducing = 1");
    let cfg = Config::load(&write_config(dir.path(), &body), &[]).unwrap();
    let run = cmd_train(&cfg, None).unwrap();
    assert_eq!(run.steps, 4);
    assert!(run.final_elbo.unwrap().is_finite());
    let ck = run.final_checkpoint.unwrap();
    let ev = cmd_eval(&cfg, &ck).unwrap();
    assert!(ev.mean.is_finite());
    let ex = cmd_export(&cfg, &ck).unwrap();
    let text = std::fs::read_to_string(ex.csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 7 + 1);
}

#[test]
fn zero_step_training_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::load(&write_config(dir.path(), KINK), &[("training.steps".into(), "0".into())]).unwrap();
    let run = cmd_train(&cfg, None).unwrap();
    assert_eq!(run.steps, 0);
    assert!(run.final_elbo.is_none());
    let cp = load_checkpoint(run.final_checkpoint.as_ref().unwrap()).unwrap();
    let ds = load_dataset(&run.dir.join("train.jsonl")).unwrap();
    let (_, model) = model_from_checkpoint(&cp).unwrap();
    assert_eq!(model, cfg.build_model(&ds).unwrap());
    assert!(run.dir.join("summary.json").is_file());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), KINK);
    let long = Config::load(&path, &[("training.steps".into(), "6".into())]).unwrap();
    let short = Config::load(&path, &[("training.steps".into(), "3".into())]).unwrap();
    let a = cmd_train(&long, None).unwrap();
    let b = cmd_train(&short, None).unwrap();
    let c = cmd_train(&long, b.final_checkpoint.as_deref()).unwrap();
    let pa = load_checkpoint(a.final_checkpoint.as_ref().unwrap()).unwrap();
    let pc = load_checkpoint(c.final_checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(pa.params, pc.params);
    assert_eq!(a.final_elbo.unwrap().to_bits(), c.final_elbo.unwrap().to_bits());

    let other = Config::load(&path, &[("model.num_inducing".into(), "4".into())]).unwrap();
    let err = cmd_train(&other, b.final_checkpoint.as_deref()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn tip_metric_matches_a_direct_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config::load(&write_config(dir.path(), CARTPOLE), &[]).unwrap();
    let run = cmd_train(&cfg, None).unwrap();
    let ck = run.final_checkpoint.unwrap();
    let ev = cmd_eval(&cfg, &ck).unwrap();
    assert_eq!(ev.metric, Metric::Tip);

    let (_, model) = model_from_checkpoint(&load_checkpoint(&ck).unwrap()).unwrap();
    let (_, test) = cfg.data.generator.as_ref().unwrap().generate().unwrap();
    let mut total = 0.0;
    for (ep, score) in test.unwrap().episodes.iter().zip(&ev.episodes) {
        let res = free_simulate(&model, &InitialState::Prefix(ep.prefix(3)), &ep.a, &cfg.rollout.options()).unwrap();
        let want = tip_error(&res.observations, &ep.y, 0, 2, 0.5).unwrap();
        assert_eq!(score.score, want);
        total += want;
    }
    assert_eq!(ev.mean, total / 2.0);
    assert!(ev.dir.join("eval.json").is_file());

    let narrow = Config::load(&write_config(dir.path(), CARTPOLE), &[("eval.angle_channel".into(), "7".into())]).unwrap();
    let err = cmd_eval(&narrow, &ck).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("eval.angle_channel"), "{err}");
}

#[test]
fn export_honours_bounds_and_prior_reset() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), KINK);
    let cfg = Config::load(&path, &[]).unwrap();
    let ck = cmd_train(&cfg, None).unwrap().final_checkpoint.unwrap();
    let prior = Config::load(
        &path,
        &[("export.prior_reset".into(), "true".into()), ("export.bounds".into(), "[[-1.0, 2.0]]".into())],
    )
    .unwrap();
    let out = cmd_export(&prior, &ck).unwrap();
    let text = std::fs::read_to_string(&out.csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "kind,x0,output,mean,var,lower,upper");
    let probes: Vec<Vec<f64>> = lines
        .filter(|l| l.starts_with("probe,"))
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(probes.len(), 7);
    assert_eq!(probes[0][0], -1.0);
    assert_eq!(probes[6][0], 2.0);
    for p in &probes {
        assert!((p[2] - p[0]).abs() < 1e-8, "prior mean is the identity");
    }
    let bad = Config::load(&path, &[("export.bounds".into(), "[[0.0, 1.0], [0.0, 1.0]]".into())]).unwrap();
    assert_eq!(cmd_export(&bad, &ck).unwrap_err().exit_code(), 2);
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), KINK);

    let out = gpssm(&["generate", s(&path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed = String::from_utf8(out.stdout).unwrap();
    assert!(Path::new(printed.trim()).join("train.jsonl").is_file());

    let out = gpssm(&["train", s(&path), "--model.num_inducing=0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.num_inducing"));

    let out = gpssm(&["train", s(&path), "--model.kernel.components.1.lengthscal=2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.kernel"));

    let out = gpssm(&["train", s(&path), "--training.steps=many"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("training.steps"));

    let out = gpssm(&["train", s(&dir.path().join("absent.toml"))]);
    assert_eq!(out.status.code(), Some(4));

    let out = gpssm(&["eval", s(&path), "--checkpoint", s(&dir.path().join("absent.bin"))]);
    assert_eq!(out.status.code(), Some(4));

    let out = gpssm(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    // a checkpoint whose kernel variance is NaN cannot be factorised
    let cfg = Config::load(&path, &[("training.steps".into(), "0".into())]).unwrap();
    let ck = cmd_train(&cfg, None).unwrap().final_checkpoint.unwrap();
    let mut cp = load_checkpoint(&ck).unwrap();
    let name = cp.params.names().find(|n| n.ends_with("raw_variance")).unwrap().to_string();
    cp.params.get_mut(&name).unwrap()[0] = f64::NAN;
    let broken = dir.path().join("broken.bin");
    save_checkpoint(&cp, &broken).unwrap();
    let out = gpssm(&["export", s(&path), "--checkpoint", s(&broken)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
