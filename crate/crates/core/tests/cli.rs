use std::path::Path;
use std::process::{Command, Output};

fn muse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muse")).args(args).output().expect("run muse")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.conf");
    let text = format!(
        "data_dir = {d}/data\nout_dir = {d}/out\nthreads = 1\n\
         sim.n_users = 60\nsim.n_questions = 40\nsim.n_lectures = 10\nsim.mean_interactions = 30\n\
         local.d_model = 8\nlocal.window = 8\nlocal.heads = 2\nlocal.n_user_enc = 1\nlocal.n_ex_dec = 1\nlocal.n_lect_enc = 1\n\
         local.pool_hidden = 4\nlocal.head_hidden = 8,4\nlocal.task_container_vocab = 64\n\
         global.d = 8\nglobal.emb_dim = 4\n\
         train.batch = 16\ntrain.warmup = 10\ntrain.tbptt = 16\nadv.extra_steps = 2\n",
        d = dir.display()
    );
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn help_lists_flags_and_keys() {
    let o = muse(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for flag in ["--config", "--seed", "--threads", "--out"] {
        assert!(text.contains(flag), "{flag}");
    }
    for cmd in ["generate", "train", "finetune-adv", "blend", "evaluate", "predict"] {
        assert!(text.contains(cmd), "{cmd}");
    }
    for (k, _, _) in muse_core::config::KEYS {
        assert!(text.contains(k), "{k}");
    }
}

#[test]
fn missing_checkpoint_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("nowhere").join("local.7.ckpt");
    let o = muse(&["evaluate", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains(ckpt.to_str().unwrap()), "{err}");
}

#[test]
fn config_errors_are_one_line_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.conf");
    std::fs::write(&p, "seed = 1\n\nnot.a.key = 3\n").unwrap();
    let o = muse(&["--config", p.to_str().unwrap(), "generate"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("bad.conf") && err.contains('3') && err.contains("not.a.key"), "{err}");
}

#[test]
fn generate_train_evaluate_predict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |args: &[&str]| {
        let mut all = vec!["--config", cfg.as_str()];
        all.extend_from_slice(args);
        let o = muse(&all);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["generate"]);
    assert!(dir.path().join("data/train.csv").exists());
    let local = run(&["train", "--model", "local"]).trim().to_string();
    let global = run(&["train", "--model", "global"]).trim().to_string();
    assert!(Path::new(&local).exists() && Path::new(&global).exists());

    let first = run(&["evaluate"]);
    let report = std::fs::read(dir.path().join("out/eval.local.txt")).unwrap();
    let second = run(&["evaluate"]);
    assert_eq!(first, second);
    assert_eq!(report, std::fs::read(dir.path().join("out/eval.local.txt")).unwrap());
    assert!(first.contains("auc"), "{first}");

    let blended = run(&["blend"]);
    assert!(blended.contains("auc_fused"), "{blended}");
    assert!(dir.path().join("out/blend_predictions.csv").exists());

    let adv = run(&["finetune-adv"]).trim().to_string();
    assert!(Path::new(&adv).exists());

    let out = dir.path().join("pred.csv");
    let input = dir.path().join("data/train.csv");
    run(&["predict", "--checkpoint", &global, "--input", input.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("row_id,p"));
    for l in lines {
        let p: f64 = l.split(',').nth(1).unwrap().parse().unwrap();
        assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn unknown_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = muse(&["--config", &cfg, "train", "--model", "medium"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("medium"));
}
