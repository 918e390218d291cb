use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &["--depth", "1", "--dim", "8", "--heads", "2", "--batch-size", "2", "--seed", "3"];

fn simicl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simicl")).args(args).env("SIMICL_THREADS", "1").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = simicl(args);
    assert!(o.status.success(), "{args:?}\nstdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset with pairs, shared by the end-to-end tests.
fn dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["synth", "--out", s(&data), "--seed", "2", "--train", "6", "--validation", "2", "--test", "3"]);
    ok(&["pair", "--data", s(&data), "--seed", "2"]);
    data
}

#[test]
fn help_matches_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for sub in ["", "synth", "pair", "train", "eval", "predict", "gradcheck", "sweep"] {
        let args: Vec<&str> = if sub.is_empty() { vec!["--help"] } else { vec![sub, "--help"] };
        let text = ok(&args);
        let name = if sub.is_empty() { "help.txt".to_string() } else { format!("help_{sub}.txt") };
        let path = golden.join(name);
        if update {
            std::fs::create_dir_all(&golden).unwrap();
            std::fs::write(&path, &text).unwrap();
        } else {
            let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}", path.display()));
            assert_eq!(text, expected, "{sub} --help drifted; rerun with UPDATE_GOLDEN=1");
        }
    }
}

#[test]
fn unknown_flags_are_rejected() {
    let o = simicl(&["gradcheck", "--depht", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--depht"));
}

#[test]
fn degenerate_combination_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&out), "--mask-ratio", "0", "--loss", "masked", "--epochs", "1"];
    args.extend(TINY);
    let o = simicl(&args);
    assert_eq!(o.status.code(), Some(2), "stderr: {}", stderr(&o));
    let err = stderr(&o);
    assert!(err.starts_with("error[ConfigRejected]"), "{err}");
    assert!(err.contains("mask ratio 0") && err.contains("`masked`"), "{err}");
    assert!(!out.join("final.ckpt").exists());
}

#[test]
fn train_eval_predict_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--epochs", "2", "--checkpoint-every", "2"];
    args.extend(TINY);
    let text = ok(&args);
    assert!(text.contains("trained 4 steps"), "{text}");
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists() && run.join("step000002.ckpt").exists());
    assert_eq!(std::fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 4);

    let snapshot = std::fs::read_to_string(run.join("resolved.conf")).unwrap();
    assert!(snapshot.contains("mask_ratio = 0.6") && snapshot.contains("loss = masked") && snapshot.contains("depth = 1"));

    // Same run driven by the snapshot reproduces the log exactly.
    let rerun = dir.path().join("rerun");
    ok(&["train", "--data", s(&data), "--out", s(&rerun), "--config", s(&run.join("resolved.conf"))]);
    let strip = |p: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time");
                v
            })
            .collect()
    };
    assert_eq!(strip(&run.join("train_log.jsonl")), strip(&rerun.join("train_log.jsonl")));
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(rerun.join("final.ckpt")).unwrap());

    let eval_dir = dir.path().join("eval");
    let text = ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&eval_dir)]);
    let last = text.lines().last().unwrap();
    let re_ok = last.starts_with("DC=") && last.contains(" IoU=");
    assert!(re_ok, "{last}");
    assert!(eval_dir.join("metrics.json").exists());
    assert_eq!(std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap().lines().count(), 4);

    let pred = dir.path().join("pred");
    let img = |id: &str, kind: &str| data.join(kind).join(format!("{id}.png"));
    ok(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--support-image",
        s(&img("s000006", "images")),
        "--support-mask",
        s(&img("s000006", "masks")),
        "--query-image",
        s(&img("s000008", "images")),
        "--out",
        s(&pred),
    ]);
    for f in ["composite.png", "reconstruction.png", "mask.png", "resolved.conf"] {
        assert!(pred.join(f).exists(), "{f}");
    }
}

#[test]
fn single_image_mode_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let run = dir.path().join("single");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--mode", "single", "--epochs", "1"];
    args.extend(TINY);
    ok(&args);
    assert!(std::fs::read_to_string(run.join("resolved.conf")).unwrap().contains("loss = all"));
    let text = ok(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&run.join("final.ckpt")),
        "--mode",
        "single",
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert!(text.lines().last().unwrap().starts_with("DC="));
}

#[test]
fn gradcheck_reports_small_error() {
    let text = ok(&["gradcheck", "--depth", "2", "--dim", "32"]);
    let err: f64 = text.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-4, "{text}");
}

#[test]
fn sweep_writes_a_dice_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("sweep");
    let mut args = vec!["sweep", "--data", s(&data), "--out", s(&out), "--ratios", "0,0.6", "--losses", "masked,all", "--epochs", "1"];
    args.extend(TINY);
    ok(&args);
    let csv = std::fs::read_to_string(out.join("dc_grid.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.len() == 3));
    assert_eq!(rows[0], ["mask_ratio", "masked", "all"]);
    assert_eq!(rows[1][1], "-");
    for v in [rows[1][2], rows[2][1], rows[2][2]] {
        let d: f64 = v.parse().unwrap();
        assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn config_file_values_apply_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("g.conf");
    std::fs::write(&conf, "# probe\ndepth = 0\ndim = 16\nheads = 2\nseed = 4\n").unwrap();
    let out = dir.path().join("g");
    ok(&["gradcheck", "--config", s(&conf), "--seed", "5", "--out", s(&out)]);
    let snap = std::fs::read_to_string(out.join("resolved.conf")).unwrap();
    assert_eq!(snap, "depth = 0\ndim = 16\nheads = 2\nseed = 5\n");

    std::fs::write(&conf, "depht = 0\n").unwrap();
    let o = simicl(&["gradcheck", "--config", s(&conf)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown key `depht`"));
}
