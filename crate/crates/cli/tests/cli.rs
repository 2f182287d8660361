use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hfsynth(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfsynth")).args(args).current_dir(cwd).output().expect("spawn hfsynth")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, generations: usize, extra: &str) -> std::path::PathBuf {
    let path = dir.join("smoke.cfg");
    let text = format!(
        "dataset = {}\nout-dir = {}\ngenerations = {generations}\nlevel-size = 8\nsimulations = 30\n\
         problems-per-generation = 10\nbatch-size = 16\nseed = 5\n{extra}",
        dir.join("d.tsv").display(),
        dir.join("run").display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn gen_dataset(dir: &Path, max_size: &str) {
    let o = hfsynth(&["gen-dataset", "--max-size", max_size, "--out", "d.tsv"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gen_dataset_size_three() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), "3");
    let text = fs::read_to_string(dir.path().join("d.tsv")).unwrap();
    let entries: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(entries, vec!["0000000000000000\tin x x", "ffffffffffffffff\tnotin x x"]);
    let o = hfsynth(&["stats", "--dataset", "d.tsv"], dir.path());
    let report = stdout(&o);
    assert!(report.contains("entries\t2"));
    assert!(report.contains("3\t2\t6"), "{report}");
    assert!(report.contains("15\t-\t606"), "{report}");
    assert!(report.contains("omitted\t0"), "{report}");
}

#[test]
fn gen_dataset_rejects_small_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let o = hfsynth(&["gen-dataset", "--max-size", "2"], dir.path());
    assert!(!o.status.success());
    assert!(!dir.path().join("dataset.tsv").exists());
}

#[test]
fn train_writes_metrics_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), "5");
    let cfg = write_config(dir.path(), 3, "");
    let o = hfsynth(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4, "{metrics}");
    assert!(metrics.starts_with("generation,level,attempted,solved_final,solved_any,wall_seconds,level_1"));
    for g in 1..=3 {
        for f in ["params.bin", "metrics.csv", "rng-state"] {
            assert!(run.join(format!("gen-{g}")).join(f).exists(), "gen-{g}/{f}");
        }
    }
    assert!(fs::read_to_string(run.join("config.cfg")).unwrap().contains("simulations = 30"));

    // extend the same run by two generations, then redo them from gen-3
    let cfg = write_config(dir.path(), 5, "");
    let o = hfsynth(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let five = fs::read(run.join("gen-5/params.bin")).unwrap();
    let rows = |p: &Path| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| {
                // drop wall time
                let mut c: Vec<&str> = l.split(',').collect();
                c.remove(5);
                c.join(",")
            })
            .collect()
    };
    let before = rows(&run.join("gen-5/metrics.csv"));
    let o = hfsynth(&["train", "--config", cfg.to_str().unwrap(), "--resume-from", run.join("gen-3").to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(run.join("gen-5/params.bin")).unwrap(), five);
    assert_eq!(rows(&run.join("gen-5/metrics.csv")), before);

    // a different run configuration in the same directory is refused
    let cfg = write_config(dir.path(), 5, "c-puct = 2\n");
    let o = hfsynth(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
}

#[test]
fn train_config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "dataset = d.tsv\ngenerations = 1\n").unwrap();
    let o = hfsynth(&["train", "--config", "bad.cfg"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("out-dir"), "{}", stderr(&o));
    fs::write(dir.path().join("bad.cfg"), "dataset = d.tsv\nout-dir = r\ngenerations = 1\nspeed = 3\n").unwrap();
    let o = hfsynth(&["train", "--config", "bad.cfg"], dir.path());
    assert!(stderr(&o).contains("unknown key `speed`"), "{}", stderr(&o));
}

#[test]
fn eval_and_synth() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), "5");
    let cfg = write_config(dir.path(), 1, "");
    assert!(hfsynth(&["train", "--config", cfg.to_str().unwrap()], dir.path()).status.success());
    let ckpt = dir.path().join("run/gen-1");
    let ckpt = ckpt.to_str().unwrap();

    let eval = |mode: &str, out: &str| {
        let o = hfsynth(
            &["eval", "--checkpoint", ckpt, "--dataset", "d.tsv", "--levels", "1,2", "--mode", mode, "--level-size", "4",
              "--simulations", "40", "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(dir.path().join(out)).unwrap()
    };
    let bfs = eval("breadth-first", "a.csv");
    assert!(bfs.starts_with("mode,level,problems,solved\nbreadth-first,1,4,"));
    assert_eq!(bfs, eval("breadth-first", "b.csv"));
    let guided = eval("guided", "g1.csv");
    assert_eq!(guided, eval("guided", "g2.csv"));
    eval("hidden-graph", "h.csv");

    let o = hfsynth(&["synth", "--checkpoint", ckpt, "--graph", "ffffffffffffffff", "--simulations", "500"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("(verified)"));

    // no formula of three tokens has this graph
    let o = hfsynth(
        &["synth", "--checkpoint", ckpt, "--graph", "0000000000000005", "--size-budget", "3", "--simulations", "200"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("no solution found"));

    let o = hfsynth(&["synth", "--checkpoint", ckpt, "--graph", "xyz"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_projects_enumeration_cost() {
    let dir = tempfile::tempdir().unwrap();
    let o = hfsynth(&["stats", "--estimate-size", "6", "--samples", "50"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("size\tformulas"));
    assert!(out.lines().any(|l| l.starts_with("6\t864\t50\t")), "{out}");
}
