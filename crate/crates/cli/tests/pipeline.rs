use dsui_cli::plot::{emit_plots, MANIFEST_FILE};
use dsui_cli::runner::{seed_dir, seed_metrics, HISTORY_FILE, REPORT_JSON, SCORES_DIR, SUMMARY_FILE};
use dsui_cli::{compare, run, ExperimentConfig, RunReport, Task};
use std::path::Path;
use std::process::Command;

fn config(task: &str, outdir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
task = "{task}"
seeds = [0, 1]
outdir = "{out}"

[train]
epochs = 4
hidden = 8
feature_dim = 3
components = 2

[fgsm]
epsilons = [0.1, 0.5]

[data.train]
kind = "blobs"
classes = 3
per_class = 30
sigma = 0.6
seed = 10

[data.test]
kind = "blobs"
classes = 3
per_class = 30
sigma = 0.6
seed = 20

[data.ood]
kind = "uniform-noise"
n = 40
dims = 2
seed = 30
"#,
        out = outdir.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

#[test]
fn misclassification_run_layout_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("misclassification", tmp.path());
    let report = run(&cfg).unwrap();
    let dir = cfg.run_dir().unwrap();
    assert_eq!(report.seeds(), vec![0, 1]);
    for seed in [0, 1] {
        let s = seed_dir(&dir, seed);
        for f in ["checkpoint.json", HISTORY_FILE, "predictions.csv", SUMMARY_FILE] {
            assert!(s.join(f).exists(), "{} missing", f);
        }
        assert!(s.join(SCORES_DIR).join("entropy-softmax.csv").exists());
        assert_eq!(seed_metrics(&s).unwrap(), report.rows[seed as usize].metrics);
    }
    assert!(report.mean.contains_key("auroc/entropy-posterior"));
    assert!(report.mean.contains_key("accuracy/softmax"));

    let before = std::fs::metadata(seed_dir(&dir, 0).join(HISTORY_FILE)).unwrap().modified().unwrap();
    let again = run(&cfg).unwrap();
    let after = std::fs::metadata(seed_dir(&dir, 0).join(HISTORY_FILE)).unwrap().modified().unwrap();
    assert_eq!(before, after, "completed seed was rerun");
    assert_eq!(again, report);
    assert_eq!(RunReport::load(&dir.join(REPORT_JSON)).unwrap(), report);

    // aggregate equals recomputation from rows
    let recomputed = RunReport::aggregate(&report.config_hash, Task::Misclassification, report.rows.clone()).unwrap();
    assert_eq!(recomputed, report);
    assert!(compare(&report, &report).unwrap().iter().all(|c| !c.significant));
}

#[test]
fn ood_tasks_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for task in ["ood", "noise-ood", "fgsm-sweep"] {
        let mut cfg = config(task, tmp.path());
        cfg.fgsm.clamp = None;
        let r = run(&cfg).unwrap();
        match cfg.task {
            Task::FgsmSweep => {
                assert!(r.mean.contains_key("auroc/eps0.1-entropy-softmax"));
                assert!(r.mean.contains_key("aupr/eps0.5-maxp-posterior"));
            }
            _ => assert!(r.mean.contains_key("auroc/maxp-softmax")),
        }
        dirs.push(cfg.run_dir().unwrap());
    }
    let (p1, p2) = (tmp.path().join("p1"), tmp.path().join("p2"));
    let m1 = emit_plots(&dirs, &p1).unwrap();
    let m2 = emit_plots(&dirs, &p2).unwrap();
    assert_eq!(m1.emitted.len(), m2.emitted.len());
    assert!(m1.emitted.iter().any(|p| p.to_string_lossy().contains("-eps-auroc")));
    for (a, b) in m1.emitted.iter().zip(&m2.emitted) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    let manifest = std::fs::read_to_string(p1.join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("skipped") && manifest.contains("no epsilon sweep"));
}

#[test]
fn misclassification_plots_note_missing_ood() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config("misclassification", tmp.path());
    cfg.seeds = vec![3];
    run(&cfg).unwrap();
    let out = tmp.path().join("plots");
    emit_plots(&[cfg.run_dir().unwrap()], &out).unwrap();
    let manifest = std::fs::read_to_string(out.join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("ood curves: task has no out-of-domain set"));
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_dsui");

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "task = \"misclassification\"\nseeds = []\n[data.train]\nkind = \"blobs\"\nclasses = 2\nper_class = 5\nsigma = 1.0\nseed = 0\n[data.test]\nkind = \"blobs\"\nclasses = 2\nper_class = 5\nsigma = 1.0\nseed = 1\n").unwrap();
    let st = Command::new(exe).args(["validate", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(st.code(), Some(2));

    let cfg = config("misclassification", &tmp.path().join("runs"));
    let good = tmp.path().join("good.toml");
    std::fs::write(&good, cfg.to_toml().unwrap()).unwrap();
    let st = Command::new(exe).args(["validate", "--config"]).arg(&good).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let st = Command::new(exe).args(["validate", "--rho=-1", "--config"]).arg(&good).status().unwrap();
    assert_eq!(st.code(), Some(2));

    // widely separated blobs are classified perfectly, leaving no positives
    let perfect = good.with_file_name("perfect.toml");
    let mut easy = cfg.clone();
    easy.train.lr = 0.02;
    easy.train.epochs = 100;
    let text = easy.to_toml().unwrap().replace("sigma = 0.6", "sigma = 0.01");
    assert!(text.contains("sigma = 0.01"));
    std::fs::write(&perfect, text).unwrap();
    let out = Command::new(exe)
        .args(["run", "--seed", "0", "--no-nsgvb", "--reg", "off", "--rho", "0", "--config"])
        .arg(&perfect)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    let st = Command::new(exe)
        .args(["compare"])
        .arg(tmp.path().join("missing-a.json"))
        .arg(tmp.path().join("missing-b.json"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
}
