use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use partseg::selftrain::RunConfig;
use partseg::synth::{CorpusSpec, SplitSizes};

fn partseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_spec() -> CorpusSpec {
    let mut spec = CorpusSpec::reference();
    spec.scene.height = 20;
    spec.scene.width = 20;
    for o in &mut spec.scene.organs {
        o.size = [2.0, 3.0];
    }
    spec.samples = SplitSizes {
        train: 5,
        valid: 3,
        test: 3,
    };
    spec
}

/// Tiny corpus plus a short run config pointing at it.
fn setup(root: &Path) -> PathBuf {
    let spec_path = root.join("spec.toml");
    std::fs::write(&spec_path, tiny_spec().to_toml()).unwrap();
    let o = partseg(&["generate", "--config", s(&spec_path), "--out", s(&root.join("corpus"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut c = RunConfig::reference(vec!["corpus/bowel_a.json".into(), "corpus/bowel_b.json".into()]);
    c.model.features = 3;
    c.stage1.max_epochs = 3;
    c.stage2.epochs = 2;
    c.stage2.max_iterations = 2;
    c.stage2.plateau_delta = 0.0;
    let path = root.join("run.toml");
    std::fs::write(&path, c.to_toml()).unwrap();
    path
}

#[test]
fn generate_reference_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = partseg(&["generate", "--out", s(&a)]);
    assert_eq!(code(&o), 0);
    let manifests: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension().is_some_and(|x| x == "json") && p.file_name().unwrap() != "corpus_card.json").then_some(p)
        })
        .collect();
    assert_eq!(manifests.len(), 2);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifests[0]).unwrap()).unwrap();
    assert_eq!(m["catalog"].as_array().unwrap().len(), 4);

    let b = dir.path().join("b");
    assert_eq!(code(&partseg(&["generate", "--out", s(&b)])), 0);
    for name in ["bowel_a.json", "bowel_b.json", "corpus_card.json", "bowel_b/valid/bowel_b_valid_007.label.grid"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn malformed_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = 3\n").unwrap();
    assert_eq!(code(&partseg(&["generate", "--config", s(&bad), "--out", s(dir.path())])), 2);
    assert_eq!(code(&partseg(&["generate"])), 2);

    let cfg = setup(dir.path());
    let missing = dir.path().join("nope.ckpt");
    let out = dir.path().join("x");
    let o = partseg(&["eval", "--config", s(&cfg), "--checkpoint", s(&missing), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.ckpt"));
    let o = partseg(&["train", "--manifest", s(&dir.path().join("none.json")), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn full_flow_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = setup(root);
    let train = root.join("train");
    let o = partseg(&["train", "--config", s(&cfg), "--out", s(&train), "--baseline"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let theta0 = train.join("theta0.ckpt");

    let st = root.join("st");
    let o = partseg(&[
        "selftrain", "--config", s(&cfg), "--init", s(&theta0), "--out", s(&st), "--filter", "none", "--max-iters", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let iters = std::fs::read_to_string(st.join("iterations.csv")).unwrap();
    assert_eq!(iters.lines().count(), 2);
    assert!(iters.contains("theta0.ckpt"));

    let o = partseg(&[
        "selftrain", "--config", s(&cfg), "--init", s(&theta0), "--out", s(&root.join("prev")), "--from-prev",
        "--max-iters", "2", "--filter", "none",
    ]);
    assert_eq!(code(&o), 0);
    let iters = std::fs::read_to_string(root.join("prev/iterations.csv")).unwrap();
    assert!(iters.lines().nth(2).is_none_or(|l| l.ends_with("theta1.ckpt")));

    // every pseudo organ is an outlier at a vanishing quantile
    let o = partseg(&[
        "selftrain", "--config", s(&cfg), "--init", s(&theta0), "--out", s(&root.join("empty")), "--tau", "1e-9",
        "--filter", "image",
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("empty/iterations.csv").exists());

    let mut kept = Vec::new();
    for tau in ["0.999", "0.99", "0.95"] {
        let out = root.join(format!("qa{tau}"));
        let o = partseg(&["assess", "--config", s(&cfg), "--checkpoint", s(&theta0), "--tau", tau, "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        kept.push(v["kept"].as_u64().unwrap());
    }
    assert!(kept.windows(2).all(|w| w[0] >= w[1]), "{kept:?}");

    for (name, ckpt) in [("theta0", theta0.clone()), ("final", st.join("best.ckpt")), ("mn", train.join("multinets/multinets.json"))] {
        let o = partseg(&[
            "eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--split", "valid", "--out", s(&root.join("eval").join(name)),
        ]);
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let theta0_eval = format!("theta0={}", s(&root.join("eval/theta0")));
    let final_eval = format!("final={}", s(&root.join("eval/final")));
    let mn_eval = format!("mn={}", s(&root.join("eval/mn")));
    let o = partseg(&["report", "--run", &theta0_eval, "--run", &final_eval, "--run", &mn_eval, "--out", s(&root.join("report"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cmp = std::fs::read_to_string(root.join("report/comparisons.csv")).unwrap();
    assert!(cmp.starts_with("reference,run,class,pairs,mean_difference,statistic,p_value,method\n"));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let mut c = partseg::pipeline::load_config(&cfg).unwrap();
    c.stage1.base_lr = f64::MAX;
    std::fs::write(&cfg, c.to_toml()).unwrap();
    let o = partseg(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn commands_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let mut summaries = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = partseg(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "9"]);
        assert_eq!(code(&o), 0);
        summaries.push(partseg::pipeline::read_summary(&out.join("summary.json")).unwrap());
        assert_eq!(
            std::fs::read(dir.path().join("a/theta0.ckpt")).unwrap(),
            std::fs::read(out.join("theta0.ckpt")).unwrap()
        );
    }
    assert_eq!(summaries[0], summaries[1]);
}
