use fusionbench::cli::ExperimentConfig;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
data.classes = 4
data.image_size = 16
data.n_per_class = 12
pretrain.n_per_class = 12
pretrain.epochs = 1
train.epochs = 2
train.batch_size = 16
model.widths = 4,8
model.output_dim = 16
attack.epsilons = 0, 0.1, 0.3
attack.sigmas = 0, 2
";

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    let out = dir.path().join("out");
    std::fs::write(&cfg, format!("{TINY}{extra}output.dir = {}\n", out.display())).unwrap();
    (dir, cfg)
}

fn fb(args: &[&str], cfg: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fusionbench"));
    cmd.args(args).env_remove("FUSIONBENCH_OUT");
    if let Some(c) = cfg {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_writes_container() {
    let (dir, cfg) = setup("");
    let o = fb(&["gen-data"], Some(&cfg));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ds = fusionbench::data::load_container(&dir.path().join("out/data.cfds")).unwrap();
    assert_eq!(ds.len(), 48);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 1);
}

#[test]
fn missing_config_names_the_path() {
    let o = fb(&["gen-data", "--config", "missing.cfg"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.cfg"), "{}", stderr(&o));
    let o = fb(&["--config", "missing.cfg"], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    let o = fb(&["frobnicate"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(fb(&["gen-data", "--bogus"], None).status.code(), Some(1));
    assert_eq!(fb(&["reproduce", "fig9"], None).status.code(), Some(1));
    assert_eq!(fb(&[], None).status.code(), Some(1));
    assert_eq!(fb(&["--help"], None).status.code(), Some(0));
}

#[test]
fn bad_config_values_exit_one() {
    let (_dir, cfg) = setup("train.optimizer = adam\n");
    let o = fb(&["gen-data"], Some(&cfg));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.optimizer"));
    let (_dir, cfg) = setup("data.mode = adversarial\n");
    assert_eq!(fb(&["gen-data"], Some(&cfg)).status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let (dir, cfg) = setup("");
    let o = fb(&["train"], Some(&cfg));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("normalization.txt"), "{}", stderr(&o));
    assert_eq!(fb(&["pretrain"], Some(&cfg)).status.code(), Some(0));
    std::fs::write(dir.path().join("out/data.cfds"), b"CFDS garbage").unwrap();
    assert_eq!(fb(&["train"], Some(&cfg)).status.code(), Some(2));
}

#[test]
fn output_dir_env_override() {
    let (dir, cfg) = setup("");
    let alt = dir.path().join("alt");
    let o = Command::new(env!("CARGO_BIN_EXE_fusionbench"))
        .args(["gen-data", "--deterministic", "--config"])
        .arg(&cfg)
        .env("FUSIONBENCH_OUT", &alt)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(alt.join("data.cfds").exists());
    assert!(!dir.path().join("out/data.cfds").exists());
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn reproduce_fig5_smoke() {
    let (dir, cfg) = setup("");
    let o = fb(&["reproduce", "fig5"], Some(&cfg));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let root = dir.path().join("out/fig5");
    let hash = ExperimentConfig::parse(&format!("{TINY}regularization.alphas = 0.1,1,10\nretrain.enabled = true\n"))
        .unwrap()
        .hash();

    let curve = std::fs::read_to_string(root.join("alpha_curve.csv")).unwrap();
    let header = curve.lines().find(|l| l.starts_with("strength")).unwrap();
    for col in ["background", "joint_alpha_0.1", "joint_alpha_1", "joint_alpha_10", "foreground_retrained_whitebox"] {
        assert!(header.split(',').any(|c| c == col), "{header}");
    }
    assert_eq!(curve.lines().filter(|l| !l.starts_with('#')).count(), 4);

    let first = snapshot(&root);
    for (name, bytes) in &first {
        let text = String::from_utf8_lossy(bytes);
        if name.ends_with(".fzcp") || name.ends_with(".cfds") {
            continue;
        }
        assert!(text.lines().next().unwrap().contains(&format!("config_hash={hash}")), "{name}");
    }
    assert!(first.iter().any(|(n, _)| n == "weights.txt"));

    let o = fb(&["reproduce", "fig5"], Some(&cfg));
    assert_eq!(o.status.code(), Some(0));
    assert!(first == snapshot(&root), "rerun changed outputs");
}

#[test]
fn staged_run_matches_file_contract() {
    let (dir, cfg) = setup("regularization.alphas =\nretrain.enabled = false\n");
    for stage in ["gen-data", "pretrain", "train", "attack", "curve", "analyze", "report"] {
        let o = fb(&[stage], Some(&cfg));
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with(stage));
    }
    let out = dir.path().join("out");
    for f in ["attack.txt", "adversarial.cfds", "blur_curve.svg", "fgsm_curve.csv", "shift.txt", "pca_foreground.csv", "report.md"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join("alpha_curve.csv").exists());
    let adv = fusionbench::data::load_container(&out.join("adversarial.cfds")).unwrap();
    assert_eq!(adv.meta.mode, fusionbench::data::ContextMode::Adversarial);
    assert_eq!(adv.len(), 12);
}
