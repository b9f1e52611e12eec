//! Pipeline stages as file-producing steps.

use super::config::ExperimentConfig;
use crate::analysis::{curve_svg, pca2, subspace_shift, RobustnessCurve};
use crate::attacks::{adversarial_dataset, blur_dataset, evaluate, fgsm, AttackConfig, BlurConfig};
use crate::data::{load_container, save_container, split, ContextMode, Dataset};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Classifier, ClassifierKind, Model};
use crate::pipeline::{
    alpha_sweep, blur_curve, fgsm_curve, joint_weights, pretrain_backbones, retrain_foreground, train_trio, Backbones,
    Normalization, Trio,
};
use crate::training::TrainHistory;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const DATA_FILE: &str = "data.cfds";
pub const FG_STREAM: &str = "fg_stream.fzcp";
pub const BG_STREAM: &str = "bg_stream.fzcp";
pub const NORM_FILE: &str = "normalization.txt";
pub const RETRAINED: &str = "foreground_retrained";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Figure {
    Fig2,
    Fig3,
    Fig4,
    Fig5,
}

/// A config bound to an output directory. Pretrained streams may live in a
/// separate directory so several experiment sets can share them.
#[derive(Clone, Debug)]
pub struct Workspace {
    cfg: ExperimentConfig,
    hash: String,
    dir: PathBuf,
    streams: PathBuf,
}

fn alpha_name(a: f32) -> String {
    format!("joint_alpha_{a}")
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let dir = cfg.output.clone();
        Workspace { hash: cfg.hash(), streams: dir.clone(), dir, cfg }
    }

    fn with_dirs(cfg: ExperimentConfig, dir: PathBuf, streams: PathBuf) -> Self {
        Workspace { hash: cfg.hash(), dir, streams, cfg }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Text artifact with the config hash as its first line.
    fn write_text(&self, name: &str, body: &str) -> Result<()> {
        let path = self.path(name);
        let header = if name.ends_with(".svg") || name.ends_with(".md") {
            format!("<!-- config_hash={} -->\n", self.hash)
        } else {
            format!("# config_hash={}\n", self.hash)
        };
        write_bytes(&path, format!("{header}{body}").as_bytes())
    }

    fn write_curve(&self, stem: &str, curve: &RobustnessCurve, title: &str) -> Result<()> {
        self.write_text(&format!("{stem}.csv"), &curve.to_csv())?;
        self.write_text(&format!("{stem}.svg"), &curve_svg(curve, title))
    }

    fn write_model(&self, name: &str, clf: &Classifier, history: &TrainHistory) -> Result<()> {
        save_checkpoint(clf, &self.path(&format!("{name}.fzcp")))?;
        self.write_text(&format!("history_{name}.csv"), &history.to_csv())
    }

    fn load_model(&self, name: &str) -> Result<Classifier> {
        let mut clf = load_checkpoint(&self.path(&format!("{name}.fzcp")))?;
        clf.set_frozen(true);
        Ok(clf)
    }

    fn load_backbones(&self) -> Result<Backbones> {
        let norm = Normalization::from_text(&read_text(&self.streams.join(NORM_FILE))?)?;
        let mut fg = load_checkpoint(&self.streams.join(FG_STREAM))?;
        let mut bg = load_checkpoint(&self.streams.join(BG_STREAM))?;
        fg.set_frozen(true);
        bg.set_frozen(true);
        Ok(Backbones { fg, bg, norm, fg_history: TrainHistory::default(), bg_history: TrainHistory::default() })
    }

    /// The generated set, normalized with the stream statistics and split.
    fn load_split(&self, norm: &Normalization) -> Result<(Dataset, Dataset)> {
        let ds = norm.apply(load_container(&self.path(DATA_FILE))?);
        split(&ds, self.cfg.data.train_fraction, self.cfg.data.seed)
    }

    fn load_trio(&self) -> Result<Trio> {
        Ok(Trio {
            fg: self.load_model("foreground")?,
            bg: self.load_model("background")?,
            joint: self.load_model("joint")?,
            histories: Vec::new(),
        })
    }

    fn load_alphas(&self) -> Result<Vec<(f32, Classifier)>> {
        self.cfg.alphas.iter().map(|&a| Ok((a, self.load_model(&alpha_name(a))?))).collect()
    }

    pub fn gen_data(&self) -> Result<String> {
        let ds = self.cfg.data.generate()?;
        let path = self.path(DATA_FILE);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_container(&ds, &path)?;
        Ok(format!("gen-data: {} {} samples -> {}", ds.len(), ds.meta.mode.name(), path.display()))
    }

    pub fn pretrain(&self) -> Result<String> {
        let bb = pretrain_backbones(&self.cfg.data, &self.cfg.pretrain, &self.cfg.arch)?;
        std::fs::create_dir_all(&self.streams).map_err(|e| Error::io(&self.streams, e))?;
        save_checkpoint(&bb.fg, &self.streams.join(FG_STREAM))?;
        save_checkpoint(&bb.bg, &self.streams.join(BG_STREAM))?;
        let ws = Workspace::with_dirs(self.cfg.clone(), self.streams.clone(), self.streams.clone());
        ws.write_text(NORM_FILE, &bb.norm.to_text())?;
        ws.write_text("history_pretrain_fg.csv", &bb.fg_history.to_csv())?;
        ws.write_text("history_pretrain_bg.csv", &bb.bg_history.to_csv())?;
        let last = |h: &TrainHistory| h.epochs.last().and_then(|r| r.test_acc).unwrap_or(f64::NAN);
        Ok(format!(
            "pretrain: streams -> {} (object test acc {:.4}, context test acc {:.4})",
            self.streams.display(),
            last(&bb.fg_history),
            last(&bb.bg_history)
        ))
    }

    pub fn train(&self) -> Result<String> {
        let bb = self.load_backbones()?;
        let (tr, te) = self.load_split(&bb.norm)?;
        let trio = train_trio(&bb, &tr, &te, &self.cfg.train)?;
        for ((name, h), clf) in trio.histories.iter().zip([&trio.fg, &trio.bg, &trio.joint]) {
            self.write_model(name, clf, h)?;
        }
        let sweep = alpha_sweep(&bb, &tr, &te, &self.cfg.train, &self.cfg.alphas, self.cfg.warm_start.then_some(&trio.joint))?;
        for (a, clf, h) in &sweep {
            self.write_model(&alpha_name(*a), clf, h)?;
        }
        let mut extra = String::new();
        if self.cfg.retrain_enabled {
            let (rf, h) = retrain_foreground(&trio.fg, &tr, &te, self.cfg.retrain_epsilon, &self.cfg.train)?;
            self.write_model(RETRAINED, &rf, &h)?;
            extra = format!(", retrained foreground at eps {}", self.cfg.retrain_epsilon);
        }
        let acc = |clf: &Classifier| -> Result<f64> {
            let b = te.full_batch()?;
            evaluate(clf, &b.images, &b.labels)
        };
        Ok(format!(
            "train: test acc foreground {:.4} background {:.4} joint {:.4}; {} alpha heads{extra}",
            acc(&trio.fg)?,
            acc(&trio.bg)?,
            acc(&trio.joint)?,
            sweep.len()
        ))
    }

    pub fn attack(&self) -> Result<String> {
        let bb = self.load_backbones()?;
        let (_, te) = self.load_split(&bb.norm)?;
        let trio = self.load_trio()?;
        let cfg = AttackConfig::new(self.cfg.attack_epsilon, self.cfg.source.name())?;
        let batch = te.full_batch()?;
        let adv = fgsm(trio.get(self.cfg.source), &batch, &bb.norm.domain(), &cfg)?;
        let mut body = format!("source={}\nepsilon={}\nsamples={}\n", cfg.source, cfg.epsilon, batch.len());
        let mut adv_accs = Vec::new();
        for (name, m) in trio.named() {
            let clean = evaluate(m, &batch.images, &batch.labels)?;
            let hit = evaluate(m, &adv.x_adv, &batch.labels)?;
            let _ = writeln!(body, "clean.{name}={clean:.6}\nadversarial.{name}={hit:.6}");
            adv_accs.push(format!("{name} {hit:.4}"));
        }
        self.write_text("attack.txt", &body)?;
        save_container(&adversarial_dataset(&te, &adv)?, &self.path("adversarial.cfds"))?;
        Ok(format!("attack: eps {} from {}: {}", cfg.epsilon, cfg.source, adv_accs.join(", ")))
    }

    pub fn curve(&self) -> Result<String> {
        let bb = self.load_backbones()?;
        let (_, te) = self.load_split(&bb.norm)?;
        let trio = self.load_trio()?;
        let named = trio.named();
        let source = trio.get(self.cfg.source);
        let blur = blur_curve(&named, &te, &self.cfg.sigmas)?;
        self.write_curve("blur_curve", &blur, "accuracy under object blur")?;
        let fg = fgsm_curve(&named, source, &te, &bb.norm, &self.cfg.epsilons)?;
        self.write_curve("fgsm_curve", &fg, &format!("accuracy under FGSM from {}", self.cfg.source.name()))?;
        let mut written = 2;
        let alphas = self.load_alphas()?;
        let retrained = if self.cfg.retrain_enabled { Some(self.load_model(RETRAINED)?) } else { None };
        if !alphas.is_empty() || retrained.is_some() {
            let names: Vec<String> = alphas.iter().map(|(a, _)| alpha_name(*a)).collect();
            let mut models: Vec<(&str, &dyn Model)> = vec![("background", &trio.bg as &dyn Model), ("joint", &trio.joint)];
            models.extend(names.iter().zip(&alphas).map(|(n, (_, c))| (n.as_str(), c as &dyn Model)));
            let mut curve = fgsm_curve(&models, source, &te, &bb.norm, &self.cfg.epsilons)?;
            if let Some(rf) = &retrained {
                // the retrained model is attacked with its own gradients
                let own = fgsm_curve(&[(RETRAINED, rf as &dyn Model)], rf, &te, &bb.norm, &self.cfg.epsilons)?;
                curve.models.push(format!("{RETRAINED}_whitebox"));
                curve.accuracy.extend(own.accuracy);
            }
            self.write_curve("alpha_curve", &curve, "regularized joint heads under FGSM")?;
            written += 1;
        }
        let last = fg.grid.len() - 1;
        Ok(format!(
            "curve: {written} curves over {} test samples; at eps {} foreground {:.4} background {:.4} joint {:.4}",
            te.len(),
            fg.grid[last],
            fg.accuracy[0][last],
            fg.accuracy[1][last],
            fg.accuracy[2][last]
        ))
    }

    pub fn analyze(&self) -> Result<String> {
        let bb = self.load_backbones()?;
        let (_, te) = self.load_split(&bb.norm)?;
        let sigma = self.cfg.pca_sigma;
        let clean = te.full_batch()?;
        let blurred = blur_dataset(&te, &BlurConfig::bbox(sigma))?.full_batch()?;
        let mut shift = format!("sigma={sigma}\n");
        let mut scores = Vec::new();
        for (name, e) in [("foreground", bb.fg_extractor()), ("background", bb.bg_extractor())] {
            let a = e.features(&clean.images)?;
            let b = e.features(&blurred.images)?;
            let report = subspace_shift(&a, &b, &clean.labels)?;
            for line in report.to_text().lines() {
                let _ = writeln!(shift, "{name}.{line}");
            }
            scores.push(report.score);
            let (pca, pc) = pca2(&a)?;
            let pb = pca.project(&b)?;
            let mut csv = format!("# variance_pc1={:.6}\n# variance_pc2={:.6}\nlabel,clean_pc1,clean_pc2,blurred_pc1,blurred_pc2\n", pca.variances[0], pca.variances[1]);
            for (i, label) in clean.labels.iter().enumerate() {
                let (c, p) = (pc.data(), pb.data());
                let _ = writeln!(csv, "{label},{:.6},{:.6},{:.6},{:.6}", c[2 * i], c[2 * i + 1], p[2 * i], p[2 * i + 1]);
            }
            self.write_text(&format!("pca_{name}.csv"), &csv)?;
        }
        self.write_text("shift.txt", &shift)?;
        let mut weights = String::new();
        let mut summary = String::new();
        if self.path("joint.fzcp").exists() {
            let w = joint_weights(&self.load_model("joint")?)?;
            summary = format!(", joint weights fg {:.4} bg {:.4}", w.avg_abs_fg, w.avg_abs_bg);
            for line in w.to_text().lines() {
                let _ = writeln!(weights, "joint.{line}");
            }
            for (a, clf) in self.load_alphas()? {
                for line in joint_weights(&clf)?.to_text().lines() {
                    let _ = writeln!(weights, "{}.{line}", alpha_name(a));
                }
            }
            self.write_text("weights.txt", &weights)?;
        }
        Ok(format!("analyze: shift score at sigma {sigma}: foreground {:.4} background {:.4}{summary}", scores[0], scores[1]))
    }

    pub fn report(&self) -> Result<String> {
        const SECTIONS: [(&str, &str); 10] = [
            ("attack.txt", "Single-strength attack"),
            ("blur_curve.csv", "Accuracy under object blur"),
            ("fgsm_curve.csv", "Accuracy under FGSM"),
            ("alpha_curve.csv", "Regularized joint heads under FGSM"),
            ("shift.txt", "Feature shift under blur"),
            ("weights.txt", "Fusion head weights"),
            ("history_foreground.csv", "Foreground head training"),
            ("history_background.csv", "Background head training"),
            ("history_joint.csv", "Joint head training"),
            ("history_foreground_retrained.csv", "Adversarial retraining"),
        ];
        let mut md = format!("# Experiment report\n\nData mode: {}, config hash {}.\n", self.cfg.data.mode.name(), self.hash);
        let mut found = 0;
        for (file, title) in SECTIONS {
            let path = self.path(file);
            if !path.exists() {
                continue;
            }
            let text = read_text(&path)?;
            let body: Vec<&str> = text.lines().filter(|l| !l.starts_with("# config_hash=")).collect();
            let _ = write!(md, "\n## {title}\n\n`{file}`\n\n```\n{}\n```\n", body.join("\n"));
            found += 1;
        }
        if found == 0 {
            return Err(Error::io(&self.dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no stage outputs to report")));
        }
        self.write_text("report.md", &md)?;
        Ok(format!("report: {found} sections -> {}", self.path("report.md").display()))
    }
}

/// Peak of joint minus foreground accuracy over the blur grid.
fn peak_gap(ws: &Workspace) -> Result<f64> {
    let text = read_text(&ws.path("blur_curve.csv"))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("strength"))
        .map(|l| l.split(',').filter_map(|v| v.parse().ok()).collect())
        .collect();
    // columns: strength, foreground, background, joint
    Ok(rows.iter().map(|r| r[3] - r[1]).fold(f64::NEG_INFINITY, f64::max))
}

/// Runs one canned figure experiment under `<output>/<figure>`. Dataset,
/// model and training settings come from `base`; the figure fixes the rest.
pub fn reproduce(base: &ExperimentConfig, figure: Figure) -> Result<String> {
    let tag = format!("{figure:?}").to_lowercase();
    let root = base.output.join(&tag);
    let set = |mode: ContextMode, alphas: Vec<f32>, retrain: bool| {
        let mut c = base.clone();
        c.data.mode = mode;
        c.alphas = alphas;
        c.retrain_enabled = retrain;
        c.source = ClassifierKind::Foreground;
        c
    };
    let pretrain = |cfg: &ExperimentConfig| Workspace::with_dirs(cfg.clone(), root.clone(), root.clone()).pretrain();
    let sub = |cfg: ExperimentConfig, name: Option<&str>| {
        let dir = name.map_or(root.clone(), |n| root.join(n));
        Workspace::with_dirs(cfg, dir, root.clone())
    };
    let mut lines = Vec::new();
    match figure {
        Figure::Fig2 => {
            let cfg = set(ContextMode::Dissimilar, Vec::new(), false);
            lines.push(pretrain(&cfg)?);
            let ws = sub(cfg, None);
            for step in [Workspace::gen_data, Workspace::train, Workspace::analyze, Workspace::report] {
                lines.push(step(&ws)?);
            }
        }
        Figure::Fig3 => {
            let mut gaps = String::new();
            for (i, mode) in [ContextMode::Dissimilar, ContextMode::Similar].into_iter().enumerate() {
                let cfg = set(mode, Vec::new(), false);
                if i == 0 {
                    lines.push(pretrain(&cfg)?);
                }
                let ws = sub(cfg, Some(mode.name()));
                for step in [Workspace::gen_data, Workspace::train, Workspace::curve, Workspace::report] {
                    lines.push(step(&ws)?);
                }
                let _ = writeln!(gaps, "peak_gap.{}={:.6}", mode.name(), peak_gap(&ws)?);
            }
            sub(set(ContextMode::Dissimilar, Vec::new(), false), None).write_text("blur_gap.txt", &gaps)?;
        }
        Figure::Fig4 => {
            for (i, mode) in [ContextMode::Dissimilar, ContextMode::Uniform].into_iter().enumerate() {
                let cfg = set(mode, Vec::new(), false);
                if i == 0 {
                    lines.push(pretrain(&cfg)?);
                }
                let ws = sub(cfg, Some(mode.name()));
                for step in [Workspace::gen_data, Workspace::train, Workspace::curve, Workspace::analyze, Workspace::report] {
                    lines.push(step(&ws)?);
                }
            }
        }
        Figure::Fig5 => {
            let cfg = set(ContextMode::Dissimilar, vec![0.1, 1.0, 10.0], true);
            lines.push(pretrain(&cfg)?);
            let ws = sub(cfg, None);
            for step in [Workspace::gen_data, Workspace::train, Workspace::curve, Workspace::analyze, Workspace::report] {
                lines.push(step(&ws)?);
            }
        }
    }
    for l in &lines {
        eprintln!("  {l}");
    }
    Ok(format!("reproduce {tag}: {} stages -> {}", lines.len(), root.display()))
}
