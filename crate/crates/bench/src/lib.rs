//! Experiment driver: trains the base network and the defended head, runs
//! the attack cascades, the single-component ablations and the retrieval
//! sweep, and writes every result under one run directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, ArrayView2, Axis};
use ropust::attacks::{
    auto_cascade, transfer_attack, AttackConfig, AttackKind, CascadeReport, Classifier,
    Differentiable,
};
use ropust::base::{
    adv_train, freeze, retrain_plain_classifier, AdvTrainConfig, BaseNet, DefenseFree,
};
use ropust::checkpoint::{load_base, load_ropust, save_base, save_ropust};
use ropust::config::ExperimentConfig;
use ropust::data::{load_idx, Dataset, Split};
use ropust::dfa::train;
use ropust::model::{binarize, AblationFlags, RopustParams};
use ropust::opu::{opu_new, OpuCheckpoint, OpuHandle};
use ropust::pipeline::RopustClassifier;
use ropust::report::{records_csv_string, write_text, EvalEntry, EvalReport};
use ropust::retrieval::{sweep as retrieval_sweep, SweepGrid};
use ropust::{Error, Result};

/// Samples attacked per call; results do not depend on it.
const CHUNK: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainBase,
    Finetune,
    Evaluate,
    Ablate,
    Sweep,
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainBase => "train-base",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::Sweep => "sweep",
            Command::All => "all",
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Parse { .. }
        | Error::Validation(_)
        | Error::Io { .. }
        | Error::SchemaVersion { .. } => 3,
        Error::TrainingDiverged { .. } => 4,
        Error::CapabilityDisabled(_) => 5,
        _ => 1,
    }
}

/// A resolved configuration bound to its run directory.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Workspace {
    /// Creates the run directory and echoes the resolved config into it.
    pub fn create(cfg: ExperimentConfig) -> Result<Self> {
        let out = cfg.out_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        cfg.save(&out.join("config.json"))?;
        Ok(Self { cfg, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn config_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.cfg)?)
    }

    fn load_split(&self, split: Split, n: Option<usize>) -> Result<Dataset> {
        let ds = load_idx(&self.cfg.data.dir, split, self.cfg.dims.classes)?;
        if ds.inputs.ncols() != self.cfg.dims.input {
            return Err(Error::Validation(format!(
                "dataset has {} inputs per sample, config expects {}",
                ds.inputs.ncols(),
                self.cfg.dims.input
            )));
        }
        Ok(match n {
            Some(n) => ds.head(n),
            None => ds,
        })
    }

    pub fn train_set(&self) -> Result<Dataset> {
        self.load_split(Split::Train, self.cfg.data.n_train)
    }

    pub fn test_set(&self, n: usize) -> Result<Dataset> {
        self.load_split(Split::Test, Some(n))
    }

    pub fn load_base(&self, name: &str) -> Result<BaseNet> {
        let net = load_base(&self.path(name))?;
        if net.dims != self.cfg.dims.base() {
            return Err(Error::Validation(format!(
                "{name} has dims {:?}, config expects {:?}",
                net.dims,
                self.cfg.dims.base()
            )));
        }
        Ok(net)
    }

    pub fn load_head(&self, name: &str) -> Result<RopustParams> {
        let p = load_ropust(&self.path(name))?;
        if p.dims != self.cfg.dims.ropust() {
            return Err(Error::Validation(format!(
                "{name} has dims {:?}, config expects {:?}",
                p.dims,
                self.cfg.dims.ropust()
            )));
        }
        Ok(p)
    }

    pub fn opu_checkpoint(&self) -> Result<OpuCheckpoint> {
        let path = self.path("opu.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save_report(&self, name: &str, report: &EvalReport) -> Result<()> {
        report.save(&self.path(&format!("{name}.json")))?;
        write_text(&self.path(&format!("{name}.csv")), &report.to_csv_string()?)?;
        write_text(
            &self.path(&format!("{name}_stages.csv")),
            &report.stages_csv_string()?,
        )
    }
}

/// Handle for a head evaluated with `flags`: sealed unless the flags need
/// the matrix in the forward pass or hand it to the attacker.
pub fn opu_for(ck: &OpuCheckpoint, flags: AblationFlags) -> Result<OpuHandle> {
    if flags.needs_lab_forward() || !flags.obfuscated || !flags.train_with_dfa {
        lab_handle(ck)
    } else {
        OpuHandle::restore(ck)
    }
}

#[cfg(feature = "lab")]
fn lab_handle(ck: &OpuCheckpoint) -> Result<OpuHandle> {
    OpuHandle::restore_lab(ck)
}

#[cfg(not(feature = "lab"))]
fn lab_handle(_: &OpuCheckpoint) -> Result<OpuHandle> {
    Err(Error::CapabilityDisabled(
        "this build has no lab OPU; rebuild with the `lab` feature",
    ))
}

/// Runs the cascade in fixed-size chunks keyed by sample index.
pub fn cascade<M: Differentiable + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &AttackConfig,
    stages: &[AttackKind],
) -> Result<CascadeReport> {
    let mut parts = Vec::new();
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + CHUNK).min(x.nrows());
        let ids: Vec<usize> = (start..end).collect();
        parts.push(auto_cascade(
            model,
            x.slice(s![start..end, ..]),
            &labels[start..end],
            &ids,
            cfg,
            stages,
        )?);
        start = end;
    }
    CascadeReport::concat(parts)
}

fn predict_all<M: Classifier + ?Sized>(model: &M, x: ArrayView2<f64>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(x.nrows());
    for chunk in x.axis_chunks_iter(Axis(0), CHUNK) {
        out.extend(model.predict(chunk)?);
    }
    Ok(out)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len().max(1) as f64
}

fn timed<T>(what: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    log::info!(
        "event=phase_done phase={what} seconds={:.1}",
        t.elapsed().as_secs_f64()
    );
    Ok(out)
}

/// Trains the base network on `train`; `eps = 0` gives the natural twin.
pub fn train_base_net(
    cfg: &ExperimentConfig,
    train: &Dataset,
    adv: &AdvTrainConfig,
) -> Result<BaseNet> {
    let mut net = BaseNet::new(cfg.dims.base(), cfg.seeds.base_init())?;
    adv_train(&mut net, train.view(), &train.labels, adv)?;
    Ok(net)
}

fn pgd_entry(tag: &str, net: &BaseNet, test: &Dataset, attack: &AttackConfig) -> Result<EvalEntry> {
    let r = cascade(net, test.view(), &test.labels, attack, &[AttackKind::Pgd])?;
    Ok(EvalEntry::from_cascade(tag, attack.eps, &r))
}

pub fn cmd_train_base(ws: &Workspace) -> Result<EvalReport> {
    let cfg = &ws.cfg;
    let train = ws.train_set()?;
    let test = ws.test_set(cfg.data.n_test)?;
    let mut report = EvalReport::new(Command::TrainBase.name(), ws.config_value()?);
    let net = timed("train_base", || {
        train_base_net(cfg, &train, &cfg.base_train)
    })?;
    save_base(&ws.path("base.ckpt"), &net)?;
    report
        .entries
        .push(pgd_entry("base", &net, &test, &cfg.attack)?);
    if cfg.natural_twin {
        let natural = AdvTrainConfig {
            eps: 0.0,
            ..cfg.base_train
        };
        let twin = timed("train_natural_twin", || {
            train_base_net(cfg, &train, &natural)
        })?;
        save_base(&ws.path("base_natural.ckpt"), &twin)?;
        report
            .entries
            .push(pgd_entry("base-natural", &twin, &test, &cfg.attack)?);
    }
    ws.save_report("train_base", &report)?;
    Ok(report)
}

/// Calibrates the projection on the initial hidden codes of the first
/// training samples, then trains the head with the configured rule.
pub fn train_head(
    cfg: &ExperimentConfig,
    features: ArrayView2<f64>,
    labels: &[usize],
    flags: AblationFlags,
    opu: &mut OpuHandle,
) -> Result<RopustParams> {
    let s = &cfg.seeds;
    let mut params = RopustParams::new(cfg.dims.ropust(), s.ropust_init(), s.r(), s.b())?;
    if !opu.is_calibrated() {
        let n = cfg.data.calibration_samples.min(features.nrows());
        let calib = features.slice(s![..n, ..]);
        let h = (calib.dot(&params.w1.t()) + &params.b1).mapv(binarize);
        let q = opu.calibrate(h.view())?;
        log::info!("event=opu_calibrated scale={:?}", q.out_scale);
    }
    train(&mut params, opu, features, labels, &cfg.ropust_train, flags)?;
    Ok(params)
}

pub fn cmd_finetune(ws: &Workspace) -> Result<EvalReport> {
    let cfg = &ws.cfg;
    let base = ws.load_base("base.ckpt")?;
    let frozen = freeze(&base);
    let train = ws.train_set()?;
    let test = ws.test_set(cfg.data.n_test)?;
    let feats = frozen.extract(train.view())?;
    let mut opu = if cfg.flags.needs_lab_forward() || !cfg.flags.train_with_dfa {
        let ck = OpuCheckpoint {
            seed: cfg.seeds.opu(),
            input_dim: cfg.dims.opu_in,
            output_dim: cfg.dims.opu_out,
            out_scale: None,
        };
        lab_handle(&ck)?
    } else {
        opu_new(cfg.dims.opu_in, cfg.dims.opu_out, cfg.seeds.opu())?
    };
    let params = timed("finetune", || {
        train_head(cfg, feats.view(), &train.labels, cfg.flags, &mut opu)
    })?;
    save_ropust(&ws.path("ropust.ckpt"), &params)?;
    let ck = opu.checkpoint();
    write_text(
        &ws.path("opu.json"),
        &(serde_json::to_string_pretty(&ck)? + "\n"),
    )?;

    let model = RopustClassifier::new(Some(&frozen), &params, &opu, cfg.flags)?;
    let mut report = EvalReport::new(Command::Finetune.name(), ws.config_value()?);
    for (tag, pred) in [
        ("base", predict_all(&base, test.view())?),
        (cfg.flags.tag().as_str(), predict_all(&model, test.view())?),
    ] {
        let acc = accuracy(&pred, &test.labels);
        report.entries.push(EvalEntry {
            tag: tag.to_string(),
            attacks: "none".into(),
            n_samples: test.len(),
            eps: 0.0,
            natural_accuracy: acc,
            robust_accuracy: acc,
            stages: Vec::new(),
            transfer_accuracy: None,
        });
    }
    ws.save_report("finetune", &report)?;
    Ok(report)
}

pub fn cmd_evaluate(ws: &Workspace) -> Result<EvalReport> {
    let cfg = &ws.cfg;
    let base = ws.load_base("base.ckpt")?;
    let frozen = freeze(&base);
    let params = ws.load_head("ropust.ckpt")?;
    let opu = opu_for(&ws.opu_checkpoint()?, cfg.flags)?;
    let test = ws.test_set(cfg.data.n_test)?;
    let model = RopustClassifier::new(Some(&frozen), &params, &opu, cfg.flags)?;
    let stages = AttackKind::cascade();
    let eps = cfg.attack.eps;

    let base_r = timed("cascade_base", || {
        cascade(&base, test.view(), &test.labels, &cfg.attack, &stages)
    })?;
    let head_r = timed("cascade_ropust", || {
        cascade(&model, test.view(), &test.labels, &cfg.attack, &stages)
    })?;
    let transfer_acc = if cfg.transfer == Default::default() {
        accuracy(&predict_all(&model, base_r.x_adv.view())?, &test.labels)
    } else {
        let ids: Vec<usize> = (0..test.len()).collect();
        timed("transfer", || {
            transfer_attack(
                &base,
                &model,
                test.view(),
                &test.labels,
                &ids,
                &cfg.attack,
                &stages,
                cfg.transfer,
            )
        })?
        .robust_accuracy()
    };

    let mut report = EvalReport::new(Command::Evaluate.name(), ws.config_value()?);
    report
        .entries
        .push(EvalEntry::from_cascade("base", eps, &base_r));
    let head_tag = cfg.flags.tag();
    report
        .entries
        .push(EvalEntry::from_cascade(&head_tag, eps, &head_r));
    report.entries.push(EvalEntry {
        tag: "transfer".into(),
        attacks: "cascade-on-base".into(),
        n_samples: test.len(),
        eps,
        natural_accuracy: head_r.clean_accuracy(),
        robust_accuracy: transfer_acc,
        stages: Vec::new(),
        transfer_accuracy: Some(transfer_acc),
    });
    write_text(
        &ws.path("evaluate_records_base.csv"),
        &records_csv_string("base", &base_r.records)?,
    )?;
    write_text(
        &ws.path("evaluate_records_ropust.csv"),
        &records_csv_string(&head_tag, &head_r.records)?,
    )?;
    ws.save_report("evaluate", &report)?;
    Ok(report)
}

/// The single-component removals, by report tag.
pub fn ablation_variants() -> Vec<(&'static str, AblationFlags)> {
    let full = AblationFlags::default();
    vec![
        ("ropust", full),
        (
            "ablation:no-binarize",
            AblationFlags {
                binarize: false,
                ..full
            },
        ),
        (
            "ablation:no-square",
            AblationFlags {
                square_nonlinearity: false,
                ..full
            },
        ),
        (
            "ablation:no-obfuscation",
            AblationFlags {
                obfuscated: false,
                ..full
            },
        ),
        (
            // backprop needs the matrix and a differentiable path
            "ablation:no-dfa",
            AblationFlags {
                binarize: false,
                obfuscated: false,
                train_with_dfa: false,
                ..full
            },
        ),
    ]
}

/// Whether a variant has to be retrained or reuses the full head.
fn needs_retraining(flags: AblationFlags) -> bool {
    !flags.binarize || !flags.square_nonlinearity || !flags.train_with_dfa
}

pub fn cmd_ablate(ws: &Workspace) -> Result<EvalReport> {
    let cfg = &ws.cfg;
    let base = ws.load_base("base.ckpt")?;
    let frozen = freeze(&base);
    let full = ws.load_head("ropust.ckpt")?;
    let ck = ws.opu_checkpoint()?;
    let test = ws.test_set(cfg.data.n_test)?;
    let train = ws.train_set()?;
    let eps = cfg.attack.eps;
    let mut train_feats = None;
    let mut report = EvalReport::new(Command::Ablate.name(), ws.config_value()?);

    for (tag, flags) in ablation_variants() {
        let mut opu = opu_for(&ck, flags)?;
        let params = if needs_retraining(flags) {
            if train_feats.is_none() {
                train_feats = Some(frozen.extract(train.view())?);
            }
            let feats = train_feats.as_ref().expect("set above");
            timed(&format!("train {tag}"), || {
                train_head(cfg, feats.view(), &train.labels, flags, &mut opu)
            })?
        } else {
            full.clone()
        };
        let model = RopustClassifier::new(Some(&frozen), &params, &opu, flags)?;
        for kind in [AttackKind::ApgdCe, AttackKind::Square] {
            let r = timed(&format!("{tag} {}", kind.name()), || {
                cascade(&model, test.view(), &test.labels, &cfg.attack, &[kind])
            })?;
            report.entries.push(EvalEntry::from_cascade(tag, eps, &r));
        }
    }

    let head = timed("retrain_plain_head", || {
        retrain_plain_classifier(
            &frozen,
            train.view(),
            &train.labels,
            cfg.dims.classes,
            &cfg.head_train,
        )
    })?;
    let defense_free = DefenseFree {
        features: frozen.clone(),
        head,
    };
    for (tag, model) in [
        ("base", &base as &dyn Differentiable),
        ("defense-free", &defense_free),
    ] {
        let r = timed(&format!("{tag} square"), || {
            cascade(
                model,
                test.view(),
                &test.labels,
                &cfg.attack,
                &[AttackKind::Square],
            )
        })?;
        report.entries.push(EvalEntry::from_cascade(tag, eps, &r));
    }
    ws.save_report("ablate", &report)?;
    Ok(report)
}

pub fn cmd_sweep(ws: &Workspace) -> Result<(EvalReport, SweepGrid)> {
    let cfg = &ws.cfg;
    let base = ws.load_base("base.ckpt")?;
    let frozen = freeze(&base);
    let params = ws.load_head("ropust.ckpt")?;
    let ck = ws.opu_checkpoint()?;
    let lab = lab_handle(&ck)?;
    let test = ws.test_set(cfg.retrieval.n_samples)?;
    let attack = AttackConfig {
        n_iter: cfg.retrieval.n_iter,
        ..cfg.attack
    };
    let full = AblationFlags::default();
    let grid = timed("sweep", || {
        retrieval_sweep(
            Some(&frozen),
            &params,
            &lab,
            full,
            test.view(),
            &test.labels,
            &cfg.retrieval.grid,
            &attack,
            cfg.seeds.retrieval(),
        )
    })?;
    grid.write_csv(&ws.path("sweep.csv"))?;
    write_text(
        &ws.path("sweep_grid.json"),
        &(serde_json::to_string_pretty(&grid)? + "\n"),
    )?;

    let mut report = EvalReport::new(Command::Sweep.name(), ws.config_value()?);
    report.sweep = Some(grid.summary());
    let white_box = AblationFlags {
        obfuscated: false,
        ..full
    };
    for (tag, flags) in [("ropust", full), ("ablation:no-obfuscation", white_box)] {
        let model = RopustClassifier::new(Some(&frozen), &params, &lab, flags)?;
        let r = cascade(
            &model,
            test.view(),
            &test.labels,
            &attack,
            &[AttackKind::ApgdCe],
        )?;
        report
            .entries
            .push(EvalEntry::from_cascade(tag, attack.eps, &r));
    }
    ws.save_report("sweep_report", &report)?;
    Ok((report, grid))
}

pub fn run(command: Command, ws: &Workspace) -> Result<()> {
    let t = Instant::now();
    match command {
        Command::TrainBase => {
            cmd_train_base(ws)?;
        }
        Command::Finetune => {
            cmd_finetune(ws)?;
        }
        Command::Evaluate => {
            cmd_evaluate(ws)?;
        }
        Command::Ablate => {
            cmd_ablate(ws)?;
        }
        Command::Sweep => {
            cmd_sweep(ws)?;
        }
        Command::All => {
            for c in [
                Command::TrainBase,
                Command::Finetune,
                Command::Evaluate,
                Command::Ablate,
                Command::Sweep,
            ] {
                run(c, ws)?;
            }
        }
    }
    log::info!(
        "event=command_done command={} seconds={:.1}",
        command.name(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Whether `path` holds every artifact `command` reads.
pub fn missing_inputs(out: &Path, command: Command) -> Vec<PathBuf> {
    let needed: &[&str] = match command {
        Command::TrainBase | Command::All => &[],
        Command::Finetune => &["base.ckpt"],
        Command::Evaluate | Command::Ablate | Command::Sweep => {
            &["base.ckpt", "ropust.ckpt", "opu.json"]
        }
    };
    needed
        .iter()
        .map(|n| out.join(n))
        .filter(|p| !p.exists())
        .collect()
}
