//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use bonet::association::{build_cost_matrix, hungarian_assign};
use bonet::checkpoint::Checkpoint;
use bonet::data::{generate_scene, load_scene, save_scene, DatasetManifest, GenConfig, SceneEntry, Split};
use bonet::evaluation::{evaluate, EvalConfig};
use bonet::geometry::BBox;
use bonet::gradcheck::{self, Corruption, GradCheckConfig};
use bonet::losses::GradientMode;
use bonet::network::{LossConfig, ModelConfig};
use bonet::training::{append_history, write_history, TrainConfig, Trainer};

use crate::manifest::{now, RunManifest};
use crate::{AssignArgs, EvalArgs, GenArgs, GradMode, GradcheckArgs, SplitArg, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SCENES_CSV: &str = "scenes.csv";

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        anyhow::Error::new(bonet::Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        })
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenFile {
    pub gen: GenConfig,
    pub train_scenes: usize,
    pub test_scenes: usize,
}

impl Default for GenFile {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            train_scenes: 200,
            test_scenes: 50,
        }
    }
}

pub fn gen(args: GenArgs) -> Result<ExitCode> {
    let started = now();
    let mut cfg: GenFile = read_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.gen.seed = s;
    }
    if let Some(n) = args.train_scenes {
        cfg.train_scenes = n;
    }
    if let Some(n) = args.test_scenes {
        cfg.test_scenes = n;
    }
    cfg.gen.validate()?;
    ensure_dir(&args.out)?;

    let mut manifest = DatasetManifest::new(cfg.gen.clone());
    let total = cfg.train_scenes + cfg.test_scenes;
    for i in 0..total {
        let scene = generate_scene(&cfg.gen, i as u64)?;
        let file = format!("{}.json", scene.id);
        save_scene(&scene, &args.out.join(&file))?;
        manifest.scenes.push(SceneEntry {
            file,
            split: if i < cfg.train_scenes { Split::Train } else { Split::Test },
            instances: scene.n_instances(),
        });
    }
    manifest.save(&args.out)?;
    log::info!("wrote {total} scenes to {}", args.out.display());

    let mut run = RunManifest::new("gen", Some(cfg.gen.seed), to_value(&cfg), started);
    run.artifacts.push(args.out.join(DatasetManifest::FILE_NAME));
    run.append_to(&args.out)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let started = now();
    let history_path = args.out.join(HISTORY_FILE);
    let checkpoint_path = args.out.join(CHECKPOINT_FILE);

    let mut trainer = match &args.resume {
        Some(path) => {
            if args.config.is_some() || args.seed.is_some() || args.grad_mode.is_some() {
                bail!("--resume takes its configuration from the checkpoint; only --epochs may be changed");
            }
            let ck = Checkpoint::load(path)?;
            let mut trainer = ck.into_trainer()?;
            if let Some(e) = args.epochs {
                trainer = trainer.with_epochs(e)?;
            }
            trainer
        }
        None => {
            let mut cfg: TrainFile = read_config(args.config.as_deref())?;
            if let Some(s) = args.seed {
                cfg.train.seed = s;
                cfg.model.seed = s;
            }
            if let Some(m) = args.grad_mode {
                cfg.train.loss.gradient_mode = match m {
                    GradMode::Zero => GradientMode::ZeroThroughAssignment,
                    GradMode::StraightThrough => GradientMode::straight_through(),
                };
            }
            if let Some(e) = args.epochs {
                cfg.train.epochs = e;
            }
            Trainer::new(cfg.model, cfg.train)?
        }
    };

    let dataset = DatasetManifest::load(&args.data)?;
    let scenes = dataset.load_split(&args.data, Split::Train)?;
    if scenes.is_empty() {
        bail!("dataset {} has no training scenes", args.data.display());
    }
    let data = trainer.training_set(&scenes)?;
    ensure_dir(&args.out)?;
    write_history(&history_path, trainer.history())?;
    log::info!(
        "training on {} scenes ({} blocks), {} parameters, epochs {}..{}",
        scenes.len(),
        data.len(),
        trainer.model().params().num_scalars(),
        trainer.epoch(),
        trainer.config().epochs
    );
    trainer.run(&data, |t, record| {
        append_history(&history_path, record)?;
        Checkpoint::from_trainer(t).save(&checkpoint_path)
    })?;
    if trainer.history().is_empty() || args.resume.is_some() && !checkpoint_path.exists() {
        Checkpoint::from_trainer(&trainer).save(&checkpoint_path)?;
    }

    let echo = TrainFile {
        model: trainer.model().config().clone(),
        train: trainer.config().clone(),
    };
    let mut run = RunManifest::new("train", Some(trainer.config().seed), to_value(&echo), started);
    run.artifacts = vec![checkpoint_path, history_path];
    run.append_to(&args.out)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalFile {
    /// When present, must equal the checkpoint's model configuration.
    pub model: Option<ModelConfig>,
    pub eval: Option<EvalConfig>,
}

pub fn eval(args: EvalArgs) -> Result<ExitCode> {
    let started = now();
    let ck = Checkpoint::load(&args.checkpoint)?;
    let file: EvalFile = read_config(args.config.as_deref())?;
    if let Some(m) = &file.model {
        if *m != ck.model_config {
            return Err(bonet::Error::ConfigMismatch(format!(
                "model section of {} differs from the checkpoint's model configuration",
                args.config.as_deref().unwrap_or(Path::new("config")).display()
            ))
            .into());
        }
    }
    let mut cfg = file.eval.unwrap_or(EvalConfig {
        blocking: ck.train_config.blocking,
        ..EvalConfig::default()
    });
    if let Some(s) = args.score_thresh {
        cfg.extract.score_thresh = s;
    }
    if let Some(m) = args.mask_thresh {
        cfg.extract.mask_thresh = m;
    }
    let model = ck.model()?;
    let dataset = DatasetManifest::load(&args.data)?;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let scenes = dataset.load_split(&args.data, split)?;
    let report = evaluate(&model, &scenes, &cfg)?;

    ensure_dir(&args.out)?;
    let report_path = args.out.join(REPORT_FILE);
    let csv_path = args.out.join(SCENES_CSV);
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    fs::write(&csv_path, report.scenes_csv()).with_context(|| format!("writing {}", csv_path.display()))?;
    println!("scenes  {}", scenes.len());
    for c in &report.per_class {
        println!(
            "class {:>2}  AP {:.3}  prec {:.3}  rec {:.3}  (gt {}, pred {})",
            c.class, c.ap, c.precision, c.recall, c.ground_truth, c.predictions
        );
    }
    println!("mAP@{:.2} {:.3}  mPrec {:.3}  mRec {:.3}", report.iou_threshold, report.mean_ap, report.mprec, report.mrec);

    let mut run = RunManifest::new("eval", None, to_value(&cfg), started);
    run.artifacts = vec![report_path, csv_path];
    run.append_to(&args.out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let started = now();
    let model_cfg = match &args.config {
        Some(_) => read_config::<ModelConfig>(args.config.as_deref())?,
        None => gradcheck::tiny_model_config(),
    };
    let mut cfg = GradCheckConfig::default();
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.instances {
        cfg.instances = n;
    }
    let corruption = if args.corrupt_gradient {
        Corruption::ScaleFirstEntry
    } else {
        Corruption::None
    };
    let report = gradcheck::run(&model_cfg, &cfg, corruption)?;
    print!("{}", report.table());
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let path = out.join("gradcheck.json");
        fs::write(&path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
        let mut run = RunManifest::new(
            "gradcheck",
            Some(cfg.seed),
            serde_json::json!({ "model": model_cfg, "check": cfg }),
            started,
        );
        run.artifacts.push(path);
        run.append_to(out)?;
    }
    if report.all_passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed");
        Ok(ExitCode::from(2))
    }
}

#[derive(Debug, Serialize)]
struct AssignDump {
    costs: Vec<Vec<f64>>,
    ed: Vec<Vec<f64>>,
    siou: Vec<Vec<f64>>,
    ces: Vec<Vec<f64>>,
    gt_to_pred: Vec<usize>,
    total_cost: f64,
}

fn rows(h: usize, t: usize, f: impl Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
    (0..h).map(|i| (0..t).map(|j| f(i, j)).collect()).collect()
}

pub fn assign(args: AssignArgs) -> Result<ExitCode> {
    let scene = load_scene(&args.scene)?;
    let text = fs::read_to_string(&args.boxes).with_context(|| format!("reading {}", args.boxes.display()))?;
    let boxes: Vec<BBox> = serde_json::from_str(&text).map_err(|e| {
        anyhow::Error::new(bonet::Error::Parse {
            path: PathBuf::from(&args.boxes),
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        })
    })?;
    let loss: LossConfig = read_config(args.config.as_deref())?;
    loss.validate()?;
    let gts: Vec<BBox> = scene.instances.iter().map(|i| i.bbox).collect();
    if gts.is_empty() {
        bail!("scene {} has no instances to assign", scene.id);
    }
    let c = build_cost_matrix(&boxes, &gts, &scene.cloud, &loss.clamp, &loss.weights)?;
    let a = hungarian_assign(&c)?;
    let bd = c.breakdown().expect("built with breakdown");
    let (h, t) = (boxes.len(), gts.len());
    let dump = AssignDump {
        costs: rows(h, t, |i, j| c.costs()[[i, j]]),
        ed: rows(h, t, |i, j| bd.ed[[i, j]]),
        siou: rows(h, t, |i, j| bd.siou[[i, j]]),
        ces: rows(h, t, |i, j| bd.ces[[i, j]]),
        gt_to_pred: a.gt_to_pred().to_vec(),
        total_cost: a.total_cost(&c),
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&dump)?);
        return Ok(ExitCode::SUCCESS);
    }
    println!("{:>5} {:>5} {:>12} {:>12} {:>12} {:>12}", "pred", "gt", "cost", "ed", "siou", "ces");
    for i in 0..boxes.len() {
        for j in 0..gts.len() {
            let mark = if a.gt_to_pred()[j] == i { "*" } else { "" };
            println!(
                "{:>5} {:>5} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {mark}",
                i,
                j,
                dump.costs[i][j],
                dump.ed[i][j],
                dump.siou[i][j],
                dump.ces[i][j]
            );
        }
    }
    for (j, i) in a.gt_to_pred().iter().enumerate() {
        println!("gt {j} -> pred {i}");
    }
    println!("total cost {:.6}", dump.total_cost);
    Ok(ExitCode::SUCCESS)
}
