//! Command implementations shared by the CLI: mine, train, eval, ablate,
//! report and the synthetic-corpus generator.
//!
//! Every command is deterministic given its config and seeds, and writes no
//! wall-clock fields, so reruns produce byte-identical artifacts.

use crate::bank::{self, PromptSet};
use crate::config::{ConfigError, ExperimentConfig, Needs, VariantName};
use crate::data::{self, DataError, SegDataset, SynthConfig};
use crate::encoder::{self, EncoderError, JointEncoder};
use crate::eval::{miou, multi_run_summary, ConfusionMatrix, EvalError, EvalReport, RunSummary, ZeroUnionPolicy};
use crate::mining::{self, MiningConfig, MiningError};
use crate::model::{ModelConfig, ModelError, SegModel};
use crate::stats::{FeatureMap, LabelMap};
use crate::train::{
    build_source_style_set, effective_bank, load_checkpoint, run_schedule, save_checkpoint,
    RunPlan, TrainError, TrainState,
};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Bank(#[from] bank::BankError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bank channel count {bank} does not match backbone features {model}")]
    BankChannelMismatch { bank: usize, model: usize },
    #[error("{failed} of {total} ablation arms failed:\n{}", .details.join("\n"))]
    ArmsFailed {
        failed: usize,
        total: usize,
        details: Vec<String>,
    },
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn seeded(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Images encoded to low-level features, grouped into mining batches.
fn encode_batches(
    dataset: &SegDataset,
    enc: &dyn JointEncoder,
    batch_size: usize,
) -> Result<Vec<(Vec<FeatureMap>, Vec<LabelMap>)>, HarnessError> {
    let mut batches = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (img, lbl) in dataset.images.iter().zip(&dataset.labels) {
        features.push(enc.encode_low(img)?);
        labels.push(lbl.clone());
        if features.len() == batch_size {
            batches.push((std::mem::take(&mut features), std::mem::take(&mut labels)));
        }
    }
    if !features.is_empty() {
        batches.push((features, labels));
    }
    Ok(batches)
}

fn load_prompts(config: &ExperimentConfig) -> Result<PromptSet, HarnessError> {
    let path = config
        .prompts
        .as_ref()
        .expect("validated: prompt path present");
    let set = bank::load_prompt_set(path)?;
    match config.mining.cardinality {
        Some(n) => Ok(set.truncated(n)?),
        None => Ok(set),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MineLog {
    pub encoder: String,
    pub encoder_checksum: u64,
    pub prompt_variant: String,
    pub fragments_available: usize,
    pub class_names: Vec<String>,
    pub per_class_counts: Vec<usize>,
    pub total_entries: usize,
    pub pin_steps: usize,
    pub pin_step_size: f64,
    pub seed: u64,
    pub global: bool,
}

#[derive(Debug)]
pub struct MineOutcome {
    pub bank_path: PathBuf,
    pub log_path: PathBuf,
    pub log: MineLog,
}

/// Mines a style bank from the train split and writes it with a mining log.
pub fn cmd_mine(config: &ExperimentConfig) -> Result<MineOutcome, HarnessError> {
    config.validate(Needs::mine())?;
    let class_names = data::load_class_names(&config.dataset.class_names)?;
    let dataset = data::load_split(
        &config.dataset.manifest,
        &config.dataset.train_split,
        class_names.clone(),
    )?;
    let prompts = load_prompts(config)?;
    let enc = encoder::create(&config.encoder)?;
    let checksum_before = enc.parameter_checksum();
    let schedule = config.resolved_schedule();
    let batches = encode_batches(&dataset, enc.as_ref(), schedule.batch_size)?;
    let mining_config = MiningConfig {
        prompts: &prompts,
        template: config.mining.template(),
        class_names: &class_names,
        patches_per_map: config.grid_m,
        pin: config.mining.pin(),
        seed: config.seed,
    };
    let mut rng = seeded(config.seed, 0x4d49_4e45);
    let bank = if config.mining.global {
        mining::mine_global(&batches, enc.as_ref(), &mining_config, &mut rng)?
    } else {
        mining::mine_style_banks(&batches, enc.as_ref(), &mining_config, &mut rng)?
    };
    assert_eq!(
        enc.parameter_checksum(),
        checksum_before,
        "encoder must stay frozen during mining"
    );
    let bank_path = config.out_dir.join("bank.famixbank");
    if let Some(parent) = bank_path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    bank::save_bank(&bank, &bank_path)?;
    let log = MineLog {
        encoder: config.encoder.clone(),
        encoder_checksum: checksum_before,
        prompt_variant: prompts.variant().to_string(),
        fragments_available: prompts.cardinality(),
        class_names: bank.class_names().to_vec(),
        per_class_counts: bank.class_counts(),
        total_entries: bank.total_entries(),
        pin_steps: config.mining.pin_steps,
        pin_step_size: config.mining.pin_step_size,
        seed: config.seed,
        global: config.mining.global,
    };
    let log_path = config.out_dir.join("mine_log.json");
    write_file(&log_path, serde_json::to_string_pretty(&log)?.as_bytes())?;
    Ok(MineOutcome {
        bank_path,
        log_path,
        log,
    })
}

/// Builds a segmentation model whose trunk starts from the encoder weights.
pub fn build_model(
    enc: &dyn JointEncoder,
    num_classes: usize,
    seed: u64,
) -> Result<SegModel, HarnessError> {
    let mut rng = seeded(seed, 0x4d4f_4445);
    let mut model = SegModel::new(ModelConfig::desk(num_classes), &mut rng);
    if let Some(donor) = enc.trunk_donor() {
        model.init_trunk_from(donor);
    }
    Ok(model)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub final_loss: f64,
    pub iterations: u64,
}

/// Trains per the config: loads/builds the banks the mode needs, runs the
/// schedule, writes a checkpoint and a line-delimited log.
pub fn cmd_train(
    config: &ExperimentConfig,
    resume: Option<&Path>,
) -> Result<TrainOutcome, HarnessError> {
    config.validate(Needs::train())?;
    let preset = config.freeze_preset()?;
    let class_names = data::load_class_names(&config.dataset.class_names)?;
    let dataset = data::load_split(
        &config.dataset.manifest,
        &config.dataset.train_split,
        class_names.clone(),
    )?;
    let schedule = config.resolved_schedule();
    let mode = config.mode.to_mode();
    let enc = encoder::create(&config.encoder)?;
    // banks required by the arm
    let mined = if mode.needs_mined_bank() && !config.mode.vanilla_mixstyle {
        let path = config.bank.as_ref().expect("validated: bank path");
        let bank = bank::load_bank(path)?;
        if bank.channels() != enc.feature_channels() {
            return Err(HarnessError::BankChannelMismatch {
                bank: bank.channels(),
                model: enc.feature_channels(),
            });
        }
        Some(bank)
    } else {
        None
    };
    let source = if mode.needs_source_set() && !config.mode.vanilla_mixstyle {
        let batches = encode_batches(&dataset, enc.as_ref(), schedule.batch_size)?;
        Some(build_source_style_set(
            &batches,
            config.grid_m,
            enc.feature_channels(),
            &class_names,
        )?)
    } else {
        None
    };
    let mut bank_rng = seeded(config.seed, 0x4241_4e4b);
    let sampling_bank = if config.mode.vanilla_mixstyle {
        None
    } else {
        effective_bank(&mode, mined.as_ref(), source.as_ref(), &mut bank_rng)?
    };
    let mut state = match resume {
        Some(path) => {
            let mut ckpt = load_checkpoint(path)?;
            // the current config owns the horizon; the checkpoint only
            // carries weights, momentum and the resume position
            ckpt.state.schedule = schedule;
            ckpt.state.grid_m = config.grid_m;
            ckpt.state.seed = config.seed;
            ckpt.state
        }
        None => {
            let model = build_model(enc.as_ref(), class_names.len(), config.seed)?;
            TrainState::new(model, schedule, config.grid_m, config.seed)
        }
    };
    let plan = RunPlan {
        schedule,
        preset,
        mode,
        grid_m: config.grid_m,
        seed: config.seed,
        augment: data::AugmentConfig {
            hflip: config.hflip,
            color_jitter: config.color_jitter,
        },
        stop_after: None,
        vanilla_mixstyle: config.mode.vanilla_mixstyle,
    };
    let records = run_schedule(&mut state, &dataset, sampling_bank.as_ref(), &plan)?;
    let checkpoint_path = config.out_dir.join("checkpoint.famixckpt");
    if let Some(parent) = checkpoint_path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    save_checkpoint(&state, preset, &checkpoint_path)?;
    let mut log = Vec::new();
    for record in &records {
        serde_json::to_writer(&mut log, record)?;
        log.push(b'\n');
    }
    let log_path = config.out_dir.join("train_log.jsonl");
    write_file(&log_path, &log)?;
    let final_loss = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(TrainOutcome {
        checkpoint_path,
        log_path,
        final_loss,
        iterations: state.iteration,
    })
}

/// Argmax prediction at label resolution.
pub fn predict(model: &SegModel, image: &Array3<f64>) -> Result<LabelMap, HarnessError> {
    let (h, w, _) = image.dim();
    let (f1, low) = model.forward_low(image)?;
    let (logits, _) = model.forward_from_features(low, &f1, h, w);
    let k = logits.dim().2;
    let data = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = logits[[y, x, 0]];
        for c in 1..k {
            if logits[[y, x, c]] > best_v {
                best_v = logits[[y, x, c]];
                best = c;
            }
        }
        best as u32
    });
    Ok(LabelMap::new(data, k as u32, data::IGNORE_INDEX).expect("argmax labels valid"))
}

/// Accumulated evaluation of one checkpoint over one split.
pub fn evaluate_split(
    model: &SegModel,
    dataset: &SegDataset,
) -> Result<EvalReport, HarnessError> {
    let k = dataset.num_classes() as usize;
    let mut cm = ConfusionMatrix::new(k);
    for (img, gt) in dataset.images.iter().zip(&dataset.labels) {
        let pred = predict(model, img)?;
        cm.accumulate(&pred, gt)?;
    }
    Ok(miou(&cm, ZeroUnionPolicy::Exclude)?)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitEval {
    pub split: String,
    pub per_run: Vec<EvalReport>,
    pub summary: RunSummary,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub class_names: Vec<String>,
    pub splits: Vec<SplitEval>,
    pub mean_over_splits: f64,
}

/// Evaluates every configured checkpoint on every eval split; writes one TSV
/// and one JSON report per split plus a machine-readable overall file.
pub fn cmd_eval(config: &ExperimentConfig) -> Result<EvalOutcome, HarnessError> {
    config.validate(Needs::eval())?;
    let class_names = data::load_class_names(&config.dataset.class_names)?;
    let models: Vec<SegModel> = config
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p).map(|c| c.state.model))
        .collect::<Result<_, _>>()?;
    let mut splits = Vec::new();
    for split in &config.dataset.eval_splits {
        let dataset = data::load_split(&config.dataset.manifest, split, class_names.clone())?;
        let per_run: Vec<EvalReport> = models
            .iter()
            .map(|m| evaluate_split(m, &dataset))
            .collect::<Result<_, _>>()?;
        let summary = multi_run_summary(&per_run)?;
        let tsv = render_eval_tsv(&class_names, &per_run, &summary);
        write_file(
            &config.out_dir.join(format!("eval_{split}.tsv")),
            tsv.as_bytes(),
        )?;
        splits.push(SplitEval {
            split: split.clone(),
            per_run,
            summary,
        });
    }
    let mean_over_splits = if splits.is_empty() {
        f64::NAN
    } else {
        splits.iter().map(|s| s.summary.mean_miou).sum::<f64>() / splits.len() as f64
    };
    let outcome = EvalOutcome {
        class_names,
        splits,
        mean_over_splits,
    };
    write_file(
        &config.out_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&outcome)?.as_bytes(),
    )?;
    Ok(outcome)
}

/// Columns follow the class-names file order, then mIoU; one row per run and
/// mean/std summary rows.
fn render_eval_tsv(class_names: &[String], per_run: &[EvalReport], summary: &RunSummary) -> String {
    let mut out = String::from("run");
    for name in class_names {
        out.push('\t');
        out.push_str(name);
    }
    out.push_str("\tmIoU\n");
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{:.4}", 100.0 * x),
        None => "-".to_string(),
    };
    for (i, report) in per_run.iter().enumerate() {
        out.push_str(&format!("{i}"));
        for iou in &report.per_class_iou {
            out.push('\t');
            out.push_str(&fmt(*iou));
        }
        out.push('\t');
        out.push_str(&format!("{:.4}\n", 100.0 * report.miou));
    }
    out.push_str("mean");
    for mean in &summary.per_class_mean {
        out.push('\t');
        out.push_str(&fmt(*mean));
    }
    out.push('\t');
    out.push_str(&format!("{:.4}\n", 100.0 * summary.mean_miou));
    out.push_str(&format!(
        "std\t{}\t{:.4}\n",
        vec!["-"; class_names.len()].join("\t"),
        100.0 * summary.std_miou
    ));
    out
}

// -- ablation sweeps ------------------------------------------------------------

/// Named ablation grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Freeze x Augment x Mix component grid (8 arms).
    Components,
    /// Prompt construction: class name, random characters, style fragments.
    PromptConstruction,
    /// Prompt-set cardinality.
    Cardinality,
    /// Freeze-depth sweep.
    FreezeDepth,
    /// Mixing set: source, union, mined.
    MixingSet,
    /// Noise ladder plus vanilla mixing and the language arm.
    Noise,
    /// Global vs local style mining.
    GlobalLocal,
}

impl SweepKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "components" => Self::Components,
            "prompts" | "prompt_construction" => Self::PromptConstruction,
            "cardinality" => Self::Cardinality,
            "freeze" | "freeze_depth" => Self::FreezeDepth,
            "mixing" | "mixing_set" => Self::MixingSet,
            "noise" => Self::Noise,
            "global_local" | "global-local" => Self::GlobalLocal,
            _ => return None,
        })
    }

    pub fn dir_name(&self) -> &'static str {
        match self {
            Self::Components => "components",
            Self::PromptConstruction => "prompt_construction",
            Self::Cardinality => "cardinality",
            Self::FreezeDepth => "freeze_depth",
            Self::MixingSet => "mixing_set",
            Self::Noise => "noise",
            Self::GlobalLocal => "global_local",
        }
    }
}

struct Arm {
    name: String,
    /// Sweep coordinate for plots, when the sweep is numeric.
    x: Option<f64>,
    mutate: Box<dyn Fn(&mut ExperimentConfig)>,
}

fn arm(name: &str, x: Option<f64>, mutate: impl Fn(&mut ExperimentConfig) + 'static) -> Arm {
    Arm {
        name: name.to_string(),
        x,
        mutate: Box::new(mutate),
    }
}

fn sweep_arms(kind: SweepKind, base: &ExperimentConfig) -> Vec<Arm> {
    match kind {
        SweepKind::Components => {
            let mut arms = Vec::new();
            for freeze in [false, true] {
                for augment in [false, true] {
                    for mix in [false, true] {
                        let name = format!(
                            "freeze-{}_augment-{}_mix-{}",
                            if freeze { "on" } else { "off" },
                            if augment { "on" } else { "off" },
                            if mix { "on" } else { "off" }
                        );
                        arms.push(arm(&name, None, move |c| {
                            c.freeze = if freeze { "famix" } else { "ft" }.to_string();
                            apply_components(c, augment, mix);
                        }));
                    }
                }
            }
            arms
        }
        SweepKind::PromptConstruction => {
            vec![
                arm("cn", None, |c| {
                    c.mining.template_use_fragment = false;
                    c.mining.template_use_class_name = true;
                }),
                arm("rcp", None, |c| {
                    c.prompts = c.prompts_rcp.clone();
                    c.mining.template_use_fragment = true;
                    c.mining.template_use_class_name = false;
                }),
                arm("rsp", None, |c| {
                    c.mining.template_use_fragment = true;
                    c.mining.template_use_class_name = false;
                }),
                arm("rcp_cn", None, |c| {
                    c.prompts = c.prompts_rcp.clone();
                }),
                arm("rsp_cn", None, |_| {}),
            ]
        }
        SweepKind::Cardinality => [1usize, 5, 10, 20]
            .into_iter()
            .map(|n| {
                arm(&format!("r{n}"), Some(n as f64), move |c| {
                    c.mining.cardinality = Some(n);
                })
            })
            .collect(),
        SweepKind::FreezeDepth => ["l1", "l1-2", "l1-3", "l1-4p", "l1-4"]
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let preset = name.to_string();
                arm(name, Some(i as f64 + 1.0), move |c| {
                    c.freeze = preset.clone();
                })
            })
            .collect(),
        SweepKind::MixingSet => vec![
            arm("source", None, |c| {
                c.mode.mix_source = crate::config::MixSourceName::Source;
            }),
            arm("source_and_mined", None, |c| {
                c.mode.mix_source = crate::config::MixSourceName::SourceAndMined;
            }),
            arm("mined", None, |c| {
                c.mode.mix_source = crate::config::MixSourceName::Mined;
            }),
        ],
        SweepKind::Noise => {
            let mut arms = vec![arm("baseline", None, |c| {
                apply_components(c, false, false);
            })];
            for snr in [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, f64::INFINITY] {
                let name = if snr.is_infinite() {
                    "snr_inf".to_string()
                } else {
                    format!("snr_{snr:.0}")
                };
                arms.push(arm(&name, None, move |c| {
                    c.mode.variant = VariantName::Noise;
                    c.mode.snr_db = Some(snr);
                    c.mode.mix = true;
                    c.mode.mix_source = crate::config::MixSourceName::Mined;
                }));
            }
            arms.push(arm("mixstyle", None, |c| {
                apply_components(c, false, false);
                c.mode.vanilla_mixstyle = true;
            }));
            arms.push(arm("prompts", None, |_| {}));
            arms
        }
        SweepKind::GlobalLocal => vec![
            arm("global", None, |c| {
                c.mining.global = true;
            }),
            arm("local", None, |c| {
                c.mining.global = false;
            }),
        ],
    }
    .into_iter()
    .map(|mut a| {
        // arms share the base seed; derived dirs are set by the driver
        let base_seed = base.seed;
        let original = a.mutate;
        a.mutate = Box::new(move |c| {
            c.seed = base_seed;
            original(c);
        });
        a
    })
    .collect()
}

fn apply_components(c: &mut ExperimentConfig, augment: bool, mix: bool) {
    c.mode.vanilla_mixstyle = false;
    c.mode.mix = mix;
    if augment {
        c.mode.variant = VariantName::Language;
        c.mode.mix_source = crate::config::MixSourceName::Mined;
    } else {
        c.mode.variant = VariantName::None;
        c.mode.mix_source = crate::config::MixSourceName::Source;
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub x: Option<f64>,
    /// Mean mIoU per eval split, keyed by split name.
    pub miou_by_split: BTreeMap<String, f64>,
    pub mean_miou: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AblateOutcome {
    pub sweep: SweepKind,
    pub arms: Vec<ArmResult>,
    pub failed: Vec<String>,
    pub results_path: PathBuf,
}

/// Runs every arm of a sweep with shared seeds: mine (reusing identical
/// mining products), train, evaluate, then consolidate a table and plots.
pub fn cmd_ablate(base: &ExperimentConfig, kind: SweepKind) -> Result<AblateOutcome, HarnessError> {
    let sweep_dir = base.out_dir.join(kind.dir_name());
    let arms = sweep_arms(kind, base);
    let mut results: Vec<ArmResult> = Vec::new();
    let mut failed: Vec<String> = Vec::new();
    let mut bank_cache: BTreeMap<String, PathBuf> = BTreeMap::new();
    for arm in &arms {
        match run_arm(base, arm, &sweep_dir, &mut bank_cache) {
            Ok(result) => results.push(result),
            Err(e) => failed.push(format!("{}: {e}", arm.name)),
        }
    }
    let results_path = sweep_dir.join("results.json");
    let payload = serde_json::json!({
        "sweep": kind,
        "arms": results,
        "failed": failed,
    });
    write_file(&results_path, serde_json::to_string_pretty(&payload)?.as_bytes())?;
    write_file(
        &sweep_dir.join("results.tsv"),
        render_ablation_tsv(&results).as_bytes(),
    )?;
    if matches!(kind, SweepKind::Cardinality | SweepKind::FreezeDepth) {
        let x_label = match kind {
            SweepKind::Cardinality => "prompt-set cardinality",
            _ => "frozen depth",
        };
        let svg = render_sweep_svg(&results, x_label);
        write_file(&sweep_dir.join("sweep.svg"), svg.as_bytes())?;
    }
    Ok(AblateOutcome {
        sweep: kind,
        arms: results,
        failed,
        results_path,
    })
}

fn run_arm(
    base: &ExperimentConfig,
    arm: &Arm,
    sweep_dir: &Path,
    bank_cache: &mut BTreeMap<String, PathBuf>,
) -> Result<ArmResult, HarnessError> {
    let mut config = base.clone();
    (arm.mutate)(&mut config);
    config.out_dir = sweep_dir.join(&arm.name);
    let mode = config.mode.to_mode();
    // language arms need a mined bank; identical mining settings share one
    if mode.needs_mined_bank() && !config.mode.vanilla_mixstyle {
        let key = format!(
            "{}|{}|{:?}|{}|{}|{}",
            config.prompts.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            config.mining.global,
            config.mining.cardinality,
            config.mining.template_use_fragment,
            config.mining.template_use_class_name,
            config.seed,
        );
        let bank_path = match bank_cache.get(&key) {
            Some(path) => path.clone(),
            None => {
                let mut mine_config = config.clone();
                mine_config.out_dir = sweep_dir.join("banks").join(&arm.name);
                let outcome = cmd_mine(&mine_config)?;
                bank_cache.insert(key, outcome.bank_path.clone());
                outcome.bank_path
            }
        };
        config.bank = Some(bank_path);
    }
    let train_outcome = cmd_train(&config, None)?;
    let mut eval_config = config.clone();
    eval_config.checkpoints = vec![train_outcome.checkpoint_path.clone()];
    let eval_outcome = cmd_eval(&eval_config)?;
    let miou_by_split: BTreeMap<String, f64> = eval_outcome
        .splits
        .iter()
        .map(|s| (s.split.clone(), s.summary.mean_miou))
        .collect();
    Ok(ArmResult {
        name: arm.name.clone(),
        x: arm.x,
        mean_miou: eval_outcome.mean_over_splits,
        miou_by_split,
    })
}

fn render_ablation_tsv(results: &[ArmResult]) -> String {
    let mut splits: Vec<&String> = results
        .first()
        .map(|r| r.miou_by_split.keys().collect())
        .unwrap_or_default();
    splits.sort();
    let mut out = String::from("arm");
    for s in &splits {
        out.push('\t');
        out.push_str(s);
    }
    out.push_str("\tmean\n");
    for r in results {
        out.push_str(&r.name);
        for s in &splits {
            out.push('\t');
            out.push_str(&format!("{:.4}", 100.0 * r.miou_by_split[s.as_str()]));
        }
        out.push('\t');
        out.push_str(&format!("{:.4}\n", 100.0 * r.mean_miou));
    }
    out
}

/// Minimal static line chart; one polyline per eval split.
fn render_sweep_svg(results: &[ArmResult], x_label: &str) -> String {
    let (w, h, ml, mb, mt, mr) = (640.0, 420.0, 70.0, 50.0, 30.0, 20.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let mut splits: Vec<String> = results
        .first()
        .map(|r| r.miou_by_split.keys().cloned().collect())
        .unwrap_or_default();
    splits.sort();
    let xs: Vec<f64> = results
        .iter()
        .enumerate()
        .map(|(i, r)| r.x.unwrap_or(i as f64))
        .collect();
    let mut ys: Vec<f64> = Vec::new();
    for r in results {
        for v in r.miou_by_split.values() {
            ys.push(*v * 100.0);
        }
        ys.push(r.mean_miou * 100.0);
    }
    let (xmin, xmax) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (ymin, ymax) = (
        ys.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0,
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0,
    );
    let sx = |x: f64| ml + (x - xmin) / (xmax - xmin).max(1e-9) * plot_w;
    let sy = |y: f64| mt + (1.0 - (y - ymin) / (ymax - ymin).max(1e-9)) * plot_h;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr,
        h - mb,
        h - mb,
    );
    for (i, r) in results.iter().enumerate() {
        let x = sx(xs[i]);
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            h - mb + 16.0,
            r.name
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>\n",
        ml + plot_w / 2.0,
        h - 8.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">mIoU (%)</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));
    let mut series: Vec<(String, Vec<f64>)> = splits
        .iter()
        .map(|s| {
            (
                s.clone(),
                results.iter().map(|r| r.miou_by_split[s] * 100.0).collect(),
            )
        })
        .collect();
    series.push((
        "mean".to_string(),
        results.iter().map(|r| r.mean_miou * 100.0).collect(),
    ));
    for (si, (name, values)) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.1},{:.1}", sx(xs[i]), sy(*v)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        for (i, v) in values.iter().enumerate() {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(xs[i]),
                sy(*v)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            w - mr - 120.0,
            mt + 16.0 * (si as f64 + 1.0)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Re-renders tables and plots from the consolidated results of earlier
/// ablation runs under `dir`.
pub fn cmd_report(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut rendered = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })? {
        let entry = entry.map_err(|source| HarnessError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let results_path = entry.path().join("results.json");
        if !results_path.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&results_path).map_err(|source| HarnessError::Io {
            path: results_path.clone(),
            source,
        })?;
        let payload: serde_json::Value = serde_json::from_str(&text)?;
        let arms: Vec<ArmResult> = serde_json::from_value(payload["arms"].clone())?;
        let tsv_path = entry.path().join("results.tsv");
        write_file(&tsv_path, render_ablation_tsv(&arms).as_bytes())?;
        rendered.push(tsv_path);
        if arms.iter().any(|a| a.x.is_some()) {
            let svg_path = entry.path().join("sweep.svg");
            write_file(&svg_path, render_sweep_svg(&arms, "sweep").as_bytes())?;
            rendered.push(svg_path);
        }
    }
    Ok(rendered)
}

/// Materializes the synthetic two-domain corpus plus the shipped prompt sets.
pub fn cmd_synth(dir: &Path, seed: u64) -> Result<PathBuf, HarnessError> {
    let manifest = data::write_corpus(
        dir,
        SynthConfig {
            seed,
            ..SynthConfig::default()
        },
    )?;
    Ok(manifest)
}

/// Writes training log records as line-delimited JSON.
pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<(), HarnessError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").expect("vec write");
    }
    write_file(path, &buf)
}
