mod config;
mod data;
mod head;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use evdistill::distill::sample_positions;
use evdistill::dump::TensorDump;
use evdistill::encoder::{count_total, count_trainable, forward_capture, TrainablePlan, ViTConfig, ViTParams};
use evdistill::events::{normalize_volume, read_events, voxelize_with, Accumulation, TimeWindow, DEFAULT_BINS, DEFAULT_WINDOW_US};
use evdistill::metrics::{compute_pooled, read_rle, AiouDenominator, MaskSet, MetricsReport};
use evdistill::numeric::Tensor;
use evdistill::significance::{convergence_diagnostic, token_significance_horizon, TransitionStack, DEFAULT_BETA};
use evdistill::synth::{random_scene, SceneSpec};
use evdistill::trainer::{
    check_pipeline_gradients, format_history, load_checkpoint, save_checkpoint, teacher_captures, train_steps, TrainState,
    TrainSample,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{load_config, RunConfig};
use crate::data::{load_data, load_dir, sample_dirs, write_sample, LoadedSample, MASKS_FILE};
use crate::head::{MaskHead, HEAD_FILE};

#[derive(Parser)]
#[command(name = "evdistill", version, about = "Event-to-image encoder distillation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Distill a student encoder; writes checkpoint/, loss.csv and config.toml.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score predicted instance masks against ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Trained run checkpoint; masks come from its linear head.
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of `<sample>/masks.rle` predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, value_enum, default_value = "mask-total")]
        denominator: Denominator,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token significance and prefix-convergence curve from an attention dump.
    Significance {
        /// Tensor dump of `n` row-stochastic `k x k` attention maps, in layer order.
        #[arg(long)]
        attention: PathBuf,
        /// Single layer (1-based); every layer when omitted.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trainable-parameter table.
    Params {
        /// Model shape from a run config; ViT-B when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Plans to count; the reference rows when omitted.
        #[arg(long)]
        plan: Vec<String>,
    },
    /// Bin an event text file into an H x W x B tensor dump.
    Voxelize {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long, default_value_t = 0)]
        start: u64,
        #[arg(long, default_value_t = DEFAULT_WINDOW_US)]
        end: u64,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Accumulate polarity signs instead of counts.
        #[arg(long)]
        signed: bool,
        /// Scale each bin by its peak magnitude.
        #[arg(long)]
        normalize: bool,
    },
    /// Render synthetic sample directories.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Scene description; random scenes when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        shapes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Central-difference check of the full student objective.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Elements probed per parameter tensor.
        #[arg(long, default_value_t = 8)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Check at the teacher copy (step 0 of training) instead of an
        /// independently initialized student.
        #[arg(long)]
        from_teacher: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Denominator {
    MaskTotal,
    ImageArea,
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn final_embedding(params: &ViTParams, events: &Tensor) -> Result<Tensor> {
    let cap = forward_capture(params, events)?;
    Ok(cap.embeddings.last().expect("at least the patch embedding").clone())
}

fn fit_head(params: &ViTParams, data: &[LoadedSample], ridge: f64) -> Result<MaskHead> {
    let embs: Vec<Tensor> = data
        .par_iter()
        .map(|s| final_embedding(params, &s.train.events))
        .collect::<Result<_>>()?;
    let pairs: Vec<(&Tensor, &MaskSet)> = embs.iter().zip(data).map(|(e, s)| (e, &s.masks)).collect();
    let cfg = &params.config;
    MaskHead::fit(&pairs, cfg.grid(), cfg.patch_size, ridge)
}

fn cmd_train(config: &Path, out: Option<PathBuf>, resume: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let out = out.unwrap_or_else(|| cfg.output.dir.clone());
    let data = load_data(&cfg.data, cfg.model.img_size)?;
    let train_data: Vec<TrainSample> = data.iter().map(|s| s.train.clone()).collect();
    let teacher = ViTParams::init(cfg.model, cfg.teacher_seed)?;
    let ckpt = out.join("checkpoint");
    let mut state = if resume {
        let (state, _) = load_checkpoint(&ckpt).with_context(|| format!("resuming from {}", ckpt.display()))?;
        ensure!(state.params.config == cfg.model, "checkpoint model shape differs from config `model`");
        state
    } else {
        TrainState::from_teacher(&teacher, cfg.train.plan.clone(), cfg.train.seed)?
    };
    let caps = teacher_captures(&teacher, &train_data)?;
    let total = cfg.train.total_steps();
    let mut history = Vec::new();
    while state.step < total {
        let chunk = train_steps(&caps, &mut state, &train_data, &cfg.train, 50)?;
        if let Some(last) = chunk.last() {
            eprintln!("step {}/{total} loss {:.6e} lr {:e}", last.step, last.total, last.lr);
        }
        history.extend(chunk);
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    save_checkpoint(&ckpt, &state, &cfg.train)?;
    let head = fit_head(&state.params, &data, cfg.eval.ridge)?;
    std::fs::write(ckpt.join(HEAD_FILE), serde_json::to_string_pretty(&head)?)?;
    let mut csv_path = out.join("loss.csv");
    if resume {
        csv_path = out.join(format!("loss_from_{}.csv", total - history.len() as u64));
    }
    std::fs::write(&csv_path, format_history(&history))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn pooled_summary(r: &MetricsReport, frames: usize) -> String {
    format!(
        "{{\"frames\":{frames},\"mP\":{:.6},\"mR\":{:.6},\"mIoU\":{:.6},\"aIoU\":{:.6},\"tp\":{},\"fp\":{},\"fn\":{}}}",
        r.m_p, r.m_r, r.m_iou, r.a_iou, r.tp, r.fp, r.fn_
    )
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// Per-frame reports and the pooled aggregate; frames without ground truth report `null`.
fn eval_report(gt: &[(String, MaskSet)], pred: &[MaskSet], denom: AiouDenominator) -> Result<String> {
    let per: Vec<Option<MetricsReport>> = gt
        .par_iter()
        .zip(pred)
        .map(|((name, g), p)| {
            if g.is_empty() {
                return Ok(None);
            }
            compute_pooled(&[(g, p)], denom).map(Some).with_context(|| format!("frame {name}"))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(&MaskSet, &MaskSet)> = gt.iter().map(|(_, g)| g).zip(pred).collect();
    let pooled = compute_pooled(&pairs, denom).context("no ground-truth instances in any frame")?;
    let mut s = String::from("{\"frames\":[");
    for (i, ((name, _), r)) in gt.iter().zip(&per).enumerate() {
        if i > 0 {
            s.push(',');
        }
        let report = r.as_ref().map_or("null".to_string(), |r| r.to_json());
        let _ = write!(s, "{{\"name\":{},\"report\":{report}}}", json_string(name));
    }
    let _ = writeln!(s, "],\"aggregate\":{}}}", pooled_summary(&pooled, gt.len()));
    Ok(s)
}

fn cmd_eval(
    data: &Path,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    threshold: f64,
    denom: AiouDenominator,
) -> Result<String> {
    let (gt, pred): (Vec<(String, MaskSet)>, Vec<MaskSet>) = match (checkpoint, predictions) {
        (Some(ckpt), _) => {
            let samples = load_dir(data)?;
            let (state, _) = load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let head_path = ckpt.join(HEAD_FILE);
            let head: MaskHead = serde_json::from_str(
                &std::fs::read_to_string(&head_path).with_context(|| format!("reading {}", head_path.display()))?,
            )?;
            let cfg = state.params.config;
            ensure!(
                head.grid == cfg.grid() && head.patch == cfg.patch_size,
                "mask head does not fit the checkpoint model"
            );
            for s in &samples {
                ensure!(
                    s.train.events.dims() == [cfg.img_size, cfg.img_size, cfg.in_channels],
                    "sample {} is {:?}, checkpoint expects {}x{}x{}",
                    s.name,
                    s.train.events.dims(),
                    cfg.img_size,
                    cfg.img_size,
                    cfg.in_channels
                );
            }
            let pred = samples
                .par_iter()
                .map(|s| head.predict(&final_embedding(&state.params, &s.train.events)?, threshold))
                .collect::<Result<_>>()?;
            (samples.into_iter().map(|s| (s.name, s.masks)).collect(), pred)
        }
        (None, Some(pdir)) => {
            ensure!(pdir.is_dir(), "predictions dir {} does not exist", pdir.display());
            let mut gt = Vec::new();
            let mut pred = Vec::new();
            for dir in sample_dirs(data)? {
                let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let g = read_rle(dir.join(MASKS_FILE))?;
                let p_path = pdir.join(&name).join(MASKS_FILE);
                let p = if p_path.is_file() { read_rle(&p_path)? } else { MaskSet::new(g.height, g.width) };
                gt.push((name, g));
                pred.push(p);
            }
            (gt, pred)
        }
        (None, None) => bail!("eval needs --checkpoint or --predictions"),
    };
    eval_report(&gt, &pred, denom)
}

fn cmd_significance(path: &Path, layer: Option<usize>, beta: f64, horizon: Option<usize>) -> Result<String> {
    let dump = TensorDump::read(path).with_context(|| format!("reading attention dump {}", path.display()))?;
    ensure!(!dump.entries.is_empty(), "attention dump is empty");
    let attn: Vec<Tensor> = dump.entries.iter().map(|e| e.to_tensor()).collect::<evdistill::error::Result<_>>()?;
    let k = attn[0].dims().first().copied().unwrap_or(0);
    for (e, a) in dump.entries.iter().zip(&attn) {
        ensure!(a.dims() == [k, k], "entry `{}` is {:?}, expected {k}x{k}", e.name, a.dims());
    }
    let stack = TransitionStack::from_attention(&attn)?;
    let layers: Vec<usize> = match layer {
        Some(s) => {
            ensure!((1..=stack.depth()).contains(&s), "layer {s} outside 1..={}", stack.depth());
            vec![s]
        }
        None => (1..=stack.depth()).collect(),
    };
    let e = vec![1.0; k];
    let mut out = String::from("kind,layer,index,value\n");
    for s in layers {
        let sig = token_significance_horizon(&stack, s, beta, &e, horizon)?;
        for (i, v) in sig.values.iter().enumerate() {
            let _ = writeln!(out, "significance,{s},{i},{v:e}");
        }
    }
    for (i, v) in convergence_diagnostic(&stack).iter().enumerate() {
        let _ = writeln!(out, "diagnostic,{},,{v:e}", i + 1);
    }
    Ok(out)
}

/// The fine-tuning and adapter rows of the reference parameter table.
const REFERENCE_PLANS: [&str; 7] = [
    "embed",
    "embed+mlps:3,6,9,12",
    "embed+all-mlps",
    "lora:16:3,6,9,12:mlp",
    "lora:64:3,6,9,12:mlp",
    "lora:256:3,6,9,12:mlp",
    "lora:16:1..=12:all",
];

fn cmd_params(config: Option<&Path>, plans: &[String]) -> Result<String> {
    let model = match config {
        Some(p) => load_config(p)?.model,
        None => ViTConfig::vit_b(),
    };
    let plans: Vec<String> = if plans.is_empty() {
        REFERENCE_PLANS.iter().map(|s| s.to_string()).collect()
    } else {
        plans.to_vec()
    };
    let total = count_total(&model)?;
    let mut out = format!("{:<56} {:>12} {:>9} {:>8}\n", "plan", "trainable", "millions", "share%");
    for p in &plans {
        let plan: TrainablePlan = p.parse().with_context(|| format!("invalid plan `{p}`"))?;
        let n = count_trainable(&model, &plan).with_context(|| format!("plan `{p}`"))?;
        let _ = writeln!(
            out,
            "{:<56} {n:>12} {:>9.1} {:>8.2}",
            plan.to_string(),
            n as f64 / 1e6,
            100.0 * n as f64 / total as f64
        );
    }
    let _ = writeln!(out, "{:<56} {total:>12} {:>9.1} {:>8.2}", "total", total as f64 / 1e6, 100.0);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_voxelize(
    events: &Path,
    out: &Path,
    height: Option<usize>,
    width: Option<usize>,
    window: (u64, u64),
    bins: usize,
    signed: bool,
    normalize: bool,
) -> Result<()> {
    let file = read_events(events)?;
    let (h, w) = match (height, width, file.sensor) {
        (Some(h), Some(w), _) => (h, w),
        (None, None, Some(hw)) => hw,
        _ => bail!("sensor size unknown: pass --height and --width or add a `# H=<h> W=<w>` header"),
    };
    let mode = if signed { Accumulation::Signed } else { Accumulation::Count };
    let mut vol = voxelize_with(&file.events, TimeWindow::new(window.0, window.1)?, h, w, bins, mode)?;
    if normalize {
        vol = normalize_volume(&vol);
    }
    let mut dump = TensorDump::new();
    dump.push("volume", &vol.grid);
    dump.write(out)?;
    Ok(())
}

fn cmd_synth(out: &Path, scene: Option<&Path>, count: usize, size: usize, shapes: usize, seed: u64) -> Result<()> {
    ensure!(count > 0, "count must be positive");
    let base = match scene {
        Some(p) => Some(toml::from_str::<SceneSpec>(&std::fs::read_to_string(p)?).with_context(|| format!("scene {}", p.display()))?),
        None => None,
    };
    for i in 0..count {
        let spec = match &base {
            Some(s) => SceneSpec {
                seed: s.seed.wrapping_add(i as u64),
                ..s.clone()
            },
            None => random_scene(size, size, shapes, seed.wrapping_add(i as u64)),
        };
        write_sample(&out.join(format!("sample_{i:03}")), &spec)?;
    }
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, step: f64, per_tensor: usize, tolerance: f64, from_teacher: bool) -> Result<bool> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::profile(config::Profile::Tiny),
    };
    let data = load_data(&cfg.data, cfg.model.img_size)?;
    let sample = &data[0].train;
    let teacher = ViTParams::init(cfg.model, cfg.teacher_seed)?;
    // A teacher copy sits where many L1 residuals are near zero, so the
    // difference stencil can straddle kinks; a separate init avoids that.
    let base = if from_teacher {
        teacher.clone()
    } else {
        ViTParams::init(cfg.model, cfg.teacher_seed.wrapping_add(1))?
    };
    let student = TrainState::from_teacher(&base, cfg.train.plan.clone(), cfg.train.seed)?;
    let cap = &teacher_captures(&teacher, std::slice::from_ref(sample))?[0];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let positions = sample_positions(cfg.model.tokens(), cfg.train.distill.mixing_ratio, &mut rng)?;
    let groups = check_pipeline_gradients(
        cap,
        &student.params,
        &cfg.train.plan,
        sample,
        &positions,
        &cfg.train.distill,
        step,
        per_tensor,
        cfg.train.seed,
    )?;
    let mut worst = 0.0f64;
    for g in &groups {
        println!("{:<32} {:>6} {:.3e}", g.name, g.checked, g.max_rel_error);
        worst = worst.max(g.max_rel_error);
    }
    println!("max_rel_error {worst:e}");
    Ok(worst <= tolerance)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train { config, out, resume } => cmd_train(&config, out, resume)?,
        Cmd::Eval {
            data,
            checkpoint,
            predictions,
            threshold,
            denominator,
            out,
        } => {
            let denom = match denominator {
                Denominator::MaskTotal => AiouDenominator::MaskTotal,
                Denominator::ImageArea => AiouDenominator::ImageArea,
            };
            let report = cmd_eval(&data, checkpoint.as_deref(), predictions.as_deref(), threshold, denom)?;
            emit(&report, out.as_deref())?;
        }
        Cmd::Significance {
            attention,
            layer,
            beta,
            horizon,
            out,
        } => emit(&cmd_significance(&attention, layer, beta, horizon)?, out.as_deref())?,
        Cmd::Params { config, plan } => print!("{}", cmd_params(config.as_deref(), &plan)?),
        Cmd::Voxelize {
            events,
            out,
            height,
            width,
            start,
            end,
            bins,
            signed,
            normalize,
        } => cmd_voxelize(&events, &out, height, width, (start, end), bins, signed, normalize)?,
        Cmd::Synth {
            out,
            scene,
            count,
            size,
            shapes,
            seed,
        } => cmd_synth(&out, scene.as_deref(), count, size, shapes, seed)?,
        Cmd::Gradcheck {
            config,
            step,
            per_tensor,
            tolerance,
            from_teacher,
        } => {
            if !cmd_gradcheck(config.as_deref(), step, per_tensor, tolerance, from_teacher)? {
                eprintln!("gradient check above tolerance {tolerance:e}");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
