//! Command-line interface: dataset synthesis, training, evaluation
//! protocols, masking statistics, diagnostics export, channel-token
//! fine-tuning and gradient verification.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mcmae_core::data::{self, LabeledSample, SynthSpec};
use mcmae_core::decoder;
use mcmae_core::encoder;
use mcmae_core::fusion::PoolMode;
use mcmae_core::harness::{
    self, collect_mask_stats, config_hash, evaluate, leave_k_out_sweep, load_checkpoint,
    save_checkpoint, Checkpoint, EvalReport, TrainConfig,
};
use mcmae_core::losses::ZeroRegularizer;
use mcmae_core::masking::{MaskConfig, MaskPlan, Strategy};
use mcmae_core::model::{ModelConfig, ModelParams};
use mcmae_core::numerics::{verify_backend, Tape};
use mcmae_core::tokenizer::{self, MultiChannelImage};

#[derive(Parser)]
#[command(
    name = "mcmae",
    about = "Multi-channel masked-autoencoder ViT harness",
    version
)]
struct Cli {
    /// Emit machine-readable JSON on stdout where applicable.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into a directory of MCIF files.
    SynthData(SynthDataArgs),
    /// Train a model on an MCIF dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a channel subset.
    Eval(EvalArgs),
    /// Leave-k-channels-out evaluation sweep.
    Sweep(SweepArgs),
    /// Export empirical masking statistics as CSV.
    MaskStats(MaskStatsArgs),
    /// Export patch-to-channel and memory attention matrices as CSV.
    AttnMap(AttnMapArgs),
    /// Export original/masked/reconstructed pixels as CSV.
    ReconDump(ReconDumpArgs),
    /// Fine-tune channel tokens for novel channel ids.
    FinetuneChannels(FinetuneArgs),
    /// Verify backend capabilities and loss gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    /// JSON file holding the dataset spec; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override the spec seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file holding the training config.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory produced by synth-data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines training log path.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split subdirectory to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated channel ids; all training channels when omitted.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<u16>>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Channels left out per evaluation.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Optional CSV output path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct MaskStatsArgs {
    #[arg(long, default_value = "dcp")]
    strategy: String,
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    c: usize,
    #[arg(long, default_value_t = 0.75)]
    r_p: f64,
    #[arg(long, default_value_t = 0.5)]
    p_patch: f64,
    #[arg(long, default_value_t = 0.5)]
    p_channel: f64,
    #[arg(long, default_value_t = 0.5)]
    r_c: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Duplicate channel 0's spatial mask instead of sampling per channel.
    #[arg(long)]
    duplicate_spatial: bool,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttnMapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// MCIF image to analyze.
    #[arg(long)]
    image: PathBuf,
    /// Output CSV path prefix; writes <prefix>_channels.csv and
    /// <prefix>_memory.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconDumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output CSV path prefix.
    #[arg(long)]
    out: PathBuf,
    /// Fully mask these channel ids instead of drawing a random plan.
    #[arg(long, value_delimiter = ',')]
    mask_channels: Option<Vec<u16>>,
    /// Seed for the drawn mask plan.
    #[arg(long, default_value_t = 0)]
    mask_seed: u64,
    /// Pass ground-truth pixels through at visible slots.
    #[arg(long)]
    passthrough: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of MCIF images containing novel channel ids.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Coordinates sampled per parameter tensor (0 = all).
    #[arg(long, default_value_t = 60)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(a, cli.json),
        Command::Train(a) => train_cmd(a, cli.json),
        Command::Eval(a) => eval_cmd(a, cli.json),
        Command::Sweep(a) => sweep_cmd(a, cli.json),
        Command::MaskStats(a) => mask_stats_cmd(a, cli.json),
        Command::AttnMap(a) => attn_map_cmd(a, cli.json),
        Command::ReconDump(a) => recon_dump_cmd(a, cli.json),
        Command::FinetuneChannels(a) => finetune_cmd(a, cli.json),
        Command::GradCheck(a) => grad_check_cmd(a, cli.json),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_split(dir: &Path, samples: &[LabeledSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        data::save_mcif(
            &dir.join(format!("{i:05}.mcif")),
            &s.image,
            Some(s.label as u16),
        )?;
    }
    Ok(())
}

fn read_split(dir: &Path) -> Result<Vec<LabeledSample>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mcif"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no .mcif files in {}", dir.display());
    }
    names
        .iter()
        .map(|p| {
            let (image, label) = data::load_mcif(p)?;
            let label = label.context("split images must carry labels")? as usize;
            Ok(LabeledSample { image, label })
        })
        .collect()
}

fn read_images(dir: &Path) -> Result<Vec<MultiChannelImage>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mcif"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no .mcif files in {}", dir.display());
    }
    names.iter().map(|p| Ok(data::load_mcif(p)?.0)).collect()
}

fn synth_data(a: SynthDataArgs, json: bool) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let splits = data::generate(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(
        a.out.join("spec.json"),
        serde_json::to_string_pretty(&spec)?,
    )?;
    write_split(&a.out.join("train"), &splits.train)?;
    write_split(&a.out.join("val"), &splits.val)?;
    write_split(&a.out.join("test"), &splits.test)?;
    let summary = serde_json::json!({
        "out": a.out,
        "train": splits.train.len(),
        "val": splits.val.len(),
        "test": splits.test.len(),
        "label_histogram": data::label_histogram(&splits.train, spec.num_classes),
        "seed": spec.seed,
    });
    if json {
        println!("{summary}");
    } else {
        println!(
            "wrote {} train / {} val / {} test samples to {}",
            splits.train.len(),
            splits.val.len(),
            splits.test.len(),
            a.out.display()
        );
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, json: bool) -> Result<()> {
    let mut cfg: TrainConfig = read_json(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.epochs = epochs;
    }
    let splits = mcmae_core::data::DatasetSplits {
        train: read_split(&a.data.join("train"))?,
        val: read_split(&a.data.join("val")).unwrap_or_default(),
        test: read_split(&a.data.join("test")).unwrap_or_default(),
    };
    let outcome = harness::train::<f32>(&cfg, &splits, &ZeroRegularizer)?;
    if let Some(log_path) = &a.log {
        let mut text = String::new();
        for rec in &outcome.log {
            text.push_str(&serde_json::to_string(rec)?);
            text.push('\n');
        }
        std::fs::write(log_path, text)?;
    }
    let ckpt = Checkpoint {
        params: outcome.params,
        model: cfg.model,
        stats: outcome.stats,
        config_hash: config_hash(&cfg),
    };
    save_checkpoint(&a.out, &ckpt)?;
    let last = outcome.log.last().context("empty run")?;
    let summary = serde_json::json!({
        "checkpoint": a.out,
        "steps": outcome.log.len(),
        "final": last,
        "config_hash": ckpt.config_hash,
    });
    if json {
        println!("{summary}");
    } else {
        println!(
            "trained {} steps, final loss {:.4}, checkpoint {}",
            outcome.log.len(),
            last.losses.l_final,
            a.out.display()
        );
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs, json: bool) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(&a.checkpoint)?;
    let samples = read_split(&a.data.join(&a.split))?;
    let channels = a
        .channels
        .unwrap_or_else(|| ckpt.params.channel_ids.clone());
    let acc = evaluate(
        &ckpt.params,
        &ckpt.model,
        &ckpt.stats,
        &samples,
        &channels,
        PoolMode::Hybrid,
    )?;
    if json {
        println!(
            "{}",
            serde_json::json!({"channels": channels, "split": a.split, "accuracy": acc})
        );
    } else {
        println!("accuracy on channels {channels:?}: {acc:.4}");
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs, json: bool) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(&a.checkpoint)?;
    let samples = read_split(&a.data.join(&a.split))?;
    let report = leave_k_out_sweep(
        &ckpt.params,
        &ckpt.model,
        &ckpt.stats,
        &samples,
        a.k,
        PoolMode::Hybrid,
    )?;
    if let Some(csv_path) = &a.csv {
        let mut csv = String::from("channels,accuracy\n");
        for row in &report.rows {
            let ids: Vec<String> = row.channels.iter().map(|c| c.to_string()).collect();
            csv.push_str(&format!("{},{}\n", ids.join(";"), row.accuracy));
        }
        csv.push_str(&format!("mean,{}\n", report.mean));
        csv.push_str(&format!("std,{}\n", report.std));
        std::fs::write(csv_path, csv)?;
    }
    let full_accuracy = evaluate(
        &ckpt.params,
        &ckpt.model,
        &ckpt.stats,
        &samples,
        &ckpt.params.channel_ids,
        PoolMode::Hybrid,
    )?;
    let full_report = EvalReport {
        config_hash: ckpt.config_hash.clone(),
        full_accuracy,
        sweeps: vec![report],
    };
    if json {
        println!("{}", serde_json::to_string(&full_report)?);
    } else {
        let report = &full_report.sweeps[0];
        println!("full channels: {full_accuracy:.4}");
        for row in &report.rows {
            println!("channels {:?}: {:.4}", row.channels, row.accuracy);
        }
        println!("mean {:.4} std {:.4}", report.mean, report.std);
    }
    Ok(())
}

fn mask_stats_cmd(a: MaskStatsArgs, json: bool) -> Result<()> {
    let strategy: Strategy = a.strategy.parse()?;
    let mut cfg = MaskConfig::baseline(strategy, a.r_p);
    if strategy == Strategy::Dcp {
        cfg = MaskConfig::dcp_alternate();
        cfg.r_p = a.r_p;
        cfg.p_patch = a.p_patch;
        cfg.p_channel = a.p_channel;
    }
    cfg.r_c = a.r_c;
    cfg.independent_spatial = !a.duplicate_spatial;
    let stats = collect_mask_stats(&cfg, a.n, a.c, a.draws, a.seed)?;
    let csv = stats.to_csv();
    if let Some(out) = &a.out {
        std::fs::write(out, &csv)?;
        if json {
            println!("{}", serde_json::to_string(&stats)?);
        } else {
            println!("wrote {}", out.display());
        }
    } else if json {
        println!("{}", serde_json::to_string(&stats)?);
    } else {
        print!("{csv}");
    }
    Ok(())
}

fn attn_map_cmd(a: AttnMapArgs, json: bool) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(&a.checkpoint)?;
    let (image, _) = data::load_mcif(&a.image)?;
    let norm = ckpt.stats.normalize(&image)?;
    let tape = Tape::<f32>::inference();
    let pvars = ckpt.params.bind(&tape);
    let tokens = tokenizer::patchify(&tape, &norm, &ckpt.model.patch_config(), &pvars)?;
    let attn = encoder::patch_channel_attention(&tokens, &tape, &pvars, &ckpt.model)?;

    let mut channels_csv = String::from("query_channel");
    for id in &attn.channel_ids {
        channels_csv.push_str(&format!(",to_ch{id}"));
    }
    channels_csv.push_str(",to_cls\n");
    for (qi, row) in attn.rows_with_cls().iter().enumerate() {
        channels_csv.push_str(&attn.channel_ids[qi].to_string());
        for v in row {
            channels_csv.push_str(&format!(",{v}"));
        }
        channels_csv.push('\n');
    }
    let ch_path = a.out.with_file_name(format!(
        "{}_channels.csv",
        a.out.file_name().unwrap_or_default().to_string_lossy()
    ));
    std::fs::write(&ch_path, &channels_csv)?;

    let mem_path = a.out.with_file_name(format!(
        "{}_memory.csv",
        a.out.file_name().unwrap_or_default().to_string_lossy()
    ));
    let mut mem_csv = String::from("query_channel");
    for m in 0..ckpt.model.l {
        mem_csv.push_str(&format!(",to_mem{m}"));
    }
    mem_csv.push('\n');
    for (qi, row) in attn.to_memory.iter().enumerate() {
        mem_csv.push_str(&attn.channel_ids[qi].to_string());
        for v in row {
            mem_csv.push_str(&format!(",{v}"));
        }
        mem_csv.push('\n');
    }
    std::fs::write(&mem_path, &mem_csv)?;

    if json {
        println!(
            "{}",
            serde_json::json!({
                "channels_csv": ch_path,
                "memory_csv": mem_path,
                "row_sums": attn.full_row_sums(),
            })
        );
    } else {
        println!("wrote {} and {}", ch_path.display(), mem_path.display());
    }
    Ok(())
}

fn image_csv(img: &MultiChannelImage) -> String {
    let mut out = String::from("channel,y,x,value\n");
    for (j, &id) in img.channel_ids.iter().enumerate() {
        for y in 0..img.h {
            for x in 0..img.w {
                out.push_str(&format!("{id},{y},{x},{}\n", img.get(x, y, j)));
            }
        }
    }
    out
}

fn recon_dump_cmd(a: ReconDumpArgs, json: bool) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(&a.checkpoint)?;
    let (image, _) = data::load_mcif(&a.image)?;
    let norm = ckpt.stats.normalize(&image)?;
    let cfg = &ckpt.model;
    let n = cfg.n();
    let c = image.num_channels();
    let plan = match &a.mask_channels {
        Some(ids) => {
            let mut cols = Vec::new();
            for id in ids {
                cols.push(
                    image
                        .channel_ids
                        .iter()
                        .position(|x| x == id)
                        .with_context(|| format!("channel {id} not in image"))?,
                );
            }
            MaskPlan::for_channels(n, c, &cols)?
        }
        None => {
            mcmae_core::masking::generate_mask(n, c, &MaskConfig::dcp_alternate(), a.mask_seed)?
        }
    };
    let tape = Tape::<f32>::inference();
    let pvars = ckpt.params.bind(&tape);
    let tokens = tokenizer::patchify(&tape, &norm, &cfg.patch_config(), &pvars)?;
    let enc = encoder::encode(&tape, &tokens, &plan, &pvars, cfg, None)?;
    let out = decoder::decode(&tape, &enc, &plan, &pvars, cfg)?;
    let recon = decoder::reconstruct_image(
        &out,
        &tape.value(out.preds),
        image.h,
        image.w,
        a.passthrough.then_some(&norm),
    )?;

    // masked view: normalized pixels with hidden patches zeroed
    let mut masked_view = norm.clone();
    for j in 0..c {
        for i in 0..n {
            if plan.is_masked(i, j) {
                let gw = image.w / cfg.p;
                let (gy, gx) = (i / gw, i % gw);
                for py in 0..cfg.p {
                    for px in 0..cfg.p {
                        masked_view.set(gx * cfg.p + px, gy * cfg.p + py, j, 0.0);
                    }
                }
            }
        }
    }

    let base = a
        .out
        .file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .to_string();
    let orig_path = a.out.with_file_name(format!("{base}_original.csv"));
    let masked_path = a.out.with_file_name(format!("{base}_masked.csv"));
    let recon_path = a.out.with_file_name(format!("{base}_recon.csv"));
    std::fs::write(&orig_path, image_csv(&norm))?;
    std::fs::write(&masked_path, image_csv(&masked_view))?;
    std::fs::write(&recon_path, image_csv(&recon))?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "original": orig_path,
                "masked": masked_path,
                "recon": recon_path,
                "masked_patches": plan.masked_count(),
            })
        );
    } else {
        println!(
            "wrote {}, {}, {}",
            orig_path.display(),
            masked_path.display(),
            recon_path.display()
        );
    }
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs, json: bool) -> Result<()> {
    let ckpt = load_checkpoint::<f32>(&a.checkpoint)?;
    let images = read_images(&a.data)?;
    let n = ckpt.model.n();
    let outcome = harness::finetune_channel_tokens(
        &ckpt.params,
        &ckpt.model,
        &ckpt.stats,
        &images,
        a.steps,
        a.lr,
        &|seed, img, novel| harness::novel_patch_plan(img, n, novel, 0.75, seed),
        &Default::default(),
        a.seed,
    )?;
    let new_ckpt = Checkpoint {
        params: outcome.params,
        model: ckpt.model,
        stats: outcome.stats,
        config_hash: ckpt.config_hash.clone(),
    };
    save_checkpoint(&a.out, &new_ckpt)?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "out": a.out,
                "novel_ids": outcome.novel_ids,
                "first_loss": outcome.loss_curve.first(),
                "last_loss": outcome.loss_curve.last(),
            })
        );
    } else {
        println!(
            "fine-tuned tokens for channels {:?}, checkpoint {}",
            outcome.novel_ids,
            a.out.display()
        );
    }
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs, json: bool) -> Result<()> {
    verify_backend::<f64>()?;
    let mut cfg = ModelConfig::tiny(3);
    cfg.h = 8;
    cfg.w = 8;
    cfg.p = 4;
    let params = ModelParams::init(&cfg, &[0, 1], 1)?;
    let reports = mcmae_core::model::loss_grad_reports(&params, &cfg, a.epsilon, a.coords, a.seed)?;
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for (name, rep) in &reports {
        worst = worst.max(rep.max_rel_err);
        rows.push(serde_json::json!({
            "loss": name,
            "max_rel_err": rep.max_rel_err,
            "coords": rep.coords_checked,
        }));
        if !json {
            println!(
                "{name}: max rel err {:.3e} over {} coords",
                rep.max_rel_err, rep.coords_checked
            );
        }
    }
    if json {
        println!(
            "{}",
            serde_json::json!({"losses": rows, "worst": worst, "pass": worst <= 1e-4})
        );
    }
    if worst > 1e-4 {
        bail!("gradient check failed: worst relative error {worst:.3e}");
    }
    Ok(())
}
