//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 for usage, configuration and data errors, 2 when training
//! aborts on a non-finite value.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{json, Value};

use crate::data::{center_resize, load_manifest, load_png, save_png, synth_toy_corpus, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Group;
use crate::trainer::config::{parse_override, read_entries};
use crate::trainer::{clamp01, evaluate, stream, Checkpoint, Config, Preset, Trainer};

const STREAM_STYLIZE: u64 = 3 << 32;

#[derive(Debug, Parser)]
#[command(name = "tsg", version, about = "Text-conditioned style generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic captioned corpus and its manifest.
    SynthData(SynthArgs),
    /// Train from a configuration, or resume from a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Restyle one image from a caption.
    Stylize(StylizeArgs),
    /// Print the configuration, parameter counts and tensor shapes.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Side length of the written PNGs.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON file of dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// `key=value` settings applied after the file.
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Optional JSON file; may change `trainer.seed`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report path; defaults to the checkpoint path with `.eval.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub caption: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    pub overrides: Vec<String>,
}

/// Every configuration key with its default under each preset.
pub fn keys_help() -> String {
    let presets = [Preset::Desk, Preset::Paper, Preset::Tiny].map(|p| Config::preset(p).entries());
    let mut s = String::from("Configuration keys (desk / paper / tiny defaults):\n");
    for (k, desk) in &presets[0] {
        let show = |v: &Value| v.to_string();
        let (paper, tiny) = (&presets[1][k], &presets[2][k]);
        if desk == paper && desk == tiny {
            s.push_str(&format!("  {k} = {}\n", show(desk)));
        } else {
            s.push_str(&format!("  {k} = {} / {} / {}\n", show(desk), show(paper), show(tiny)));
        }
    }
    s
}

fn command() -> clap::Command {
    let keys = keys_help();
    Cli::command()
        .mut_subcommand("train", |c| c.after_long_help(keys.clone()).after_help(keys.clone()))
        .mut_subcommand("inspect", |c| c.after_help(keys.clone()))
}

/// Parses `args` (including the program name) and executes the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => 2,
                _ => 1,
            }
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Stylize(a) => stylize(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn entries(file: Option<&Path>, overrides: &[String]) -> Result<Vec<(String, Value)>> {
    let mut e = match file {
        Some(p) => read_entries(p)?,
        None => Vec::new(),
    };
    for o in overrides {
        e.push(parse_override(o)?);
    }
    Ok(e)
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let samples = synth_toy_corpus(&a.out, a.n, a.seed, a.size)?;
    println!("wrote {} images and {}", samples.len(), a.out.join("manifest.jsonl").display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let entries = entries(a.config.as_deref(), &a.overrides)?;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(Checkpoint::load(ckpt)?, &entries)?,
        None => Trainer::new(Config::from_entries(&entries)?)?,
    };
    let total = trainer.total_steps();
    println!("training steps {} to {total} into {}", trainer.step + 1, trainer.config.trainer.out_dir);
    let rows = trainer.run()?;
    if let Some(last) = rows.last() {
        println!("finished at step {}: l_g {:.4} l_d {:.4}", last.step, last.losses.l_g, last.losses.l_d);
        if let Some(e) = last.eval {
            println!("SL_mean {:.6} PSNR_mean {:.3}", e.sl_mean, e.psnr_mean);
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mut config = ckpt.config.clone();
    if let Some(p) = &a.config {
        let entries: Vec<_> = read_entries(p)?.into_iter().filter(|(k, _)| k != "preset").collect();
        config.apply(&entries)?;
        if config.model != ckpt.config.model {
            return Err(Error::Config("model settings must match the checkpoint".into()));
        }
    }
    let model = ckpt.model()?;
    let manifest = load_manifest(&a.manifest)?;
    if manifest.is_empty() {
        return Err(Error::Data(format!("{}: no usable records", a.manifest.display())));
    }
    let data = Dataset::new(&manifest, &model.vocab, config.model.text_len, config.model.image_size, false)?;
    let report = evaluate(&model, &ckpt.store, &data, config.trainer.seed)?;
    println!("SL_mean {}", report.sl_mean);
    println!("PSNR_mean {}", report.psnr_mean);
    println!("rho_mean {}", report.rho_mean);
    let path = a.report.unwrap_or_else(|| a.ckpt.with_extension("eval.json"));
    let body = json!({
        "checkpoint": a.ckpt.display().to_string(),
        "manifest": a.manifest.display().to_string(),
        "step": ckpt.step,
        "seed": config.trainer.seed,
        "samples": report.samples,
        "sl_mean": report.sl_mean,
        "psnr_mean": report.psnr_mean,
        "rho_mean": report.rho_mean,
    });
    fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
    println!("report {}", path.display());
    Ok(())
}

fn stylize(a: StylizeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = ckpt.model()?;
    if !a.image.exists() {
        return Err(Error::Usage(format!("image {} does not exist", a.image.display())));
    }
    let image = center_resize(&load_png(&a.image)?, model.config.image_size)?;
    let tokens = model.tokenize(&a.caption);
    let mut rng = stream(a.seed, STREAM_STYLIZE);
    let (z, noise) = model.sample_noise(&mut rng);
    let outputs = model.full_generate(&ckpt.store, &image, &tokens, z, noise)?;
    fs::create_dir_all(&a.out)?;
    let mut styles = serde_json::Map::new();
    for (t, o) in outputs.iter().enumerate() {
        let path = a.out.join(format!("stage{t}.png"));
        save_png(&path, &clamp01(&o.image))?;
        println!("wrote {}", path.display());
        styles.insert(format!("mu{t}"), json!(o.style.mu.to_f64_vec()));
        styles.insert(format!("sigma{t}"), json!(o.style.sigma.to_f64_vec()));
    }
    styles.insert("caption".into(), json!(a.caption));
    styles.insert("seed".into(), json!(a.seed));
    let path = a.out.join("style.json");
    fs::write(&path, serde_json::to_string_pretty(&Value::Object(styles))? + "\n")?;
    println!("wrote {}", path.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let (config, store, model) = match &a.ckpt {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            let model = c.model()?;
            println!("checkpoint {} at step {}", p.display(), c.step);
            (c.config, c.store, model)
        }
        None => {
            let config = Config::from_entries(&entries(a.config.as_deref(), &a.overrides)?)?;
            let mut store = crate::tensor::ParamStore::new();
            let vocab = crate::text::Vocabulary::default();
            let model = crate::model::Model::new(config.model.clone(), vocab, &mut store, &mut stream(config.trainer.seed, 1))?;
            (config, store, model)
        }
    };
    println!("{}", config.to_json());
    let mut groups = vec![Group::TextEncoder, Group::Generator];
    groups.extend((0..model.stages()).map(|t| Group::Discriminator(t as u8)));
    for grp in groups {
        let n: usize = store.iter().filter(|(_, p)| p.group == grp).map(|(_, p)| p.value.len()).sum();
        println!("{grp:?}: {n} parameters");
    }
    println!("total: {} parameters", store.numel());
    for (name, shape) in model.shape_report(&store)? {
        println!("{name}: {shape:?}");
    }
    Ok(())
}
