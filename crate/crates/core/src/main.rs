use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tokmesh::archive::Archive;
use tokmesh::harness::{
    self, build_body, dataset_from_archive, dump_attention, eval::eval_data, eval::evaluate_on, eval::predict_clip,
    export_prior, predictions_archive, Checkpoint, RunConfig,
};
use tokmesh::synthdata::SequenceBatch;
use tokmesh::{Error, Result};

#[derive(Parser)]
#[command(name = "tokmesh", version, about = "Token-based human mesh recovery on a procedural body model")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train phases 1-3 (or one phase with --phase).
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out clips and write metrics.csv.
    Eval(RunArgs),
    /// Predict on held-out clips (or an --input dataset archive).
    Infer(RunArgs),
    /// Dump temporal and prior-to-patch attention for one clip.
    InspectAttention(RunArgs),
    /// Decode the learned prior tokens to parameters and a mesh.
    ExportPrior(RunArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    phase: Option<u8>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Warm-start from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides the checkpoint's run config (model shapes must still match).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the generated held-out clips.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_eval: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset archive to run on instead of generated clips.
    #[arg(long)]
    input: Option<PathBuf>,
}

impl RunArgs {
    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::load(&self.checkpoint)?;
        if let Some(path) = &self.config {
            ck.config = RunConfig::load(path)?;
        }
        Ok(ck)
    }

    fn out_dir(&self, ck: &Checkpoint) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| ck.config.out_dir.clone());
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn data(&self, ck: &Checkpoint, default_t: usize) -> Result<SequenceBatch> {
        if let Some(path) = &self.input {
            return dataset_from_archive(&Archive::load(path)?);
        }
        let body = build_body(&ck.config)?;
        let mut cfg = ck.config.clone();
        if let Some(s) = self.seed {
            cfg.data.seed = Some(s);
        }
        eval_data(&cfg, &body, self.t_eval.unwrap_or(default_t))
    }
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    let init = a.checkpoint.as_ref().map(Checkpoint::load).transpose()?;
    let phases: Vec<u8> = a.phase.map_or(vec![1, 2, 3], |p| vec![p]);
    let out = harness::train(&cfg, &phases, init, Some(&cfg.out_dir))?;
    for (p, log) in &out.logs {
        let (first, last) = (log.first().map_or(f64::NAN, |r| r.total), log.last().map_or(f64::NAN, |r| r.total));
        println!("phase {p}: {} steps, loss {first:.4} -> {last:.4}", log.len());
    }
    let last = out.checkpoint.phase;
    println!("checkpoint: {}", cfg.out_dir.join(format!("phase{last}.tkarch")).display());
    Ok(())
}

fn eval_cmd(a: &RunArgs) -> Result<()> {
    let ck = a.checkpoint()?;
    let t = a.t_eval.unwrap_or(ck.config.data.clip_len);
    if t < 3 {
        return Err(Error::SequenceTooShort { need: 3, got: t });
    }
    let body = build_body(&ck.config)?;
    let report = evaluate_on(&ck, &body, &a.data(&ck, t)?)?;
    let path = a.out_dir(&ck)?.join("metrics.csv");
    report.write_csv(&path)?;
    print!("{}", report.to_csv()?);
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn infer_cmd(a: &RunArgs) -> Result<()> {
    let ck = a.checkpoint()?;
    let body = build_body(&ck.config)?;
    let data = a.data(&ck, ck.config.data.clip_len)?;
    let mut preds = Vec::new();
    for clip in &data.sequences {
        preds.extend(predict_clip(&ck, &body, clip)?);
    }
    let mut arch = predictions_archive(&preds)?;
    arch.meta["clip_len"] = data.clip_len().into();
    arch.meta["config_hash"] = ck.config.hash().into();
    write_archive(&arch, &a.out_dir(&ck)?.join("predictions.tkarch"))
}

fn inspect_cmd(a: &RunArgs) -> Result<()> {
    let ck = a.checkpoint()?;
    let data = a.data(&ck, ck.config.data.clip_len)?;
    let clip = data.sequences.first().ok_or_else(|| Error::Config("no clip to inspect".into()))?;
    write_archive(&dump_attention(&ck, clip)?, &a.out_dir(&ck)?.join("attention.tkarch"))
}

fn export_cmd(a: &RunArgs) -> Result<()> {
    let ck = a.checkpoint()?;
    write_archive(&export_prior(&ck)?, &a.out_dir(&ck)?.join("prior.tkarch"))
}

fn write_archive(a: &Archive, path: &Path) -> Result<()> {
    a.save(path)?;
    println!("wrote {} ({} arrays)", path.display(), a.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::InspectAttention(a) => inspect_cmd(a),
        Command::ExportPrior(a) => export_cmd(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
