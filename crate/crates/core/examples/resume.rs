//! Interrupts a short run, resumes it from the checkpoint and checks that the
//! loss trace matches an uninterrupted run.

use std::fs;

use tsg::data::synth_toy_corpus;
use tsg::trainer::{Checkpoint, Config, Preset, Trainer};

fn config(dir: &std::path::Path, out: &str, steps: usize) -> Config {
    let mut c = Config::preset(Preset::Tiny);
    c.data.train_manifest = dir.join("manifest.jsonl").display().to_string();
    c.trainer.max_steps = steps;
    c.trainer.eval_every = 5;
    c.trainer.checkpoint_every = 10;
    c.trainer.out_dir = dir.join(out).display().to_string();
    c
}

fn main() -> tsg::Result<()> {
    let dir = std::env::temp_dir().join("tsg_resume");
    synth_toy_corpus(&dir, 6, 2, 16)?;

    Trainer::new(config(&dir, "straight", 20))?.run()?;
    Trainer::new(config(&dir, "split", 10))?.run()?;
    let ckpt = Checkpoint::load(&dir.join("split/ckpt_0000010.bin"))?;
    println!("checkpoint at step {}, {} parameters", ckpt.step, ckpt.store.numel());
    Trainer::resume(ckpt, &[("trainer.max_steps".into(), 20.into())])?.run()?;

    let a = fs::read_to_string(dir.join("straight/trace.csv"))?;
    let b = fs::read_to_string(dir.join("split/trace.csv"))?;
    println!("{} trace rows, identical: {}", a.lines().count() - 1, a == b);
    Ok(())
}
