//! Trains the desk preset on an 8-image toy corpus and reports the style
//! metrics before and after.
//!
//! `cargo run --release --example train_toy -- [steps]`

use tsg::data::synth_toy_corpus;
use tsg::trainer::{Config, Preset, Trainer};

fn main() -> tsg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let dir = std::env::temp_dir().join("tsg_train_toy");
    synth_toy_corpus(&dir, 8, 1, 64)?;

    let mut config = Config::preset(Preset::Desk);
    config.data.train_manifest = dir.join("manifest.jsonl").display().to_string();
    config.trainer.max_steps = steps;
    config.trainer.eval_every = 50;
    config.trainer.out_dir = dir.join("run").display().to_string();
    let mut trainer = Trainer::new(config)?;

    let before = trainer.evaluate()?;
    let rows = trainer.run()?;
    let after = trainer.evaluate()?;
    println!("SL   {:.5} -> {:.5}", before.sl_mean, after.sl_mean);
    println!("rho  {:.3} -> {:.3}", before.rho_mean, after.rho_mean);
    println!("PSNR {:.2} -> {:.2}", before.psnr_mean, after.psnr_mean);
    if let Some(last) = rows.last() {
        println!("last step {}: l_g {:.4}, l_d {:.4}", last.step, last.losses.l_g, last.losses.l_d);
    }
    println!("trace, grids and checkpoints in {}", trainer.config.trainer.out_dir);
    Ok(())
}
