//! Alternating adversarial training, evaluation and the run loop.

pub mod adam;
pub mod checkpoint;
pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use config::{Config, Preset};

use crate::codec::adain_merge;
use crate::data::image::grid;
use crate::data::{load_manifest, save_png, Dataset, Manifest, SamplePair, Sampler, SamplerState};
use crate::discriminator::{Branch, Logits};
use crate::error::{Error, Result};
use crate::model::{normal_vector, Model};
use crate::objectives::{
    discriminator_loss_node, generator_loss_node, metric_psnr, metric_sl, pearson, style_loss, style_loss_node,
    LossReport, PEARSON_EPS,
};
use crate::generator::StyleNodes;
use crate::tensor::{Graph, Group, ParamStore, Tensor};
use crate::text::Vocabulary;

const STREAM_INIT: u64 = 1;
const STREAM_Z: u64 = 2;
const STREAM_CA: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const STREAM_EVAL: u64 = 2 << 32;

/// Independent ChaCha stream `id` of `seed`.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Random streams consumed during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Streams {
    pub z: ChaCha8Rng,
    pub ca: ChaCha8Rng,
    pub augment: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { z: stream(seed, STREAM_Z), ca: stream(seed, STREAM_CA), augment: stream(seed, STREAM_AUGMENT) }
    }
}

/// Aggregate quality of generated styles over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub sl_mean: f64,
    pub psnr_mean: f64,
    pub rho_mean: f64,
}

/// Mean branch scores of one discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeans {
    pub real: [f64; 4],
    pub fake: [f64; 4],
}

/// One line of `trace.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub losses: LossReport,
    pub eval: Option<EvalReport>,
}

pub const TRACE_HEADER: &str = "step,l_g,l_d,l_s0,l_s1,sl_eval,psnr_eval";

impl TraceRow {
    pub fn to_csv(&self) -> String {
        let (sl, psnr) = match &self.eval {
            Some(e) => (e.sl_mean.to_string(), e.psnr_mean.to_string()),
            None => (String::new(), String::new()),
        };
        let l = &self.losses;
        format!("{},{},{},{},{},{sl},{psnr}", self.step, l.l_g, l.l_d, l.l_s_stage0, l.l_s_stage1)
    }
}

#[derive(Debug, Clone)]
struct PhaseSums {
    loss: f64,
    l_s: f64,
    real: [f64; 4],
    fake: [f64; 4],
}

pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub store: ParamStore,
    pub train: Dataset,
    pub eval_set: Dataset,
    pub streams: Streams,
    pub sampler: Sampler,
    pub step: u64,
}

impl Trainer {
    /// Fresh run: builds the vocabulary from the training captions and
    /// initialises every parameter from the configured seed.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let train = read_manifest(&config.data.train_manifest, "data.train_manifest")?;
        let vocab = Vocabulary::build(train.records.iter().map(|r| r.caption.as_str()), config.model.vocab_cap);
        let mut store = ParamStore::new();
        let mut init = stream(config.trainer.seed, STREAM_INIT);
        let model = Model::new(config.model.clone(), vocab, &mut store, &mut init)?;
        let streams = Streams::new(config.trainer.seed);
        Self::assemble(config, model, store, &train, streams, SamplerState { epoch: 0, pos: 0 }, 0)
    }

    /// Continues from a checkpoint. `overrides` may change trainer and data
    /// settings but not the model.
    pub fn resume(ckpt: Checkpoint, overrides: &[(String, serde_json::Value)]) -> Result<Self> {
        let mut config = ckpt.config.clone();
        for (_, p) in overrides.iter().filter(|(k, _)| k == "preset") {
            if serde_json::from_value::<Preset>(p.clone()).ok() != Some(config.preset) {
                return Err(Error::Config("preset cannot change when resuming".into()));
            }
        }
        let overrides: Vec<_> = overrides.iter().filter(|(k, _)| k != "preset").cloned().collect();
        config.apply(&overrides)?;
        if config.model != ckpt.config.model {
            return Err(Error::Config("model settings cannot change when resuming".into()));
        }
        config.validate()?;
        let model = ckpt.model()?;
        let train = read_manifest(&config.data.train_manifest, "data.train_manifest")?;
        Self::assemble(config, model, ckpt.store, &train, ckpt.streams, ckpt.sampler, ckpt.step)
    }

    fn assemble(
        config: Config,
        model: Model,
        store: ParamStore,
        train: &Manifest,
        streams: Streams,
        sampler: SamplerState,
        step: u64,
    ) -> Result<Self> {
        let (size, len) = (config.model.image_size, config.model.text_len);
        let train_set = Dataset::new(train, &model.vocab, len, size, config.data.augment)?;
        let eval_manifest = if config.data.val_manifest.is_empty() {
            train.clone()
        } else {
            read_manifest(&config.data.val_manifest, "data.val_manifest")?
        };
        let eval_set = Dataset::new(&eval_manifest, &model.vocab, len, size, false)?;
        let sampler = Sampler::new(train_set.len(), config.trainer.batch_size, config.trainer.seed, sampler)?;
        Ok(Self { config, model, store, train: train_set, eval_set, streams, sampler, step })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.model.vocab.clone(),
            store: self.store.clone(),
            step: self.step,
            streams: self.streams.clone(),
            sampler: self.sampler.state(),
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.config.total_steps(self.train.len()) as u64
    }

    fn next_batch(&mut self) -> Result<Vec<SamplePair>> {
        let idx = self.sampler.next_batch();
        idx.iter().map(|&i| self.train.sample(i, &mut self.streams.augment)).collect()
    }

    fn draw_noise(&mut self) -> (Tensor, Tensor) {
        let z = normal_vector(self.config.model.noise_dim, &mut self.streams.z);
        let noise = normal_vector(self.config.model.cond_dim, &mut self.streams.ca);
        (z, noise)
    }

    /// Scores real and detached generated pairs with discriminator `stage`.
    /// With `update` the batch-mean loss is backpropagated into that
    /// discriminator alone and one Adam step is taken.
    fn discriminator_batch(&mut self, stage: usize, update: bool) -> Result<PhaseSums> {
        let batch = self.next_batch()?;
        let inv_b = 1.0 / batch.len() as f32;
        let mut frozen = vec![Group::TextEncoder, Group::Generator];
        frozen.extend((0..self.model.stages()).filter(|&t| t != stage).map(|t| Group::Discriminator(t as u8)));
        let mut sums = PhaseSums { loss: 0.0, l_s: 0.0, real: [0.0; 4], fake: [0.0; 4] };
        self.store.zero_grad();
        for sample in &batch {
            let (z, noise) = self.draw_noise();
            let enc = self.model.encode_image(&sample.image)?;
            let mut g = Graph::frozen(&frozen);
            let gen = self.model.generate(&mut g, &self.store, &enc.v, &sample.tokens, z, noise)?;
            let out = gen.stages[stage];
            let fake_image = g.detach(out.image)?;
            let fake_mu = g.detach(out.style.mu)?;
            let fake_sigma = g.detach(out.style.sigma)?;
            let fake_style = StyleNodes { mu: fake_mu, sigma: fake_sigma };
            let e_bar = g.detach(gen.text.e_bar)?;
            let real_image = g.constant(sample.image.clone())?;
            let real_style = StyleNodes { mu: g.constant(enc.style.mu.clone())?, sigma: g.constant(enc.style.sigma.clone())? };
            let d = &self.model.discriminators[stage];
            let real = d.score(&mut g, &self.store, real_image, real_style, e_bar)?;
            let fake = d.score(&mut g, &self.store, fake_image, fake_style, e_bar)?;
            let loss = discriminator_loss_node(&mut g, &real, &fake)?;
            sums.loss += g.value(loss).item() as f64;
            let fake_h: Vec<f64> = [fake_mu, fake_sigma].iter().flat_map(|&n| g.value(n).to_f64_vec()).collect();
            sums.l_s += style_loss(&enc.style.concat(), &fake_h)?;
            add_scores(&mut sums.real, &g, &real);
            add_scores(&mut sums.fake, &g, &fake);
            if update {
                let grads = g.backward(loss)?;
                self.store.accumulate(&grads, inv_b);
            }
        }
        if update {
            let t = &self.config.trainer;
            Adam::new(t.lr_d, t.beta1, t.beta2).step(&mut self.store, Group::Discriminator(stage as u8));
        }
        Ok(sums.mean(batch.len()))
    }

    /// One discriminator update for `stage`; returns the batch-mean loss,
    /// style loss of the fakes and mean scores.
    pub fn discriminator_step(&mut self, stage: usize) -> Result<(f64, f64, ScoreMeans)> {
        let s = self.discriminator_batch(stage, true)?;
        Ok((s.loss, s.l_s, ScoreMeans { real: s.real, fake: s.fake }))
    }

    /// Mean scores of discriminator `stage` over `batches` fresh batches,
    /// without updating anything.
    pub fn measure_scores(&mut self, stage: usize, batches: usize) -> Result<ScoreMeans> {
        let mut m = ScoreMeans { real: [0.0; 4], fake: [0.0; 4] };
        for _ in 0..batches {
            let s = self.discriminator_batch(stage, false)?;
            for b in 0..4 {
                m.real[b] += s.real[b] / batches as f64;
                m.fake[b] += s.fake[b] / batches as f64;
            }
        }
        Ok(m)
    }

    /// Generator and text encoder update against frozen discriminators.
    /// Returns `(l_g, [l_s per stage])`.
    pub fn generator_step(&mut self) -> Result<(f64, Vec<f64>)> {
        let batch = self.next_batch()?;
        let inv_b = 1.0 / batch.len() as f32;
        let stages = self.model.stages();
        let frozen: Vec<Group> = (0..stages).map(|t| Group::Discriminator(t as u8)).collect();
        let lambda = self.config.trainer.lambda;
        let mut l_g = 0.0;
        let mut l_s = vec![0.0; stages];
        self.store.zero_grad();
        for sample in &batch {
            let (z, noise) = self.draw_noise();
            let enc = self.model.encode_image(&sample.image)?;
            let mut g = Graph::frozen(&frozen);
            let gen = self.model.generate(&mut g, &self.store, &enc.v, &sample.tokens, z, noise)?;
            let h = g.constant(Tensor::from_vec(
                enc.style.mu.data().iter().chain(enc.style.sigma.data()).copied().collect(),
            ))?;
            let mut logits = Vec::with_capacity(stages);
            let mut total_terms = Vec::with_capacity(stages);
            for (t, out) in gen.stages.iter().enumerate() {
                let style = out.style.concat(&mut g)?;
                let d = &self.model.discriminators[t];
                logits.push(d.score(&mut g, &self.store, out.image, out.style, gen.text.e_bar)?);
                let ls = style_loss_node(&mut g, h, style)?;
                l_s[t] += g.value(ls).item() as f64;
                total_terms.push(ls);
            }
            let adv = generator_loss_node(&mut g, &logits)?;
            l_g += g.value(adv).item() as f64;
            let mut total = adv;
            for ls in total_terms {
                let w = g.scale(ls, lambda)?;
                total = g.add(total, w)?;
            }
            let grads = g.backward(total)?;
            self.store.accumulate(&grads, inv_b);
        }
        let t = &self.config.trainer;
        Adam::new(t.lr_g, t.beta1, t.beta2).step(&mut self.store, Group::Generator);
        Adam::new(t.lr_t, t.beta1, t.beta2).step(&mut self.store, Group::TextEncoder);
        let n = batch.len() as f64;
        Ok((l_g / n, l_s.into_iter().map(|v| v / n).collect()))
    }

    /// One full step: a discriminator update per stage, then one generator
    /// and text encoder update.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let step = self.step + 1;
        let mut report = LossReport::default();
        let mut l_s_d = Vec::new();
        for t in 0..self.model.stages() {
            let (l_d, l_s, scores) = self.discriminator_step(t).map_err(|e| at_step(e, step, &format!("D{t}")))?;
            report.l_d += l_d;
            l_s_d.push(l_s);
            report.real_scores.push(scores.real);
            report.fake_scores.push(scores.fake);
        }
        let (l_g, l_s) = self.generator_step().map_err(|e| at_step(e, step, "G"))?;
        report.l_g = l_g;
        report.l_s_stage0 = l_s[0];
        report.l_s_stage1 = l_s.get(1).copied().unwrap_or(0.0);
        let (g_total, _) = crate::objectives::total_losses(l_g, report.l_d, &l_s, self.config.trainer.lambda);
        let (_, d_total) = crate::objectives::total_losses(l_g, report.l_d, &l_s_d, self.config.trainer.lambda);
        report.l_g_total = g_total;
        report.l_d_total = d_total;
        if ![report.l_g, report.l_d, report.l_g_total, report.l_d_total].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: {report:?}; real scores {:?}, fake scores {:?}",
                report.real_scores, report.fake_scores
            )));
        }
        self.step = step;
        Ok(report)
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(&self.model, &self.store, &self.eval_set, self.config.trainer.seed)
    }

    /// Trains until the configured step count, writing `trace.csv`, sample
    /// grids and checkpoints under `trainer.out_dir`.
    pub fn run(&mut self) -> Result<Vec<TraceRow>> {
        let out = PathBuf::from(&self.config.trainer.out_dir);
        fs::create_dir_all(&out)?;
        fs::write(out.join("vocab.txt"), self.model.vocab.to_text())?;
        fs::write(out.join("config.json"), self.config.to_json() + "\n")?;
        let trace_path = out.join("trace.csv");
        prepare_trace(&trace_path, self.step)?;
        let mut trace = fs::OpenOptions::new().append(true).open(&trace_path)?;

        let total = self.total_steps();
        let (eval_every, ckpt_every) =
            (self.config.trainer.eval_every as u64, self.config.trainer.checkpoint_every as u64);
        let mut rows = Vec::new();
        while self.step < total {
            let losses = self.train_step()?;
            let s = self.step;
            let eval = if (eval_every > 0 && s.is_multiple_of(eval_every)) || s == total {
                let e = self.evaluate()?;
                self.write_grid(&out.join(format!("samples_{s:07}.png")))?;
                log::info!("step {s}: sl {:.4} psnr {:.2} rho {:.4}", e.sl_mean, e.psnr_mean, e.rho_mean);
                Some(e)
            } else {
                None
            };
            log::debug!("step {s}: l_g {:.4} l_d {:.4}", losses.l_g, losses.l_d);
            let row = TraceRow { step: s, losses, eval };
            writeln!(trace, "{}", row.to_csv())?;
            rows.push(row);
            if (ckpt_every > 0 && s.is_multiple_of(ckpt_every)) || s == total {
                let path = out.join(format!("ckpt_{s:07}.bin"));
                self.checkpoint().save(&path)?;
                log::info!("saved {}", path.display());
            }
        }
        Ok(rows)
    }

    /// Grid with one row per evaluation sample: the real image and the
    /// image of every stage.
    pub fn write_grid(&self, path: &Path) -> Result<()> {
        let k = self.config.trainer.grid_samples.min(self.eval_set.len());
        if k == 0 {
            return Ok(());
        }
        let mut rows = Vec::with_capacity(k);
        for i in 0..k {
            let (sample, outputs) = eval_sample(&self.model, &self.store, &self.eval_set, self.config.trainer.seed, i)?;
            let mut row = vec![sample.image];
            row.extend(outputs.into_iter().map(|o| o.image));
            rows.push(row);
        }
        save_png(path, &grid(&rows)?)
    }
}

impl PhaseSums {
    fn mean(mut self, n: usize) -> Self {
        let n = n as f64;
        self.loss /= n;
        self.l_s /= n;
        self.real.iter_mut().chain(self.fake.iter_mut()).for_each(|v| *v /= n);
        self
    }
}

fn add_scores(acc: &mut [f64; 4], g: &Graph<f32>, logits: &Logits) {
    for (k, b) in Branch::ALL.into_iter().enumerate() {
        acc[k] += crate::objectives::sigmoid(g.value(logits.get(b)).item() as f64);
    }
}

fn at_step(e: Error, step: u64, phase: &str) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}, {phase} phase: {m}")),
        other => other,
    }
}

fn read_manifest(path: &str, key: &str) -> Result<Manifest> {
    if path.is_empty() {
        return Err(Error::Config(format!("{key} is not set")));
    }
    let m = load_manifest(Path::new(path))?;
    if m.is_empty() {
        return Err(Error::Data(format!("{path}: no usable records")));
    }
    Ok(m)
}

/// Starts a new trace, or on resume keeps only rows up to `step`.
fn prepare_trace(path: &Path, step: u64) -> Result<()> {
    let mut text = format!("{TRACE_HEADER}\n");
    if step > 0 && path.exists() {
        for line in fs::read_to_string(path)?.lines().skip(1) {
            let s: u64 = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
            if s <= step {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// Generates sample `i` of `data` with noise fixed by `(seed, i)`.
pub fn eval_sample(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    seed: u64,
    i: usize,
) -> Result<(SamplePair, Vec<crate::model::StageOutput>)> {
    let mut rng = stream(seed, STREAM_EVAL | i as u64);
    let sample = data.sample(i, &mut rng)?;
    let (z, noise) = model.sample_noise(&mut rng);
    let out = model.full_generate(store, &sample.image, &sample.tokens, z, noise)?;
    Ok((sample, out))
}

/// Style loss, Pearson correlation and PSNR of the final stage, averaged
/// over `data`. PSNR compares the generated image with the image restyled by
/// its own ground-truth style, both clamped to `[0, 1]`.
pub fn evaluate(model: &Model, store: &ParamStore, data: &Dataset, seed: u64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let (mut sl, mut psnr, mut rho) = (0.0, 0.0, 0.0);
    for i in 0..data.len() {
        let (sample, out) = eval_sample(model, store, data, seed, i)?;
        let last = out.last().expect("at least one stage");
        let enc = model.encode_image(&sample.image)?;
        let (gt, gen) = (enc.style.concat(), last.style.concat());
        sl += metric_sl(&gt, &gen)?;
        rho += pearson(&gt, &gen, PEARSON_EPS)?;
        let reference = model.codec.decode(&adain_merge(&enc.v, &enc.style)?)?;
        psnr += metric_psnr(&clamp01(&last.image), &clamp01(&reference), 1.0)?;
    }
    let n = data.len() as f64;
    Ok(EvalReport { samples: data.len(), sl_mean: sl / n, psnr_mean: psnr / n, rho_mean: rho / n })
}

pub fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}
