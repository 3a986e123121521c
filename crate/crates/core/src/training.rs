//! WGAN-GP training loop with periodic checkpoints and selection by
//! validation MAE.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial_models::{
    critic_loss, generator_loss, read_manifest, write_checkpoint, Adam, CheckpointManifest, Critic, CriticSpec,
    GenTerms, Generator, GeneratorSpec,
};
use crate::autograd::{grad, Tensor, Var};
use crate::dataset::{load_indices, read_meta, to_training_scale, DatasetMeta, SamplePair};
use crate::error::{Error, Result};
use crate::grid_field::Field;
use crate::physics_losses::{pixel_mae, stack_fields, unstack_fields, LossWeights};
use crate::rng::child_seed;

/// Network layouts used by [`train`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator: GeneratorSpec,
    pub critic: CriticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_c: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub n_critic: usize,
    pub max_iters: u64,
    pub checkpoint_every: u64,
    pub val_indices: Vec<u64>,
    pub seed: u64,
    pub weights: LossWeights,
    /// Compute precision; only "f64" is implemented.
    pub precision: String,
    /// Kernels are always deterministic; kept so configs can state it.
    pub deterministic: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            lr_g: 1e-4,
            lr_c: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            n_critic: 5,
            max_iters: 2000,
            checkpoint_every: 100,
            val_indices: vec![0, 1, 2],
            seed: 0,
            weights: LossWeights::default(),
            precision: "f64".into(),
            deterministic: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.n_critic == 0 {
            return bad("n_critic must be >= 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        if self.val_indices.is_empty() {
            return bad("val_indices must not be empty".into());
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_c", self.lr_c)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if self.precision != "f64" {
            return bad(format!("precision {:?} is not supported (only \"f64\")", self.precision));
        }
        self.weights.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Anything that maps a scaled source field to a scaled prediction.
pub trait Predictor {
    fn predict(&self, src_scaled: &Field) -> Result<Field>;
}

impl Predictor for Generator {
    fn predict(&self, src_scaled: &Field) -> Result<Field> {
        let out = self.forward(&stack_fields(&[src_scaled]))?;
        Ok(unstack_fields(&out)?.remove(0))
    }
}

impl<F: Fn(&Field) -> Result<Field>> Predictor for F {
    fn predict(&self, src_scaled: &Field) -> Result<Field> {
        self(src_scaled)
    }
}

/// Mean over `pairs` (physical units, as loaded) of the scaled-unit pixel
/// MAE between prediction and target.
pub fn validation_mae<P: Predictor + ?Sized>(predictor: &P, pairs: &[SamplePair], scale: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidParam("validation needs at least one pair".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        let s = to_training_scale(p, scale)?;
        total += pixel_mae(&predictor.predict(&s.src)?, &s.tar)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Losses and validation error recorded at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub id: String,
    pub iteration: u64,
    pub val_mae: f64,
    pub critic_loss: Option<f64>,
    pub gen_loss: Option<f64>,
    pub terms: Option<GenTerms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: u64,
    pub checkpoints: Vec<CheckpointRecord>,
    pub best_id: String,
    pub best_val_mae: f64,
    pub elapsed_secs: f64,
    pub log_path: PathBuf,
}

/// Per-iteration summary as written to the log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterLog {
    pub iteration: u64,
    pub critic_loss: f64,
    pub wasserstein: f64,
    pub penalty: f64,
    pub gen_loss: f64,
    pub terms: GenTerms,
}

impl IterLog {
    pub fn line(&self, val_mae: Option<f64>) -> String {
        let t = &self.terms;
        let mut s = format!(
            "iter={},critic_loss={:.9e},wasserstein={:.9e},gp={:.9e},gen_loss={:.9e},adv={:.9e},energy={:.9e},residual={:.9e},mae={:.9e},mean={:.9e},var={:.9e}",
            self.iteration, self.critic_loss, self.wasserstein, self.penalty, self.gen_loss,
            t.adversarial, t.energy, t.residual, t.mae, t.mean, t.var
        );
        if let Some(v) = val_mae {
            s.push_str(&format!(",val_mae={v:.9e}"));
        }
        s
    }
}

/// Without-replacement sampling over training indices, reshuffled each
/// epoch by a seeded permutation.
struct EpochSampler {
    indices: Vec<u64>,
    order: Vec<u64>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(indices: Vec<u64>, seed: u64) -> Self {
        Self { order: Vec::new(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed), indices }
    }

    fn next_batch(&mut self, size: usize) -> Vec<u64> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = self.indices.clone();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn batch_tensors(path: &Path, indices: &[u64], scale: f64) -> Result<(Tensor, Tensor)> {
    let (_, pairs) = load_indices(path, indices)?;
    let scaled: Vec<SamplePair> = pairs.iter().map(|p| to_training_scale(p, scale)).collect::<Result<_>>()?;
    let src: Vec<&Field> = scaled.iter().map(|p| &p.src).collect();
    let tar: Vec<&Field> = scaled.iter().map(|p| &p.tar).collect();
    Ok((stack_fields(&src), stack_fields(&tar)))
}

fn check_finite(v: f64, iteration: u64, term: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iteration, term: term.into() })
    }
}

fn grads_of(loss: &Var, vars: &[Var]) -> Vec<Tensor> {
    let refs: Vec<&Var> = vars.iter().collect();
    grad(loss, &refs, false).into_iter().map(|g| g.value().clone()).collect()
}

pub fn checkpoint_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints")
}

/// Runs the loop and writes `checkpoints/iter_NNNNNN.ckpt`, `best.ckpt`,
/// `train.log` and `report.json` under `out_dir`.
pub fn train(cfg: &TrainConfig, train_data: &Path, val_data: &Path, out_dir: &Path) -> Result<TrainReport> {
    train_with(cfg, train_data, val_data, out_dir, |_| {})
}

/// [`train`] with a callback invoked after every iteration.
pub fn train_with(
    cfg: &TrainConfig,
    train_data: &Path,
    val_data: &Path,
    out_dir: &Path,
    mut on_iter: impl FnMut(&IterLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let meta = read_meta(train_data)?;
    let val_meta = read_meta(val_data)?;
    if val_meta.grid_n != meta.grid_n || val_meta.pde != meta.pde || val_meta.scale != meta.scale {
        return Err(Error::Config("training and validation datasets disagree on grid, PDE or scale".into()));
    }
    let n = meta.grid_n;
    let scale = meta.scale;
    let pde = meta.pde;

    let same_file = fs::canonicalize(train_data)? == fs::canonicalize(val_data)?;
    let train_indices: Vec<u64> =
        (0..meta.n_samples).filter(|i| !(same_file && cfg.val_indices.contains(i))).collect();
    if train_indices.is_empty() {
        return Err(Error::Config("no training samples left after removing validation indices".into()));
    }
    let (_, val_pairs) = load_indices(val_data, &cfg.val_indices)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, 0));
    let mut gen = Generator::new(&cfg.model.generator, n, &mut init_rng)?;
    let mut critic = Critic::new(&cfg.model.critic, n, &mut init_rng)?;
    let mut sampler = EpochSampler::new(train_indices, child_seed(cfg.seed, 1));
    let mut gp_rng = ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, 2));
    let mut opt_g = Adam::new(gen.params().tensors(), cfg.lr_g, cfg.beta1, cfg.beta2);
    let mut opt_c = Adam::new(critic.params().tensors(), cfg.lr_c, cfg.beta1, cfg.beta2);

    fs::create_dir_all(checkpoint_dir(out_dir))?;
    let log_path = out_dir.join("train.log");
    let mut log = BufWriter::new(OpenOptions::new().create(true).write(true).truncate(true).open(&log_path)?);

    let ctx = CheckpointCtx {
        meta: &meta,
        out_dir,
        config_json: serde_json::to_value(cfg)?,
    };
    let mut records = Vec::new();
    let mut best = (String::new(), f64::INFINITY);
    let first = ctx.write(&gen, &critic, 0, &val_pairs)?;
    writeln!(log, "iter=0,val_mae={:.9e}", first.1)?;
    ctx.track(&mut best, &first)?;
    records.push(CheckpointRecord {
        id: first.0.clone(),
        iteration: 0,
        val_mae: first.1,
        critic_loss: None,
        gen_loss: None,
        terms: None,
    });

    for it in 1..=cfg.max_iters {
        let mut critic_sum = 0.0;
        let (mut w_sum, mut gp_sum) = (0.0, 0.0);
        for _ in 0..cfg.n_critic {
            let idx = sampler.next_batch(cfg.batch_size);
            let (src, tar) = batch_tensors(train_data, &idx, scale)?;
            let fake = gen.forward(&src)?;
            critic.power_iterate(1);
            let bound = critic.bind(true);
            let loss = critic_loss(&bound, &src, &tar, &fake, &cfg.weights, &mut gp_rng);
            check_finite(loss.wasserstein, it, "critic wasserstein")?;
            check_finite(loss.penalty, it, "gradient penalty")?;
            let grads = grads_of(&loss.total, bound.vars());
            drop(bound);
            opt_c.step(critic.params_mut().tensors_mut(), &grads);
            if let Some(name) = critic.params().first_non_finite() {
                return Err(Error::Diverged { iteration: it, term: format!("critic parameter {name}") });
            }
            critic_sum += loss.total.item();
            w_sum += loss.wasserstein;
            gp_sum += loss.penalty;
        }

        let idx = sampler.next_batch(cfg.batch_size);
        let (src, tar) = batch_tensors(train_data, &idx, scale)?;
        let vars = gen.params().bind(true);
        let out = gen.forward_vars(&vars, &Var::constant(src.clone()))?;
        let bound = critic.bind(false);
        let (total, terms) = generator_loss(&bound, &src, &tar, &out, &cfg.weights, &pde, scale)?;
        if let Some(term) = terms.first_non_finite() {
            return Err(Error::Diverged { iteration: it, term: format!("generator {term}") });
        }
        let grads = grads_of(&total, &vars);
        opt_g.step(gen.params_mut().tensors_mut(), &grads);
        if let Some(name) = gen.params().first_non_finite() {
            return Err(Error::Diverged { iteration: it, term: format!("generator parameter {name}") });
        }

        let k = cfg.n_critic as f64;
        let entry = IterLog {
            iteration: it,
            critic_loss: critic_sum / k,
            wasserstein: w_sum / k,
            penalty: gp_sum / k,
            gen_loss: total.item(),
            terms,
        };
        on_iter(&entry);

        let mut val = None;
        if it % cfg.checkpoint_every == 0 || it == cfg.max_iters {
            let saved = ctx.write(&gen, &critic, it, &val_pairs)?;
            ctx.track(&mut best, &saved)?;
            val = Some(saved.1);
            records.push(CheckpointRecord {
                id: saved.0,
                iteration: it,
                val_mae: saved.1,
                critic_loss: Some(entry.critic_loss),
                gen_loss: Some(entry.gen_loss),
                terms: Some(terms),
            });
        }
        writeln!(log, "{}", entry.line(val))?;
        if val.is_some() {
            log::info!("{}", entry.line(val));
        } else {
            log::debug!("{}", entry.line(val));
        }
    }
    log.flush()?;

    let report = TrainReport {
        iterations: cfg.max_iters,
        checkpoints: records,
        best_id: best.0,
        best_val_mae: best.1,
        elapsed_secs: start.elapsed().as_secs_f64(),
        log_path,
    };
    serde_json::to_writer_pretty(File::create(out_dir.join("report.json"))?, &report)?;
    Ok(report)
}

struct CheckpointCtx<'a> {
    meta: &'a DatasetMeta,
    out_dir: &'a Path,
    config_json: serde_json::Value,
}

impl CheckpointCtx<'_> {
    /// Writes one checkpoint; returns its id and the validation MAE of the
    /// stored f32 parameters, so a reload reproduces the value exactly.
    fn write(&self, gen: &Generator, critic: &Critic, iteration: u64, val: &[SamplePair]) -> Result<(String, f64)> {
        let mut stored = gen.clone();
        stored.params_mut().round_to_f32();
        let val_mae = validation_mae(&stored, val, self.meta.scale)?;
        let id = format!("iter_{iteration:06}");
        let manifest = CheckpointManifest {
            checkpoint_id: id.clone(),
            iteration,
            val_mae,
            grid_n: self.meta.grid_n,
            scale: self.meta.scale,
            pde: self.meta.pde,
            generator: gen.spec().clone(),
            critic: critic.spec().clone(),
            dataset_hash: self.meta.hash(),
            config: self.config_json.clone(),
        };
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        let sn: Vec<(Tensor, Tensor)> = critic
            .spectral_states()
            .iter()
            .map(|s| (Tensor::new(vec![s.u.len()], s.u.clone()), Tensor::new(vec![s.v.len()], s.v.clone())))
            .collect();
        for (name, t) in gen.params().names().iter().zip(gen.params().tensors()) {
            tensors.push((format!("gen.{name}"), t));
        }
        for (name, t) in critic.params().names().iter().zip(critic.params().tensors()) {
            tensors.push((format!("critic.{name}"), t));
        }
        for (k, (u, v)) in sn.iter().enumerate() {
            tensors.push((format!("critic.sn{k}.u"), u));
            tensors.push((format!("critic.sn{k}.v"), v));
        }
        write_checkpoint(&checkpoint_dir(self.out_dir).join(format!("{id}.ckpt")), &manifest, &tensors)?;
        Ok((id, val_mae))
    }

    /// Copies a strictly better checkpoint to `best.ckpt`.
    fn track(&self, best: &mut (String, f64), saved: &(String, f64)) -> Result<()> {
        if saved.1 < best.1 {
            let from = checkpoint_dir(self.out_dir).join(format!("{}.ckpt", saved.0));
            fs::copy(from, self.out_dir.join("best.ckpt"))?;
            *best = saved.clone();
        }
        Ok(())
    }
}

/// Loads the generator stored in a checkpoint.
pub fn load_generator(path: &Path) -> Result<(CheckpointManifest, Generator)> {
    let (manifest, tensors) = crate::adversarial_models::read_checkpoint(path)?;
    let mut params = crate::adversarial_models::ParamSet::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("gen.") {
            params.push(rest, t);
        }
    }
    let gen = Generator::from_params(&manifest.generator, manifest.grid_n, params)?;
    Ok((manifest, gen))
}

/// The checkpoint under `out_dir/checkpoints` with the lowest recorded
/// validation MAE; ties go to the earliest iteration.
pub fn select_best_checkpoint(out_dir: &Path) -> Result<(String, f64)> {
    let dir = checkpoint_dir(out_dir);
    let entries = fs::read_dir(&dir).map_err(|_| Error::NotFound(dir.clone()))?;
    let mut best: Option<(u64, String, f64)> = None;
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ckpt") {
            continue;
        }
        let m = read_manifest(&path)?;
        let better = match &best {
            None => true,
            Some((it, _, mae)) => m.val_mae < *mae || (m.val_mae == *mae && m.iteration < *it),
        };
        if better {
            best = Some((m.iteration, m.checkpoint_id, m.val_mae));
        }
    }
    best.map(|(_, id, mae)| (id, mae)).ok_or(Error::NotFound(dir))
}
