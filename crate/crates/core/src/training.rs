//! Fine-tuning loop.
//!
//! Each image in a micro-batch is encoded once; a quota of instances is
//! simulated from point starts and from box starts, each with a random number
//! of corrective clicks. The loss is soft Dice plus binary cross-entropy on the
//! final prediction of every simulation. Gradients are summed over
//! micro-batches and divided by the number of simulations before each
//! optimizer update, so accumulation is equivalent to one large batch with a
//! mean-reduced loss.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_sample, AugmentationConfig, Sample};
use crate::evalharness::{single_prompt_iou, StartMode};
use crate::maskcore::{BinaryMask, ClickPlacement};
use crate::model::{load_checkpoint, save_checkpoint, ParamStore, PromptableModel, ToyBackbone};
use crate::promptsim::{draw_n, sample_box_prompt, simulate_from, SimulationConfig};
use crate::{Error, Result};

/// Dice smoothing constant, added to numerator and denominator.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuotaMode {
    /// Up to `points_per_image` / `boxes_per_image` distinct instances per image.
    PerImage,
    /// `points_per_image` point starts and `boxes_per_image` box starts for
    /// every instance.
    PerInstance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    ScheduleFreeAdamw,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accumulation_steps: usize,
    pub learning_rate: f64,
    pub points_per_image: usize,
    pub boxes_per_image: usize,
    pub quota_mode: QuotaMode,
    pub max_corrections: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub val_fraction: f64,
    /// Box margin range used for box-start simulations.
    pub box_margin: (usize, usize),
    pub augmentation: AugmentationConfig,
    /// Stop after this many optimizer updates (for resumable partial runs).
    pub max_optimizer_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            grad_accumulation_steps: 4,
            learning_rate: 1e-5,
            points_per_image: 10,
            boxes_per_image: 10,
            quota_mode: QuotaMode::PerImage,
            max_corrections: 5,
            seed: 0,
            optimizer: OptimizerKind::ScheduleFreeAdamw,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            val_fraction: 0.1,
            box_margin: (0, 10),
            augmentation: AugmentationConfig::default(),
            max_optimizer_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accumulation_steps == 0 {
            return Err(Error::Config(
                "batch size and accumulation steps must be positive".into(),
            ));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.points_per_image + self.boxes_per_image == 0 {
            return Err(Error::Config("at least one prompt quota must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        self.augmentation.validate()
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accumulation_steps
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn simulation(&self) -> SimulationConfig {
        SimulationConfig {
            max_corrections: self.max_corrections,
            box_margin: self.box_margin,
            click_placement: ClickPlacement::Random,
            seed: self.seed,
            ..Default::default()
        }
    }
}

/// Soft Dice loss plus mean binary cross-entropy, both with weight one.
pub fn segmentation_loss(logits: &Tensor, gt: &BinaryMask) -> Result<Tensor> {
    let dims = logits.dims2()?;
    if dims != gt.dims() {
        return Err(Error::shape(gt.dims(), dims));
    }
    let finite = logits
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Numeric("segmentation logits".into()));
    }
    let target: Vec<f32> = gt.data().iter().map(|&b| b as u8 as f32).collect();
    let target = Tensor::from_vec(target, dims, &Device::Cpu)?.to_dtype(logits.dtype())?;

    // BCE with logits: max(x, 0) - x·y + log(1 + exp(-|x|))
    let bce = ((logits.relu()? - (logits * &target)?)? + ((logits.abs()?.neg()?.exp()? + 1.0)?.log()?))?
        .mean_all()?;

    let probs = sigmoid(logits)?;
    let inter = (&probs * &target)?.sum_all()?;
    let denom = ((probs.sum_all()? + target.sum_all()?)? + DICE_EPS)?;
    let dice = ((inter * 2.0)? + DICE_EPS)?.div(&denom)?;
    let dice_loss = dice.affine(-1.0, 1.0)?;
    Ok((bce + dice_loss)?)
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Parameter update rule.
pub trait Optimizer: Send {
    /// One update of every trainable parameter from its (mean) gradient.
    fn step(&mut self, params: &ParamStore, grads: &HashMap<String, Tensor>) -> Result<()>;

    /// Writes the weights used for evaluation into `params`.
    fn use_eval_weights(&mut self, _params: &ParamStore) -> Result<()> {
        Ok(())
    }

    /// Restores the weights used for gradient evaluation.
    fn use_train_weights(&mut self, _params: &ParamStore) -> Result<()> {
        Ok(())
    }

    fn state(&self) -> Result<OptimizerState>;

    fn load_state(&mut self, state: OptimizerState) -> Result<()>;
}

/// Serializable optimizer state: scalars plus named `f64` arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub scalars: BTreeMap<String, f64>,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

/// Plain gradient descent.
#[derive(Debug)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &ParamStore, grads: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in params.trainable() {
            if let Some(g) = grads.get(name) {
                let next = (var.as_tensor() - (g * self.learning_rate)?)?;
                var.set(&next)?;
            }
        }
        Ok(())
    }

    fn state(&self) -> Result<OptimizerState> {
        Ok(OptimizerState::default())
    }

    fn load_state(&mut self, _state: OptimizerState) -> Result<()> {
        Ok(())
    }
}

/// Schedule-free AdamW.
///
/// Keeps a base sequence `z` driven by Adam-normalised gradients and an
/// averaged sequence `x`; gradients are evaluated at the interpolation
/// `y = (1 - β1)·z + β1·x`, and `x` is the set of weights to evaluate with.
/// Averaging weights are proportional to the squared (warmed-up) learning
/// rate. Weight decay is applied at `y`.
#[derive(Debug)]
pub struct ScheduleFreeAdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    step: u64,
    weight_sum: f64,
    z: HashMap<String, Tensor>,
    x: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
    eval_mode: bool,
}

impl ScheduleFreeAdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            warmup_steps: cfg.warmup_steps,
            step: 0,
            weight_sum: 0.0,
            z: HashMap::new(),
            x: HashMap::new(),
            v: HashMap::new(),
            eval_mode: false,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

impl Optimizer for ScheduleFreeAdamW {
    fn step(&mut self, params: &ParamStore, grads: &HashMap<String, Tensor>) -> Result<()> {
        if self.eval_mode {
            self.use_train_weights(params)?;
        }
        self.step += 1;
        let t = self.step as f64;
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (t / self.warmup_steps as f64).min(1.0)
        };
        let lr = self.learning_rate * warm;
        let weight = lr * lr;
        self.weight_sum += weight;
        let ckp1 = if self.weight_sum > 0.0 {
            weight / self.weight_sum
        } else {
            0.0
        };
        let bias2 = 1.0 - self.beta2.powf(t);

        for (name, var) in params.trainable() {
            let Some(g) = grads.get(name) else { continue };
            let y = var.as_tensor().detach();
            let z = match self.z.get(name) {
                Some(z) => z.clone(),
                None => y.clone(),
            };
            let x = match self.x.get(name) {
                Some(x) => x.clone(),
                None => y.clone(),
            };
            let v = match self.v.get(name) {
                Some(v) => v.clone(),
                None => y.zeros_like()?,
            };
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bias2)?.sqrt()? + self.eps)?;
            let mut step = g.div(&denom)?;
            if self.weight_decay != 0.0 {
                step = (step + (&y * self.weight_decay)?)?;
            }
            let z = (z - (step * lr)?)?;
            let x = ((x * (1.0 - ckp1))? + (&z * ckp1)?)?;
            let y = ((&z * (1.0 - self.beta1))? + (&x * self.beta1)?)?;
            var.set(&y)?;
            self.z.insert(name.clone(), z);
            self.x.insert(name.clone(), x);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    fn use_eval_weights(&mut self, params: &ParamStore) -> Result<()> {
        if self.eval_mode {
            return Ok(());
        }
        for (name, var) in params.trainable() {
            if let Some(x) = self.x.get(name) {
                var.set(x)?;
            }
        }
        self.eval_mode = true;
        Ok(())
    }

    fn use_train_weights(&mut self, params: &ParamStore) -> Result<()> {
        if !self.eval_mode {
            return Ok(());
        }
        for (name, var) in params.trainable() {
            if let (Some(z), Some(x)) = (self.z.get(name), self.x.get(name)) {
                var.set(&((z * (1.0 - self.beta1))? + (x * self.beta1)?)?)?;
            }
        }
        self.eval_mode = false;
        Ok(())
    }

    fn state(&self) -> Result<OptimizerState> {
        let mut st = OptimizerState::default();
        st.scalars.insert("step".into(), self.step as f64);
        st.scalars.insert("weight_sum".into(), self.weight_sum);
        for (prefix, map) in [("z", &self.z), ("x", &self.x), ("v", &self.v)] {
            for (name, t) in map {
                let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                st.tensors
                    .insert(format!("{prefix}/{name}"), (t.dims().to_vec(), values));
            }
        }
        Ok(st)
    }

    fn load_state(&mut self, state: OptimizerState) -> Result<()> {
        self.step = state.scalars.get("step").copied().unwrap_or(0.0) as u64;
        self.weight_sum = state.scalars.get("weight_sum").copied().unwrap_or(0.0);
        self.z.clear();
        self.x.clear();
        self.v.clear();
        for (key, (shape, values)) in state.tensors {
            let (prefix, name) = key
                .split_once('/')
                .ok_or_else(|| Error::Config(format!("bad optimizer state key {key}")))?;
            let t = Tensor::from_vec(values, shape.as_slice(), &Device::Cpu)?;
            let map = match prefix {
                "z" => &mut self.z,
                "x" => &mut self.x,
                "v" => &mut self.v,
                _ => return Err(Error::Config(format!("bad optimizer state key {key}"))),
            };
            map.insert(name.to_string(), t);
        }
        self.eval_mode = false;
        Ok(())
    }
}

impl ScheduleFreeAdamW {
    /// Casts loaded state to the parameter dtype.
    fn align_dtype(&mut self, dtype: DType) -> Result<()> {
        for map in [&mut self.z, &mut self.x, &mut self.v] {
            for t in map.values_mut() {
                *t = t.to_dtype(dtype)?;
            }
        }
        Ok(())
    }
}

pub fn make_optimizer(cfg: &TrainConfig) -> Box<dyn Optimizer> {
    match cfg.optimizer {
        OptimizerKind::ScheduleFreeAdamw => Box::new(ScheduleFreeAdamW::new(cfg)),
        OptimizerKind::Sgd => Box::new(Sgd {
            learning_rate: cfg.learning_rate,
        }),
    }
}

/// One metrics record, written as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metric {
    Step {
        epoch: usize,
        step: usize,
        loss: f64,
        simulations: usize,
        optimizer_update: bool,
    },
    Epoch {
        epoch: usize,
        train_loss: f64,
        val_box_iou: f64,
        val_point_iou: f64,
    },
}

/// Output of one micro-batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    /// Mean loss over the simulations of the micro-batch.
    pub loss: f64,
    pub simulations: usize,
    /// An optimizer update was applied after this micro-batch.
    pub applied: bool,
}

/// Position in the run; enough to resume deterministically.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    /// Micro-batches already consumed in the current epoch.
    pub batch_in_epoch: usize,
    pub micro_steps: usize,
    pub optimizer_steps: usize,
    pub best_val_iou: Option<f64>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Deterministic validation split: a seeded permutation, first
/// `round(len · fraction)` indices go to validation.
pub fn split_validation(len: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 0x5eed, 0)));
    let n_val = ((len as f64) * fraction).round() as usize;
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

pub struct Trainer {
    model: ToyBackbone,
    cfg: TrainConfig,
    optimizer: Box<dyn Optimizer>,
    accum: HashMap<String, Tensor>,
    accum_count: usize,
    state: TrainState,
}

impl Trainer {
    pub fn new(model: ToyBackbone, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = make_optimizer(&cfg);
        Ok(Self {
            model,
            cfg,
            optimizer,
            accum: HashMap::new(),
            accum_count: 0,
            state: TrainState::default(),
        })
    }

    pub fn model(&self) -> &ToyBackbone {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Hands back the model carrying its evaluation weights.
    pub fn into_model(mut self) -> Result<ToyBackbone> {
        self.optimizer.use_eval_weights(self.model.params())?;
        Ok(self.model)
    }

    /// `(instance, start-with-box)` pairs simulated for one image.
    fn quota<R: Rng + ?Sized>(&self, n_instances: usize, rng: &mut R) -> Vec<(usize, bool)> {
        let mut jobs = Vec::new();
        match self.cfg.quota_mode {
            QuotaMode::PerImage => {
                let mut idx: Vec<usize> = (0..n_instances).collect();
                idx.shuffle(rng);
                jobs.extend(idx.iter().take(self.cfg.points_per_image).map(|&i| (i, false)));
                idx.shuffle(rng);
                jobs.extend(idx.iter().take(self.cfg.boxes_per_image).map(|&i| (i, true)));
            }
            QuotaMode::PerInstance => {
                for i in 0..n_instances {
                    jobs.extend(std::iter::repeat_n((i, false), self.cfg.points_per_image));
                    jobs.extend(std::iter::repeat_n((i, true), self.cfg.boxes_per_image));
                }
            }
        }
        jobs
    }

    /// Simulations planned for an image with `n_instances` instances.
    pub fn planned_simulations<R: Rng + ?Sized>(
        &self,
        n_instances: usize,
        rng: &mut R,
    ) -> Vec<(usize, bool)> {
        self.quota(n_instances, rng)
    }

    /// Forward and backward for one micro-batch; applies the optimizer every
    /// `grad_accumulation_steps` calls.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[Sample], rng: &mut R) -> Result<StepOutput> {
        let sim_cfg = self.cfg.simulation();
        let mut loss_sum = 0.0;
        let mut sims = 0usize;
        for sample in batch {
            if sample.instances.is_empty() {
                log::warn!("skipping training image without instances");
                continue;
            }
            let embedding = self.model.encode_image(&sample.image)?;
            let mut image_loss: Option<Tensor> = None;
            for (inst, use_box) in self.quota(sample.instances.len(), rng) {
                let gt = &sample.instances[inst];
                let initial = if use_box {
                    sample_box_prompt(gt, sim_cfg.box_margin, rng)?
                } else {
                    crate::maskcore::sample_point_in_mask(gt, rng)?.into()
                };
                let n = draw_n(&sim_cfg, rng);
                let sim = simulate_from(
                    &self.model,
                    &embedding,
                    gt,
                    initial,
                    n,
                    sim_cfg.click_placement,
                    rng,
                )?;
                let loss = segmentation_loss(&sim.logits, gt)?;
                image_loss = Some(match image_loss {
                    Some(acc) => (acc + loss)?,
                    None => loss,
                });
                sims += 1;
            }
            let Some(total) = image_loss else { continue };
            let value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Numeric("training loss".into()));
            }
            loss_sum += value;
            let grads = total.backward()?;
            for (name, var) in self.model.params().trainable() {
                if let Some(g) = grads.get(var.as_tensor()) {
                    let g = g.detach();
                    let next = match self.accum.remove(name) {
                        Some(acc) => (acc + g)?,
                        None => g,
                    };
                    self.accum.insert(name.clone(), next);
                }
            }
        }
        self.accum_count += sims;
        self.state.micro_steps += 1;
        let mut applied = false;
        if self
            .state
            .micro_steps
            .is_multiple_of(self.cfg.grad_accumulation_steps)
        {
            self.apply()?;
            applied = true;
        }
        Ok(StepOutput {
            loss: if sims > 0 { loss_sum / sims as f64 } else { 0.0 },
            simulations: sims,
            applied,
        })
    }

    fn apply(&mut self) -> Result<()> {
        if self.accum_count > 0 {
            let scale = 1.0 / self.accum_count as f64;
            let mut grads = HashMap::with_capacity(self.accum.len());
            for (name, g) in self.accum.drain() {
                grads.insert(name, (g * scale)?);
            }
            self.optimizer.step(self.model.params(), &grads)?;
        }
        self.accum.clear();
        self.accum_count = 0;
        self.state.optimizer_steps += 1;
        Ok(())
    }

    /// Mean single-prompt IoU on `val` with the evaluation weights.
    pub fn validate(&mut self, val: &[Sample]) -> Result<(f64, f64)> {
        self.optimizer.use_eval_weights(self.model.params())?;
        let seed = mix(self.cfg.seed, 0xe7a1, 0);
        let result =
            single_prompt_iou(&self.model, val, StartMode::Box, self.cfg.box_margin, seed).and_then(|b| {
                single_prompt_iou(&self.model, val, StartMode::Point, self.cfg.box_margin, seed)
                    .map(|p| (b, p))
            });
        self.optimizer.use_train_weights(self.model.params())?;
        result
    }

    /// Runs (or continues) training until `epochs` are done or the optimizer
    /// step cap is reached.
    pub fn run(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        sink: &mut dyn FnMut(&Metric) -> Result<()>,
        out_dir: Option<&Path>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let size = self.model.input_size();
        let bs = self.cfg.batch_size;
        while self.state.epoch < self.cfg.epochs {
            let epoch = self.state.epoch;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
                self.cfg.seed,
                1,
                epoch as u64,
            )));
            let batches: Vec<&[usize]> = order.chunks(bs).collect();
            let mut epoch_loss = 0.0;
            let mut epoch_sims = 0usize;
            while self.state.batch_in_epoch < batches.len() {
                let step = self.state.micro_steps;
                let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, 2, step as u64));
                let batch = batches[self.state.batch_in_epoch]
                    .iter()
                    .map(|&i| augment_sample(&train[i], &self.cfg.augmentation, size, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let out = match self.train_step(&batch, &mut rng) {
                    Err(Error::Numeric(what)) => {
                        if let Some(dir) = out_dir {
                            std::fs::create_dir_all(dir)?;
                            save_checkpoint(&self.model, dir.join("diverged.ckpt"))?;
                        }
                        return Err(Error::Numeric(format!(
                            "{what}; training aborted at micro-step {step}"
                        )));
                    }
                    other => other?,
                };
                self.state.batch_in_epoch += 1;
                epoch_loss += out.loss * out.simulations as f64;
                epoch_sims += out.simulations;
                sink(&Metric::Step {
                    epoch,
                    step,
                    loss: out.loss,
                    simulations: out.simulations,
                    optimizer_update: out.applied,
                })?;
                if out.applied
                    && self
                        .cfg
                        .max_optimizer_steps
                        .is_some_and(|cap| self.state.optimizer_steps >= cap)
                {
                    return Ok(());
                }
            }
            // Flush a partial accumulation window at the end of an epoch.
            if self.accum_count > 0 {
                self.apply()?;
                self.state.micro_steps = self
                    .state
                    .micro_steps
                    .next_multiple_of(self.cfg.grad_accumulation_steps);
            }
            let (val_box_iou, val_point_iou) = if val.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                self.validate(val)?
            };
            sink(&Metric::Epoch {
                epoch,
                train_loss: if epoch_sims > 0 {
                    epoch_loss / epoch_sims as f64
                } else {
                    0.0
                },
                val_box_iou,
                val_point_iou,
            })?;
            self.state.epoch += 1;
            self.state.batch_in_epoch = 0;
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir)?;
                self.optimizer.use_eval_weights(self.model.params())?;
                save_checkpoint(&self.model, dir.join("last.ckpt"))?;
                if !val_box_iou.is_nan() && self.state.best_val_iou.is_none_or(|b| val_box_iou > b) {
                    self.state.best_val_iou = Some(val_box_iou);
                    save_checkpoint(&self.model, dir.join("best.ckpt"))?;
                }
                self.optimizer.use_train_weights(self.model.params())?;
            }
        }
        Ok(())
    }

    /// Writes model (training weights), optimizer state and position to `dir`.
    /// Only valid at an optimizer-step boundary.
    pub fn save_state(&mut self, dir: &Path) -> Result<()> {
        if self.accum_count > 0 {
            return Err(Error::Config("cannot save mid accumulation window".into()));
        }
        std::fs::create_dir_all(dir)?;
        self.optimizer.use_train_weights(self.model.params())?;
        save_checkpoint(&self.model, dir.join("state.ckpt"))?;
        write_optimizer_state(&dir.join("optimizer.bin"), &self.optimizer.state()?)?;
        std::fs::write(
            dir.join("state.json"),
            serde_json::to_vec_pretty(&(&self.state, &self.cfg))?,
        )?;
        Ok(())
    }

    pub fn resume(dir: &Path) -> Result<Self> {
        let (state, cfg): (TrainState, TrainConfig) =
            serde_json::from_slice(&std::fs::read(dir.join("state.json"))?)?;
        let model = load_checkpoint(dir.join("state.ckpt"), None)?;
        let mut optimizer = make_optimizer(&cfg);
        optimizer.load_state(read_optimizer_state(&dir.join("optimizer.bin"))?)?;
        let mut t = Trainer {
            model,
            cfg,
            optimizer,
            accum: HashMap::new(),
            accum_count: 0,
            state,
        };
        if let OptimizerKind::ScheduleFreeAdamw = t.cfg.optimizer {
            // State is stored as f64; re-create with the model dtype.
            let mut sf = ScheduleFreeAdamW::new(&t.cfg);
            sf.load_state(read_optimizer_state(&dir.join("optimizer.bin"))?)?;
            sf.align_dtype(t.model.dtype())?;
            t.optimizer = Box::new(sf);
        }
        Ok(t)
    }

    /// Replaces the configuration (e.g. to lift a step cap after resuming).
    pub fn set_config(&mut self, cfg: TrainConfig) -> Result<()> {
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }
}

const OPT_MAGIC: &[u8; 8] = b"CPOPT\0\0\0";

fn write_optimizer_state(path: &Path, st: &OptimizerState) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, (shape, values)) in &st.tensors {
        entries.push((name.clone(), shape.clone(), payload.len(), values.len()));
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::json!({
        "version": 1,
        "scalars": st.scalars,
        "tensors": entries,
        "payload_sha256": Sha256::digest(&payload).iter().map(|b| format!("{b:02x}")).collect::<String>(),
    });
    let header = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(OPT_MAGIC)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

fn read_optimizer_state(path: &Path) -> Result<OptimizerState> {
    #[derive(Deserialize)]
    struct Header {
        scalars: BTreeMap<String, f64>,
        tensors: Vec<(String, Vec<usize>, usize, usize)>,
        payload_sha256: String,
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != OPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not an optimizer state file".into(),
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16 + hlen;
    if end > bytes.len() {
        return Err(Error::Format {
            offset: 8,
            message: "header length exceeds file size".into(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..end])?;
    let payload = &bytes[end..];
    let digest: String = Sha256::digest(payload)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    if digest != header.payload_sha256 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let mut st = OptimizerState {
        scalars: header.scalars,
        ..Default::default()
    };
    for (name, shape, offset, len) in header.tensors {
        let raw = payload.get(offset..offset + len * 8).ok_or(Error::Format {
            offset: end + offset,
            message: format!("tensor {name} runs past end of payload"),
        })?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        st.tensors.insert(name, (shape, values));
    }
    Ok(st)
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub model: ToyBackbone,
    pub history: Vec<Metric>,
}

/// Trains on `dataset` with a seeded validation hold-out.
pub fn train(model: ToyBackbone, dataset: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_output(model, dataset, cfg, None)
}

pub fn train_with_output(
    model: ToyBackbone,
    dataset: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history: Vec::new(),
        });
    }
    if dataset.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let (train_idx, val_idx) = split_validation(dataset.len(), cfg.val_fraction, cfg.seed);
    let train: Vec<Sample> = train_idx.iter().map(|&i| dataset[i].clone()).collect();
    let val: Vec<Sample> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    train_split(model, &train, &val, cfg, out_dir)
}

/// Trains on `train`, validating on `val` after every epoch.
pub fn train_split(
    model: ToyBackbone,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut history = Vec::new();
    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("metrics.jsonl"),
            )?))
        }
        None => None,
    };
    trainer.run(
        train,
        val,
        &mut |m: &Metric| {
            if let Some(f) = metrics_file.as_mut() {
                serde_json::to_writer(&mut *f, m)?;
                f.write_all(b"\n")?;
                f.flush()?;
            }
            history.push(m.clone());
            Ok(())
        },
        out_dir,
    )?;
    Ok(TrainOutcome {
        model: trainer.into_model()?,
        history,
    })
}

/// Reads a metrics file written by [`train_with_output`].
pub fn read_metrics(path: &Path) -> Result<Vec<Metric>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Default location of training artefacts inside an output directory.
pub fn checkpoint_paths(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join("best.ckpt"), out_dir.join("last.ckpt"))
}
