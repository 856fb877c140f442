//! Episodic training loop with separate optimizers per branch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adam::Adam;
use super::config::{GradMode, TrainConfig};
use super::gradcheck::{finite_difference_check, GradCheck, FD_STEP, FD_TOLERANCE};
use super::objective::{loss_dasl, loss_oasl, LossOutput, TrainingSample};
use super::params::AdapterParams;
use crate::error::{Error, Result};
use crate::features::{choose_sorted, BankScope, FeatureSet, PromptBank, TextPrototypes};

/// Tensor positions (checkpoint order) owned by each optimizer.
pub const DASL_TENSORS: [usize; 6] = [0, 1, 2, 3, 4, 5];
pub const OASL_TENSORS: [usize; 2] = [6, 7];

const PROBE_SIZE: usize = 96;
const PROBE_STREAM: u64 = 11;
const GRAD_CHECK_SAMPLES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Probe loss (both objectives) before the first step.
    pub initial_loss: f64,
    /// Probe loss after the last step.
    pub final_loss: f64,
    /// Mean discriminative batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean one-class batch loss per epoch.
    pub oasl_epoch_losses: Vec<f64>,
    pub steps: usize,
    #[serde(skip)]
    pub grad_check: Option<GradCheck>,
}

pub struct Trainer<'a> {
    set: &'a FeatureSet,
    protos: &'a TextPrototypes,
    cfg: TrainConfig,
    params: AdapterParams,
    dasl_opt: Adam,
    oasl_opt: Adam,
    rng: ChaCha8Rng,
    pools: BTreeMap<String, Vec<usize>>,
    normals: Vec<usize>,
    oasl_queue: Vec<usize>,
    oasl_cursor: usize,
    steps: usize,
    grad_check: Option<GradCheck>,
}

fn pool_key(scope: BankScope, class_name: &str) -> &str {
    match scope {
        BankScope::PerClass => class_name,
        BankScope::WholeSet => "",
    }
}

impl<'a> Trainer<'a> {
    /// Validates the configuration against the data and initializes parameters from the seed.
    pub fn new(set: &'a FeatureSet, protos: &'a TextPrototypes, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if set.is_empty() {
            return Err(Error::Argument("training set is empty".into()));
        }
        cfg.resolve_layers(set.layer_set())?;
        let dims = set.dims();
        if cfg.semantic_score && dims.d_cls != protos.d_text() {
            return Err(Error::Config(format!(
                "semantic score needs d_cls == d_text, got {} and {}",
                dims.d_cls,
                protos.d_text()
            )));
        }
        let params = AdapterParams::init(dims.d_cls, dims.d_patch, protos.d_text(), cfg.seed);
        Self::with_params(set, protos, cfg, params)
    }

    /// Starts from explicit parameters instead of the seeded initialization.
    pub fn with_params(
        set: &'a FeatureSet,
        protos: &'a TextPrototypes,
        cfg: TrainConfig,
        params: AdapterParams,
    ) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        let mut pools: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut normals = Vec::new();
        for (i, r) in set.records().iter().enumerate() {
            pools
                .entry(pool_key(cfg.bank_scope, &r.class_name).to_string())
                .or_default();
            if r.is_normal() {
                normals.push(i);
                pools
                    .get_mut(pool_key(cfg.bank_scope, &r.class_name))
                    .expect("inserted above")
                    .push(i);
            }
        }
        for r in set.records() {
            let pool = &pools[pool_key(cfg.bank_scope, &r.class_name)];
            let available = pool.len() - usize::from(r.is_normal());
            if available < cfg.shots {
                return Err(Error::InsufficientNormals {
                    needed: cfg.shots,
                    available,
                });
            }
        }
        Ok(Self {
            set,
            protos,
            dasl_opt: Adam::new(cfg.lr),
            oasl_opt: Adam::new(cfg.lr),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            oasl_queue: normals.clone(),
            oasl_cursor: normals.len(),
            cfg,
            params,
            pools,
            normals,
            steps: 0,
            grad_check: None,
        })
    }

    pub fn params(&self) -> &AdapterParams {
        &self.params
    }

    pub fn into_params(self) -> AdapterParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn draw_sample(&self, idx: usize, rng: &mut ChaCha8Rng) -> Result<TrainingSample<'a>> {
        let set: &'a FeatureSet = self.set;
        let record = &set.records()[idx];
        let candidates: Vec<usize> = self.pools[pool_key(self.cfg.bank_scope, &record.class_name)]
            .iter()
            .copied()
            .filter(|&i| i != idx)
            .collect();
        let picked = choose_sorted(&candidates, self.cfg.shots, rng)?;
        let bank = PromptBank::new(picked.into_iter().map(|i| set.records()[i].clone()).collect())?;
        Ok(TrainingSample { record, bank })
    }

    fn draw_batch(&mut self, indices: &[usize]) -> Result<Vec<TrainingSample<'a>>> {
        let mut rng = self.rng.clone();
        let out = indices
            .iter()
            .map(|&i| self.draw_sample(i, &mut rng))
            .collect::<Result<Vec<_>>>();
        self.rng = rng;
        out
    }

    fn batch_config(&self, samples: &[TrainingSample<'_>]) -> TrainConfig {
        let mut cfg = self.cfg.clone();
        cfg.pixel_loss &= samples.iter().any(|s| s.record.mask.is_some());
        cfg
    }

    fn evaluate_dasl(&self, samples: &[TrainingSample<'_>], params: &AdapterParams) -> Result<Option<LossOutput>> {
        let cfg = self.batch_config(samples);
        if !cfg.image_loss && !cfg.pixel_loss {
            return Ok(None);
        }
        loss_dasl(samples, params, self.protos, &cfg).map(Some)
    }

    fn evaluate_oasl(&self, samples: &[TrainingSample<'_>], params: &AdapterParams) -> Result<Option<LossOutput>> {
        if !self.cfg.pixel_loss || samples.is_empty() {
            return Ok(None);
        }
        loss_oasl(samples, params, self.protos, &self.cfg).map(Some)
    }

    fn check_finite(&self, loss: f64) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence { step: self.steps, loss })
        }
    }

    fn verify_gradients(&mut self, samples: &[TrainingSample<'_>], oasl: bool) -> Result<()> {
        let head = &samples[..samples.len().min(GRAD_CHECK_SAMPLES)];
        let (analytic, tensors): (_, &[usize]) = if oasl {
            (self.evaluate_oasl(head, &self.params)?, &OASL_TENSORS)
        } else {
            (self.evaluate_dasl(head, &self.params)?, &DASL_TENSORS)
        };
        let Some(analytic) = analytic else {
            return Ok(());
        };
        let report = finite_difference_check(&self.params, &analytic.grads, tensors, FD_STEP, |p| {
            let out = if oasl {
                self.evaluate_oasl(head, p)?
            } else {
                self.evaluate_dasl(head, p)?
            };
            Ok(out.map_or(0.0, |o| o.loss))
        })?;
        if let Some(w) = report.worst.as_ref().filter(|_| !report.passed(FD_TOLERANCE)) {
            return Err(Error::GradientMismatch {
                tensor: w.tensor,
                index: w.index,
                analytic: w.analytic,
                numeric: w.numeric,
            });
        }
        let merged = match self.grad_check.take() {
            Some(prev) if prev.max_rel_error >= report.max_rel_error => GradCheck {
                checked: prev.checked + report.checked,
                ..prev
            },
            Some(prev) => GradCheck {
                checked: prev.checked + report.checked,
                ..report
            },
            None => report,
        };
        self.grad_check = Some(merged);
        Ok(())
    }

    /// One discriminative step on the records at `indices`; banks are drawn
    /// from the trainer's generator. Returns the batch loss, or `None` when
    /// the batch carries no applicable loss term.
    pub fn step_dasl(&mut self, indices: &[usize]) -> Result<Option<f64>> {
        let samples = self.draw_batch(indices)?;
        let Some(out) = self.evaluate_dasl(&samples, &self.params)? else {
            return Ok(None);
        };
        self.steps += 1;
        self.check_finite(out.loss)?;
        if self.cfg.grad_mode == GradMode::FiniteDiffCheck && self.dasl_opt.steps() == 0 {
            self.verify_gradients(&samples, false)?;
        }
        let grads = out.grads.tensors();
        let mut tensors = self.params.tensors_mut();
        let (owned, _) = tensors.split_at_mut(DASL_TENSORS.len());
        let g: Vec<&[f64]> = DASL_TENSORS.iter().map(|&t| grads[t].1).collect();
        self.dasl_opt.step(owned, &g)?;
        Ok(Some(out.loss))
    }

    /// One one-class step on the normal records at `indices`.
    pub fn step_oasl(&mut self, indices: &[usize]) -> Result<Option<f64>> {
        let samples = self.draw_batch(indices)?;
        let Some(out) = self.evaluate_oasl(&samples, &self.params)? else {
            return Ok(None);
        };
        self.steps += 1;
        self.check_finite(out.loss)?;
        if self.cfg.grad_mode == GradMode::FiniteDiffCheck && self.oasl_opt.steps() == 0 {
            self.verify_gradients(&samples, true)?;
        }
        let grads = out.grads.tensors();
        let mut tensors = self.params.tensors_mut();
        let (_, owned) = tensors.split_at_mut(DASL_TENSORS.len());
        let g: Vec<&[f64]> = OASL_TENSORS.iter().map(|&t| grads[t].1).collect();
        self.oasl_opt.step(owned, &g)?;
        Ok(Some(out.loss))
    }

    fn next_normals(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n.min(self.normals.len()) {
            if self.oasl_cursor >= self.oasl_queue.len() {
                self.oasl_queue.shuffle(&mut self.rng);
                self.oasl_cursor = 0;
            }
            out.push(self.oasl_queue[self.oasl_cursor]);
            self.oasl_cursor += 1;
        }
        out
    }

    /// Runs one epoch; returns the mean discriminative and one-class batch losses.
    pub fn run_epoch(&mut self) -> Result<(f64, f64)> {
        let mut order: Vec<usize> = (0..self.set.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut d_sum, mut d_n, mut o_sum, mut o_n) = (0.0, 0usize, 0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch) {
            if let Some(l) = self.step_dasl(chunk)? {
                d_sum += l * chunk.len() as f64;
                d_n += chunk.len();
            }
            let normals = self.next_normals(chunk.len());
            if let Some(l) = self.step_oasl(&normals)? {
                o_sum += l * normals.len() as f64;
                o_n += normals.len();
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        Ok((mean(d_sum, d_n), mean(o_sum, o_n)))
    }

    fn build_probe(&self) -> Result<(Vec<TrainingSample<'a>>, Vec<TrainingSample<'a>>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(PROBE_STREAM);
        let mut order: Vec<usize> = (0..self.set.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(PROBE_SIZE);
        let mut normals = self.normals.clone();
        normals.shuffle(&mut rng);
        normals.truncate(PROBE_SIZE);
        let d = order
            .iter()
            .map(|&i| self.draw_sample(i, &mut rng))
            .collect::<Result<_>>()?;
        let o = normals
            .iter()
            .map(|&i| self.draw_sample(i, &mut rng))
            .collect::<Result<_>>()?;
        Ok((d, o))
    }

    fn probe_loss(&self, probe: &(Vec<TrainingSample<'_>>, Vec<TrainingSample<'_>>)) -> Result<f64> {
        let d = self.evaluate_dasl(&probe.0, &self.params)?.map_or(0.0, |o| o.loss);
        let o = self.evaluate_oasl(&probe.1, &self.params)?.map_or(0.0, |o| o.loss);
        Ok(d + o)
    }

    /// Runs every configured epoch.
    pub fn run(&mut self) -> Result<TrainReport> {
        let probe = self.build_probe()?;
        let initial_loss = self.probe_loss(&probe)?;
        let mut epoch_losses = Vec::with_capacity(self.cfg.epochs);
        let mut oasl_epoch_losses = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            let (d, o) = self.run_epoch()?;
            epoch_losses.push(d);
            oasl_epoch_losses.push(o);
        }
        let final_loss = self.probe_loss(&probe)?;
        Ok(TrainReport {
            initial_loss,
            final_loss,
            epoch_losses,
            oasl_epoch_losses,
            steps: self.steps,
            grad_check: self.grad_check.clone(),
        })
    }
}

/// Trains adapters on `set` and returns them with a progress report.
pub fn train_with_report(
    set: &FeatureSet,
    protos: &TextPrototypes,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, TrainReport)> {
    let mut trainer = Trainer::new(set, protos, cfg.clone())?;
    let report = trainer.run()?;
    Ok((trainer.into_params(), report))
}

/// Trains adapters on `set`.
pub fn train(set: &FeatureSet, protos: &TextPrototypes, cfg: &TrainConfig) -> Result<AdapterParams> {
    train_with_report(set, protos, cfg).map(|(p, _)| p)
}
