//! Joint encoder/decoder optimization: per-image SNR sampling, channel
//! simulation, the combined MSE + drift objective, global gradient
//! clipping, AdamW with linear warmup, and an EMA parameter shadow.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::channel::{sample_channel, sample_noise, noise_variance, ChannelKind, H_FLOOR};
use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{batches, ImageFolder, MnistData};
use crate::driftfield::{batched_drift_loss, DriftParams};
use crate::error::{Error, Result};
use crate::features::{build_extractor, Extractor, ExtractorSpec};
use crate::graph::Graph;
use crate::models::{JsccSystem, ModelConfig};
use crate::params::{Binding, Params};
use crate::rng::{stream, Domain};
use crate::tensor::{Elem, Tensor};

/// Optimization hyperparameters. Field names double as config-file keys.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lambda_mse: f64,
    pub lambda_drift: f64,
    pub temps: Vec<f64>,
    pub snr_range_db: (f64, f64),
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub channel: ChannelKind,
    pub seed: u64,
    pub val_images: usize,
    pub val_snrs_db: Vec<f64>,
    pub checkpoint_every_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_mse: 5.0,
            lambda_drift: 0.15,
            temps: vec![0.05, 0.2],
            snr_range_db: (0.0, 20.0),
            batch: 128,
            epochs: 100,
            lr: 1e-3,
            warmup_steps: 500,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            clip_norm: 2.0,
            ema_decay: 0.9995,
            channel: ChannelKind::Awgn,
            seed: 1,
            val_images: 256,
            val_snrs_db: vec![0.0, 5.0, 10.0, 15.0],
            checkpoint_every_epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_mse < 0.0 || self.lambda_drift < 0.0 {
            return Err(Error::invalid("TrainConfig", "loss weights must be non-negative"));
        }
        if self.lambda_mse == 0.0 && self.lambda_drift == 0.0 {
            return Err(Error::invalid("TrainConfig", "lambda_mse and lambda_drift cannot both be 0"));
        }
        if self.snr_range_db.0 > self.snr_range_db.1 {
            return Err(Error::invalid("TrainConfig", "snr_range_db low exceeds high"));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::invalid("TrainConfig", "clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.ema_decay == 0.0 {
            return Err(Error::invalid("TrainConfig", "ema_decay must lie in (0, 1)"));
        }
        if self.batch < 1 {
            return Err(Error::invalid("TrainConfig", "batch must be >= 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::invalid("TrainConfig", "lr must be positive"));
        }
        if self.lambda_drift > 0.0 && self.temps.is_empty() {
            return Err(Error::invalid("TrainConfig", "temps must be non-empty when lambda_drift > 0"));
        }
        Ok(())
    }

    pub fn drift_params<T: Elem>(&self) -> DriftParams<T> {
        DriftParams {
            temps: self.temps.iter().map(|&t| T::from_f64(t)).collect(),
            ..DriftParams::default()
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
pub struct AdamW<T: Elem> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
    pub eps: f64,
}

impl<T: Elem> AdamW<T> {
    pub fn new(params: &Params<T>) -> Self {
        AdamW {
            m: params.tensors().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.tensors().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }

    /// One update with the given (already warmed-up) learning rate.
    pub fn step(
        &mut self,
        params: &mut Params<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
        betas: (f64, f64),
        weight_decay: f64,
    ) {
        self.t += 1;
        let (b1, b2) = betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let (nb1, nb2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let decay = T::from_f64(1.0 - lr * weight_decay);
        let step_scale = T::from_f64(lr / bc1);
        let denom_scale = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(self.eps);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let g = grad.data()[j];
                m[j] = b1t * m[j] + nb1 * g;
                v[j] = b2t * v[j] + nb2 * g * g;
                // decoupled weight decay, then the adaptive step
                pd[j] = pd[j] * decay - step_scale * m[j] / ((v[j]).sqrt() * denom_scale + eps);
            }
        }
    }
}

/// Exponential moving average of parameters: shadow <- d*shadow + (1-d)*p.
pub struct Ema<T: Elem> {
    pub decay: f64,
    shadow: Vec<Tensor<T>>,
}

impl<T: Elem> Ema<T> {
    pub fn new(params: &Params<T>, decay: f64) -> Self {
        Ema { decay, shadow: params.clone_tensors() }
    }

    pub fn update(&mut self, params: &Params<T>) {
        let d = T::from_f64(self.decay);
        let nd = T::from_f64(1.0 - self.decay);
        for (s, p) in self.shadow.iter_mut().zip(params.tensors()) {
            let sd = s.data_mut();
            for (sv, &pv) in sd.iter_mut().zip(p.data()) {
                *sv = d * *sv + nd * pv;
            }
        }
    }

    /// Shadow parameters for evaluation; live parameters are untouched.
    pub fn apply(&self, like: &Params<T>) -> Params<T> {
        like.with_tensors(self.shadow.clone())
    }

    pub fn shadow(&self) -> &[Tensor<T>] {
        &self.shadow
    }

    pub fn restore(&mut self, shadow: Vec<Tensor<T>>) {
        self.shadow = shadow;
    }
}

/// Per-step log record.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub mse: f64,
    pub drift: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Measured global norm actually applied to the optimizer.
    pub clipped_grad_norm: f64,
    pub lr: f64,
    pub deep_fade_redraws: u64,
}

/// Everything mutable during a run.
pub struct Trainer<T: Elem> {
    pub system: JsccSystem<T>,
    pub extractor: Option<Extractor<T>>,
    pub cfg: TrainConfig,
    pub opt: AdamW<T>,
    pub ema: Ema<T>,
    pub step: u64,
}

impl<T: Elem> Trainer<T> {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, extractor_spec: &ExtractorSpec) -> Result<Self> {
        cfg.validate()?;
        let system = JsccSystem::new(model_cfg, cfg.seed)?;
        let extractor = if cfg.lambda_drift > 0.0 {
            Some(build_extractor(extractor_spec)?)
        } else {
            None
        };
        let opt = AdamW::new(&system.params);
        let ema = Ema::new(&system.params, cfg.ema_decay);
        Ok(Trainer { system, extractor, cfg, opt, ema, step: 0 })
    }

    /// One optimization step over a batch. `indices` are dataset indices
    /// (the per-image random streams key on them), `epoch` the current epoch.
    pub fn train_step(&mut self, images: &Tensor<T>, indices: &[u64], epoch: u64) -> Result<StepLog> {
        let b = images.shape()[0];
        assert_eq!(b, indices.len(), "one dataset index per image");
        let cfg = &self.cfg;
        let m = self.system.config.m_symbols();
        let (lo, hi) = cfg.snr_range_db;

        // Per-image channel draws, keyed by (seed, dataset index, epoch).
        let mut gammas = Vec::with_capacity(b);
        let mut gammas_eff = Vec::with_capacity(b);
        let mut hs: Vec<(T, T)> = Vec::with_capacity(b);
        let mut h_invs: Vec<(T, T)> = Vec::with_capacity(b);
        let mut redraws = 0u64;
        let mut noise = vec![T::zero(); b * 2 * m];
        for (i, &idx) in indices.iter().enumerate() {
            let mut snr_rng = stream(cfg.seed, Domain::SnrSample, idx, epoch);
            let gamma: f64 = lo + (hi - lo) * snr_rng.random::<f64>();
            let mut coef_rng = stream(cfg.seed, Domain::ChannelCoef, idx, epoch);
            let h = loop {
                let h = sample_channel(cfg.channel, &mut coef_rng);
                if h.norm() >= H_FLOOR {
                    break h;
                }
                redraws += 1;
            };
            let mut noise_rng = stream(cfg.seed, Domain::ChannelNoise, idx, epoch);
            let nv = noise_variance(gamma, crate::models::P_Z);
            for (j, z) in sample_noise(m, nv, &mut noise_rng).into_iter().enumerate() {
                noise[i * 2 * m + 2 * j] = T::from_f64(z.re);
                noise[i * 2 * m + 2 * j + 1] = T::from_f64(z.im);
            }
            gammas.push(T::from_f64(gamma));
            gammas_eff.push(T::from_f64(crate::channel::effective_snr_db(h, gamma)));
            hs.push((T::from_f64(h.re), T::from_f64(h.im)));
            let inv = h.conj() / h.norm_sqr();
            h_invs.push((T::from_f64(inv.re), T::from_f64(inv.im)));
        }

        let mut g: Graph<T> = Graph::new();
        let bind = Binding::bind(&self.system.params, &mut g, true);
        let x = g.constant(images.clone());
        let z = self.system.encoder.forward(&mut g, &bind, &self.system.config, x)?;
        let mut y = if cfg.channel == ChannelKind::Awgn {
            z
        } else {
            g.complex_scale_rows(z, &hs)
        };
        let noise_var = g.constant(Tensor::from_vec(vec![b, 2 * m], noise));
        y = g.add(y, noise_var);
        let y_eq = if cfg.channel == ChannelKind::Awgn {
            y
        } else {
            g.complex_scale_rows(y, &h_invs)
        };
        let gamma_var = g.constant(Tensor::from_vec(vec![b, 1], gammas_eff.clone()));
        let xhat = self
            .system
            .decoder
            .forward(&mut g, &bind, &self.system.config, y_eq, gamma_var)?;

        let mse_scale = T::from_f64(1.0 / images.numel() as f64);
        let mse_node = g.sq_diff_sum(xhat, images, mse_scale);

        let mut terms = vec![(mse_node, T::from_f64(cfg.lambda_mse))];
        let mut drift_value = 0.0;
        if cfg.lambda_drift > 0.0 {
            let extractor = self.extractor.as_ref().expect("extractor present when drifting");
            let recon_layers = extractor.forward(&mut g, xhat)?;
            let gt_vars = extractor.forward(&mut g, x)?;
            let gt_layers: Vec<Tensor<T>> = gt_vars.iter().map(|&v| g.value(v).clone()).collect();
            let (drift_node, _per_image) =
                batched_drift_loss(&mut g, &recon_layers, &gt_layers, &cfg.drift_params())?;
            drift_value = g.value(drift_node).item().as_f64();
            terms.push((drift_node, T::from_f64(cfg.lambda_drift)));
        }
        let total = g.weighted_sum_scalars(&terms);
        let loss = g.value(total).item().as_f64();
        let mse_value = g.value(mse_node).item().as_f64();
        if !loss.is_finite() {
            let bad = first_non_finite_image(g.value(xhat), b);
            return Err(Error::invalid(
                "train_step",
                format!(
                    "non-finite loss {loss} at step {} (batch index {}, dataset index {})",
                    self.step,
                    bad,
                    indices.get(bad).copied().unwrap_or(u64::MAX)
                ),
            ));
        }

        g.backward(total);
        let mut grads: Vec<Option<Tensor<T>>> = bind
            .grads(&g)
            .into_iter()
            .map(|o| o.cloned())
            .collect();
        let mut norm_sq = 0.0f64;
        for grad in grads.iter().flatten() {
            norm_sq += grad.sq_sum_f64();
        }
        let grad_norm = norm_sq.sqrt();
        let mut clipped_grad_norm = grad_norm;
        if grad_norm > cfg.clip_norm {
            let scale = T::from_f64(cfg.clip_norm / grad_norm);
            for grad in grads.iter_mut().flatten() {
                grad.scale_assign(scale);
            }
            clipped_grad_norm = grads
                .iter()
                .flatten()
                .map(|g| g.sq_sum_f64())
                .sum::<f64>()
                .sqrt();
        }
        let lr = cfg.lr * ((self.step + 1) as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
        self.opt
            .step(&mut self.system.params, &grads, lr, cfg.betas, cfg.weight_decay);
        self.ema.update(&self.system.params);
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            loss,
            mse: mse_value,
            drift: drift_value,
            grad_norm,
            clipped_grad_norm,
            lr,
            deep_fade_redraws: redraws,
        })
    }

    /// EMA shadow wrapped as a parameter arena for evaluation.
    pub fn ema_params(&self) -> Params<T> {
        self.ema.apply(&self.system.params)
    }
}

fn first_non_finite_image<T: Elem>(xhat: &Tensor<T>, b: usize) -> usize {
    let per = xhat.numel() / b;
    for i in 0..b {
        if !xhat.data()[i * per..(i + 1) * per].iter().all(|v| v.is_finite()) {
            return i;
        }
    }
    0
}

/// A training/eval data source.
pub enum Source {
    Mnist(MnistData),
    Folder(ImageFolder),
}

impl Source {
    pub fn len(&self) -> usize {
        match self {
            Source::Mnist(m) => m.len(),
            Source::Folder(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> Result<(usize, usize, usize)> {
        match self {
            Source::Mnist(m) => Ok(m.image_shape()),
            Source::Folder(f) => f.image_shape(),
        }
    }

    pub fn get(&self, index: usize, epoch: u64) -> Result<Tensor<f32>> {
        match self {
            Source::Mnist(m) => Ok(m.get(index)),
            Source::Folder(f) => f.get(index, epoch),
        }
    }

    /// Load a batch as one (B, C, H, W) tensor (parallel decode, fixed order).
    pub fn batch<T: Elem>(&self, indices: &[usize], epoch: u64) -> Result<Tensor<T>> {
        let (c, h, w) = self.image_shape()?;
        let per = c * h * w;
        let images: Vec<Result<Tensor<f32>>> = indices
            .par_iter()
            .map(|&i| self.get(i, epoch))
            .collect();
        let mut data = vec![T::zero(); indices.len() * per];
        for (i, img) in images.into_iter().enumerate() {
            let img = img?;
            for (o, &v) in data[i * per..(i + 1) * per].iter_mut().zip(img.data()) {
                *o = T::from_f64(v as f64);
            }
        }
        Ok(Tensor::from_vec(vec![indices.len(), c, h, w], data))
    }
}

/// Result of [`fit`].
pub struct FitOutput {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub loss_trace: Vec<f64>,
}

/// Run the full training loop: epoch-shuffled batches, per-step logging,
/// periodic validation with EMA weights, checkpoints, resume.
#[allow(clippy::too_many_arguments)]
pub fn fit<T: Elem>(
    run_dir: &Path,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    extractor_spec: &ExtractorSpec,
    train_src: &Source,
    val_src: &Source,
    train_limit: Option<usize>,
    resume: Option<&Path>,
) -> Result<FitOutput> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let ck_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let metrics_path = run_dir.join("metrics.jsonl");

    let mut trainer: Trainer<T> = Trainer::new(model_cfg.clone(), train_cfg.clone(), extractor_spec)?;
    let mut start_epoch = 0u64;
    let mut start_batch = 0u64;
    if let Some(ck) = resume {
        let state = checkpoint::load::<T>(ck)?;
        if state.meta.model != *model_cfg {
            return Err(Error::Checkpoint(format!(
                "resume model config mismatch:\n checkpoint: {:?}\n requested: {:?}",
                state.meta.model, model_cfg
            )));
        }
        trainer.system.params = state.live;
        trainer.ema.restore(state.ema);
        trainer.opt.restore(state.opt_m, state.opt_v, state.meta.opt_step);
        trainer.step = state.meta.step;
        start_epoch = state.meta.epoch;
        start_batch = state.meta.batch_in_epoch;
    }

    let mut metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let n = train_limit.unwrap_or(usize::MAX).min(train_src.len());
    if n == 0 {
        return Err(Error::invalid("fit", "empty training source"));
    }
    let eval_extractor: Extractor<T> = build_extractor(extractor_spec)?;
    let mut loss_trace = Vec::new();
    let mut last_log: Option<StepLog> = None;

    let write_ck = |trainer: &Trainer<T>, epoch: u64, batch_in_epoch: u64, path: &Path| -> Result<()> {
        let meta = CheckpointMeta {
            format_version: checkpoint::FORMAT_VERSION,
            model: trainer.system.config.clone(),
            train: trainer.cfg.clone(),
            extractor: extractor_spec.clone(),
            step: trainer.step,
            epoch,
            batch_in_epoch,
            opt_step: trainer.opt.step_count(),
            master_seed: trainer.cfg.seed,
            has_ema: true,
        };
        checkpoint::save(path, &meta, &trainer.system.params, trainer.ema.shadow(), trainer.opt.moments())
    };

    if train_cfg.epochs == 0 {
        let final_ck = ck_dir.join("final.ntar");
        write_ck(&trainer, 0, 0, &final_ck)?;
        return Ok(FitOutput { final_checkpoint: final_ck, metrics_path, loss_trace });
    }

    for epoch in start_epoch..train_cfg.epochs as u64 {
        let batch_list = batches(n, train_cfg.batch, train_cfg.seed, epoch);
        let first_batch = if epoch == start_epoch { start_batch as usize } else { 0 };
        for (bi, batch_indices) in batch_list.iter().enumerate().skip(first_batch) {
            let images: Tensor<T> = train_src.batch(batch_indices, epoch)?;
            let idx64: Vec<u64> = batch_indices.iter().map(|&i| i as u64).collect();
            let log = trainer.train_step(&images, &idx64, epoch)?;
            loss_trace.push(log.loss);
            let mut rec = serde_json::to_value(&log).expect("step log serializes");
            rec["kind"] = "train".into();
            rec["epoch"] = epoch.into();
            rec["batch"] = (bi as u64).into();
            writeln!(metrics_file, "{rec}").map_err(|e| Error::io(&metrics_path, e))?;
            last_log = Some(log);
        }
        // End-of-epoch validation with EMA weights.
        let ema_params = trainer.ema_params();
        let points = evaluate(
            &trainer.system,
            &ema_params,
            &eval_extractor,
            val_src,
            train_cfg.val_images.min(val_src.len()),
            &train_cfg.val_snrs_db,
            train_cfg.channel,
            trainer.cfg.seed,
        )?;
        for p in &points {
            let rec = serde_json::json!({
                "kind": "val",
                "step": trainer.step,
                "epoch": epoch,
                "snr_db": p.report.snr_db,
                "psnr": p.report.psnr_db,
                "msssim_db": p.report.msssim_db,
                "feat_dist": p.report.feat_dist,
                "outages": p.outages,
                "loss": last_log.as_ref().map(|l| l.loss),
                "mse": last_log.as_ref().map(|l| l.mse),
                "drift": last_log.as_ref().map(|l| l.drift),
            });
            writeln!(metrics_file, "{rec}").map_err(|e| Error::io(&metrics_path, e))?;
        }
        let at_end = epoch + 1 == train_cfg.epochs as u64;
        if at_end || train_cfg.checkpoint_every_epochs > 0 && (epoch + 1) % train_cfg.checkpoint_every_epochs as u64 == 0 {
            write_ck(&trainer, epoch + 1, 0, &ck_dir.join(format!("ck_epoch{:04}.ntar", epoch + 1)))?;
        }
    }
    let final_ck = ck_dir.join("final.ntar");
    write_ck(&trainer, train_cfg.epochs as u64, 0, &final_ck)?;
    Ok(FitOutput { final_checkpoint: final_ck, metrics_path, loss_trace })
}

/// One evaluation point: metrics over the set at a fixed SNR and channel.
#[derive(Debug, Clone)]
pub struct EvalPoint {
    pub channel: ChannelKind,
    pub report: crate::metrics::MetricReport,
    pub outages: usize,
}

const EVAL_BATCH: usize = 32;

/// Transmit `limit` images through fresh channel realizations at each SNR
/// (streams keyed by `(eval_seed, image index, SNR index)`) and aggregate
/// metrics. Decoding is batched; each batch is one decoder forward pass.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Elem>(
    system: &JsccSystem<T>,
    params: &Params<T>,
    extractor: &Extractor<T>,
    src: &Source,
    limit: usize,
    snrs_db: &[f64],
    channel: ChannelKind,
    eval_seed: u64,
) -> Result<Vec<EvalPoint>> {
    let n = limit.min(src.len());
    if n == 0 {
        return Err(Error::invalid("evaluate", "no images to evaluate"));
    }
    let m = system.config.m_symbols();
    let (_, ih, iw) = src.image_shape()?;
    let scales = crate::metrics::default_n_scales(ih, iw);
    let mut out = Vec::with_capacity(snrs_db.len());
    for (si, &snr) in snrs_db.iter().enumerate() {
        let mut psnr_acc = 0.0;
        let mut msssim_acc = 0.0;
        let mut feat_acc = 0.0;
        let mut outages = 0usize;
        let mut counted = 0usize;
        for chunk_start in (0..n).step_by(EVAL_BATCH) {
            let idxs: Vec<usize> = (chunk_start..(chunk_start + EVAL_BATCH).min(n)).collect();
            let images: Tensor<T> = src.batch(&idxs, 0)?;
            let b = idxs.len();
            // Encode the whole chunk in one graph.
            let mut g: Graph<T> = Graph::new();
            let bind = Binding::bind(params, &mut g, false);
            let x = g.constant(images.clone());
            let z = system.encoder.forward(&mut g, &bind, &system.config, x)?;
            let z_rows = g.value(z).clone();
            // Per-image channel, then batched decode.
            let mut rows = vec![T::zero(); b * 2 * m];
            let mut gammas = vec![T::zero(); b];
            let mut keep = vec![true; b];
            for (i, &idx) in idxs.iter().enumerate() {
                let mut rng = stream(eval_seed, Domain::Eval, idx as u64, si as u64);
                let h = sample_channel(channel, &mut rng);
                if h.norm() < H_FLOOR {
                    outages += 1;
                    keep[i] = false;
                    continue;
                }
                let nv = noise_variance(snr, crate::models::P_Z);
                let noise = sample_noise(m, nv, &mut rng);
                let inv = h.conj() / h.norm_sqr();
                let row = &z_rows.data()[i * 2 * m..(i + 1) * 2 * m];
                for j in 0..m {
                    let zc = num_complex::Complex64::new(row[2 * j].as_f64(), row[2 * j + 1].as_f64());
                    let y = h * zc + noise[j];
                    let eqv = y * inv;
                    rows[i * 2 * m + 2 * j] = T::from_f64(eqv.re);
                    rows[i * 2 * m + 2 * j + 1] = T::from_f64(eqv.im);
                }
                gammas[i] = T::from_f64(crate::channel::effective_snr_db(h, snr));
            }
            let mut g2: Graph<T> = Graph::new();
            let bind2 = Binding::bind(params, &mut g2, false);
            let y_eq = g2.constant(Tensor::from_vec(vec![b, 2 * m], rows));
            let gamma_var = g2.constant(Tensor::from_vec(vec![b, 1], gammas));
            let xhat = system
                .decoder
                .forward(&mut g2, &bind2, &system.config, y_eq, gamma_var)?;
            let xhat_t = g2.value(xhat).clone();
            // Per-image metrics, parallel with ordered reduce.
            let per: Vec<Result<(f64, f64, f64)>> = (0..b)
                .into_par_iter()
                .map(|i| {
                    if !keep[i] {
                        return Ok((0.0, 0.0, 0.0));
                    }
                    let xi = images.slice_image(i);
                    let yi = xhat_t.slice_image(i);
                    let p = crate::metrics::psnr(&xi, &yi, 1.0)?;
                    let s = crate::metrics::ms_ssim(&xi, &yi, scales)?;
                    let f = crate::metrics::feature_distance(&xi, &yi, extractor)?;
                    Ok((p, s, f))
                })
                .collect();
            for (i, r) in per.into_iter().enumerate() {
                let (p, s, f) = r?;
                if keep[i] {
                    psnr_acc += p;
                    msssim_acc += s;
                    feat_acc += f;
                    counted += 1;
                }
            }
        }
        let nf = counted.max(1) as f64;
        let msssim = msssim_acc / nf;
        out.push(EvalPoint {
            channel,
            report: crate::metrics::MetricReport {
                snr_db: snr,
                psnr_db: psnr_acc / nf,
                msssim,
                msssim_db: crate::metrics::msssim_db(msssim.clamp(0.0, 1.0))?,
                feat_dist: feat_acc / nf,
                n_images: counted,
            },
            outages,
        });
    }
    Ok(out)
}
