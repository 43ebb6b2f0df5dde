//! Training engine: AdamW with warmup+cosine schedule, the two-step latent
//! rollout objective, best-validation checkpointing, the physical-space
//! ablation baseline, and model evaluation over the HTA schedule.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hta::{build_hta_schedule, rollout_with, OBSERVED_FIRST};
use crate::losses::{
    ce_var, list_mae_var, mae_var, overall_loss, recon_weight, wmce_var, LossBreakdown,
    WmceTerms,
};
use crate::metrics::{evaluate_run, RunScores};
use crate::model::encoder::encode;
use crate::model::heads::{project, reconstruct};
use crate::model::layers::{conv, multi_scale_block, time_embedding, vit_forward, VitSpec};
use crate::model::lpm::{lpm_predict, INTERVALS};
use crate::model::params::Init;
use crate::model::{Forward, ModelConfig, ParamStore};
use crate::synth::{
    add_noise, normalize, MultiSourceSample, NormStats, Sequence, QPE_RADAR_CHANNELS,
    REANALYSIS_CHANNELS, SATELLITE_CHANNELS,
};
use crate::tensor::io::{load_archive, save_archive};
use crate::tensor::{mac_count, reset_mac_count, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    Mae,
    WeightedMae,
    WeightedMaePlainCe,
    Wmce,
}

impl LossVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossVariant::Mae => "mae",
            LossVariant::WeightedMae => "weighted_mae",
            LossVariant::WeightedMaePlainCe => "weighted_mae_plain_ce",
            LossVariant::Wmce => "wmce",
        }
    }

    pub const ALL: [LossVariant; 4] = [
        LossVariant::Mae,
        LossVariant::WeightedMae,
        LossVariant::WeightedMaePlainCe,
        LossVariant::Wmce,
    ];
}

impl FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mae" => Ok(LossVariant::Mae),
            "weighted_mae" => Ok(LossVariant::WeightedMae),
            "weighted_mae_plain_ce" => Ok(LossVariant::WeightedMaePlainCe),
            "wmce" => Ok(LossVariant::Wmce),
            other => Err(format!("unknown loss variant '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterationSpace {
    Latent,
    Physical,
}

impl IterationSpace {
    pub fn as_str(&self) -> &'static str {
        match self {
            IterationSpace::Latent => "latent",
            IterationSpace::Physical => "physical",
        }
    }
}

impl FromStr for IterationSpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "latent" => Ok(IterationSpace::Latent),
            "physical" => Ok(IterationSpace::Physical),
            other => Err(format!("unknown iteration space '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_variant: LossVariant,
    pub iteration_space: IterationSpace,
    pub importance_sampling: bool,
    /// Fraction of event-free sequences kept when importance sampling.
    pub importance_keep: f64,
    pub noise_sigma: f64,
    pub grad_clip: f64,
    /// Leads used for the per-epoch validation scores.
    pub val_horizon: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            base_lr: 1e-5,
            warmup_epochs: 20,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1.0,
            dropout: 0.15,
            batch_size: 8,
            seed: 0,
            loss_variant: LossVariant::Wmce,
            iteration_space: IterationSpace::Latent,
            importance_sampling: false,
            importance_keep: 0.2,
            noise_sigma: 0.02,
            grad_clip: 1.0,
            val_horizon: 6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.base_lr <= 0.0 {
            return Err(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if self.warmup_epochs > self.epochs {
            return Err(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.noise_sigma < 0.0 {
            return Err(format!("noise_sigma {} negative", self.noise_sigma));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup_epochs`, then cosine decay to 0
/// at `epochs`. `step` counts optimizer steps; the epoch position is
/// `step / steps_per_epoch`, so the curve is continuous at the junction.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let e = step as f64 / steps_per_epoch.max(1) as f64;
    let w = cfg.warmup_epochs as f64;
    let total = cfg.epochs as f64;
    if e < w {
        cfg.base_lr * e / w
    } else if total > w {
        let frac = ((e - w) / (total - w)).min(1.0);
        cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    } else {
        cfg.base_lr
    }
}

/// AdamW with decoupled weight decay and bias correction. Slot state is
/// keyed by parameter name so updates survive store reloads.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let theta = match store.get_mut(name) {
                Some(t) => t,
                None => continue,
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta.data[i] -= lr * self.weight_decay * theta.data[i];
                theta.data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_grad_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so the global norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

// ---- shared loss plumbing ----

struct PrecipTerms {
    mae: Var,
    ce_precip: Var,
    ce_dry: Var,
}

/// One precipitation-loss application under the configured loss ladder rung.
fn precip_terms(
    t: &mut Tape,
    variant: LossVariant,
    y_norm: &Tensor,
    pred: Var,
    y_raw: &Tensor,
    tau: f64,
) -> Result<PrecipTerms, TensorError> {
    match variant {
        LossVariant::Mae => {
            let m = mae_var(t, y_norm, pred)?;
            let z = t.scalar_const(0.0);
            Ok(PrecipTerms { mae: m, ce_precip: z, ce_dry: z })
        }
        LossVariant::WeightedMae => {
            let w = wmce_var(t, y_norm, pred, y_raw, tau)?;
            let z = t.scalar_const(0.0);
            Ok(PrecipTerms { mae: w.mae_term, ce_precip: z, ce_dry: z })
        }
        LossVariant::WeightedMaePlainCe => {
            let w = wmce_var(t, y_norm, pred, y_raw, tau)?;
            let ce = ce_var(t, y_norm, pred, tau)?;
            let z = t.scalar_const(0.0);
            Ok(PrecipTerms { mae: w.mae_term, ce_precip: ce, ce_dry: z })
        }
        LossVariant::Wmce => {
            let w = wmce_var(t, y_norm, pred, y_raw, tau)?;
            Ok(PrecipTerms {
                mae: w.mae_term,
                ce_precip: w.ce_precip_term,
                ce_dry: w.ce_dry_term,
            })
        }
    }
}

struct ExampleTerms {
    mae: Var,
    ce_precip: Var,
    ce_dry: Var,
    latent: Var,
    recon: BTreeMap<String, Var>,
    total: Var,
}

fn check_finite(t: &Tape, v: Var, what: &str) -> Result<(), TensorError> {
    if t.data(v).iter().any(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite(format!("loss term '{what}'")));
    }
    Ok(())
}

fn modality_list(sample: &MultiSourceSample) -> Vec<(&'static str, usize)> {
    let mut mods = vec![
        ("qpe_radar", QPE_RADAR_CHANNELS),
        ("reanalysis", REANALYSIS_CHANNELS),
    ];
    if sample.satellite.is_some() {
        mods.push(("satellite", SATELLITE_CHANNELS));
    }
    mods
}

fn modality_frame(sample: &MultiSourceSample, name: &str) -> Tensor {
    match name {
        "qpe_radar" => sample.qpe_radar.clone(),
        "reanalysis" => sample.reanalysis.clone(),
        "satellite" => sample.satellite.clone().expect("satellite frame"),
        other => panic!("unknown modality {other}"),
    }
}

/// Latent-space training loss for one (sequence, origin, Δ) example.
#[allow(clippy::too_many_arguments)]
fn example_terms_latent(
    f: &mut Forward,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    norm_seq: &Sequence,
    raw_seq: &Sequence,
    origin: usize,
    delta: usize,
    noise_seed: u64,
    tau: f64,
) -> Result<ExampleTerms, TensorError> {
    let s_prev = &norm_seq.samples[origin - delta];
    let s_now = &norm_seq.samples[origin];
    let noisy_prev = add_noise(s_prev, tcfg.noise_sigma, noise_seed)
        .map_err(|e| TensorError::InvalidArg(e.to_string()))?;
    let noisy_now = add_noise(s_now, tcfg.noise_sigma, noise_seed ^ 0x5bd1e995)
        .map_err(|e| TensorError::InvalidArg(e.to_string()))?;

    let h_prev = encode(f, mcfg, &noisy_prev);
    let h_now = encode(f, mcfg, &noisy_now);
    let t0 = s_now.time_index;
    let pred1 = lpm_predict(f, mcfg, delta, h_prev, h_now, t0);
    let pred2 = lpm_predict(f, mcfg, delta, h_now, pred1, t0 + delta as i64);

    // Latent supervision against the encoder's view of the true future.
    let fut1 = &norm_seq.samples[origin + delta];
    let fut2 = &norm_seq.samples[origin + 2 * delta];
    let h_fut1 = encode(f, mcfg, fut1);
    let h_fut2 = encode(f, mcfg, fut2);
    let latent = {
        let n = 2 * f.tape.numel(pred1);
        let d1 = f.tape.sub(h_fut1, pred1);
        let a1 = f.tape.abs(d1);
        let s1 = f.tape.sum_all(a1);
        let d2 = f.tape.sub(h_fut2, pred2);
        let a2 = f.tape.abs(d2);
        let s2 = f.tape.sum_all(a2);
        let s = f.tape.add(s1, s2);
        f.tape.scale(s, 1.0 / n as f64)
    };

    // Precipitation loss on both projected steps, summed over lead steps.
    let mut mae = f.tape.scalar_const(0.0);
    let mut ce_p = mae;
    let mut ce_d = mae;
    for (fut, raw_fut) in [
        (fut1, &raw_seq.samples[origin + delta]),
        (fut2, &raw_seq.samples[origin + 2 * delta]),
    ] {
        let h = if fut.time_index == fut1.time_index { pred1 } else { pred2 };
        let y = project(f, mcfg, h);
        let terms = precip_terms(
            &mut f.tape,
            tcfg.loss_variant,
            &fut.target,
            y,
            &raw_fut.target,
            tau,
        )?;
        mae = f.tape.add(mae, terms.mae);
        ce_p = f.tape.add(ce_p, terms.ce_precip);
        ce_d = f.tape.add(ce_d, terms.ce_dry);
    }

    // Reconstruction from input and predicted latents, per modality.
    let steps: [(Var, &MultiSourceSample); 4] = [
        (h_prev, s_prev),
        (h_now, s_now),
        (pred1, fut1),
        (pred2, fut2),
    ];
    let mut recon = BTreeMap::new();
    for (name, channels) in modality_list(s_now) {
        let mut pairs = Vec::with_capacity(steps.len());
        for (h, sample) in &steps {
            let frame = modality_frame(sample, name);
            let (nh, nw) = (frame.shape[1], frame.shape[2]);
            let r = reconstruct(f, mcfg, *h, name, channels, nh, nw);
            pairs.push((frame, r));
        }
        recon.insert(name.to_string(), list_mae_var(&mut f.tape, &pairs)?);
    }

    let mut total = f.tape.add(mae, ce_p);
    total = f.tape.add(total, ce_d);
    total = f.tape.add(total, latent);
    for (name, v) in &recon {
        let w = f.tape.scale(*v, recon_weight(name));
        total = f.tape.add(total, w);
    }
    Ok(ExampleTerms { mae, ce_precip: ce_p, ce_dry: ce_d, latent, recon, total })
}

// ---- physical-space ablation baseline ----

pub fn physical_channels(mcfg: &ModelConfig) -> usize {
    QPE_RADAR_CHANNELS
        + REANALYSIS_CHANNELS
        + if mcfg.with_satellite { SATELLITE_CHANNELS } else { 0 }
}

/// Full-resolution state for the physical-space baseline: fine-grid QPE and
/// satellite channels plus reanalysis resampled onto the fine grid.
fn physical_state(f: &mut Forward, mcfg: &ModelConfig, sample: &MultiSourceSample) -> Var {
    let qpe = f.tape.constant(sample.qpe_radar.clone());
    let rean = f.tape.constant(sample.reanalysis.clone());
    let rean = f.tape.resize_nearest(rean, mcfg.height, mcfg.width);
    let mut parts = vec![qpe, rean];
    if mcfg.with_satellite {
        let sat = match &sample.satellite {
            Some(s) => f.tape.constant(s.clone()),
            None => f
                .tape
                .constant(Tensor::zeros(vec![SATELLITE_CHANNELS, mcfg.height, mcfg.width])),
        };
        parts.push(sat);
    }
    f.tape.concat_channels(&parts)
}

/// One autoregressive step of the physical baseline: same trunk shape as
/// the latent predictor but applied to the raw-channel field at full
/// resolution. Parameters live under `phys{delta}.*`.
pub fn physical_predict(
    f: &mut Forward,
    mcfg: &ModelConfig,
    delta: usize,
    s_prev: Var,
    s_now: Var,
    t_now: i64,
) -> Var {
    assert!(INTERVALS.contains(&delta), "no physical predictor for interval {delta}");
    let c = physical_channels(mcfg);
    let w = mcfg.extractor_width;
    let (h, wd) = (mcfg.height, mcfg.width);
    let prefix = format!("phys{delta}");

    let te_prev = time_embedding(t_now - delta as i64, mcfg.time_channels, h, wd);
    let te_now = time_embedding(t_now, mcfg.time_channels, h, wd);
    let te_prev = f.tape.constant(te_prev);
    let te_now = f.tape.constant(te_now);
    let const_embed = f.param(
        "phys_const_embed",
        &[mcfg.const_channels, h, wd],
        Init::FanIn { fan_in: mcfg.const_channels },
    );
    let cat = f
        .tape
        .concat_channels(&[s_prev, te_prev, s_now, te_now, const_embed]);
    let trunk_c = 2 * (c + mcfg.time_channels) + mcfg.const_channels;
    let mut x = conv(f, &format!("{prefix}.fuse"), cat, trunk_c, w, 3, 1);
    x = f.tape.silu(x);
    x = multi_scale_block(f, &format!("{prefix}.msb"), x, w);
    let spec = VitSpec {
        channels: w,
        height: h,
        width: wd,
        patch: mcfg.patch,
        token_dim: mcfg.token_dim,
        blocks: mcfg.vit_blocks,
        heads: mcfg.heads,
        mlp_hidden: mcfg.mlp_hidden,
    };
    x = vit_forward(f, &format!("{prefix}.vit"), x, &spec);
    let d = conv(f, &format!("{prefix}.head"), x, w, c, 3, 1);
    f.tape.add(s_now, d)
}

fn plane_mask(channels: usize, plane: usize, which: usize) -> Vec<bool> {
    (0..channels * plane)
        .map(|i| i / plane == which)
        .collect()
}

/// Physical-space training loss: the configured precipitation loss on the
/// intensity channel plus plain MAE on every other state channel.
#[allow(clippy::too_many_arguments)]
fn example_terms_physical(
    f: &mut Forward,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    norm_seq: &Sequence,
    raw_seq: &Sequence,
    origin: usize,
    delta: usize,
    noise_seed: u64,
    tau: f64,
) -> Result<ExampleTerms, TensorError> {
    let c = physical_channels(mcfg);
    let plane = mcfg.height * mcfg.width;
    let s_prev = &norm_seq.samples[origin - delta];
    let s_now = &norm_seq.samples[origin];
    let noisy_prev = add_noise(s_prev, tcfg.noise_sigma, noise_seed)
        .map_err(|e| TensorError::InvalidArg(e.to_string()))?;
    let noisy_now = add_noise(s_now, tcfg.noise_sigma, noise_seed ^ 0x5bd1e995)
        .map_err(|e| TensorError::InvalidArg(e.to_string()))?;

    let x_prev = physical_state(f, mcfg, &noisy_prev);
    let x_now = physical_state(f, mcfg, &noisy_now);
    let t0 = s_now.time_index;
    let pred1 = physical_predict(f, mcfg, delta, x_prev, x_now, t0);
    let pred2 = physical_predict(f, mcfg, delta, x_now, pred1, t0 + delta as i64);

    let mut mae = f.tape.scalar_const(0.0);
    let mut ce_p = mae;
    let mut ce_d = mae;
    let mut rest_mae = mae;
    let ch0 = plane_mask(c, plane, 0);
    let rest: Vec<bool> = ch0.iter().map(|m| !m).collect();
    for (pred, fut_idx) in [(pred1, origin + delta), (pred2, origin + 2 * delta)] {
        let fut = &norm_seq.samples[fut_idx];
        let raw_fut = &raw_seq.samples[fut_idx];
        let y = f.tape.masked_select(pred, &ch0);
        let y_true = Tensor::new(vec![plane], fut.target.data.clone());
        let y_raw = Tensor::new(vec![plane], raw_fut.target.data.clone());
        let terms = precip_terms(&mut f.tape, tcfg.loss_variant, &y_true, y, &y_raw, tau)?;
        mae = f.tape.add(mae, terms.mae);
        ce_p = f.tape.add(ce_p, terms.ce_precip);
        ce_d = f.tape.add(ce_d, terms.ce_dry);

        let truth_state = physical_state(f, mcfg, fut);
        let truth_rest = f.tape.masked_select(truth_state, &rest);
        let pred_rest = f.tape.masked_select(pred, &rest);
        let d = f.tape.sub(truth_rest, pred_rest);
        let a = f.tape.abs(d);
        let m = f.tape.mean_all(a);
        rest_mae = f.tape.add(rest_mae, m);
    }

    let latent = f.tape.scalar_const(0.0);
    let mut recon = BTreeMap::new();
    recon.insert("state".to_string(), rest_mae);
    let mut total = f.tape.add(mae, ce_p);
    total = f.tape.add(total, ce_d);
    total = f.tape.add(total, rest_mae);
    Ok(ExampleTerms { mae, ce_precip: ce_p, ce_dry: ce_d, latent, recon, total })
}

// ---- batch step / fit ----

/// One optimizer step over a batch of (sequence index, origin) examples at
/// a single interval Δ. Returns the batch-mean loss breakdown.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    store: &mut ParamStore,
    opt: &mut AdamW,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    norm: &[Sequence],
    raw: &[Sequence],
    batch: &[(usize, usize)],
    delta: usize,
    lr: f64,
    step_seed: u64,
) -> Result<LossBreakdown, TensorError> {
    let tau = raw_tau_norm(norm, raw);
    let mut grad_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut mae_s = 0.0;
    let mut ce_p_s = 0.0;
    let mut ce_d_s = 0.0;
    let mut latent_s = 0.0;
    let mut recon_s: BTreeMap<String, f64> = BTreeMap::new();
    let scale = 1.0 / batch.len() as f64;

    for (k, &(si, origin)) in batch.iter().enumerate() {
        let noise_seed = step_seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(k as u64);
        let mut f = Forward::new(store, true, tcfg.dropout, noise_seed ^ 0xa5a5a5a5);
        let terms = match tcfg.iteration_space {
            IterationSpace::Latent => example_terms_latent(
                &mut f, mcfg, tcfg, &norm[si], &raw[si], origin, delta, noise_seed, tau,
            )?,
            IterationSpace::Physical => example_terms_physical(
                &mut f, mcfg, tcfg, &norm[si], &raw[si], origin, delta, noise_seed, tau,
            )?,
        };
        check_finite(&f.tape, terms.mae, "precip_mae")?;
        check_finite(&f.tape, terms.ce_precip, "ce_precip")?;
        check_finite(&f.tape, terms.ce_dry, "ce_dry")?;
        check_finite(&f.tape, terms.latent, "latent")?;
        check_finite(&f.tape, terms.total, "total")?;

        mae_s += f.tape.data(terms.mae)[0] * scale;
        ce_p_s += f.tape.data(terms.ce_precip)[0] * scale;
        ce_d_s += f.tape.data(terms.ce_dry)[0] * scale;
        latent_s += f.tape.data(terms.latent)[0] * scale;
        for (name, v) in &terms.recon {
            *recon_s.entry(name.clone()).or_insert(0.0) += f.tape.data(*v)[0] * scale;
        }

        f.tape.backward(terms.total)?;
        for (name, g) in f.grads() {
            let acc = grad_acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v * scale;
            }
        }
    }

    clip_gradients(&mut grad_acc, tcfg.grad_clip);
    opt.step(store, &grad_acc, lr);

    let wmce = WmceTerms {
        mae_term: mae_s,
        ce_precip_term: ce_p_s,
        ce_dry_term: ce_d_s,
    };
    Ok(overall_loss(&wmce, latent_s, &recon_s))
}

fn raw_tau_norm(_norm: &[Sequence], _raw: &[Sequence]) -> f64 {
    // Fixed by the generator contract: 0.2 mm/h at a 64 mm/h cap.
    0.2 / 64.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub val_csi: Option<f64>,
    pub val_pod: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub epochs: Vec<EpochRow>,
    pub step_breakdowns: Vec<(usize, LossBreakdown)>,
    pub best_epoch: usize,
    pub best_val_csi: f64,
    pub trained_sequences: usize,
}

impl FitReport {
    pub fn epoch_csv(&self) -> String {
        let mut out = String::from("epoch,lr,total_loss,val_csi_0.2,val_pod_0.2\n");
        for r in &self.epochs {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or("NA".into());
            out.push_str(&format!(
                "{},{:.3e},{:.6},{},{}\n",
                r.epoch,
                r.lr,
                r.total_loss,
                f(r.val_csi),
                f(r.val_pod),
            ));
        }
        out
    }

    pub fn breakdown_csv(&self) -> String {
        let mut out = String::from(LossBreakdown::csv_header());
        out.push('\n');
        for (step, b) in &self.step_breakdowns {
            out.push_str(&b.csv_row(*step));
            out.push('\n');
        }
        out
    }
}

fn normalize_sequences(seqs: &[Sequence], stats: &NormStats) -> Vec<Sequence> {
    seqs.iter()
        .map(|s| Sequence {
            samples: s.samples.iter().map(|x| normalize(x, stats)).collect(),
            seed: s.seed,
        })
        .collect()
}

/// Train for the configured epochs, tracking the best-validation parameter
/// set by mean CSI@0.2 over the validation horizon. Returns the best store.
pub fn fit(
    train_raw: &[Sequence],
    val_raw: &[Sequence],
    stats: &NormStats,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(ParamStore, FitReport), TensorError> {
    tcfg.validate().map_err(TensorError::InvalidArg)?;
    mcfg.validate().map_err(TensorError::InvalidArg)?;
    if train_raw.is_empty() || val_raw.is_empty() {
        return Err(TensorError::InvalidArg("empty dataset split".into()));
    }

    let train_set: Vec<Sequence> = if tcfg.importance_sampling {
        crate::synth::importance_filter(
            train_raw.to_vec(),
            tcfg.importance_keep,
            stats.tau_raw,
            tcfg.seed,
        )
    } else {
        train_raw.to_vec()
    };
    if train_set.is_empty() {
        return Err(TensorError::InvalidArg(
            "importance filtering removed every training sequence".into(),
        ));
    }

    let norm_train = normalize_sequences(&train_set, stats);
    let steps_per_epoch = train_set.len().div_ceil(tcfg.batch_size).max(1);

    let mut store = ParamStore::new(tcfg.seed);
    let mut opt = AdamW::new(tcfg);
    let mut report = FitReport {
        epochs: Vec::new(),
        step_breakdowns: Vec::new(),
        best_epoch: 0,
        best_val_csi: f64::NEG_INFINITY,
        trained_sequences: train_set.len(),
    };
    let mut best_store = store.clone();
    let mut global_step = 0usize;

    for epoch in 0..tcfg.epochs {
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for step in 0..steps_per_epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(
                tcfg.seed
                    .wrapping_mul(0x100000001b3)
                    .wrapping_add((epoch * 1_000_003 + step) as u64),
            );
            let delta = INTERVALS[rng.gen_range(0..INTERVALS.len())];
            let mut batch = Vec::with_capacity(tcfg.batch_size);
            for _ in 0..tcfg.batch_size {
                let si = rng.gen_range(0..train_set.len());
                let t_len = train_set[si].samples.len();
                if t_len <= 3 * delta {
                    continue;
                }
                let origin = rng.gen_range(delta..=(t_len - 1 - 2 * delta));
                batch.push((si, origin));
            }
            if batch.is_empty() {
                continue;
            }
            let lr = lr_at(global_step, steps_per_epoch, tcfg);
            last_lr = lr;
            let step_seed = rng.gen::<u64>();
            let breakdown = train_step(
                &mut store, &mut opt, mcfg, tcfg, &norm_train, &train_set, &batch, delta,
                lr, step_seed,
            )?;
            epoch_loss += breakdown.total;
            report.step_breakdowns.push((global_step, breakdown));
            global_step += 1;
        }
        epoch_loss /= steps_per_epoch as f64;

        let val = evaluate_model(
            mcfg,
            &mut store,
            tcfg.iteration_space,
            val_raw,
            stats,
            tcfg.val_horizon,
            &[0.2],
            false,
        )?;
        let (csi, pod) = (val.means[0].csi, val.means[0].pod);
        report.epochs.push(EpochRow {
            epoch,
            lr: last_lr,
            total_loss: epoch_loss,
            val_csi: csi,
            val_pod: pod,
        });
        let score = csi.unwrap_or(0.0);
        if score > report.best_val_csi {
            report.best_val_csi = score;
            report.best_epoch = epoch;
            best_store = store.clone();
        }
    }
    Ok((best_store, report))
}

// ---- evaluation over the HTA schedule ----

/// Forecast `horizon` precipitation fields (mm/h) from the five observed
/// frames ending at `origin`.
pub fn predict_sequence(
    mcfg: &ModelConfig,
    store: &mut ParamStore,
    space: IterationSpace,
    raw_seq: &Sequence,
    stats: &NormStats,
    origin: usize,
    horizon: usize,
) -> Result<Vec<Tensor>, TensorError> {
    if origin < 4 || origin + horizon >= raw_seq.samples.len() {
        return Err(TensorError::InvalidArg(format!(
            "origin {origin} with horizon {horizon} outside sequence of {} steps",
            raw_seq.samples.len()
        )));
    }
    let schedule = build_hta_schedule(horizon)?;
    let norm: Vec<MultiSourceSample> = raw_seq
        .samples
        .iter()
        .map(|s| normalize(s, stats))
        .collect();

    let mut f = Forward::eval(store);
    let mut observed: BTreeMap<i64, Var> = BTreeMap::new();
    for rel in OBSERVED_FIRST..=0 {
        let idx = (origin as i64 + rel) as usize;
        let state = match space {
            IterationSpace::Latent => encode(&mut f, mcfg, &norm[idx]),
            IterationSpace::Physical => physical_state(&mut f, mcfg, &norm[idx]),
        };
        observed.insert(rel, state);
    }

    let states = {
        let fcell = std::cell::RefCell::new(&mut f);
        rollout_with(&schedule, &observed, |delta, a, b, t_rel| {
            let f = &mut **fcell.borrow_mut();
            let t_abs = origin as i64 + t_rel;
            match space {
                IterationSpace::Latent => lpm_predict(f, mcfg, delta, *a, *b, t_abs),
                IterationSpace::Physical => physical_predict(f, mcfg, delta, *a, *b, t_abs),
            }
        })?
    };

    let plane = mcfg.height * mcfg.width;
    let c_phys = physical_channels(mcfg);
    let mut out = Vec::with_capacity(states.len());
    for s in states {
        let y_norm: Vec<f64> = match space {
            IterationSpace::Latent => {
                let y = project(&mut f, mcfg, s);
                f.tape.data(y).to_vec()
            }
            IterationSpace::Physical => {
                let mask = plane_mask(c_phys, plane, 0);
                let y = f.tape.masked_select(s, &mask);
                f.tape.data(y).to_vec()
            }
        };
        let data: Vec<f64> = y_norm
            .iter()
            .map(|v| v.clamp(0.0, 1.0) * stats.intensity_cap)
            .collect();
        out.push(Tensor::new(vec![1, mcfg.height, mcfg.width], data));
    }
    Ok(out)
}

/// Score a model over raw sequences: forecasts from the first admissible
/// origin (step 4), verified against the raw targets.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    mcfg: &ModelConfig,
    store: &mut ParamStore,
    space: IterationSpace,
    raw_seqs: &[Sequence],
    stats: &NormStats,
    horizon: usize,
    thresholds: &[f64],
    hss_standard: bool,
) -> Result<RunScores, TensorError> {
    let origin = 4;
    let mut preds = Vec::with_capacity(raw_seqs.len());
    let mut truths = Vec::with_capacity(raw_seqs.len());
    for seq in raw_seqs {
        preds.push(predict_sequence(mcfg, store, space, seq, stats, origin, horizon)?);
        truths.push(
            (1..=horizon)
                .map(|k| seq.samples[origin + k].target.clone())
                .collect(),
        );
    }
    evaluate_run(&preds, &truths, thresholds, hss_standard)
}

/// Multiply–add count of one predictor step in eval mode, for the
/// latent-vs-physical compute comparison.
pub fn predictor_step_macs(
    mcfg: &ModelConfig,
    store: &mut ParamStore,
    space: IterationSpace,
) -> u64 {
    let mut f = Forward::eval(store);
    let (a, b) = match space {
        IterationSpace::Latent => {
            let shape = vec![mcfg.latent_channels, mcfg.latent_height(), mcfg.latent_width()];
            (
                f.tape.constant(Tensor::full(shape.clone(), 0.1)),
                f.tape.constant(Tensor::full(shape, 0.2)),
            )
        }
        IterationSpace::Physical => {
            let shape = vec![physical_channels(mcfg), mcfg.height, mcfg.width];
            (
                f.tape.constant(Tensor::full(shape.clone(), 0.1)),
                f.tape.constant(Tensor::full(shape, 0.2)),
            )
        }
    };
    reset_mac_count();
    match space {
        IterationSpace::Latent => lpm_predict(&mut f, mcfg, 1, a, b, 0),
        IterationSpace::Physical => physical_predict(&mut f, mcfg, 1, a, b, 0),
    };
    mac_count()
}

// ---- checkpoints ----

/// Save parameters plus a plain-text sidecar describing the architecture.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    mcfg: &ModelConfig,
    seed: u64,
) -> Result<(), TensorError> {
    save_archive(path, store.tensors())?;
    let meta = format!(
        "seed={}\nheight={}\nwidth={}\ncoarse_height={}\ncoarse_width={}\nwith_satellite={}\nlatent_channels={}\nextractor_width={}\ntime_channels={}\nconst_channels={}\npatch={}\nvit_blocks={}\ntoken_dim={}\nheads={}\nmlp_hidden={}\ndropout={}\n",
        seed,
        mcfg.height,
        mcfg.width,
        mcfg.coarse_height,
        mcfg.coarse_width,
        mcfg.with_satellite,
        mcfg.latent_channels,
        mcfg.extractor_width,
        mcfg.time_channels,
        mcfg.const_channels,
        mcfg.patch,
        mcfg.vit_blocks,
        mcfg.token_dim,
        mcfg.heads,
        mcfg.mlp_hidden,
        mcfg.dropout,
    );
    std::fs::write(path.with_extension("meta"), meta)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, ModelConfig, u64), TensorError> {
    let tensors = load_archive(path)?;
    let text = std::fs::read_to_string(path.with_extension("meta"))?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> Result<String, TensorError> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| TensorError::BadContainer(format!("checkpoint meta missing '{k}'")))
    };
    let parse_usize = |k: &str| -> Result<usize, TensorError> {
        get(k)?
            .parse()
            .map_err(|_| TensorError::BadContainer(format!("bad value for '{k}'")))
    };
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| TensorError::BadContainer("bad value for 'seed'".into()))?;
    let mcfg = ModelConfig {
        height: parse_usize("height")?,
        width: parse_usize("width")?,
        coarse_height: parse_usize("coarse_height")?,
        coarse_width: parse_usize("coarse_width")?,
        with_satellite: get("with_satellite")? == "true",
        latent_channels: parse_usize("latent_channels")?,
        extractor_width: parse_usize("extractor_width")?,
        time_channels: parse_usize("time_channels")?,
        const_channels: parse_usize("const_channels")?,
        patch: parse_usize("patch")?,
        vit_blocks: parse_usize("vit_blocks")?,
        token_dim: parse_usize("token_dim")?,
        heads: parse_usize("heads")?,
        mlp_hidden: parse_usize("mlp_hidden")?,
        dropout: get("dropout")?
            .parse()
            .map_err(|_| TensorError::BadContainer("bad value for 'dropout'".into()))?,
    };
    Ok((ParamStore::from_tensors(seed, tensors), mcfg, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{compute_stats, generate_sequence, GeneratorConfig};

    fn tiny_gen_cfg() -> GeneratorConfig {
        GeneratorConfig {
            height: 16,
            width: 16,
            coarse_height: 4,
            coarse_width: 4,
            steps: 16,
            ..GeneratorConfig::default()
        }
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            height: 16,
            width: 16,
            coarse_height: 4,
            coarse_width: 4,
            latent_channels: 4,
            extractor_width: 4,
            time_channels: 2,
            const_channels: 2,
            patch: 2,
            vit_blocks: 1,
            token_dim: 16,
            heads: 2,
            mlp_hidden: 32,
            ..ModelConfig::default()
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            base_lr: 1e-3,
            batch_size: 2,
            seed: 5,
            val_horizon: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> (Vec<Sequence>, Vec<Sequence>, NormStats) {
        let cfg = tiny_gen_cfg();
        let train: Vec<Sequence> = (0..4)
            .map(|i| generate_sequence(100 + i, &cfg).unwrap())
            .collect();
        let val = vec![generate_sequence(200, &cfg).unwrap()];
        let stats = compute_stats(&train, &cfg).unwrap();
        (train, val, stats)
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig { epochs: 30, warmup_epochs: 20, base_lr: 1e-5, ..TrainConfig::default() };
        let spe = 100;
        // Midpoint of warmup.
        assert!((lr_at(10 * spe, spe, &cfg) - 0.5e-5).abs() < 1e-18);
        // End of warmup hits base_lr and the junction is continuous.
        assert!((lr_at(20 * spe, spe, &cfg) - 1e-5).abs() < 1e-18);
        let before = lr_at(20 * spe - 1, spe, &cfg);
        let after = lr_at(20 * spe + 1, spe, &cfg);
        assert!((before - 1e-5).abs() < 1e-8 && (after - 1e-5).abs() < 1e-8);
        // Final step is approximately zero, endpoint exactly zero.
        assert!(lr_at(30 * spe - 1, spe, &cfg) < 1e-9);
        assert!(lr_at(30 * spe, spe, &cfg).abs() < 1e-30);
        // Monotone decreasing after warmup.
        let mut last = f64::INFINITY;
        for s in (20 * spe)..(30 * spe) {
            let lr = lr_at(s, spe, &cfg);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn adamw_first_step_magnitude_is_lr() {
        let tcfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut store = ParamStore::new(0);
        store.get_or_create("w", &[1], Init::Ones);
        let mut opt = AdamW::new(&tcfg);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.37]);
        let lr = 1e-2;
        opt.step(&mut store, &grads, lr);
        let moved = 1.0 - store.get("w").unwrap().data[0];
        // m̂/√v̂ = g/|g| at step 1, so |Δθ| ≈ lr up to epsilon.
        assert!((moved - lr).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn adamw_decoupled_decay_without_gradient() {
        let tcfg = TrainConfig { weight_decay: 1.0, ..TrainConfig::default() };
        let mut store = ParamStore::new(0);
        store.get_or_create("w", &[1], Init::Ones);
        let mut opt = AdamW::new(&tcfg);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        opt.step(&mut store, &grads, 1e-3);
        let w = store.get("w").unwrap().data[0];
        assert!((w - (1.0 - 1e-3)).abs() < 1e-12, "w {w}");
    }

    #[test]
    fn gradient_clipping_caps_global_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![3.0, 4.0]);
        let pre = clip_gradients(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        assert!((global_grad_norm(&grads) - 1.0).abs() < 1e-12);
        // Already-small gradients untouched.
        let mut small = BTreeMap::new();
        small.insert("a".to_string(), vec![0.1]);
        clip_gradients(&mut small, 1.0);
        assert_eq!(small["a"], vec![0.1]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.warmup_epochs = cfg.epochs + 1;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { base_lr: 0.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!("wmce".parse::<LossVariant>().unwrap(), LossVariant::Wmce);
        assert!("nope".parse::<LossVariant>().is_err());
        assert_eq!("physical".parse::<IterationSpace>().unwrap(), IterationSpace::Physical);
    }

    #[test]
    fn fit_is_deterministic_and_checkpoint_roundtrips() {
        let (train, val, stats) = tiny_data();
        let mcfg = tiny_model_cfg();
        let tcfg = tiny_train_cfg();
        let (store_a, rep_a) = fit(&train, &val, &stats, &mcfg, &tcfg).unwrap();
        let (store_b, rep_b) = fit(&train, &val, &stats, &mcfg, &tcfg).unwrap();
        assert_eq!(rep_a.epoch_csv(), rep_b.epoch_csv());
        for (name, t) in store_a.iter() {
            let u = store_b.get(name).unwrap();
            assert_eq!(t.data, u.data, "parameter {name} differs between identical runs");
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.lptf");
        save_checkpoint(&path, &store_a, &mcfg, tcfg.seed).unwrap();
        let (loaded, mcfg2, seed2) = load_checkpoint(&path).unwrap();
        assert_eq!(mcfg2, mcfg);
        assert_eq!(seed2, tcfg.seed);
        for (name, t) in store_a.iter() {
            let u = loaded.get(name).unwrap();
            let bits_a: Vec<u64> = t.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = u.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "checkpoint round-trip altered {name}");
        }

        // Evaluation through the loaded store is bit-identical.
        let mut s1 = store_a.clone();
        let mut s2 = loaded;
        let p1 = predict_sequence(&mcfg, &mut s1, IterationSpace::Latent, &val[0], &stats, 4, 3).unwrap();
        let p2 = predict_sequence(&mcfg, &mut s2, IterationSpace::Latent, &val[0], &stats, 4, 3).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn loss_descends_over_toy_steps() {
        let (train, _, stats) = tiny_data();
        let mcfg = tiny_model_cfg();
        let tcfg = TrainConfig {
            base_lr: 2e-3,
            warmup_epochs: 0,
            epochs: 1,
            dropout: 0.0,
            batch_size: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let norm = normalize_sequences(&train, &stats);
        let mut store = ParamStore::new(11);
        let mut opt = AdamW::new(&tcfg);
        let mut first = None;
        let mut last = 0.0;
        for step in 0..50 {
            let batch = vec![(step % train.len(), 4), ((step + 1) % train.len(), 6)];
            let b = train_step(
                &mut store, &mut opt, &mcfg, &tcfg, &norm, &train, &batch, 1, 2e-3,
                step as u64,
            )
            .unwrap();
            if first.is_none() {
                first = Some(b.total);
            }
            last = b.total;
        }
        assert!(
            last < first.unwrap(),
            "loss did not descend: {} -> {last}",
            first.unwrap()
        );
    }

    #[test]
    fn loss_variants_diverge_from_identical_seeds() {
        let (train, val, stats) = tiny_data();
        let mcfg = tiny_model_cfg();
        let base = tiny_train_cfg();
        let wmce = fit(&train, &val, &stats, &mcfg, &base).unwrap().0;
        let mae_cfg = TrainConfig { loss_variant: LossVariant::Mae, ..base };
        let mae = fit(&train, &val, &stats, &mcfg, &mae_cfg).unwrap().0;
        let any_diff = wmce
            .iter()
            .any(|(name, t)| mae.get(name).map(|u| u.data != t.data).unwrap_or(true));
        assert!(any_diff, "mae and wmce training produced identical parameters");
    }

    #[test]
    fn importance_sampling_trains_on_filtered_count() {
        let (train, val, stats) = tiny_data();
        let mcfg = tiny_model_cfg();
        let tcfg = TrainConfig {
            importance_sampling: true,
            epochs: 1,
            warmup_epochs: 0,
            ..tiny_train_cfg()
        };
        let filtered = crate::synth::importance_filter(
            train.clone(),
            tcfg.importance_keep,
            stats.tau_raw,
            tcfg.seed,
        );
        let (_, report) = fit(&train, &val, &stats, &mcfg, &tcfg).unwrap();
        assert_eq!(report.trained_sequences, filtered.len());
    }

    #[test]
    fn physical_baseline_shapes_and_macs() {
        let (train, _, stats) = tiny_data();
        let mcfg = tiny_model_cfg();
        let mut store = ParamStore::new(3);
        // 24-step physical rollout returns full-resolution precip fields.
        let preds = predict_sequence(
            &mcfg, &mut store, IterationSpace::Physical, &train[0], &stats, 4, 8,
        )
        .unwrap();
        assert_eq!(preds.len(), 8);
        assert_eq!(preds[0].shape, vec![1, 16, 16]);
        assert_eq!(physical_channels(&mcfg), 15);

        let latent = predictor_step_macs(&mcfg, &mut store, IterationSpace::Latent);
        let physical = predictor_step_macs(&mcfg, &mut store, IterationSpace::Physical);
        assert!(physical > latent, "physical {physical} <= latent {latent}");
    }

    #[test]
    fn empty_split_errors() {
        let (train, _, stats) = tiny_data();
        let mcfg = tiny_model_cfg();
        let tcfg = tiny_train_cfg();
        assert!(fit(&[], &train, &stats, &mcfg, &tcfg).is_err());
        assert!(fit(&train, &[], &stats, &mcfg, &tcfg).is_err());
    }
}
