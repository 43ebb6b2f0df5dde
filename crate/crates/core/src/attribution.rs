//! Integrated Gradients over the input fields: per-channel contribution
//! magnitudes to predicted precipitation, with the completeness axiom as
//! the built-in correctness check.

use std::collections::BTreeMap;

use crate::hta::build_hta_schedule;
use crate::losses::EventMask;
use crate::model::encoder::{encode, encode_fields};
use crate::model::heads::project;
use crate::model::lpm::lpm_predict;
use crate::model::{Forward, ModelConfig, ParamStore};
use crate::synth::{
    normalize, qpe_channel_name, z_channel_name, NormStats, Sequence, REANALYSIS_CHANNELS,
};
use crate::tensor::{Tensor, TensorError};

/// Right-endpoint Riemann approximation of the path integral:
/// `attr_i = (x_i − x'_i) · (1/m) Σ_{k=1..m} ∂F/∂x_i at x' + (k/m)(x − x')`.
/// `f` must return the target value and its gradient with respect to the
/// input, both evaluated at the probe point.
pub fn integrated_gradients<F>(
    mut f: F,
    x: &Tensor,
    baseline: &Tensor,
    m: usize,
) -> Result<Tensor, TensorError>
where
    F: FnMut(&Tensor) -> Result<(f64, Vec<f64>), TensorError>,
{
    if x.shape != baseline.shape {
        return Err(TensorError::ShapeMismatch {
            context: "attribution input vs baseline".into(),
            lhs: x.shape.clone(),
            rhs: baseline.shape.clone(),
        });
    }
    if m < 1 {
        return Err(TensorError::InvalidArg("path steps m must be >= 1".into()));
    }
    let n = x.numel();
    let mut grad_acc = vec![0.0; n];
    let mut probe = baseline.clone();
    for k in 1..=m {
        let alpha = k as f64 / m as f64;
        for i in 0..n {
            probe.data[i] = baseline.data[i] + alpha * (x.data[i] - baseline.data[i]);
        }
        let (_, g) = f(&probe)?;
        if g.len() != n {
            return Err(TensorError::InvalidArg(format!(
                "gradient length {} does not match input size {n}",
                g.len()
            )));
        }
        for i in 0..n {
            grad_acc[i] += g[i];
        }
    }
    let data: Vec<f64> = (0..n)
        .map(|i| (x.data[i] - baseline.data[i]) * grad_acc[i] / m as f64)
        .collect();
    Ok(Tensor::new(x.shape.clone(), data))
}

/// `|Σ attr − (F(x) − F(x'))| / |F(x) − F(x')|`.
pub fn completeness_error(attr_sum: f64, f_x: f64, f_baseline: f64) -> f64 {
    let delta = f_x - f_baseline;
    if delta == 0.0 {
        attr_sum.abs()
    } else {
        (attr_sum - delta).abs() / delta.abs()
    }
}

/// Attribution of one forecast: IG of the origin frame's input channels
/// against a zero baseline in normalized space.
#[derive(Debug, Clone)]
pub struct SampleAttribution {
    /// Spatial sum of |attr| per input channel name.
    pub per_channel: BTreeMap<String, f64>,
    pub completeness_rel_err: f64,
    pub target_value: f64,
    pub path_steps: usize,
}

/// Flat channel layout of one frame's inputs, for packing into the single
/// IG vector: (name, element count) in order.
fn channel_layout(mcfg: &ModelConfig) -> Vec<(String, usize)> {
    let fine = mcfg.height * mcfg.width;
    let coarse = mcfg.coarse_height * mcfg.coarse_width;
    let mut out = Vec::new();
    for c in 0..4 {
        out.push((qpe_channel_name(c), fine));
    }
    for c in 0..REANALYSIS_CHANNELS {
        out.push((z_channel_name(c), coarse));
    }
    if mcfg.with_satellite {
        for c in REANALYSIS_CHANNELS..REANALYSIS_CHANNELS + 3 {
            out.push((z_channel_name(c), fine));
        }
    }
    out
}

/// Scalar forecast target: mean predicted normalized intensity over the
/// truth's precipitating pixels in the lead group (all pixels if the group
/// is entirely dry), with gradients flowing to the origin-frame inputs.
#[allow(clippy::too_many_arguments)]
fn target_and_grad(
    mcfg: &ModelConfig,
    store: &mut ParamStore,
    fixed_latents: &BTreeMap<i64, Tensor>,
    origin: usize,
    flat: &Tensor,
    leads: (usize, usize),
    masks: &[Vec<bool>],
    tau: f64,
) -> Result<(f64, Vec<f64>), TensorError> {
    let mut f = Forward::eval(store);
    // Unpack the flat vector into the three modality fields.
    let fine = mcfg.height * mcfg.width;
    let coarse = mcfg.coarse_height * mcfg.coarse_width;
    let mut offset = 0;
    let mut take = |n: usize, shape: Vec<usize>| {
        let t = Tensor::new(shape, flat.data[offset..offset + n].to_vec());
        offset += n;
        t
    };
    let qpe = f.tape.leaf(take(4 * fine, vec![4, mcfg.height, mcfg.width]), true);
    let rean = f.tape.leaf(
        take(
            REANALYSIS_CHANNELS * coarse,
            vec![REANALYSIS_CHANNELS, mcfg.coarse_height, mcfg.coarse_width],
        ),
        true,
    );
    let sat = if mcfg.with_satellite {
        Some(f.tape.leaf(take(3 * fine, vec![3, mcfg.height, mcfg.width]), true))
    } else {
        None
    };

    let mut observed = BTreeMap::new();
    for (rel, t) in fixed_latents {
        observed.insert(*rel, f.tape.constant(t.clone()));
    }
    observed.insert(0, encode_fields(&mut f, mcfg, qpe, rean, sat));

    let schedule = build_hta_schedule(leads.1)?;
    let states = {
        let fcell = std::cell::RefCell::new(&mut f);
        crate::hta::rollout_with(&schedule, &observed, |delta, a, b, t_rel| {
            let f = &mut **fcell.borrow_mut();
            lpm_predict(f, mcfg, delta, *a, *b, origin as i64 + t_rel)
        })?
    };

    let mut acc = f.tape.scalar_const(0.0);
    let mut count = 0usize;
    for lead in leads.0..=leads.1 {
        let y = project(&mut f, mcfg, states[lead - 1]);
        let mask = &masks[lead - leads.0];
        let n_sel = mask.iter().filter(|&&m| m).count();
        if n_sel == 0 {
            continue;
        }
        let sel = f.tape.masked_select(y, mask);
        let s = f.tape.sum_all(sel);
        acc = f.tape.add(acc, s);
        count += n_sel;
    }
    let _ = tau;
    let target = f.tape.scale(acc, 1.0 / count.max(1) as f64);
    let value = f.tape.data(target)[0];
    f.tape.backward(target)?;

    let mut grad = Vec::with_capacity(flat.numel());
    let push = |g: Option<&[f64]>, n: usize, grad: &mut Vec<f64>| match g {
        Some(g) => grad.extend_from_slice(g),
        None => grad.extend(std::iter::repeat(0.0).take(n)),
    };
    push(f.tape.grad(qpe), 4 * fine, &mut grad);
    push(f.tape.grad(rean), REANALYSIS_CHANNELS * coarse, &mut grad);
    if let Some(s) = sat {
        push(f.tape.grad(s), 3 * fine, &mut grad);
    }
    Ok((value, grad))
}

/// Run IG for one sequence at `origin` over the lead group
/// `leads.0..=leads.1`, with a zero baseline in normalized space.
pub fn attribute_model_sample(
    mcfg: &ModelConfig,
    store: &mut ParamStore,
    raw_seq: &Sequence,
    stats: &NormStats,
    origin: usize,
    leads: (usize, usize),
    m: usize,
) -> Result<SampleAttribution, TensorError> {
    if origin < 4 || origin + leads.1 >= raw_seq.samples.len() {
        return Err(TensorError::InvalidArg(format!(
            "origin {origin} with max lead {} outside sequence",
            leads.1
        )));
    }
    if leads.0 < 1 || leads.0 > leads.1 {
        return Err(TensorError::InvalidArg(format!(
            "bad lead group {leads:?}"
        )));
    }
    let norm: Vec<_> = raw_seq.samples.iter().map(|s| normalize(s, stats)).collect();
    let tau = stats.tau_norm();

    // Latents of the non-origin observed frames do not depend on the
    // attributed inputs; encode them once.
    let mut fixed = BTreeMap::new();
    {
        let mut f = Forward::eval(store);
        for rel in -4i64..0 {
            let idx = (origin as i64 + rel) as usize;
            let h = encode(&mut f, mcfg, &norm[idx]);
            fixed.insert(rel, f.tape.to_tensor(h));
        }
    }

    // Event masks from truth; a fully dry lead falls back to all pixels.
    let masks: Vec<Vec<bool>> = (leads.0..=leads.1)
        .map(|lead| {
            let em = EventMask::from_truth(&norm[origin + lead].target, tau);
            if em.n_precip == 0 {
                vec![true; em.len()]
            } else {
                em.mask
            }
        })
        .collect();

    // Pack the origin frame into one flat vector; zero baseline.
    let s0 = &norm[origin];
    let mut flat_data = s0.qpe_radar.data.clone();
    flat_data.extend_from_slice(&s0.reanalysis.data);
    if mcfg.with_satellite {
        if let Some(sat) = &s0.satellite {
            flat_data.extend_from_slice(&sat.data);
        } else {
            flat_data.extend(vec![0.0; 3 * mcfg.height * mcfg.width]);
        }
    }
    let x = Tensor::new(vec![flat_data.len()], flat_data);
    let baseline = Tensor::zeros(vec![x.numel()]);

    let mut eval = |probe: &Tensor| {
        target_and_grad(mcfg, store, &fixed, origin, probe, leads, &masks, tau)
    };
    let (f_x, _) = eval(&x)?;
    let (f_b, _) = eval(&baseline)?;
    let attr = integrated_gradients(&mut eval, &x, &baseline, m)?;

    let mut per_channel = BTreeMap::new();
    let mut offset = 0;
    for (name, n) in channel_layout(mcfg) {
        let s: f64 = attr.data[offset..offset + n].iter().map(|v| v.abs()).sum();
        per_channel.insert(name, s);
        offset += n;
    }
    let attr_sum: f64 = attr.data.iter().sum();
    Ok(SampleAttribution {
        per_channel,
        completeness_rel_err: completeness_error(attr_sum, f_x, f_b),
        target_value: f_x,
        path_steps: m,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttribution {
    pub channel: String,
    pub lead_group: String,
    pub mean_abs_attr: f64,
    pub rank: usize,
}

/// Mean over samples of each channel's |attr| sum, ranked descending.
pub fn aggregate_attribution(
    per_sample: &[BTreeMap<String, f64>],
    lead_group: &str,
) -> Vec<ChannelAttribution> {
    if per_sample.is_empty() {
        return Vec::new();
    }
    let mut mean: BTreeMap<String, f64> = BTreeMap::new();
    for sample in per_sample {
        for (name, v) in sample {
            *mean.entry(name.clone()).or_insert(0.0) += v / per_sample.len() as f64;
        }
    }
    let mut rows: Vec<(String, f64)> = mean.into_iter().collect();
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    rows.into_iter()
        .enumerate()
        .map(|(i, (channel, v))| ChannelAttribution {
            channel,
            lead_group: lead_group.to_string(),
            mean_abs_attr: v,
            rank: i + 1,
        })
        .collect()
}

pub fn attribution_csv(rows: &[ChannelAttribution]) -> String {
    let mut out = String::from("channel_name,lead_group,mean_abs_attr,rank\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6e},{}\n",
            r.channel, r.lead_group, r.mean_abs_attr, r.rank
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{compute_stats, generate_sequence, GeneratorConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_probe(w: Vec<f64>) -> impl FnMut(&Tensor) -> Result<(f64, Vec<f64>), TensorError> {
        move |x: &Tensor| {
            let v = x.data.iter().zip(&w).map(|(a, b)| a * b).sum();
            Ok((v, w.clone()))
        }
    }

    #[test]
    fn exact_on_linear_models_for_any_m() {
        let w = vec![0.5, -2.0, 3.25, 0.0];
        let x = Tensor::new(vec![4], vec![1.0, 2.0, -1.5, 7.0]);
        let b = Tensor::zeros(vec![4]);
        for m in [1, 3, 128] {
            let attr = integrated_gradients(linear_probe(w.clone()), &x, &b, m).unwrap();
            for i in 0..4 {
                assert!(
                    (attr.data[i] - w[i] * x.data[i]).abs() < 1e-12,
                    "m={m}, i={i}"
                );
            }
        }
        // The ignored coordinate (w_i = 0) gets exactly zero attribution.
        let attr = integrated_gradients(linear_probe(w), &x, &b, 16).unwrap();
        assert_eq!(attr.data[3], 0.0);
    }

    #[test]
    fn baseline_equals_input_gives_zero() {
        let x = Tensor::new(vec![3], vec![0.3, -0.2, 1.0]);
        let f = |probe: &Tensor| {
            let v: f64 = probe.data.iter().map(|a| a * a).sum();
            Ok((v, probe.data.iter().map(|a| 2.0 * a).collect()))
        };
        let attr = integrated_gradients(f, &x, &x, 8).unwrap();
        assert!(attr.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validation_errors() {
        let x = Tensor::zeros(vec![2]);
        let b = Tensor::zeros(vec![3]);
        let f = |_: &Tensor| Ok((0.0, vec![0.0, 0.0]));
        assert!(integrated_gradients(f, &x, &b, 4).is_err());
        let b2 = Tensor::zeros(vec![2]);
        let f2 = |_: &Tensor| Ok((0.0, vec![0.0, 0.0]));
        assert!(integrated_gradients(f2, &x, &b2, 0).is_err());
    }

    #[test]
    fn completeness_improves_with_path_steps_on_nonlinear_target() {
        // Smooth nonlinear scalar field with an analytic gradient.
        let f = |probe: &Tensor| {
            let v: f64 = probe
                .data
                .iter()
                .map(|a| (a * 1.3).tanh() + 0.25 * a * a)
                .sum();
            let g: Vec<f64> = probe
                .data
                .iter()
                .map(|a| 1.3 / (a * 1.3).cosh().powi(2) + 0.5 * a)
                .collect();
            Ok((v, g))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::new(vec![10], (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = Tensor::zeros(vec![10]);
        let (fx, _) = f(&x).unwrap();
        let (fb, _) = f(&b).unwrap();
        let mut errs = Vec::new();
        for m in [16, 32, 64, 128] {
            let attr = integrated_gradients(f, &x, &b, m).unwrap();
            errs.push(completeness_error(attr.data.iter().sum(), fx, fb));
        }
        assert!(errs[3] < 0.01, "err at m=128: {}", errs[3]);
        assert!(errs[3] <= errs[0], "error did not shrink: {errs:?}");
    }

    fn tiny_setup() -> (ModelConfig, ParamStore, Sequence, NormStats) {
        let gcfg = GeneratorConfig {
            height: 16,
            width: 16,
            coarse_height: 4,
            coarse_width: 4,
            steps: 12,
            ..GeneratorConfig::default()
        };
        let mcfg = ModelConfig {
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
        };
        let seqs: Vec<Sequence> = (0..2).map(|i| generate_sequence(50 + i, &gcfg).unwrap()).collect();
        let stats = compute_stats(&seqs, &gcfg).unwrap();
        let mut store = ParamStore::new(8);
        // Bind all parameters once, then jitter so the model is nonlinear
        // and nontrivial without a full training run.
        let _ = attribute_model_sample(&mcfg, &mut store, &seqs[0], &stats, 4, (1, 2), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (_, t) in store.iter_mut() {
            for v in &mut t.data {
                *v += 0.05 * (rng.gen::<f64>() - 0.5);
            }
        }
        (mcfg, store, seqs[0].clone(), stats)
    }

    #[test]
    fn model_attribution_names_channels_and_is_finite() {
        let (mcfg, mut store, seq, stats) = tiny_setup();
        let a = attribute_model_sample(&mcfg, &mut store, &seq, &stats, 4, (1, 2), 8).unwrap();
        assert_eq!(a.per_channel.len(), 15);
        assert!(a.per_channel.contains_key("qpe_intensity"));
        assert!(a.per_channel.values().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn zeroed_input_path_receives_exactly_zero_attribution() {
        let (mcfg, mut store, seq, stats) = tiny_setup();
        // The satellite field only enters through its extractor stem; with
        // those weights zeroed its attribution must vanish identically.
        for name in ["encoder.satellite.stem.w", "encoder.satellite.stem.b"] {
            let t = store.get_mut(name).unwrap();
            for v in &mut t.data {
                *v = 0.0;
            }
        }
        let a = attribute_model_sample(&mcfg, &mut store, &seq, &stats, 4, (1, 2), 8).unwrap();
        for c in 8..11 {
            assert_eq!(a.per_channel[&z_channel_name(c)], 0.0);
        }
        assert!(a.per_channel["qpe_intensity"] > 0.0);
    }

    #[test]
    fn aggregation_ranks_and_averages() {
        let mut s1 = BTreeMap::new();
        s1.insert("a".to_string(), 1.0);
        s1.insert("b".to_string(), 0.0);
        let mut s2 = BTreeMap::new();
        s2.insert("a".to_string(), 3.0);
        s2.insert("b".to_string(), 0.0);
        let rows = aggregate_attribution(&[s1, s2], "1-8");
        assert_eq!(rows[0].channel, "a");
        assert_eq!(rows[0].rank, 1);
        assert!((rows[0].mean_abs_attr - 2.0).abs() < 1e-12);
        assert_eq!(rows[1].mean_abs_attr, 0.0);
        let csv = attribution_csv(&rows);
        assert!(csv.starts_with("channel_name,lead_group,mean_abs_attr,rank"));
        assert!(csv.contains("a,1-8,"));
    }

    #[test]
    fn manual_abs_sum_on_toy_map() {
        // 2x2 attribution map, hand-reduced.
        let attr = [0.5, -0.25, 0.0, -1.0];
        let s: f64 = attr.iter().map(|v: &f64| v.abs()).sum();
        assert!((s - 1.75).abs() < 1e-15);
        let mut m = BTreeMap::new();
        m.insert("only".to_string(), s);
        let rows = aggregate_attribution(&[m], "g");
        assert!((rows[0].mean_abs_attr - 1.75).abs() < 1e-15);
    }
}
