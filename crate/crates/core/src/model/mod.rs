//! Latent forecasting model: multi-source encoder, interval-specific latent
//! predictors, precipitation projector, and per-modality reconstructors.

pub mod encoder;
pub mod heads;
pub mod layers;
pub mod lpm;
pub mod params;

pub use params::{Forward, Init, ParamStore};

use crate::synth::{QPE_RADAR_CHANNELS, REANALYSIS_CHANNELS, SATELLITE_CHANNELS};

/// Architecture hyperparameters. The latent grid is the fine grid reduced
/// by a factor of 4 in each direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub coarse_height: usize,
    pub coarse_width: usize,
    pub with_satellite: bool,
    pub latent_channels: usize,
    pub extractor_width: usize,
    pub time_channels: usize,
    pub const_channels: usize,
    pub patch: usize,
    pub vit_blocks: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            coarse_height: 8,
            coarse_width: 8,
            with_satellite: true,
            latent_channels: 16,
            extractor_width: 16,
            time_channels: 4,
            const_channels: 4,
            patch: 4,
            vit_blocks: 2,
            token_dim: 64,
            heads: 2,
            mlp_hidden: 128,
            dropout: 0.15,
        }
    }
}

impl ModelConfig {
    pub fn latent_height(&self) -> usize {
        self.height / 4
    }

    pub fn latent_width(&self) -> usize {
        self.width / 4
    }

    /// Channel count of the concatenated two-step predictor input:
    /// two (latent + time embedding) stacks plus the shared static embedding.
    pub fn trunk_channels(&self) -> usize {
        2 * (self.latent_channels + self.time_channels) + self.const_channels
    }

    pub fn modality_channels(&self) -> Vec<(&'static str, usize)> {
        let mut mods = vec![
            ("qpe_radar", QPE_RADAR_CHANNELS),
            ("reanalysis", REANALYSIS_CHANNELS),
        ];
        if self.with_satellite {
            mods.push(("satellite", SATELLITE_CHANNELS));
        }
        mods
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(format!(
                "grid {}x{} must be divisible by 4",
                self.height, self.width
            ));
        }
        if self.latent_height() % self.patch != 0 || self.latent_width() % self.patch != 0 {
            return Err(format!(
                "latent grid {}x{} must be divisible by patch {}",
                self.latent_height(),
                self.latent_width(),
                self.patch
            ));
        }
        if self.token_dim % self.heads != 0 {
            return Err(format!(
                "token dim {} not divisible by {} heads",
                self.token_dim, self.heads
            ));
        }
        if self.time_channels % 2 != 0 {
            return Err("time channels must be even (sin/cos pairs)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0,1)", self.dropout));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::synth::MultiSourceSample;
    use crate::tensor::finite_diff::{finite_difference_at, max_rel_error};
    use crate::tensor::Tensor;

    use super::encoder::encode;
    use super::heads::{project, reconstruct};
    use super::lpm::lpm_predict;
    use super::{Forward, ModelConfig, ParamStore};

    fn tiny_cfg() -> ModelConfig {
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
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn wave(c: usize, h: usize, w: usize, phase: f64) -> Tensor {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5
                        + 0.4
                            * ((x as f64 * 0.7 + y as f64 * 0.3 + ci as f64 + phase).sin());
                    data.push(v);
                }
            }
        }
        Tensor::new(vec![c, h, w], data)
    }

    fn tiny_sample(cfg: &ModelConfig, t: i64) -> MultiSourceSample {
        let phase = t as f64 * 0.9;
        MultiSourceSample {
            time_index: t,
            qpe_radar: wave(4, cfg.height, cfg.width, phase),
            reanalysis: wave(8, cfg.coarse_height, cfg.coarse_width, phase + 0.2),
            satellite: Some(wave(3, cfg.height, cfg.width, phase + 0.4)),
            target: wave(1, cfg.height, cfg.width, phase + 0.6),
        }
    }

    /// Full pipeline scalar used by the gradient tests: encode two frames,
    /// advance one interval, project and reconstruct, average everything.
    fn pipeline_scalar(cfg: &ModelConfig, store: &mut ParamStore, train: bool) -> (f64, Option<std::collections::BTreeMap<String, Vec<f64>>>) {
        let s0 = tiny_sample(cfg, 0);
        let s1 = tiny_sample(cfg, 1);
        let mut f = Forward::new(store, train, 0.0, 7);
        let h0 = encode(&mut f, cfg, &s0);
        let h1 = encode(&mut f, cfg, &s1);
        let pred = lpm_predict(&mut f, cfg, 1, h0, h1, 1);
        let y = project(&mut f, cfg, pred);
        let r = reconstruct(&mut f, cfg, pred, "qpe_radar", 4, cfg.height, cfg.width);
        let my = f.tape.mean_all(y);
        let mr = f.tape.mean_all(r);
        let loss = f.tape.add(my, mr);
        let value = f.tape.data(loss)[0];
        if train {
            f.tape.backward(loss).unwrap();
            let grads = f.grads();
            (value, Some(grads))
        } else {
            (value, None)
        }
    }

    fn jitter(store: &mut ParamStore, seed: u64, sigma: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in store.iter_mut() {
            for v in &mut t.data {
                *v += sigma * (rng.gen::<f64>() - 0.5);
            }
        }
    }

    #[test]
    fn shapes_and_projector_zero_init() {
        let cfg = tiny_cfg();
        cfg.validate().unwrap();
        let mut store = ParamStore::new(11);
        let s0 = tiny_sample(&cfg, 0);
        let s1 = tiny_sample(&cfg, 1);
        let mut f = Forward::eval(&mut store);
        let h0 = encode(&mut f, &cfg, &s0);
        assert_eq!(f.tape.shape(h0), &[4, 4, 4]);
        let h1 = encode(&mut f, &cfg, &s1);
        let pred = lpm_predict(&mut f, &cfg, 1, h0, h1, 1);
        assert_eq!(f.tape.shape(pred), &[4, 4, 4]);
        let y = project(&mut f, &cfg, pred);
        assert_eq!(f.tape.shape(y), &[1, 16, 16]);
        assert!(f.tape.data(y).iter().all(|&v| v == 0.0), "fresh projector must output zeros");
        let r = reconstruct(&mut f, &cfg, pred, "reanalysis", 8, 4, 4);
        assert_eq!(f.tape.shape(r), &[8, 4, 4]);
    }

    #[test]
    fn missing_satellite_uses_neutral_features() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(3);
        let with_sat = tiny_sample(&cfg, 0);
        let mut without = with_sat.clone();
        without.satellite = None;
        let mut f = Forward::eval(&mut store);
        let a = encode(&mut f, &cfg, &with_sat);
        let b = encode(&mut f, &cfg, &without);
        assert_eq!(f.tape.shape(a), f.tape.shape(b));
        assert!(f.tape.data(b).iter().all(|v| v.is_finite()));
        assert_ne!(f.tape.data(a), f.tape.data(b));
    }

    #[test]
    fn forward_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_cfg();
        let mut s1 = ParamStore::new(5);
        let mut s2 = ParamStore::new(5);
        let mut s3 = ParamStore::new(6);
        let (a, _) = pipeline_scalar(&cfg, &mut s1, false);
        let (a2, _) = pipeline_scalar(&cfg, &mut s1, false);
        let (b, _) = pipeline_scalar(&cfg, &mut s2, false);
        let (c, _) = pipeline_scalar(&cfg, &mut s3, false);
        assert_eq!(a.to_bits(), a2.to_bits());
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn gradients_reach_every_bound_parameter() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(9);
        // Instantiate, then jitter so no weight sits at an exact zero.
        pipeline_scalar(&cfg, &mut store, false);
        jitter(&mut store, 40, 0.05);
        let (_, grads) = pipeline_scalar(&cfg, &mut store, true);
        let grads = grads.unwrap();
        assert!(grads.len() > 50, "expected a deep parameter set, got {}", grads.len());
        let mut zero_names = Vec::new();
        for (name, g) in &grads {
            if g.iter().all(|&v| v == 0.0) {
                zero_names.push(name.clone());
            }
        }
        assert!(
            zero_names.is_empty(),
            "parameters with all-zero gradients: {zero_names:?}"
        );
        assert!(grads.contains_key("projector.out.w"));
        assert!(grads.contains_key("const_embed"));
        assert!(grads.contains_key("encoder.satellite.stem.w"));
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(21);
        pipeline_scalar(&cfg, &mut store, false);
        jitter(&mut store, 41, 0.05);
        let (_, grads) = pipeline_scalar(&cfg, &mut store, true);
        let grads = grads.unwrap();
        for name in [
            "encoder.qpe_radar.stem.w",
            "lpm1.vit.block0.attn.q.w",
            "lpm1.fuse.b",
            "projector.refine.w",
            "reconstructor.qpe_radar.c1.w",
            "const_embed",
        ] {
            let base = store.get(name).unwrap().clone();
            let coords = [0, base.numel() / 2, base.numel() - 1];
            let fd = finite_difference_at(
                |probe: &Tensor| {
                    let mut st = store.clone();
                    *st.get_mut(name).unwrap() = probe.clone();
                    pipeline_scalar(&cfg, &mut st, false).0
                },
                &base,
                &coords,
                1e-5,
            )
            .unwrap();
            let analytic: Vec<f64> = coords.iter().map(|&i| grads[name][i]).collect();
            let err = max_rel_error(&analytic, &fd, 1e-6);
            assert!(err < 1e-4, "{name}: max rel error {err}");
        }
    }
}
