//! Interval-specific latent predictors. Each predictor maps two latent
//! states one interval apart to the state one interval past the newer one.

use crate::tensor::Var;

use super::layers::{conv, multi_scale_block, time_embedding, vit_forward, VitSpec};
use super::params::{Forward, Init};
use super::ModelConfig;

pub const INTERVALS: [usize; 3] = [1, 2, 4];

fn vit_spec(cfg: &ModelConfig) -> VitSpec {
    VitSpec {
        channels: cfg.latent_channels,
        height: cfg.latent_height(),
        width: cfg.latent_width(),
        patch: cfg.patch,
        token_dim: cfg.token_dim,
        blocks: cfg.vit_blocks,
        heads: cfg.heads,
        mlp_hidden: cfg.mlp_hidden,
    }
}

/// Predict the latent at `t0 + interval` from the latents at `t0 - interval`
/// and `t0`. Parameters live under `lpm{interval}.*` except the static
/// spatial embedding, which all intervals share.
pub fn lpm_predict(
    f: &mut Forward,
    cfg: &ModelConfig,
    interval: usize,
    h_prev: Var,
    h_now: Var,
    t_now: i64,
) -> Var {
    assert!(
        INTERVALS.contains(&interval),
        "no predictor for interval {interval}"
    );
    let prefix = format!("lpm{interval}");
    let (lh, lw) = (cfg.latent_height(), cfg.latent_width());

    let te_prev = time_embedding(t_now - interval as i64, cfg.time_channels, lh, lw);
    let te_now = time_embedding(t_now, cfg.time_channels, lh, lw);
    let te_prev = f.tape.constant(te_prev);
    let te_now = f.tape.constant(te_now);
    let const_embed = f.param(
        "const_embed",
        &[cfg.const_channels, lh, lw],
        Init::FanIn { fan_in: cfg.const_channels },
    );

    // Two-step stack collapsed along the time axis by the fusion conv.
    let cat = f
        .tape
        .concat_channels(&[h_prev, te_prev, h_now, te_now, const_embed]);
    let mut x = conv(
        f,
        &format!("{prefix}.fuse"),
        cat,
        cfg.trunk_channels(),
        cfg.latent_channels,
        3,
        1,
    );
    x = f.tape.silu(x);
    x = multi_scale_block(f, &format!("{prefix}.msb"), x, cfg.latent_channels);
    x = vit_forward(f, &format!("{prefix}.vit"), x, &vit_spec(cfg));
    let delta = conv(
        f,
        &format!("{prefix}.head"),
        x,
        cfg.latent_channels,
        cfg.latent_channels,
        3,
        1,
    );
    // Residual from the newest observed state keeps early rollouts stable.
    f.tape.add(h_now, delta)
}
