//! Output heads: latent -> precipitation grid (projector) and latent ->
//! per-modality input reconstructions.

use crate::tensor::Var;

use super::layers::{conv, conv_zero_init, mha, multi_scale_block};
use super::params::Forward;
use super::ModelConfig;

/// Project a latent onto the fine precipitation grid `[1,H,W]`.
/// The final conv is zero-initialized so an untrained model predicts a
/// uniform dry field instead of noise.
pub fn project(f: &mut Forward, cfg: &ModelConfig, h: Var) -> Var {
    let c = cfg.latent_channels;
    let mut x = multi_scale_block(f, "projector.msb", h, c);

    // Patch-token self-attention with a residual, shape-preserving.
    let (lh, lw) = (cfg.latent_height(), cfg.latent_width());
    let tokens = f.tape.patchify(x, cfg.patch);
    let d = c * cfg.patch * cfg.patch;
    let attended = mha(f, "projector.attn", tokens, d, cfg.heads);
    let mixed = f.tape.add(attended, tokens);
    let mixed = f.tape.unpatchify(mixed, c, lh, lw, cfg.patch);
    x = f.tape.add(x, mixed);

    x = f.tape.upsample_nearest(x, 4);
    x = conv(f, "projector.refine", x, c, c, 3, 1);
    x = f.tape.silu(x);
    conv_zero_init(f, "projector.out", x, c, 1, 3)
}

/// Reconstruct one normalized input modality from the latent, resized to
/// the modality's native grid.
pub fn reconstruct(
    f: &mut Forward,
    cfg: &ModelConfig,
    h: Var,
    modality: &str,
    channels: usize,
    native_h: usize,
    native_w: usize,
) -> Var {
    let c = cfg.latent_channels;
    let prefix = format!("reconstructor.{modality}");
    let mut x = conv(f, &format!("{prefix}.c1"), h, c, 2 * c, 3, 1);
    x = f.tape.leaky_relu(x, 0.1);
    x = conv(f, &format!("{prefix}.c2"), x, 2 * c, channels, 3, 1);
    f.tape.resize_nearest(x, native_h, native_w)
}
