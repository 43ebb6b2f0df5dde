//! Multi-source encoder: a per-modality extractor stack followed by a
//! channel-concatenation fusion conv onto the latent grid.

use crate::synth::MultiSourceSample;
use crate::tensor::{Tensor, Var};

use super::layers::{conv, multi_scale_block};
use super::params::Forward;
use super::ModelConfig;

/// Four multi-scale blocks with two stride-2 reductions interleaved.
/// With `downsample` false the spatial size is preserved (used for the
/// reanalysis branch, which is resized onto the latent grid first).
fn extractor(
    f: &mut Forward,
    prefix: &str,
    x: Var,
    c_in: usize,
    width: usize,
    downsample: bool,
) -> Var {
    let stride = if downsample { 2 } else { 1 };
    let mut h = conv(f, &format!("{prefix}.stem"), x, c_in, width, 3, 1);
    h = f.tape.silu(h);
    h = multi_scale_block(f, &format!("{prefix}.msb1"), h, width);
    h = multi_scale_block(f, &format!("{prefix}.msb2"), h, width);
    h = conv(f, &format!("{prefix}.down1"), h, width, width, 3, stride);
    h = f.tape.silu(h);
    h = multi_scale_block(f, &format!("{prefix}.msb3"), h, width);
    h = multi_scale_block(f, &format!("{prefix}.msb4"), h, width);
    h = conv(f, &format!("{prefix}.down2"), h, width, width, 3, stride);
    f.tape.silu(h)
}

/// Encode one normalized sample into a `[C_lat, H/4, W/4]` latent.
/// A missing satellite frame (when the config expects one) contributes a
/// zero feature map so the fusion conv sees a fixed channel count.
pub fn encode(f: &mut Forward, cfg: &ModelConfig, sample: &MultiSourceSample) -> Var {
    let qpe = f.tape.constant(sample.qpe_radar.clone());
    let rean = f.tape.constant(sample.reanalysis.clone());
    let sat = sample
        .satellite
        .as_ref()
        .map(|s| f.tape.constant(s.clone()));
    encode_fields(f, cfg, qpe, rean, sat)
}

/// Encode from live input variables, so callers can take gradients with
/// respect to the raw fields (attribution).
pub fn encode_fields(
    f: &mut Forward,
    cfg: &ModelConfig,
    qpe: Var,
    rean: Var,
    sat: Option<Var>,
) -> Var {
    let w = cfg.extractor_width;
    let (lh, lw) = (cfg.latent_height(), cfg.latent_width());

    let qpe_c = f.tape.shape(qpe)[0];
    let mut feats = vec![extractor(f, "encoder.qpe_radar", qpe, qpe_c, w, true)];

    let rean_c = f.tape.shape(rean)[0];
    let rean = f.tape.resize_nearest(rean, lh, lw);
    feats.push(extractor(f, "encoder.reanalysis", rean, rean_c, w, false));

    if cfg.with_satellite {
        let feat = match sat {
            Some(v) => {
                let sat_c = f.tape.shape(v)[0];
                extractor(f, "encoder.satellite", v, sat_c, w, true)
            }
            None => f.tape.constant(Tensor::zeros(vec![w, lh, lw])),
        };
        feats.push(feat);
    }

    let cat = f.tape.concat_channels(&feats);
    let fused = conv(
        f,
        "encoder.fuse",
        cat,
        feats.len() * w,
        cfg.latent_channels,
        3,
        1,
    );
    f.tape.silu(fused)
}
