//! Reusable network pieces: conv blocks, multi-scale residual blocks,
//! multi-head attention, and the ViT trunk.

use crate::tensor::{Tensor, Var};

use super::params::{Forward, Init};

/// Convolution + bias. `k` odd, stride 1 or 2, zero "same" padding.
pub fn conv(
    f: &mut Forward,
    prefix: &str,
    x: Var,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
) -> Var {
    let w = f.param(
        &format!("{prefix}.w"),
        &[c_out, c_in, k, k],
        Init::FanIn { fan_in: c_in * k * k },
    );
    let b = f.param(&format!("{prefix}.b"), &[c_out], Init::Zeros);
    let y = f.tape.conv2d(x, w, stride);
    f.tape.add_channel_bias(y, b)
}

/// Zero-initialized convolution (used for the projector output layer).
pub fn conv_zero_init(
    f: &mut Forward,
    prefix: &str,
    x: Var,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> Var {
    let w = f.param(&format!("{prefix}.w"), &[c_out, c_in, k, k], Init::Zeros);
    let b = f.param(&format!("{prefix}.b"), &[c_out], Init::Zeros);
    let y = f.tape.conv2d(x, w, 1);
    f.tape.add_channel_bias(y, b)
}

/// Conv -> GroupNorm (2 groups) -> SiLU.
pub fn conv_block(
    f: &mut Forward,
    prefix: &str,
    x: Var,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> Var {
    let y = conv(f, prefix, x, c_in, c_out, k, 1);
    let gamma = f.param(&format!("{prefix}.gamma"), &[c_out], Init::Ones);
    let beta = f.param(&format!("{prefix}.beta"), &[c_out], Init::Zeros);
    let y = f.tape.group_norm(y, 2, gamma, beta);
    f.tape.silu(y)
}

/// `x + Conv1x1(Cat[ConvBlock3x3(x), ConvBlock5x5(x)])`.
pub fn multi_scale_block(f: &mut Forward, prefix: &str, x: Var, channels: usize) -> Var {
    assert_eq!(
        f.tape.shape(x)[0],
        channels,
        "multi_scale_block {prefix}: channel mismatch"
    );
    let b3 = conv_block(f, &format!("{prefix}.branch3"), x, channels, channels, 3);
    let b5 = conv_block(f, &format!("{prefix}.branch5"), x, channels, channels, 5);
    let cat = f.tape.concat_channels(&[b3, b5]);
    let merged = conv(f, &format!("{prefix}.merge"), cat, 2 * channels, channels, 1, 1);
    f.tape.add(x, merged)
}

/// Linear layer on `[N,D_in]` tokens.
pub fn linear(f: &mut Forward, prefix: &str, x: Var, d_in: usize, d_out: usize) -> Var {
    let w = f.param(
        &format!("{prefix}.w"),
        &[d_in, d_out],
        Init::FanIn { fan_in: d_in },
    );
    let b = f.param(&format!("{prefix}.b"), &[d_out], Init::Zeros);
    let y = f.tape.matmul(x, w);
    f.tape.add_row_bias(y, b)
}

pub fn layer_norm(f: &mut Forward, prefix: &str, x: Var, d: usize) -> Var {
    let gamma = f.param(&format!("{prefix}.gamma"), &[d], Init::Ones);
    let beta = f.param(&format!("{prefix}.beta"), &[d], Init::Zeros);
    f.tape.layer_norm(x, gamma, beta)
}

/// Multi-head self-attention over `[N,D]` tokens; dropout on the output
/// projection.
pub fn mha(f: &mut Forward, prefix: &str, x: Var, d: usize, heads: usize) -> Var {
    assert!(d % heads == 0, "mha {prefix}: {d} dims, {heads} heads");
    let dh = d / heads;
    let q = linear(f, &format!("{prefix}.q"), x, d, d);
    let k = linear(f, &format!("{prefix}.k"), x, d, d);
    let v = linear(f, &format!("{prefix}.v"), x, d, d);
    let mut head_outs = Vec::with_capacity(heads);
    for hi in 0..heads {
        let (lo, hi_col) = (hi * dh, (hi + 1) * dh);
        let qh = f.tape.split_cols(q, lo, hi_col);
        let kh = f.tape.split_cols(k, lo, hi_col);
        let vh = f.tape.split_cols(v, lo, hi_col);
        let kt = f.tape.transpose2d(kh);
        let scores = f.tape.matmul(qh, kt);
        let scaled = f.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = f.tape.softmax_rows(scaled);
        head_outs.push(f.tape.matmul(attn, vh));
    }
    let cat = f.tape.concat_cols(&head_outs);
    let out = linear(f, &format!("{prefix}.out"), cat, d, d);
    f.dropout(out)
}

/// Two-layer GELU MLP with dropout on the output.
pub fn mlp(
    f: &mut Forward,
    prefix: &str,
    x: Var,
    d_in: usize,
    hidden: usize,
    d_out: usize,
) -> Var {
    let h = linear(f, &format!("{prefix}.fc1"), x, d_in, hidden);
    let h = f.tape.gelu(h);
    let out = linear(f, &format!("{prefix}.fc2"), h, hidden, d_out);
    f.dropout(out)
}

/// Pre-norm transformer block:
/// `Z' = MHA(Norm(Z)) + Z; Z'' = Norm(Z'); Z = MLP(Z'') + Z''`.
pub fn transformer_block(
    f: &mut Forward,
    prefix: &str,
    x: Var,
    d: usize,
    heads: usize,
    mlp_hidden: usize,
) -> Var {
    let n1 = layer_norm(f, &format!("{prefix}.norm1"), x, d);
    let a = mha(f, &format!("{prefix}.attn"), n1, d, heads);
    let z1 = f.tape.add(a, x);
    let z2 = layer_norm(f, &format!("{prefix}.norm2"), z1, d);
    let m = mlp(f, &format!("{prefix}.mlp"), z2, d, mlp_hidden, d);
    f.tape.add(m, z2)
}

pub struct VitSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub token_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl VitSpec {
    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// Patch embedding, positional encoding, `blocks` transformer blocks, and
/// patch recovery. Shape-preserving on `[C,H,W]`.
pub fn vit_forward(f: &mut Forward, prefix: &str, z: Var, spec: &VitSpec) -> Var {
    let s = f.tape.shape(z).to_vec();
    assert_eq!(
        s,
        vec![spec.channels, spec.height, spec.width],
        "vit {prefix}: input shape mismatch"
    );
    assert!(
        spec.height % spec.patch == 0 && spec.width % spec.patch == 0,
        "vit {prefix}: {}x{} not divisible by patch {}",
        spec.height,
        spec.width,
        spec.patch
    );
    let tokens = f.tape.patchify(z, spec.patch);
    let embedded = linear(
        f,
        &format!("{prefix}.embed"),
        tokens,
        spec.patch_dim(),
        spec.token_dim,
    );
    let pos = f.param(
        &format!("{prefix}.pos"),
        &[spec.tokens(), spec.token_dim],
        Init::FanIn { fan_in: spec.token_dim },
    );
    let mut x = f.tape.add(embedded, pos);
    for b in 0..spec.blocks {
        x = transformer_block(
            f,
            &format!("{prefix}.block{b}"),
            x,
            spec.token_dim,
            spec.heads,
            spec.mlp_hidden,
        );
    }
    let normed = layer_norm(f, &format!("{prefix}.final_norm"), x, spec.token_dim);
    let recovered = mlp(
        f,
        &format!("{prefix}.recover"),
        normed,
        spec.token_dim,
        spec.mlp_hidden,
        spec.patch_dim(),
    );
    f.tape
        .unpatchify(recovered, spec.channels, spec.height, spec.width, spec.patch)
}

/// Sinusoidal features of the absolute step index, broadcast spatially.
pub fn time_embedding(time_index: i64, channels: usize, height: usize, width: usize) -> Tensor {
    let t = time_index as f64;
    let mut data = Vec::with_capacity(channels * height * width);
    for c in 0..channels {
        let period = 4.0f64.powi((c / 2) as i32 + 1);
        let v = if c % 2 == 0 {
            (t / period).sin()
        } else {
            (t / period).cos()
        };
        data.extend(std::iter::repeat(v).take(height * width));
    }
    Tensor::new(vec![channels, height, width], data)
}
