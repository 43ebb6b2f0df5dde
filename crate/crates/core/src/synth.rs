//! Synthetic multi-source gridded weather sequences.
//!
//! Precipitation cells are Gaussian blobs born where a coarse humidity field
//! exceeds a threshold, advected by the coarse wind channels, and decayed
//! exponentially. Radar channels are noisy monotone transforms of intensity;
//! satellite channels are smoothed cloud masks leading precipitation by two
//! steps. The class imbalance is calibrated so that roughly 93% of target
//! pixels sit below 0.2 mm/h.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("grid size {0}x{1} must be divisible by 4")]
    BadGridSize(usize, usize),
    #[error("step count {0} too small: need at least {1}")]
    TooFewSteps(usize, usize),
    #[error("channel {0} has zero variance")]
    ZeroVariance(String),
    #[error("noise sigma must be nonnegative, got {0}")]
    NegativeSigma(f64),
    #[error("empty training split")]
    EmptySplit,
    #[error("negative raw intensity at pixel {0}")]
    NegativeIntensity(usize),
}

/// Wind field behaviour for the coarse u/v channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindMode {
    /// Smooth per-sequence random wind with mild spatial variation.
    Sampled,
    /// Spatially constant wind, in fine-grid pixels per step.
    Fixed { u: f64, v: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub coarse_height: usize,
    pub coarse_width: usize,
    pub steps: usize,
    pub with_satellite: bool,
    pub intensity_cap: f64,
    pub radar_cap: f64,
    pub tau_raw: f64,
    /// Expected blob births per step when humidity permits.
    pub birth_rate: f64,
    pub blob_radius_min: f64,
    pub blob_radius_max: f64,
    pub blob_amp_min: f64,
    pub blob_amp_max: f64,
    pub decay_half_life: f64,
    pub humidity_threshold: f64,
    pub wind: WindMode,
    /// Multiplier on the sampled base wind; < 1 keeps systems in-domain
    /// longer, giving predictability at long leads.
    pub wind_scale: f64,
    pub initial_blobs: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 32,
            width: 32,
            coarse_height: 8,
            coarse_width: 8,
            steps: 40,
            with_satellite: true,
            intensity_cap: 64.0,
            radar_cap: 70.0,
            tau_raw: 0.2,
            birth_rate: 0.11,
            blob_radius_min: 1.6,
            blob_radius_max: 3.2,
            blob_amp_min: 2.0,
            blob_amp_max: 24.0,
            decay_half_life: 6.0,
            humidity_threshold: 0.62,
            wind: WindMode::Sampled,
            wind_scale: 1.0,
            initial_blobs: 1,
        }
    }
}

pub const QPE_RADAR_CHANNELS: usize = 4;
pub const REANALYSIS_CHANNELS: usize = 8;
pub const SATELLITE_CHANNELS: usize = 3;
/// z-scored channels: reanalysis first, then satellite.
pub const Z_CHANNELS: usize = REANALYSIS_CHANNELS + SATELLITE_CHANNELS;

/// One timestamped set of gridded input fields plus the target grid.
/// `qpe_radar` channel 0 is the target intensity in mm/h; channels 1-3 are
/// dBZ-like radar levels.
#[derive(Debug, Clone)]
pub struct MultiSourceSample {
    pub time_index: i64,
    pub qpe_radar: Tensor,
    pub reanalysis: Tensor,
    pub satellite: Option<Tensor>,
    pub target: Tensor,
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub samples: Vec<MultiSourceSample>,
    pub seed: u64,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// True if any target pixel at any step reaches `threshold` mm/h.
    pub fn has_event(&self, threshold: f64) -> bool {
        self.samples
            .iter()
            .any(|s| s.target.data.iter().any(|&v| v >= threshold))
    }
}

/// Normalization statistics computed on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    /// Per-channel mean/std for the z-scored channels (reanalysis then
    /// satellite).
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Min-max cap for the intensity channel, mm/h. A fixed cap rather than
    /// the data max, so tau_norm is identical across splits.
    pub intensity_cap: f64,
    pub radar_cap: f64,
    pub tau_raw: f64,
}

impl NormStats {
    pub fn tau_norm(&self) -> f64 {
        self.tau_raw / self.intensity_cap
    }
}

struct Blob {
    x: f64,
    y: f64,
    radius: f64,
    amp: f64,
}

struct Bump {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f64,
    dx: f64,
    dy: f64,
}

/// Deterministic synthetic sequence: identical `(seed, cfg)` reproduces
/// bit-identical output.
pub fn generate_sequence(seed: u64, cfg: &GeneratorConfig) -> Result<Sequence, SynthError> {
    if cfg.height % 4 != 0 || cfg.width % 4 != 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(SynthError::BadGridSize(cfg.height, cfg.width));
    }
    if cfg.steps < 5 {
        return Err(SynthError::TooFewSteps(cfg.steps, 5));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let (ch, cw) = (cfg.coarse_height, cfg.coarse_width);
    // fine pixels per coarse cell
    let sx = w as f64 / cw as f64;
    let sy = h as f64 / ch as f64;

    // per-sequence coarse field generators: u, v, humidity, temperature + 4 extras
    let (base_u, base_v) = match cfg.wind {
        WindMode::Fixed { u, v } => (u, v),
        WindMode::Sampled => (
            cfg.wind_scale * rng.gen_range(-1.2..1.2),
            cfg.wind_scale * rng.gen_range(-1.2..1.2),
        ),
    };
    let spatial_wind = matches!(cfg.wind, WindMode::Sampled);
    let mut field_bumps: Vec<Vec<Bump>> = Vec::new();
    for _ in 0..REANALYSIS_CHANNELS {
        let bumps: Vec<Bump> = (0..3)
            .map(|_| Bump {
                x: rng.gen_range(0.0..cw as f64),
                y: rng.gen_range(0.0..ch as f64),
                sigma: rng.gen_range(1.0..(cw as f64 / 2.0 + 1.0)),
                amp: rng.gen_range(-1.0..1.0),
                dx: rng.gen_range(-0.08..0.08),
                dy: rng.gen_range(-0.08..0.08),
            })
            .collect();
        field_bumps.push(bumps);
    }

    let coarse_field = |bumps: &[Bump], t: f64, x: f64, y: f64| -> f64 {
        let mut v = 0.0;
        for b in bumps {
            // wrap drifting bump centers so structure never leaves the domain
            let bx = (b.x + b.dx * t).rem_euclid(cw as f64);
            let by = (b.y + b.dy * t).rem_euclid(ch as f64);
            let mut dx = (x - bx).abs();
            if dx > cw as f64 / 2.0 {
                dx = cw as f64 - dx;
            }
            let mut dy = (y - by).abs();
            if dy > ch as f64 / 2.0 {
                dy = ch as f64 - dy;
            }
            v += b.amp * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp();
        }
        v
    };

    // humidity in [0,1]; channel 2
    let humidity_at = |t: f64, x: f64, y: f64, bumps: &[Vec<Bump>]| -> f64 {
        let raw = 0.45 + 0.45 * coarse_field(&bumps[2], t, x, y);
        raw.clamp(0.0, 1.0)
    };
    let wind_at = |t: f64, x: f64, y: f64, bumps: &[Vec<Bump>]| -> (f64, f64) {
        if spatial_wind {
            (
                base_u + 0.4 * coarse_field(&bumps[0], t, x, y),
                base_v + 0.4 * coarse_field(&bumps[1], t, x, y),
            )
        } else {
            (base_u, base_v)
        }
    };

    // blob lifecycle over all steps, intensity fields first
    let mut blobs: Vec<Blob> = Vec::new();
    for _ in 0..cfg.initial_blobs {
        // seed initial blobs at humid coarse cells when possible
        let mut best = (0.0f64, cw as f64 / 2.0, ch as f64 / 2.0);
        for _ in 0..8 {
            let x = rng.gen_range(0.0..cw as f64);
            let y = rng.gen_range(0.0..ch as f64);
            let hum = humidity_at(0.0, x, y, &field_bumps);
            if hum > best.0 {
                best = (hum, x, y);
            }
        }
        blobs.push(Blob {
            x: best.1 * sx,
            y: best.2 * sy,
            radius: rng.gen_range(cfg.blob_radius_min..cfg.blob_radius_max),
            amp: rng.gen_range(cfg.blob_amp_min..cfg.blob_amp_max),
        });
    }

    let decay = 0.5f64.powf(1.0 / cfg.decay_half_life);
    let mut intensity_frames: Vec<Vec<f64>> = Vec::with_capacity(cfg.steps);
    let mut reanalysis_frames: Vec<Vec<f64>> = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let t = step as f64;
        // births where humidity exceeds the threshold
        let mut humid_cells: Vec<(usize, usize)> = Vec::new();
        for cy in 0..ch {
            for cx in 0..cw {
                if humidity_at(t, cx as f64 + 0.5, cy as f64 + 0.5, &field_bumps)
                    > cfg.humidity_threshold
                {
                    humid_cells.push((cx, cy));
                }
            }
        }
        if !humid_cells.is_empty() && rng.gen::<f64>() < cfg.birth_rate {
            let &(cx, cy) = &humid_cells[rng.gen_range(0..humid_cells.len())];
            blobs.push(Blob {
                x: (cx as f64 + rng.gen_range(0.0..1.0)) * sx,
                y: (cy as f64 + rng.gen_range(0.0..1.0)) * sy,
                radius: rng.gen_range(cfg.blob_radius_min..cfg.blob_radius_max),
                amp: rng.gen_range(cfg.blob_amp_min..cfg.blob_amp_max),
            });
        }

        // rasterize intensity
        let mut frame = vec![0.0f64; h * w];
        for b in &blobs {
            let r2 = 2.0 * b.radius * b.radius;
            let reach = (b.radius * 4.0).ceil() as isize;
            let bx = b.x.round() as isize;
            let by = b.y.round() as isize;
            for py in (by - reach).max(0)..(by + reach + 1).min(h as isize) {
                for px in (bx - reach).max(0)..(bx + reach + 1).min(w as isize) {
                    let dx = px as f64 - b.x;
                    let dy = py as f64 - b.y;
                    frame[py as usize * w + px as usize] +=
                        b.amp * (-(dx * dx + dy * dy) / r2).exp();
                }
            }
        }
        for v in frame.iter_mut() {
            *v = v.min(cfg.intensity_cap);
        }
        intensity_frames.push(frame);

        // coarse reanalysis stack for this step
        let mut coarse = vec![0.0f64; REANALYSIS_CHANNELS * ch * cw];
        for cy in 0..ch {
            for cx in 0..cw {
                let (x, y) = (cx as f64 + 0.5, cy as f64 + 0.5);
                let (u, v) = wind_at(t, x, y, &field_bumps);
                coarse[cy * cw + cx] = u;
                coarse[ch * cw + cy * cw + cx] = v;
                coarse[2 * ch * cw + cy * cw + cx] = humidity_at(t, x, y, &field_bumps);
                for c in 3..REANALYSIS_CHANNELS {
                    coarse[c * ch * cw + cy * cw + cx] = coarse_field(&field_bumps[c], t, x, y);
                }
            }
        }
        reanalysis_frames.push(coarse);

        // advect and decay for the next step; blobs leaving the domain die
        for b in blobs.iter_mut() {
            let (u, v) = wind_at(t, b.x / sx, b.y / sy, &field_bumps);
            b.x += u;
            b.y += v;
            b.amp *= decay;
        }
        blobs.retain(|b| {
            b.amp > 0.05 && b.x > -2.0 && b.x < w as f64 + 2.0 && b.y > -2.0 && b.y < h as f64 + 2.0
        });
    }

    // derive radar + satellite, assemble samples
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut samples = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let intensity = &intensity_frames[step];
        let mut qpe_radar = vec![0.0f64; QPE_RADAR_CHANNELS * h * w];
        qpe_radar[..h * w].copy_from_slice(intensity);
        // dBZ-like levels: monotone log transforms fading with altitude
        for level in 1..QPE_RADAR_CHANNELS {
            let gain = 16.0 / level as f64;
            for i in 0..h * w {
                let v = gain * (1.0 + intensity[i]).ln() + 0.5 * noise.sample(&mut rng);
                qpe_radar[level * h * w + i] = v.clamp(0.0, cfg.radar_cap);
            }
        }
        let satellite = if cfg.with_satellite {
            // cloud mask leading precipitation by two steps, blurred
            let lead = (step + 2).min(cfg.steps - 1);
            let future = &intensity_frames[lead];
            let mut sat = vec![0.0f64; SATELLITE_CHANNELS * h * w];
            for c in 0..SATELLITE_CHANNELS {
                let blur = c + 1;
                for py in 0..h {
                    for px in 0..w {
                        let mut acc = 0.0;
                        let mut cnt = 0.0;
                        for dy in -(blur as isize)..=blur as isize {
                            for dx in -(blur as isize)..=blur as isize {
                                let (yy, xx) = (py as isize + dy, px as isize + dx);
                                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                    acc += (1.0 + future[yy as usize * w + xx as usize]).ln();
                                    cnt += 1.0;
                                }
                            }
                        }
                        sat[c * h * w + py * w + px] =
                            acc / cnt + 0.05 * noise.sample(&mut rng);
                    }
                }
            }
            Some(Tensor::new(vec![SATELLITE_CHANNELS, h, w], sat))
        } else {
            None
        };
        samples.push(MultiSourceSample {
            time_index: step as i64,
            qpe_radar: Tensor::new(vec![QPE_RADAR_CHANNELS, h, w], qpe_radar),
            reanalysis: Tensor::new(
                vec![REANALYSIS_CHANNELS, ch, cw],
                reanalysis_frames[step].clone(),
            ),
            satellite,
            target: Tensor::new(vec![1, h, w], intensity.clone()),
        });
    }
    Ok(Sequence { samples, seed })
}

/// Per-channel mean/std over all training pixels for the z-scored channels.
/// The intensity cap is taken from `cfg`, not from the data.
pub fn compute_stats(
    training: &[Sequence],
    cfg: &GeneratorConfig,
) -> Result<NormStats, SynthError> {
    if training.is_empty() || training.iter().all(|s| s.is_empty()) {
        return Err(SynthError::EmptySplit);
    }
    let mut sum = vec![0.0f64; Z_CHANNELS];
    let mut sumsq = vec![0.0f64; Z_CHANNELS];
    let mut count = vec![0u64; Z_CHANNELS];
    for seq in training {
        for s in &seq.samples {
            accumulate_channels(&s.reanalysis, 0, &mut sum, &mut sumsq, &mut count);
            if let Some(sat) = &s.satellite {
                accumulate_channels(sat, REANALYSIS_CHANNELS, &mut sum, &mut sumsq, &mut count);
            }
        }
    }
    let mut mean = vec![0.0f64; Z_CHANNELS];
    let mut std = vec![1.0f64; Z_CHANNELS];
    for c in 0..Z_CHANNELS {
        if count[c] == 0 {
            continue; // absent modality keeps identity stats
        }
        let n = count[c] as f64;
        mean[c] = sum[c] / n;
        let var = (sumsq[c] / n - mean[c] * mean[c]).max(0.0);
        if var == 0.0 {
            return Err(SynthError::ZeroVariance(z_channel_name(c)));
        }
        std[c] = var.sqrt();
    }
    Ok(NormStats {
        mean,
        std,
        intensity_cap: cfg.intensity_cap,
        radar_cap: cfg.radar_cap,
        tau_raw: cfg.tau_raw,
    })
}

fn accumulate_channels(
    t: &Tensor,
    offset: usize,
    sum: &mut [f64],
    sumsq: &mut [f64],
    count: &mut [u64],
) {
    let c = t.shape[0];
    let plane = t.shape[1] * t.shape[2];
    for ch in 0..c {
        let slice = &t.data[ch * plane..(ch + 1) * plane];
        sum[offset + ch] += slice.iter().sum::<f64>();
        sumsq[offset + ch] += slice.iter().map(|v| v * v).sum::<f64>();
        count[offset + ch] += plane as u64;
    }
}

pub fn z_channel_name(c: usize) -> String {
    const REANALYSIS: [&str; REANALYSIS_CHANNELS] = [
        "u_wind",
        "v_wind",
        "humidity",
        "temperature",
        "geopotential",
        "vorticity",
        "pressure",
        "vertical_velocity",
    ];
    if c < REANALYSIS_CHANNELS {
        format!("reanalysis.{}", REANALYSIS[c])
    } else {
        format!("satellite.band{}", c - REANALYSIS_CHANNELS)
    }
}

pub fn qpe_channel_name(c: usize) -> String {
    if c == 0 {
        "qpe_intensity".to_string()
    } else {
        format!("radar.level{c}")
    }
}

/// Min-max map for intensity/radar channels, z-score for the rest.
/// Clamps intensity channels into [0,1].
pub fn normalize(sample: &MultiSourceSample, stats: &NormStats) -> MultiSourceSample {
    let mut qpe = sample.qpe_radar.clone();
    let plane = qpe.shape[1] * qpe.shape[2];
    for (i, v) in qpe.data.iter_mut().enumerate() {
        let cap = if i < plane { stats.intensity_cap } else { stats.radar_cap };
        *v = (*v / cap).clamp(0.0, 1.0);
    }
    let mut rean = sample.reanalysis.clone();
    apply_z(&mut rean, 0, stats, false);
    let satellite = sample.satellite.as_ref().map(|sat| {
        let mut s = sat.clone();
        apply_z(&mut s, REANALYSIS_CHANNELS, stats, false);
        s
    });
    let mut target = sample.target.clone();
    for v in target.data.iter_mut() {
        *v = (*v / stats.intensity_cap).clamp(0.0, 1.0);
    }
    MultiSourceSample {
        time_index: sample.time_index,
        qpe_radar: qpe,
        reanalysis: rean,
        satellite,
        target,
    }
}

/// Inverse of [`normalize`] for in-range (unclamped) values.
pub fn denormalize(sample: &MultiSourceSample, stats: &NormStats) -> MultiSourceSample {
    let mut qpe = sample.qpe_radar.clone();
    let plane = qpe.shape[1] * qpe.shape[2];
    for (i, v) in qpe.data.iter_mut().enumerate() {
        let cap = if i < plane { stats.intensity_cap } else { stats.radar_cap };
        *v *= cap;
    }
    let mut rean = sample.reanalysis.clone();
    apply_z(&mut rean, 0, stats, true);
    let satellite = sample.satellite.as_ref().map(|sat| {
        let mut s = sat.clone();
        apply_z(&mut s, REANALYSIS_CHANNELS, stats, true);
        s
    });
    let mut target = sample.target.clone();
    for v in target.data.iter_mut() {
        *v *= stats.intensity_cap;
    }
    MultiSourceSample {
        time_index: sample.time_index,
        qpe_radar: qpe,
        reanalysis: rean,
        satellite,
        target,
    }
}

fn apply_z(t: &mut Tensor, offset: usize, stats: &NormStats, invert: bool) {
    let plane = t.shape[1] * t.shape[2];
    for ch in 0..t.shape[0] {
        let (m, s) = (stats.mean[offset + ch], stats.std[offset + ch]);
        for v in t.data[ch * plane..(ch + 1) * plane].iter_mut() {
            *v = if invert { *v * s + m } else { (*v - m) / s };
        }
    }
}

/// Gaussian noise on every input channel of an already-normalized sample;
/// the target is untouched. `sigma == 0` returns the sample bit-identically.
pub fn add_noise(
    sample: &MultiSourceSample,
    sigma: f64,
    seed: u64,
) -> Result<MultiSourceSample, SynthError> {
    if sigma < 0.0 {
        return Err(SynthError::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(sample.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma).unwrap();
    let mut perturb = |t: &Tensor| {
        let mut out = t.clone();
        for v in out.data.iter_mut() {
            *v += dist.sample(&mut rng);
        }
        out
    };
    Ok(MultiSourceSample {
        time_index: sample.time_index,
        qpe_radar: perturb(&sample.qpe_radar),
        reanalysis: perturb(&sample.reanalysis),
        satellite: sample.satellite.as_ref().map(&mut perturb),
        target: sample.target.clone(),
    })
}

/// Keep every sequence containing a target pixel at or above
/// `event_threshold`; keep a seeded `keep_fraction` of the rest.
pub fn importance_filter(
    sequences: Vec<Sequence>,
    keep_fraction: f64,
    event_threshold: f64,
    seed: u64,
) -> Vec<Sequence> {
    let keep_fraction = keep_fraction.clamp(0.0, 1.0);
    if keep_fraction == 1.0 {
        return sequences;
    }
    let dry_idx: Vec<usize> = sequences
        .iter()
        .enumerate()
        .filter_map(|(i, s)| (!s.has_event(event_threshold)).then_some(i))
        .collect();
    let n_keep = (keep_fraction * dry_idx.len() as f64).round() as usize;
    let mut shuffled = dry_idx.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..shuffled.len()).rev() {
        let j = rng.gen_range(0..=i);
        shuffled.swap(i, j);
    }
    let kept_dry: std::collections::HashSet<usize> =
        shuffled.into_iter().take(n_keep).collect();
    sequences
        .into_iter()
        .enumerate()
        .filter_map(|(i, s)| {
            if s.has_event(event_threshold) || kept_dry.contains(&i) {
                Some(s)
            } else {
                None
            }
        })
        .collect()
}

/// Fractions of target pixels per intensity bucket; `edges` are ascending
/// upper bounds for all but the last (open) bucket. Fractions sum to 1.
pub fn bucket_distribution(sequences: &[Sequence], edges: &[f64]) -> Vec<f64> {
    assert!(edges.windows(2).all(|w| w[0] < w[1]), "edges must ascend");
    let mut counts = vec![0u64; edges.len() + 1];
    let mut total = 0u64;
    for seq in sequences {
        for s in &seq.samples {
            for &v in &s.target.data {
                let bucket = edges.iter().position(|&e| v <= e).unwrap_or(edges.len());
                counts[bucket] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Sequential 80/10/10 split indices over `n` sequences. Every split gets at
/// least one sequence when `n >= 3`.
pub fn split_indices(
    n: usize,
) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
    let mut n_train = ((n as f64 * 0.8).round() as usize).max(1);
    let mut n_val = ((n as f64 * 0.1).round() as usize).max(1);
    while n_train + n_val >= n && n_train > 1 {
        n_train -= 1;
    }
    while n_train + n_val > n && n_val > 0 {
        n_val -= 1;
    }
    (0..n_train.min(n), n_train.min(n)..(n_train + n_val).min(n), (n_train + n_val).min(n)..n)
}

/// Fraction of target pixels at or above `threshold` across sequences.
pub fn wet_fraction(sequences: &[Sequence], threshold: f64) -> f64 {
    let mut wet = 0u64;
    let mut total = 0u64;
    for seq in sequences {
        for s in &seq.samples {
            for &v in &s.target.data {
                if v >= threshold {
                    wet += 1;
                }
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        wet as f64 / total as f64
    }
}
