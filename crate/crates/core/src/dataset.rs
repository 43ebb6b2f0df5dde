//! Dataset layout on disk: one directory per split, each sequence a
//! named-tensor archive plus a plain-text `key=value` metadata file.

use std::fs;
use std::path::{Path, PathBuf};

use crate::synth::{
    GeneratorConfig, MultiSourceSample, Sequence, QPE_RADAR_CHANNELS, REANALYSIS_CHANNELS,
    SATELLITE_CHANNELS,
};
use crate::tensor::io::{load_archive, save_archive, TensorArchive};
use crate::tensor::{Tensor, TensorError};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn stack_time(frames: Vec<&Tensor>) -> Tensor {
    let t = frames.len();
    let inner = frames[0].shape.clone();
    let mut shape = vec![t];
    shape.extend_from_slice(&inner);
    let mut data = Vec::with_capacity(t * frames[0].numel());
    for f in frames {
        assert_eq!(f.shape, inner);
        data.extend_from_slice(&f.data);
    }
    Tensor::new(shape, data)
}

fn unstack_time(t: &Tensor) -> Vec<Tensor> {
    let steps = t.shape[0];
    let inner: Vec<usize> = t.shape[1..].to_vec();
    let n: usize = inner.iter().product();
    (0..steps)
        .map(|i| Tensor::new(inner.clone(), t.data[i * n..(i + 1) * n].to_vec()))
        .collect()
}

pub fn sequence_to_archive(seq: &Sequence) -> TensorArchive {
    let mut archive = TensorArchive::new();
    archive.insert(
        "qpe_radar".into(),
        stack_time(seq.samples.iter().map(|s| &s.qpe_radar).collect()),
    );
    archive.insert(
        "reanalysis".into(),
        stack_time(seq.samples.iter().map(|s| &s.reanalysis).collect()),
    );
    if seq.samples[0].satellite.is_some() {
        archive.insert(
            "satellite".into(),
            stack_time(seq.samples.iter().map(|s| s.satellite.as_ref().unwrap()).collect()),
        );
    }
    archive.insert(
        "target".into(),
        stack_time(seq.samples.iter().map(|s| &s.target).collect()),
    );
    archive
}

pub fn sequence_from_archive(archive: &TensorArchive, seed: u64) -> Result<Sequence, TensorError> {
    let get = |name: &str| {
        archive
            .get(name)
            .ok_or_else(|| TensorError::BadContainer(format!("missing tensor '{name}'")))
    };
    let qpe = unstack_time(get("qpe_radar")?);
    let rean = unstack_time(get("reanalysis")?);
    let target = unstack_time(get("target")?);
    let sat: Option<Vec<Tensor>> = archive.get("satellite").map(unstack_time);
    if qpe.len() != rean.len() || qpe.len() != target.len() {
        return Err(TensorError::BadContainer("inconsistent step counts".into()));
    }
    let samples = qpe
        .into_iter()
        .enumerate()
        .zip(rean)
        .zip(target)
        .map(|(((i, qpe_radar), reanalysis), target)| MultiSourceSample {
            time_index: i as i64,
            qpe_radar,
            reanalysis,
            satellite: sat.as_ref().map(|s| s[i].clone()),
            target,
        })
        .collect();
    Ok(Sequence { samples, seed })
}

pub fn save_sequence(dir: &Path, index: usize, seq: &Sequence) -> Result<(), TensorError> {
    fs::create_dir_all(dir)?;
    let archive = sequence_to_archive(seq);
    save_archive(&dir.join(format!("seq_{index:04}.lptf")), &archive)?;
    let s0 = &seq.samples[0];
    let meta = format!(
        "seed={}\nstep_count={}\nheight={}\nwidth={}\ncoarse_height={}\ncoarse_width={}\nchannels_qpe_radar={}\nchannels_reanalysis={}\nchannels_satellite={}\n",
        seq.seed,
        seq.samples.len(),
        s0.qpe_radar.shape[1],
        s0.qpe_radar.shape[2],
        s0.reanalysis.shape[1],
        s0.reanalysis.shape[2],
        QPE_RADAR_CHANNELS,
        REANALYSIS_CHANNELS,
        if s0.satellite.is_some() { SATELLITE_CHANNELS } else { 0 },
    );
    fs::write(dir.join(format!("seq_{index:04}.meta")), meta)?;
    Ok(())
}

pub fn load_split(dir: &Path) -> Result<Vec<Sequence>, TensorError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "lptf"))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for f in &files {
        let seed = read_meta_seed(&f.with_extension("meta")).unwrap_or(0);
        out.push(sequence_from_archive(&load_archive(f)?, seed)?);
    }
    Ok(out)
}

fn read_meta_seed(path: &Path) -> Option<u64> {
    let text = fs::read_to_string(path).ok()?;
    text.lines().find_map(|l| l.strip_prefix("seed=")?.trim().parse().ok())
}

/// Generate `count` sequences and write sequential 80/10/10 splits under
/// `out`. Returns per-split sequence counts.
pub fn generate_dataset(
    out: &Path,
    base_seed: u64,
    count: usize,
    cfg: &GeneratorConfig,
) -> Result<[usize; 3], Box<dyn std::error::Error>> {
    let sequences: Result<Vec<Sequence>, _> = (0..count)
        .map(|i| crate::synth::generate_sequence(base_seed.wrapping_add(i as u64), cfg))
        .collect();
    let sequences = sequences?;
    let (train, val, test) = crate::synth::split_indices(count);
    let counts = [train.len(), val.len(), test.len()];
    for (name, range) in SPLITS.iter().zip([train, val, test]) {
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        for (local, global) in range.enumerate() {
            save_sequence(&dir, local, &sequences[global])?;
        }
    }
    Ok(counts)
}
