//! Run directory layout:
//!
//! ```text
//! config.copy            TOML config the run was started with
//! pyramid/levels.bin     exact real pyramid (plus level_{i}.png previews)
//! scale_{n}/G.bin        generator parameters
//! scale_{n}/D.bin        critic parameters
//! scale_{n}/rec.bin      reconstruction image and its critic scores
//! scale_{n}/meta         JSON: noise amplitude, seeds, config hash
//! log.jsonl              per-epoch losses of finished scales
//! manifest.json          written once every scale is trained
//! ```
//!
//! Tensor files are little-endian: magic `SGTN`, a `u32` format version, a
//! `u32` tensor count, then per tensor a `u32` name length, the UTF-8 name,
//! a `u32` rank, `u64` dims and the `f32` data.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sigan_autodiff::Tensor;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image_io::save_rgb;
use crate::networks::ScaleModel;
use crate::params::ParamStore;
use crate::pyramid::{plan_scales, ImagePyramid};
use crate::trainer::{reconstruction_noise, EpochLog, TrainedScale, Trainer};

const MAGIC: &[u8; 4] = b"SGTN";
const VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.copy";
pub const LOG_FILE: &str = "log.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn scale_dir(dir: &Path, n: usize) -> PathBuf {
    dir.join(format!("scale_{n}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::checkpoint(path, format!("cannot read: {e}")))
}

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err("not a tensor file".into());
    }
    match r.u32() {
        Some(VERSION) => {}
        v => return Err(format!("unsupported format version {v:?}")),
    }
    let truncated = || "truncated tensor file".to_string();
    let count = r.u32().ok_or_else(truncated)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(truncated)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        out.push((name, Tensor::new(&shape, data)));
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after the last tensor".into());
    }
    Ok(out)
}

pub fn write_tensors<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    write_file(path, &encode_tensors(tensors))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_tensors(&read_file(path)?).map_err(|m| Error::checkpoint(path, m))
}

fn take_tensor(tensors: &mut Vec<(String, Tensor)>, name: &str, path: &Path) -> Result<Tensor> {
    let i = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::checkpoint(path, format!("missing tensor `{name}`")))?;
    Ok(tensors.swap_remove(i).1)
}

/// Per-scale metadata stored in `scale_{n}/meta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleMeta {
    pub scale: usize,
    pub coarsest: usize,
    pub noise_amp: f32,
    pub has_feedback: bool,
    pub has_attention: bool,
    pub width: usize,
    pub dims: (usize, usize),
    pub seed: u64,
    /// Seed of the fixed reconstruction noise at the coarsest scale.
    pub z_rec_seed: u64,
    pub config_hash: String,
    pub epochs: usize,
    pub final_rec_mse: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub scales: usize,
    pub dims: Vec<(usize, usize)>,
    /// SHA-256 of every parameter file, keyed by path relative to the run.
    pub files: Vec<(String, String)>,
}

/// Creates the run directory with its config copy and pyramid.
pub fn init_run(dir: &Path, config: &RunConfig, pyramid: &ImagePyramid) -> Result<()> {
    let pyr_dir = dir.join("pyramid");
    fs::create_dir_all(&pyr_dir).map_err(|e| Error::io(&pyr_dir, e))?;
    write_file(&dir.join(CONFIG_FILE), config.to_toml().as_bytes())?;
    let names: Vec<String> = (0..pyramid.len()).map(|i| format!("level_{i}")).collect();
    write_tensors(
        &pyr_dir.join("levels.bin"),
        names.iter().map(String::as_str).zip(pyramid.levels()),
    )?;
    for (name, level) in names.iter().zip(pyramid.levels()) {
        save_rgb(level, &pyr_dir.join(format!("{name}.png")))?;
    }
    Ok(())
}

fn write_log(dir: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = Vec::new();
    for entry in log {
        serde_json::to_writer(&mut text, entry).expect("log entry serializes");
        text.write_all(b"\n").expect("in-memory write");
    }
    write_file(&dir.join(LOG_FILE), &text)
}

/// Writes scale `n` of `trainer` and refreshes the log.
pub fn save_scale(dir: &Path, trainer: &Trainer, n: usize) -> Result<()> {
    let s = trainer
        .scale(n)
        .ok_or_else(|| Error::Contract(format!("scale {n} is not trained")))?;
    let sdir = scale_dir(dir, n);
    fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
    write_tensors(&sdir.join("G.bin"), s.model.generator.params.iter())?;
    write_tensors(&sdir.join("D.bin"), s.model.critic.params.iter())?;
    let mut rec: Vec<(&str, &Tensor)> = vec![("rec", &s.rec), ("rec_scores", &s.rec_scores)];
    if n == trainer.coarsest() {
        rec.push(("z_rec", trainer.z_rec()));
    }
    write_tensors(&sdir.join("rec.bin"), rec)?;
    let cfg = trainer.config();
    let meta = ScaleMeta {
        scale: n,
        coarsest: trainer.coarsest(),
        noise_amp: s.model.noise_amp,
        has_feedback: s.model.has_feedback,
        has_attention: s.model.has_attention(),
        width: s.model.generator.spec.width,
        dims: trainer.pyramid().dims(n),
        seed: cfg.seed,
        z_rec_seed: cfg.seed,
        config_hash: cfg.hash(),
        epochs: s.log.len(),
        final_rec_mse: s.log.last().map(|l| l.rec),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    // The meta file marks the scale complete, so it goes last.
    write_file(&sdir.join("meta"), &json)?;
    write_log(dir, &trainer.log())
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_file(path)?)))
}

/// Writes a whole run (trained in memory) to `dir`.
pub fn save_run(dir: &Path, trainer: &Trainer) -> Result<()> {
    init_run(dir, trainer.config(), trainer.pyramid())?;
    for s in trainer.trained() {
        save_scale(dir, trainer, s.model.index)?;
    }
    if trainer.is_complete() {
        write_manifest(dir, trainer)?;
    }
    Ok(())
}

pub fn write_manifest(dir: &Path, trainer: &Trainer) -> Result<()> {
    let mut files = Vec::new();
    for n in (0..=trainer.coarsest()).rev() {
        for f in ["G.bin", "D.bin", "rec.bin"] {
            let rel = format!("scale_{n}/{f}");
            files.push((rel.clone(), file_digest(&dir.join(&rel))?));
        }
    }
    let manifest = Manifest {
        seed: trainer.config().seed,
        config_hash: trainer.config().hash(),
        scales: trainer.pyramid().len(),
        dims: trainer.pyramid().all_dims(),
        files,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), &json)
}

fn read_params(path: &Path, template: &ParamStore) -> Result<ParamStore> {
    let tensors = read_tensors(path)?;
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        match template.get(&name) {
            Some(expected) if expected.shape() == t.shape() => store.insert(name, t),
            Some(expected) => {
                return Err(Error::checkpoint(
                    path,
                    format!("`{name}` has shape {:?}, expected {:?}", t.shape(), expected.shape()),
                ))
            }
            None => return Err(Error::checkpoint(path, format!("unexpected tensor `{name}`"))),
        }
    }
    if let Some((missing, _)) = template.iter().find(|(n, _)| !store.contains(n)) {
        return Err(Error::checkpoint(path, format!("missing tensor `{missing}`")));
    }
    Ok(store)
}

fn load_scale(dir: &Path, n: usize, config: &RunConfig, coarsest: usize, log: &[EpochLog]) -> Result<(TrainedScale, Option<Tensor>)> {
    let sdir = scale_dir(dir, n);
    let meta_path = sdir.join("meta");
    let meta: ScaleMeta = serde_json::from_slice(&read_file(&meta_path)?)
        .map_err(|e| Error::checkpoint(&meta_path, e.to_string()))?;
    if meta.config_hash != config.hash() {
        return Err(Error::checkpoint(
            &meta_path,
            format!("trained with a different configuration than {CONFIG_FILE} (hash mismatch)"),
        ));
    }
    if meta.scale != n || meta.coarsest != coarsest {
        return Err(Error::checkpoint(&meta_path, "scale index does not match its directory"));
    }
    // Architecture only; the random init is overwritten below.
    let mut rng = crate::trainer::scale_rng(0, n);
    let mut model = ScaleModel::new(n, coarsest, &config.arch(), &mut rng);
    model.generator.params = read_params(&sdir.join("G.bin"), &model.generator.params)?;
    model.critic.params = read_params(&sdir.join("D.bin"), &model.critic.params)?;
    model.noise_amp = meta.noise_amp;
    let rec_path = sdir.join("rec.bin");
    let mut rec = read_tensors(&rec_path)?;
    let z_rec = if n == coarsest {
        Some(take_tensor(&mut rec, "z_rec", &rec_path)?)
    } else {
        None
    };
    let scale = TrainedScale {
        model,
        rec: take_tensor(&mut rec, "rec", &rec_path)?,
        rec_scores: take_tensor(&mut rec, "rec_scores", &rec_path)?,
        log: log.iter().filter(|l| l.scale == n).cloned().collect(),
    };
    Ok((scale, z_rec))
}

fn read_log(dir: &Path) -> Result<Vec<EpochLog>> {
    let path = dir.join(LOG_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::checkpoint(&path, e.to_string())))
        .collect()
}

/// Loads every finished scale of a run directory.
pub fn load_run(dir: &Path) -> Result<Trainer> {
    let config_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&config_path)
        .map_err(|e| Error::checkpoint(&config_path, format!("cannot read: {e}")))?;
    let config = RunConfig::from_toml(&text)?;
    let levels_path = dir.join("pyramid").join("levels.bin");
    let mut levels = read_tensors(&levels_path)?;
    levels.sort_by_key(|(name, _)| name.trim_start_matches("level_").parse::<usize>().unwrap_or(usize::MAX));
    let pyramid = ImagePyramid::from_levels(levels.into_iter().map(|(_, t)| t).collect());
    let expected = plan_scales(pyramid.dims(0), &config.pyramid())?;
    if expected != pyramid.all_dims() {
        return Err(Error::checkpoint(&levels_path, "pyramid does not match the configured geometry"));
    }
    let coarsest = pyramid.coarsest();
    let log = read_log(dir)?;
    let mut trained = Vec::new();
    let mut z_rec = reconstruction_noise(config.seed, pyramid.dims(coarsest));
    for n in (0..=coarsest).rev() {
        if !scale_dir(dir, n).join("meta").exists() {
            break;
        }
        let (scale, z) = load_scale(dir, n, &config, coarsest, &log)?;
        if let Some(z) = z {
            z_rec = z;
        }
        trained.push(scale);
    }
    if let Some(n) = (0..coarsest + 1 - trained.len()).find(|&n| scale_dir(dir, n).join("meta").exists()) {
        return Err(Error::checkpoint(
            scale_dir(dir, n),
            "scale is present although a coarser scale is missing",
        ));
    }
    Ok(Trainer::from_parts(config, pyramid, z_rec, trained))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_files_round_trip_bit_exactly() {
        let a = Tensor::new(&[2, 3], vec![0.1, -0.0, f32::MIN_POSITIVE, 1e30, -7.5, 3.0]);
        let b = Tensor::scalar(42.0);
        let bytes = encode_tensors([("a", &a), ("b.c", &b)]);
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1.shape(), a.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn corrupt_tensor_files_are_rejected() {
        let a = Tensor::ones(&[4]);
        let bytes = encode_tensors([("a", &a)]);
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_tensors(b"nope").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_tensors(&extra).is_err());
    }
}
