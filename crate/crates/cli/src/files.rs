//! Reading and writing the on-disk artifacts shared between commands.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use topogen::geometry::{NormStats, PointCloud};
use topogen::io;
use topogen::pimage::{GridSpec, PersistenceImage};
use topogen::tensor::ParamStore;

use crate::failure::{Failure, Result};

pub const MANIFEST_HEADER: &str = "id,path,n_points,hash";

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Failure::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

/// Files in `dir` whose name ends with `suffix`, sorted by name.
pub fn list(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Failure::io(dir, e))? {
        let path = entry.map_err(|e| Failure::io(dir, e))?.path();
        if path.is_file() && path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// File name with `suffix` removed.
pub fn stem(path: &Path, suffix: &str) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.strip_suffix(suffix).unwrap_or(name).to_string()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub const CLOUD_SUFFIXES: [&str; 3] = [".xyz", ".txt", ".tpc"];

/// Every point-cloud file in `dir`, id taken from the file stem.
pub fn read_cloud_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths: Vec<(PathBuf, &str)> = Vec::new();
    for suffix in CLOUD_SUFFIXES {
        paths.extend(list(dir, suffix)?.into_iter().map(|p| (p, suffix)));
    }
    paths.sort();
    paths
        .iter()
        .map(|(p, suffix)| {
            let cloud = io::parse_points(&read(p)?).map_err(|e| Failure::from(e).context(p.display()))?;
            Ok(cloud.with_id(stem(p, suffix)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub n_points: usize,
    pub hash: String,
}

pub fn manifest_to_csv(entries: &[ManifestEntry]) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    for e in entries {
        s.push_str(&format!("{},{},{},{}\n", e.id, e.path, e.n_points, e.hash));
    }
    s
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Failure::bad_input(format!("{}: expected header `{MANIFEST_HEADER}`", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Failure::bad_input(format!("{} line {}: malformed row", path.display(), i + 2));
            let cols: Vec<&str> = line.split(',').collect();
            let [id, p, n, hash] = cols[..] else { return Err(bad()) };
            Ok(ManifestEntry { id: id.into(), path: p.into(), n_points: n.parse().map_err(|_| bad())?, hash: hash.into() })
        })
        .collect()
}

/// Clouds listed in a manifest, each checked against its recorded hash.
pub fn load_manifest_clouds(manifest: &Path) -> Result<Vec<PointCloud>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Failure::bad_input(format!("{}: no clouds", manifest.display())));
    }
    entries
        .iter()
        .map(|e| {
            let path = base.join(&e.path);
            let bytes = read(&path)?;
            if sha256_hex(&bytes) != e.hash {
                return Err(Failure::bad_input(format!("{}: content hash does not match the manifest", path.display())));
            }
            let cloud = io::parse_points(&bytes).map_err(|err| Failure::from(err).context(path.display()))?;
            if cloud.len() != e.n_points {
                return Err(Failure::bad_input(format!("{}: {} points, manifest says {}", path.display(), cloud.len(), e.n_points)));
            }
            Ok(cloud.with_id(e.id.clone()))
        })
        .collect()
}

/// Sidecar holding the normalization map next to a manifest.
pub fn norm_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("norm")
}

pub fn norm_to_text(n: &NormStats) -> String {
    format!("mean = {} {} {}\nscale = {}\n", n.mean[0], n.mean[1], n.mean[2], n.scale)
}

pub const PI_SUFFIXES: [&str; 2] = [".pi1.tpi", ".pi2.tpi"];

pub struct ImagePair {
    pub id: String,
    pub images: (PersistenceImage, PersistenceImage),
}

pub fn read_image(path: &Path) -> Result<(PersistenceImage, GridSpec)> {
    io::parse_image(&read(path)?).map_err(|e| Failure::from(e).context(path.display()))
}

pub fn read_image_dir(dir: &Path) -> Result<Vec<ImagePair>> {
    let firsts = list(dir, PI_SUFFIXES[0])?;
    if firsts.is_empty() {
        return Err(Failure::bad_input(format!("{}: no *{} files", dir.display(), PI_SUFFIXES[0])));
    }
    firsts
        .iter()
        .map(|p1| {
            let id = stem(p1, PI_SUFFIXES[0]);
            let (i1, _) = read_image(p1)?;
            let (i2, _) = read_image(&dir.join(format!("{id}{}", PI_SUFFIXES[1])))?;
            if i1.n != i2.n {
                return Err(Failure::bad_input(format!("{id}: image resolutions differ")));
            }
            Ok(ImagePair { id, images: (i1, i2) })
        })
        .collect()
}

pub const CONFIG_FILE: &str = "config.txt";
pub const PARAMS_FILE: &str = "params.tck";

pub fn write_checkpoint(dir: &Path, config: &impl std::fmt::Display, params: &ParamStore) -> Result<()> {
    write(&dir.join(CONFIG_FILE), config.to_string())?;
    write(&dir.join(PARAMS_FILE), params.to_checkpoint())
}

/// Config text and parameters of a checkpoint directory.
pub fn read_checkpoint(dir: &Path) -> Result<(String, ParamStore)> {
    let config = read_text(&dir.join(CONFIG_FILE))?;
    let params = ParamStore::from_checkpoint(&read(&dir.join(PARAMS_FILE))?)?;
    Ok((config, params))
}

pub fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}
