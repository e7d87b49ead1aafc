//! Precomputed visual feature files.
//!
//! Layout (little-endian): magic `3MFT`, `u32` version, `u32` feature
//! dimension, `u32` spatial count, then one block per image holding the
//! mean-pooled vector followed by the spatial vectors, all `f32`. A JSON
//! manifest next to the file (`<file>.json`) maps image ids to the byte
//! offset of their block.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{data_err, Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"3MFT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Visual features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    /// `[D_v]`
    pub mean_pooled: Tensor,
    /// `[R, D_v]`
    pub spatial: Tensor,
}

impl ImageFeatures {
    pub fn dim(&self) -> usize {
        self.mean_pooled.len()
    }

    pub fn regions(&self) -> usize {
        self.spatial.shape()[0]
    }
}

pub fn manifest_path(features: &Path) -> PathBuf {
    let mut s = features.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// A feature file loaded into memory together with its manifest.
#[derive(Debug)]
pub struct FeatureFile {
    path: PathBuf,
    dim: usize,
    regions: usize,
    bytes: Vec<u8>,
    offsets: BTreeMap<String, u64>,
}

impl FeatureFile {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => data_err!("features file {} not found", path.display()),
            _ => Error::io(path, e),
        })?;
        if bytes.len() < HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
            return Err(data_err!("{} is not a feature file (bad magic)", path.display()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FEATURE_VERSION {
            return Err(data_err!(
                "{}: unsupported feature file version {}",
                path.display(),
                version
            ));
        }
        let dim = word(8) as usize;
        let regions = word(12) as usize;
        if dim == 0 || regions == 0 {
            return Err(data_err!("{}: zero feature dimension in header", path.display()));
        }
        let mpath = manifest_path(path);
        let manifest = fs::read_to_string(&mpath).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                data_err!("feature manifest {} not found", mpath.display())
            }
            _ => Error::io(&mpath, e),
        })?;
        let offsets: BTreeMap<String, u64> = serde_json::from_str(&manifest)
            .map_err(|e| data_err!("{}: malformed manifest: {}", mpath.display(), e))?;
        let file = FeatureFile {
            path: path.to_owned(),
            dim,
            regions,
            bytes,
            offsets,
        };
        for (id, &off) in &file.offsets {
            let end = off as usize + file.block_len();
            if (off as usize) < HEADER_LEN || end > file.bytes.len() {
                return Err(data_err!(
                    "{}: block for image {:?} at offset {} exceeds file length {}",
                    path.display(),
                    id,
                    off,
                    file.bytes.len()
                ));
            }
        }
        Ok(file)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    fn block_len(&self) -> usize {
        (1 + self.regions) * self.dim * 4
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.offsets.keys().map(String::as_str)
    }

    pub fn get(&self, image_id: &str) -> Result<ImageFeatures> {
        let off = *self.offsets.get(image_id).ok_or_else(|| {
            data_err!(
                "image {:?} missing from features {}",
                image_id,
                self.path.display()
            )
        })? as usize;
        let floats: Vec<f64> = self.bytes[off..off + self.block_len()]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let (mean, spatial) = floats.split_at(self.dim);
        Ok(ImageFeatures {
            mean_pooled: Tensor::vector(mean.to_vec()),
            spatial: Tensor::matrix(self.regions, self.dim, spatial.to_vec())?,
        })
    }
}

/// Writes a feature file and its manifest.
pub fn write_feature_file<'a, I>(path: &Path, dim: usize, regions: usize, images: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a ImageFeatures)>,
{
    let mut bytes = Vec::new();
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    bytes.extend_from_slice(&(regions as u32).to_le_bytes());
    let mut offsets = BTreeMap::new();
    for (id, f) in images {
        if f.dim() != dim || f.regions() != regions || f.spatial.shape()[1] != dim {
            return Err(data_err!(
                "image {:?} has features {}x{}, file expects {}x{}",
                id,
                f.regions(),
                f.dim(),
                regions,
                dim
            ));
        }
        if offsets.insert(id.to_owned(), bytes.len() as u64).is_some() {
            return Err(data_err!("duplicate image id {:?}", id));
        }
        for &x in f.mean_pooled.data().iter().chain(f.spatial.data()) {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let manifest = serde_json::to_string_pretty(&offsets).expect("manifest serializes");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}
