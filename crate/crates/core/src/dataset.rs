//! Dataset directory layout:
//!
//! ```text
//! root/train/manifest.txt        one id per line
//! root/train/images/<id>.ppm
//! root/train/masks/<id>.pgm
//! root/test/...                  same shape
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm;
use crate::synth::{self, Sample, SceneSpec};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn generate(spec: &SceneSpec, n_train: usize, n_test: usize, seed: u64) -> Result<Self> {
        let (train, test) = synth::generate_split(spec, n_train, n_test, seed)?;
        Ok(Dataset { train, test })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        save_split(&root.join("train"), &self.train)?;
        save_split(&root.join("test"), &self.test)
    }

    /// Loads both splits. Loaded samples carry seed 0.
    pub fn load(root: &Path) -> Result<Self> {
        Ok(Dataset {
            train: load_split(&root.join("train"))?,
            test: load_split(&root.join("test"))?,
        })
    }

    /// Round-trips through the on-disk quantization without touching disk, so
    /// in-memory and loaded datasets train identically.
    pub fn quantized(&self) -> Result<Self> {
        let q = |s: &[Sample]| -> Result<Vec<Sample>> {
            s.iter()
                .map(|s| {
                    Ok(Sample {
                        id: s.id.clone(),
                        seed: 0,
                        image: pnm::decode_ppm(&pnm::encode_ppm(&s.image)?)?,
                        mask: pnm::decode_mask(&pnm::encode_pgm(&s.mask)?)?,
                    })
                })
                .collect()
        };
        Ok(Dataset {
            train: q(&self.train)?,
            test: q(&self.test)?,
        })
    }
}

pub fn save_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = String::new();
    for s in samples {
        pnm::save_image(&dir.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
        pnm::save_mask(&dir.join("masks").join(format!("{}.pgm", s.id)), &s.mask)?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load_split(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let mut out = Vec::new();
    for id in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let image = pnm::load_image(&dir.join("images").join(format!("{id}.ppm")))?;
        let mask = pnm::load_mask(&dir.join("masks").join(format!("{id}.pgm")))?;
        if image.shape()[1..] != *mask.shape() {
            return Err(Error::Config(format!("image and mask sizes differ for {id}")));
        }
        out.push(Sample {
            id: id.to_string(),
            seed: 0,
            image,
            mask,
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{} lists no samples", dir.join(MANIFEST).display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_round_trip_matches_quantized() {
        let spec = SceneSpec {
            image_size: 16,
            ..Default::default()
        };
        let ds = Dataset::generate(&spec, 3, 2, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded, ds.quantized().unwrap());
        let manifest = fs::read_to_string(dir.path().join("test").join(MANIFEST)).unwrap();
        assert_eq!(manifest, "test-00000\ntest-00001\n");
    }

    #[test]
    fn missing_manifest_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Config(_))));
    }
}
