use std::fs;
use std::path::{Path, PathBuf};

use autograd::{Element, Tensor};
use serde::{Deserialize, Serialize};

use super::labels::LabelBatch;
use super::phantom::{generate_phantom, PhantomSpec};
use super::volume::{read_labels, read_volume, write_labels, write_volume, LabelVolume, Volume};
use crate::error::{io_err, json_err, Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: Split,
}

/// Dataset listing; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<CaseEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(io_err(path))?;
        let mut m: Manifest = serde_json::from_slice(&text).map_err(json_err(path))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for c in &mut m.cases {
            if c.image.is_relative() {
                c.image = base.join(&c.image);
            }
            if c.label.is_relative() {
                c.label = base.join(&c.label);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(json_err(path))?;
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn count(&self, split: Split) -> usize {
        self.cases.iter().filter(|c| c.split == split).count()
    }
}

/// Seed of case `index` in a dataset generated from `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Writes `count` phantoms plus `manifest.json` under `out`; the first
/// `round(count · train_fraction)` cases form the training split.
pub fn generate_dataset(
    out: &Path,
    count: usize,
    spec: &PhantomSpec,
    seed: u64,
    train_fraction: f64,
) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Config("dataset needs at least one case".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside [0,1]")));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let n_train = (count as f64 * train_fraction).round() as usize;
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let (img, lbl) = generate_phantom(case_seed(seed, i), spec)?;
        let image = PathBuf::from(format!("images/case_{i:04}.raw"));
        let label = PathBuf::from(format!("labels/case_{i:04}.raw"));
        write_volume(&out.join(&image), &img)?;
        write_labels(&out.join(&label), &lbl)?;
        cases.push(CaseEntry {
            image,
            label,
            split: if i < n_train { Split::Train } else { Split::Test },
        });
    }
    let m = Manifest { cases };
    m.save(&out.join("manifest.json"))?;
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub image: Volume,
    pub label: LabelVolume,
}

/// In-memory cases of one split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn load(manifest: &Manifest, split: Split) -> Result<Self> {
        let mut cases = Vec::new();
        for entry in manifest.cases.iter().filter(|c| c.split == split) {
            let image = read_volume(&entry.image)?;
            let label = read_labels(&entry.label)?;
            if image.dims != label.dims {
                return Err(Error::Data(format!(
                    "{}: image dims {:?} vs label dims {:?}",
                    entry.image.display(),
                    image.dims,
                    label.dims
                )));
            }
            let name = entry
                .image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            cases.push(Case { name, image, label });
        }
        if cases.is_empty() {
            return Err(Error::Data(format!("split {split:?} has no cases")));
        }
        Ok(Self { cases })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Crop of `patch` voxels starting at `origin` from case `index`.
    pub fn crop<E: Element>(
        &self,
        index: usize,
        origin: [usize; 3],
        patch: [usize; 3],
    ) -> Result<(Tensor<E>, Vec<u16>)> {
        let case = &self.cases[index];
        let [_, h, w] = case.image.dims;
        if (0..3).any(|k| origin[k] + patch[k] > case.image.dims[k]) {
            return Err(Error::Data(format!(
                "patch {patch:?} at {origin:?} exceeds volume {:?}",
                case.image.dims
            )));
        }
        let n = patch.iter().product();
        let mut img = Vec::with_capacity(n);
        let mut lbl = Vec::with_capacity(n);
        for z in 0..patch[0] {
            for y in 0..patch[1] {
                let row = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                img.extend(case.image.data[row..row + patch[2]].iter().map(|&v| E::lit(v as f64)));
                lbl.extend_from_slice(&case.label.data[row..row + patch[2]]);
            }
        }
        Ok((Tensor::from_vec(&[1, 1, patch[0], patch[1], patch[2]], img)?, lbl))
    }

    /// Centred crop of case `index` (used for calibration samples).
    pub fn center_crop<E: Element>(&self, index: usize, patch: [usize; 3]) -> Result<Tensor<E>> {
        let dims = self.cases[index].image.dims;
        let origin = std::array::from_fn(|k| dims[k].saturating_sub(patch[k]) / 2);
        Ok(self.crop(index, origin, patch)?.0)
    }

    /// `batch` random crops from uniformly drawn cases.
    pub fn sample_batch<E: Element>(
        &self,
        rng: &mut Stream,
        batch: usize,
        patch: [usize; 3],
    ) -> Result<(Tensor<E>, LabelBatch)> {
        let mut images = Vec::with_capacity(batch);
        let mut labels = Vec::with_capacity(batch * patch.iter().product::<usize>());
        for _ in 0..batch {
            let i = rng.below(self.len());
            let dims = self.cases[i].image.dims;
            let origin = std::array::from_fn(|k| rng.below(dims[k].saturating_sub(patch[k]) + 1));
            let (img, lbl) = self.crop(i, origin, patch)?;
            images.push(img);
            labels.extend(lbl);
        }
        let x = Tensor::stack_batch(&images)?;
        let y = LabelBatch::new([batch, patch[0], patch[1], patch[2]], labels)?;
        Ok((x, y))
    }
}
