//! Datasets on disk: `img_XXXX.ltf` (`1 × H × W`), `msk_XXXX.ltf` (`H × W`
//! labels stored as reals) and a `manifest.txt` of `key = value` lines.

use std::fs;
use std::path::Path;

use lamformer_core::data::{Sample, SynthSpec};
use lamformer_core::{LabelMap, Tensor};

use crate::config::pairs;
use crate::error::{Error, Result};
use crate::ltf;

pub const MANIFEST: &str = "manifest.txt";

pub fn save(dir: &Path, samples: &[Sample], spec: &SynthSpec) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        ltf::save(&dir.join(format!("img_{i:04}.ltf")), &s.image)?;
        let m = &s.mask;
        let labels = Tensor::new(
            &[m.height(), m.width()],
            m.labels().iter().map(|&l| l as f32).collect(),
        )?;
        ltf::save(&dir.join(format!("msk_{i:04}.ltf")), &labels)?;
    }
    let manifest = format!(
        "count = {}\nimage_size = {}\nnum_classes = {}\nseed = {}\n",
        samples.len(),
        spec.image_size,
        spec.num_classes,
        spec.seed
    );
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Samples and the class count recorded in the manifest.
pub fn load(dir: &Path) -> Result<(Vec<Sample>, usize)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (mut count, mut classes) = (None, None);
    for (k, v) in pairs(&text)? {
        let n = v.parse::<usize>().ok();
        match k.as_str() {
            "count" => count = n,
            "num_classes" => classes = n,
            _ => {}
        }
    }
    let (Some(count), Some(classes)) = (count, classes) else {
        return Err(Error::Corrupt(format!(
            "{}: needs numeric count and num_classes",
            path.display()
        )));
    };
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let image = ltf::load(&dir.join(format!("img_{i:04}.ltf")))?;
        let mpath = dir.join(format!("msk_{i:04}.ltf"));
        let m = ltf::load(&mpath)?;
        let (s, is) = (m.shape(), image.shape());
        if s.len() != 2 || is.len() != 3 || is[1..] != *s {
            return Err(Error::Corrupt(format!(
                "sample {i}: image {is:?} and mask {s:?} disagree"
            )));
        }
        let labels = m
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && v >= 0.0 && (v as usize) < classes {
                    Ok(v as u8)
                } else {
                    Err(Error::Corrupt(format!(
                        "{}: label {v} is not a class in [0, {classes})",
                        mpath.display()
                    )))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        samples.push(Sample {
            image,
            mask: LabelMap::new(s[0], s[1], labels)?,
        });
    }
    Ok((samples, classes))
}
