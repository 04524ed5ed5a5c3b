use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, LabeledSample, Malignancy};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "dataset.toml";
pub const SAMPLES_FILE: &str = "samples.csv";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    samples: usize,
    malignancy: Vec<Malignancy>,
    spec: DatasetSpec,
}

/// Writes `dataset.toml` and `samples.csv` into `dir`.
///
/// The samples file starts with `dim,C_id,C_ood`, then one
/// `group_id,y,y_star,x_0,...,x_{d-1}` record per line. Features are written
/// as the shortest decimal that reparses to the same 32-bit float.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: 1,
        samples: dataset.samples.len(),
        malignancy: dataset.malignancy.clone(),
        spec: dataset.spec.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::format(dir.join(MANIFEST_FILE), e.to_string()))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "{},{},{}",
        dataset.dim(),
        dataset.id_classes(),
        dataset.ood_classes()
    );
    for s in &dataset.samples {
        let _ = write!(out, "{},{},{}", s.group_id, s.y, s.y_star.as_u8());
        for &v in &s.x {
            let _ = write!(out, ",{}", v as f32);
        }
        out.push('\n');
    }
    let spath = dir.join(SAMPLES_FILE);
    fs::write(&spath, out).map_err(|e| Error::io(&spath, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format != 1 {
        return Err(Error::format(&mpath, format!("unsupported format {}", manifest.format)));
    }
    manifest.spec.validate()?;

    let spath = dir.join(SAMPLES_FILE);
    let text = fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(&spath, "empty file"))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(&spath, format!("bad header: {e}")))?;
    let spec = &manifest.spec;
    if dims != [spec.feature_dim, spec.id_classes, spec.ood_classes] {
        return Err(Error::format(
            &spath,
            format!("header {dims:?} disagrees with the manifest"),
        ));
    }
    let classes = spec.id_classes + spec.ood_classes;
    if manifest.malignancy.len() != classes {
        return Err(Error::format(&mpath, "malignancy list length differs from class count"));
    }

    let mut samples = Vec::with_capacity(manifest.samples);
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |m: String| Error::format(&spath, format!("line {}: {m}", lineno + 2));
        let mut fields = line.split(',');
        let mut next = || fields.next().ok_or_else(|| err("truncated record".into()));
        let group_id: u64 = next()?.parse().map_err(|e| err(format!("group_id: {e}")))?;
        let y: usize = next()?.parse().map_err(|e| err(format!("y: {e}")))?;
        let ys: u8 = next()?.parse().map_err(|e| err(format!("y_star: {e}")))?;
        let y_star = Malignancy::from_u8(ys).ok_or_else(|| err(format!("y_star {ys}")))?;
        if y >= classes {
            return Err(err(format!("class {y} out of range")));
        }
        if manifest.malignancy[y] != y_star {
            return Err(err(format!("y_star disagrees with class {y}")));
        }
        let x: Vec<f64> = fields
            .map(|t| t.parse::<f32>().map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(format!("feature: {e}")))?;
        if x.len() != spec.feature_dim {
            return Err(err(format!("{} features, expected {}", x.len(), spec.feature_dim)));
        }
        samples.push(LabeledSample {
            x,
            y,
            y_star,
            group_id,
        });
    }
    if samples.len() != manifest.samples {
        return Err(Error::format(
            &spath,
            format!("{} records, manifest says {}", samples.len(), manifest.samples),
        ));
    }
    Ok(Dataset {
        spec: manifest.spec,
        malignancy: manifest.malignancy,
        samples,
    })
}
