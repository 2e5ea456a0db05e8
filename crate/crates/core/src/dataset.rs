//! Case directories: `case_NNN/image.v3d`, `label.v3d`, optional
//! `label_rater2.v3d`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, perturb_labels, PhantomSpec, DEFAULT_PERTURB_STRENGTH};
use crate::rng::SplitMix64;
use crate::volume::{read_v3d, write_v3d, Image, Labels};

pub const IMAGE_FILE: &str = "image.v3d";
pub const LABEL_FILE: &str = "label.v3d";
pub const RATER2_FILE: &str = "label_rater2.v3d";

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Image,
    pub labels: Labels,
    pub rater2: Option<Labels>,
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Seed of case `index` in a dataset generated from `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    SplitMix64::stream(seed, index as u64).next_u64()
}

pub fn write_case(root: &Path, case: &Case) -> Result<PathBuf> {
    let dir = root.join(&case.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_v3d(&dir.join(IMAGE_FILE), &case.image)?;
    write_v3d(&dir.join(LABEL_FILE), &case.labels)?;
    if let Some(r2) = &case.rater2 {
        write_v3d(&dir.join(RATER2_FILE), r2)?;
    }
    Ok(dir)
}

/// Sorted `case_*` subdirectories of `root`.
pub fn list_cases(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        let is_case = path.is_dir()
            && path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("case_"));
        if is_case {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_case(dir: &Path) -> Result<Case> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Data(format!("bad case directory {}", dir.display())))?
        .to_string();
    let image: Image = read_v3d(&dir.join(IMAGE_FILE))?;
    let labels: Labels = read_v3d(&dir.join(LABEL_FILE))?;
    if image.shape != labels.shape {
        return Err(Error::Data(format!(
            "{id}: image {:?} and labels {:?} differ in shape",
            image.shape, labels.shape
        )));
    }
    let r2_path = dir.join(RATER2_FILE);
    let rater2 = if r2_path.exists() {
        Some(read_v3d(&r2_path)?)
    } else {
        None
    };
    Ok(Case {
        id,
        image,
        labels,
        rater2,
    })
}

pub fn load_dataset(root: &Path) -> Result<Vec<Case>> {
    let dirs = list_cases(root)?;
    if dirs.is_empty() {
        return Err(Error::Data(format!(
            "no case_* directories under {}",
            root.display()
        )));
    }
    dirs.iter().map(|d| load_case(d)).collect()
}

/// Generates `count` phantom cases with a simulated second rater.
pub fn generate_cases(seed: u64, count: usize, size: [usize; 3]) -> Result<Vec<Case>> {
    (0..count)
        .map(|i| {
            let s = case_seed(seed, i);
            let vol = generate_phantom(&PhantomSpec {
                size,
                seed: s,
                ..Default::default()
            })?;
            let rater2 = perturb_labels(&vol.labels, s ^ 0x2, DEFAULT_PERTURB_STRENGTH);
            Ok(Case {
                id: case_id(i),
                image: vol.image,
                labels: vol.labels,
                rater2: Some(rater2),
            })
        })
        .collect()
}
