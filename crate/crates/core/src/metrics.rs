//! Overlap, surface-distance and volume-agreement statistics.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::phantom::for_each_neighbor;
use crate::rng::SplitMix64;
use crate::volume::Labels;

/// Binary voxel mask over a `[D, H, W]` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub shape: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Dimension(format!(
                "mask {shape:?} needs {} voxels, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_labels(labels: &Labels, class: u8) -> Self {
        Self {
            shape: labels.shape,
            data: labels.data.iter().map(|&v| v == class).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Voxels of the mask with a 6-neighbour outside it. Voxels on the grid
    /// border count as boundary.
    pub fn boundary(&self) -> Vec<[usize; 3]> {
        let [d, h, w] = self.shape;
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !self.data[(z * h + y) * w + x] {
                        continue;
                    }
                    let on_border =
                        z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                    let mut exposed = on_border;
                    if !exposed {
                        for_each_neighbor(self.shape, z, y, x, |j| exposed |= !self.data[j]);
                    }
                    if exposed {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`, defined as 1 when both masks are empty.
pub fn dice_score(a: &Mask, b: &Mask) -> Result<f64> {
    same_shape(a, b)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

fn dist2(p: [usize; 3], q: [usize; 3], spacing: [f64; 3]) -> f64 {
    let dz = (p[0] as f64 - q[0] as f64) * spacing[0];
    let dy = (p[1] as f64 - q[1] as f64) * spacing[1];
    let dx = (p[2] as f64 - q[2] as f64) * spacing[2];
    dz * dz + dy * dy + dx * dx
}

/// Squared directed distance `max_{a∈A} min_{b∈B} |a−b|²`. A point of `A`
/// stops scanning `B` once it finds a neighbour closer than the running
/// maximum, since it can no longer raise it.
fn directed_sq(a: &[[usize; 3]], b: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    let mut best = 0.0f64;
    for &p in a {
        let mut nearest = f64::INFINITY;
        for &q in b {
            let d = dist2(p, q, spacing);
            if d < nearest {
                nearest = d;
                if nearest <= best {
                    break;
                }
            }
        }
        best = best.max(nearest);
    }
    best
}

/// Symmetric Hausdorff distance in mm between the boundary voxel sets of
/// two masks. `None` when either mask is empty.
pub fn hausdorff(a: &Mask, b: &Mask, spacing_mm: [f64; 3]) -> Result<Option<f64>> {
    same_shape(a, b)?;
    let mut ba = a.boundary();
    let mut bb = b.boundary();
    if ba.is_empty() || bb.is_empty() {
        return Ok(None);
    }
    // A shuffled scan order makes early termination effective on
    // spatially coherent boundaries; the result does not depend on it.
    let mut rng = SplitMix64::new(0x4844);
    rng.shuffle(&mut ba);
    rng.shuffle(&mut bb);
    let d = directed_sq(&ba, &bb, spacing_mm).max(directed_sq(&bb, &ba, spacing_mm));
    Ok(Some(d.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VolumeAgreement {
    /// `None` when either series has zero variance.
    pub pearson_r: Option<f64>,
    pub r_squared: Option<f64>,
    /// Mean absolute difference, mL.
    pub abs_dev: f64,
    /// Mean of `100·|pred − ref| / ref` over cases with nonzero reference.
    pub pct_diff: Option<f64>,
    /// Cases left out of `pct_diff` because the reference volume is zero.
    pub pct_excluded: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn volume_agreement(pred: &[f64], reference: &[f64]) -> Result<VolumeAgreement> {
    if pred.len() != reference.len() || pred.is_empty() {
        return Err(Error::Usage(format!(
            "volume series need equal nonzero lengths, got {} and {}",
            pred.len(),
            reference.len()
        )));
    }
    let pearson_r = pearson(pred, reference);
    let abs_dev = mean(
        &pred
            .iter()
            .zip(reference)
            .map(|(p, r)| (p - r).abs())
            .collect::<Vec<_>>(),
    );
    let pct: Vec<f64> = pred
        .iter()
        .zip(reference)
        .filter(|(_, &r)| r != 0.0)
        .map(|(p, r)| 100.0 * (p - r).abs() / r)
        .collect();
    Ok(VolumeAgreement {
        pearson_r,
        r_squared: pearson_r.map(|r| r * r),
        abs_dev,
        pct_diff: (!pct.is_empty()).then(|| mean(&pct)),
        pct_excluded: pred.len() - pct.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Mean of `a − b` with limits of agreement `mean ± 1.96·s` (sample std).
pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Usage(format!(
            "Bland-Altman needs two equal series of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let var = d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (d.len() - 1) as f64;
    let half = 1.96 * var.sqrt();
    Ok(BlandAltman {
        mean_diff: m,
        loa_low: m - half,
        loa_high: m + half,
    })
}

/// One (case, class) row of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub class_id: u8,
    pub class_name: String,
    pub dsc: f64,
    pub hd_mm: Option<f64>,
    pub vol_pred_ml: f64,
    pub vol_ref_ml: f64,
    pub flags: String,
}

/// Per-class metrics of every foreground class `1..num_classes`.
pub fn evaluate_case(
    case_id: &str,
    pred: &Labels,
    reference: &Labels,
    class_names: &[&str],
) -> Result<Vec<CaseMetrics>> {
    if pred.shape != reference.shape {
        return Err(Error::Dimension(format!(
            "{case_id}: prediction {:?} and reference {:?} differ in shape",
            pred.shape, reference.shape
        )));
    }
    let ml = reference.voxel_volume_mm3() / 1000.0;
    (1..class_names.len())
        .map(|c| {
            let c = c as u8;
            let (mp, mr) = (Mask::from_labels(pred, c), Mask::from_labels(reference, c));
            let (np, nr) = (mp.count(), mr.count());
            let hd = hausdorff(&mp, &mr, reference.spacing_mm)?;
            let mut flags = Vec::new();
            if np == 0 {
                flags.push("empty_pred");
            }
            if nr == 0 {
                flags.push("empty_ref");
            }
            Ok(CaseMetrics {
                case_id: case_id.to_string(),
                class_id: c,
                class_name: class_names[c as usize].to_string(),
                dsc: dice_score(&mp, &mr)?,
                hd_mm: hd,
                vol_pred_ml: np as f64 * ml,
                vol_ref_ml: nr as f64 * ml,
                flags: flags.join(";"),
            })
        })
        .collect()
}

/// Table-style statistics of one class across cases.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummary {
    pub class_id: u8,
    pub class_name: String,
    pub cases: usize,
    pub mean_dsc: f64,
    pub mean_hd_mm: Option<f64>,
    pub agreement: VolumeAgreement,
    pub bland_altman: Option<BlandAltman>,
}

pub fn summarize(rows: &[CaseMetrics]) -> Result<Vec<ClassSummary>> {
    let mut classes: Vec<u8> = rows.iter().map(|r| r.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let rs: Vec<&CaseMetrics> = rows.iter().filter(|r| r.class_id == c).collect();
            let pred: Vec<f64> = rs.iter().map(|r| r.vol_pred_ml).collect();
            let reference: Vec<f64> = rs.iter().map(|r| r.vol_ref_ml).collect();
            let hds: Vec<f64> = rs.iter().filter_map(|r| r.hd_mm).collect();
            Ok(ClassSummary {
                class_id: c,
                class_name: rs[0].class_name.clone(),
                cases: rs.len(),
                mean_dsc: mean(&rs.iter().map(|r| r.dsc).collect::<Vec<_>>()),
                mean_hd_mm: (!hds.is_empty()).then(|| mean(&hds)),
                agreement: volume_agreement(&pred, &reference)?,
                bland_altman: (rs.len() >= 2)
                    .then(|| bland_altman(&pred, &reference))
                    .transpose()?,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_case_csv(path: &Path, rows: &[CaseMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = [
        "case_id",
        "class_id",
        "class_name",
        "dsc",
        "hd_mm",
        "vol_pred_ml",
        "vol_ref_ml",
        "flags",
    ];
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.case_id.clone(),
            r.class_id.to_string(),
            r.class_name.clone(),
            r.dsc.to_string(),
            opt(r.hd_mm),
            r.vol_pred_ml.to_string(),
            r.vol_ref_ml.to_string(),
            r.flags.clone(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes one row per (comparison, class). `comparison` names the pair of
/// label sources, e.g. `model_vs_rater1`.
pub fn write_summary_csv(path: &Path, groups: &[(&str, Vec<ClassSummary>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "comparison",
        "class_id",
        "class_name",
        "cases",
        "mean_dsc",
        "mean_hd_mm",
        "r_squared",
        "pearson_r",
        "abs_dev_ml",
        "pct_diff",
        "pct_excluded",
        "ba_mean_diff_ml",
        "ba_loa_low_ml",
        "ba_loa_high_ml",
        "flags",
    ])
    .map_err(|e| csv_err(path, e))?;
    for (name, summaries) in groups {
        for s in summaries {
            let a = &s.agreement;
            let mut flags = Vec::new();
            if a.pearson_r.is_none() {
                flags.push("pearson_undefined:zero_variance");
            }
            if s.bland_altman.is_none() {
                flags.push("bland_altman_undefined:fewer_than_2_cases");
            }
            let ba = s.bland_altman;
            w.write_record([
                name.to_string(),
                s.class_id.to_string(),
                s.class_name.clone(),
                s.cases.to_string(),
                s.mean_dsc.to_string(),
                opt(s.mean_hd_mm),
                opt(a.r_squared),
                opt(a.pearson_r),
                a.abs_dev.to_string(),
                opt(a.pct_diff),
                a.pct_excluded.to_string(),
                opt(ba.map(|b| b.mean_diff)),
                opt(ba.map(|b| b.loa_low)),
                opt(ba.map(|b| b.loa_high)),
                flags.join(";"),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes Bland-Altman points (mean and difference of predicted and
/// reference volume) per case and class.
pub fn write_bland_altman_points(path: &Path, rows: &[CaseMetrics]) -> Result<()> {
    let mut out = String::from("case_id,class_id,mean_ml,diff_ml\n");
    for r in rows {
        out += &format!(
            "{},{},{},{}\n",
            r.case_id,
            r.class_id,
            (r.vol_pred_ml + r.vol_ref_ml) / 2.0,
            r.vol_pred_ml - r.vol_ref_ml
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Internal(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_distance() {
        let mut a = Mask::new([1, 1, 4], vec![false; 4]).unwrap();
        let mut b = a.clone();
        a.data[0] = true;
        b.data[3] = true;
        assert_eq!(hausdorff(&a, &b, [1.0; 3]).unwrap(), Some(3.0));
        assert_eq!(hausdorff(&a, &b, [1.0, 1.0, 2.0]).unwrap(), Some(6.0));
    }

    #[test]
    fn two_point_bland_altman() {
        let ba = bland_altman(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(ba.mean_diff, 0.0);
        assert!((ba.loa_high - 1.96 * 2f64.sqrt()).abs() < 1e-12);
        assert!((ba.loa_low + 1.96 * 2f64.sqrt()).abs() < 1e-12);
    }
}
