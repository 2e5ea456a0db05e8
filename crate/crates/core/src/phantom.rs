//! Synthetic kidney-like phantoms: a cortex shell around medulla lobes with a
//! branching collecting system in the middle, on a noisy HU-like background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::volume::{Image, Labels};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "cortex", "medulla", "collecting"];

pub const WINDOW_LO: f64 = -175.0;
pub const WINDOW_HI: f64 = 275.0;

/// Default jitter strength for the simulated second rater.
pub const DEFAULT_PERTURB_STRENGTH: f64 = 0.2;

const MAX_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub seed: u64,
    pub spacing_mm: [f64; 3],
    /// Mean intensity per class: background, cortex, medulla, collecting.
    pub class_means: [f64; NUM_CLASSES],
    pub noise_std: f64,
    /// Kidney semi-axes as fractions of the volume extent.
    pub semi_axis_frac: [f64; 2],
    pub medulla_lobes: [usize; 2],
    pub branches: [usize; 2],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: [32; 3],
            seed: 0,
            spacing_mm: [1.5; 3],
            class_means: [-50.0, 180.0, 120.0, 60.0],
            noise_std: 20.0,
            semi_axis_frac: [0.36, 0.46],
            medulla_lobes: [4, 7],
            branches: [2, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub image: Image,
    pub labels: Labels,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn norm(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn unit_vector(rng: &mut SplitMix64) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.map(|x| x / n);
        }
    }
}

fn count_range(rng: &mut SplitMix64, r: [usize; 2]) -> usize {
    r[0] + rng.below(r[1] - r[0] + 1)
}

/// Distance from `p` to the segment `[0, end]`, everything in the kidney's
/// normalized frame.
fn segment_distance(p: [f64; 3], end: [f64; 3]) -> f64 {
    let len2: f64 = end.iter().map(|e| e * e).sum();
    let t = ((0..3).map(|a| p[a] * end[a]).sum::<f64>() / len2).clamp(0.0, 1.0);
    (0..3)
        .map(|a| (p[a] - t * end[a]).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn check_spec(spec: &PhantomSpec) -> Result<()> {
    if spec.size.iter().any(|&s| s < 16) {
        return Err(Error::Config(format!(
            "phantom size must be at least 16³, got {:?}",
            spec.size
        )));
    }
    let [lo, hi] = spec.semi_axis_frac;
    if !(0.0 < lo && lo <= hi && hi < 0.5) {
        return Err(Error::Config(format!(
            "semi_axis_frac must satisfy 0 < lo <= hi < 0.5, got {:?}",
            spec.semi_axis_frac
        )));
    }
    if spec.medulla_lobes[0] > spec.medulla_lobes[1]
        || spec.branches[0] > spec.branches[1]
        || spec.branches[0] == 0
    {
        return Err(Error::Config(
            "lobe and branch ranges must be ordered with at least one branch".into(),
        ));
    }
    if spec.noise_std.is_nan()
        || spec.noise_std < 0.0
        || spec.spacing_mm.iter().any(|&s| s.is_nan() || s <= 0.0)
    {
        return Err(Error::Config(
            "noise_std must be non-negative and spacing positive".into(),
        ));
    }
    Ok(())
}

fn draw_labels(spec: &PhantomSpec, rng: &mut SplitMix64) -> Labels {
    let [d, h, w] = spec.size;
    let size = [d, h, w].map(|v| v as f64);
    let [flo, fhi] = spec.semi_axis_frac;
    let kidney = Ellipsoid {
        center: size.map(|s| s / 2.0 + rng.range(-0.04, 0.04) * s),
        radii: size.map(|s| rng.range(flo, fhi) * s),
    };
    // Medulla lobes sit around a mid-depth shell of the kidney.
    let lobes: Vec<Ellipsoid> = (0..count_range(rng, spec.medulla_lobes))
        .map(|_| {
            let dir = unit_vector(rng);
            let r = rng.range(0.45, 0.55);
            let size = rng.range(0.3, 0.38);
            Ellipsoid {
                center: dir.map(|u| u * r),
                radii: [size; 3],
            }
        })
        .collect();
    let pelvis = rng.range(0.28, 0.34);
    let branches: Vec<([f64; 3], f64)> = (0..count_range(rng, spec.branches))
        .map(|_| {
            (
                unit_vector(rng).map(|u| u * rng.range(0.5, 0.65)),
                rng.range(0.15, 0.2),
            )
        })
        .collect();

    let mut data = vec![0u8; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                if kidney.norm(p) > 1.0 {
                    continue;
                }
                let q: [f64; 3] =
                    std::array::from_fn(|a| (p[a] - kidney.center[a]) / kidney.radii[a]);
                let radius = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                let label = if radius < pelvis
                    || branches.iter().any(|&(e, r)| segment_distance(q, e) < r)
                {
                    3
                } else if lobes.iter().any(|l| l.norm(q) < 1.0) {
                    2
                } else {
                    1
                };
                data[(z * h + y) * w + x] = label;
            }
        }
    }
    Labels {
        shape: spec.size,
        spacing_mm: spec.spacing_mm,
        data,
    }
}

fn all_classes_present(labels: &Labels) -> bool {
    let mut seen = [false; NUM_CLASSES];
    for &v in &labels.data {
        seen[v as usize] = true;
    }
    seen.iter().all(|&s| s)
}

/// Draws a phantom fully determined by `spec.seed`. Geometry is redrawn
/// until every class has at least one voxel.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    check_spec(spec)?;
    let mut rng = SplitMix64::stream(spec.seed, 0x5048_414E);
    for _ in 0..MAX_ATTEMPTS {
        let labels = draw_labels(spec, &mut rng);
        if !all_classes_present(&labels) {
            continue;
        }
        let data = labels
            .data
            .iter()
            .map(|&c| (spec.class_means[c as usize] + spec.noise_std * rng.normal()) as f32)
            .collect();
        let image = Image {
            shape: spec.size,
            spacing_mm: spec.spacing_mm,
            data,
        };
        return Ok(Volume { image, labels });
    }
    Err(Error::Generation(format!(
        "no phantom with all {NUM_CLASSES} classes after {MAX_ATTEMPTS} attempts (size {:?}, seed {})",
        spec.size, spec.seed
    )))
}

const NEIGHBORS: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Calls `f` with the flat index of every in-bounds 6-neighbour of `(z, y, x)`.
pub(crate) fn for_each_neighbor(
    shape: [usize; 3],
    z: usize,
    y: usize,
    x: usize,
    mut f: impl FnMut(usize),
) {
    let p = [z as isize, y as isize, x as isize];
    for off in NEIGHBORS {
        let q = [p[0] + off[0], p[1] + off[1], p[2] + off[2]];
        if (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < shape[a]) {
            f((q[0] as usize * shape[1] + q[1] as usize) * shape[2] + q[2] as usize);
        }
    }
}

/// Simulated second rater: for each foreground class in turn, either dilates
/// or erodes its region by one voxel, applying the change at each eligible
/// boundary voxel with probability `strength`. Eroded voxels take the label
/// of a random differing neighbour.
pub fn perturb_labels(labels: &Labels, seed: u64, strength: f64) -> Labels {
    let mut out = labels.clone();
    if strength <= 0.0 {
        return out;
    }
    let strength = strength.min(1.0);
    let mut rng = SplitMix64::stream(seed, 0x5241_5445);
    let [d, h, w] = labels.shape;
    let classes = labels.data.iter().copied().max().unwrap_or(0);
    for c in 1..=classes {
        let dilate = rng.uniform() < 0.5;
        let snapshot = out.data.clone();
        let mut others = Vec::with_capacity(6);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let own = snapshot[i];
                    others.clear();
                    for_each_neighbor(labels.shape, z, y, x, |j| others.push(snapshot[j]));
                    let eligible = if dilate {
                        own != c && others.contains(&c)
                    } else {
                        own == c && others.iter().any(|&o| o != c)
                    };
                    if !eligible || rng.uniform() >= strength {
                        continue;
                    }
                    out.data[i] = if dilate {
                        c
                    } else {
                        others.retain(|&o| o != c);
                        others[rng.below(others.len())]
                    };
                }
            }
        }
    }
    out
}

/// Clips to `[lo, hi]` and maps affinely onto `[0, 1]`.
pub fn window_value(v: f64, lo: f64, hi: f64) -> f64 {
    (v.clamp(lo, hi) - lo) / (hi - lo)
}

pub fn window_normalize(image: &Image, lo: f64, hi: f64) -> Result<Image> {
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(Error::Config(format!(
            "window needs lo < hi, got [{lo}, {hi}]"
        )));
    }
    Ok(Image {
        shape: image.shape,
        spacing_mm: image.spacing_mm,
        data: image
            .data
            .iter()
            .map(|&v| window_value(v as f64, lo, hi) as f32)
            .collect(),
    })
}
