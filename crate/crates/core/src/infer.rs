//! Whole-volume prediction by tiling fixed-size windows and averaging the
//! overlapping class probabilities.

use crate::error::{Error, Result};
use crate::model::{ModelWeights, UNesT};
use crate::tensor::{Scalar, Tensor};
use crate::volume::{Image, Labels};

pub const DEFAULT_OVERLAP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    /// Volume extents before padding.
    pub volume: [usize; 3],
    /// Extents after end-padding any axis shorter than the window.
    pub padded: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    /// Window origins in row-major order over the padded volume.
    pub origins: Vec<[usize; 3]>,
}

fn axis_origins(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = extent - window;
    let mut out: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&o| o < last)
        .collect();
    out.push(last);
    out
}

/// Tiles `volume` with `window`-sized boxes at stride `window·(1−overlap)`
/// (at least 1). The last origin on each axis is clamped to the boundary.
pub fn plan_windows(volume: [usize; 3], window: [usize; 3], overlap: f64) -> Result<WindowPlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!(
            "overlap must lie in [0, 1), got {overlap}"
        )));
    }
    if volume.contains(&0) || window.contains(&0) {
        return Err(Error::Config(format!(
            "empty volume {volume:?} or window {window:?}"
        )));
    }
    let padded: [usize; 3] = std::array::from_fn(|a| volume[a].max(window[a]));
    let stride: [usize; 3] =
        std::array::from_fn(|a| ((window[a] as f64 * (1.0 - overlap)).floor() as usize).max(1));
    let per_axis: [Vec<usize>; 3] =
        std::array::from_fn(|a| axis_origins(padded[a], window[a], stride[a]));
    let mut origins = Vec::new();
    for &z in &per_axis[0] {
        for &y in &per_axis[1] {
            for &x in &per_axis[2] {
                origins.push([z, y, x]);
            }
        }
    }
    Ok(WindowPlan {
        volume,
        padded,
        window,
        stride,
        origins,
    })
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Extends each axis at its end to `size` by reflection.
pub fn reflect_pad(image: &Image, size: [usize; 3]) -> Image {
    if image.shape == size {
        return image.clone();
    }
    let [d, h, w] = image.shape;
    let mut data = Vec::with_capacity(size.iter().product());
    for z in 0..size[0] {
        for y in 0..size[1] {
            for x in 0..size[2] {
                data.push(image.get(reflect(z, d), reflect(y, h), reflect(x, w)));
            }
        }
    }
    Image {
        shape: size,
        spacing_mm: image.spacing_mm,
        data,
    }
}

/// Class probabilities `[K, D, H, W]` on the volume's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub probs: Tensor<f32>,
    pub spacing_mm: [f64; 3],
}

impl ProbMap {
    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.probs.shape();
        [s[1], s[2], s[3]]
    }
}

fn window_input<T: Scalar>(
    image: &Image,
    origin: [usize; 3],
    window: [usize; 3],
) -> Result<Tensor<T>> {
    let crop = image.crop(origin, window)?;
    let [d, h, w] = window;
    Tensor::new(
        &[1, 1, d, h, w],
        crop.data.iter().map(|&v| T::of(v as f64)).collect(),
    )
}

/// Sliding-window blending with an arbitrary window predictor mapping
/// `[1, 1, w...]` to probabilities `[1, K, w...]`.
///
/// Windows are evaluated in `order` (a permutation of the plan's window
/// indices; `None` means plan order) but always accumulated in plan order,
/// so the result does not depend on evaluation order.
pub fn sliding_window_with<T, F>(
    image: &Image,
    window: [usize; 3],
    overlap: f64,
    num_classes: usize,
    order: Option<&[usize]>,
    mut predict: F,
) -> Result<ProbMap>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    let plan = plan_windows(image.shape, window, overlap)?;
    let padded = reflect_pad(image, plan.padded);
    let n_win = plan.origins.len();
    let default_order: Vec<usize> = (0..n_win).collect();
    let order = order.unwrap_or(&default_order);
    let mut seen = vec![false; n_win];
    if order.len() != n_win
        || order
            .iter()
            .any(|&i| i >= n_win || std::mem::replace(&mut seen[i], true))
    {
        return Err(Error::Usage(format!(
            "evaluation order must permute 0..{n_win}"
        )));
    }

    let mut outputs: Vec<Option<Tensor<T>>> = vec![None; n_win];
    for &i in order {
        outputs[i] = Some(predict(&window_input(&padded, plan.origins[i], window)?)?);
    }
    let outputs: Vec<Tensor<T>> = outputs.into_iter().map(Option::unwrap).collect();
    blend(image, &plan, &outputs, num_classes)
}

/// Averages per-window probabilities `[1, K, w...]` (one per plan origin)
/// into a map over the unpadded volume, accumulating in plan order.
fn blend<T: Scalar>(
    image: &Image,
    plan: &WindowPlan,
    outputs: &[Tensor<T>],
    num_classes: usize,
) -> Result<ProbMap> {
    let [wd, wh, ww] = plan.window;
    let [pd, ph, pw] = plan.padded;
    let vox = pd * ph * pw;
    let mut sums = vec![0.0f64; num_classes * vox];
    let mut counts = vec![0u32; vox];
    for (origin, out) in plan.origins.iter().zip(outputs) {
        if out.shape() != [1, num_classes, wd, wh, ww] {
            return Err(Error::Config(format!(
                "predictor returned {:?}, expected [1, {num_classes}, {wd}, {wh}, {ww}]",
                out.shape()
            )));
        }
        let out = out.data();
        for z in 0..wd {
            for y in 0..wh {
                let row = ((origin[0] + z) * ph + origin[1] + y) * pw + origin[2];
                for x in 0..ww {
                    counts[row + x] += 1;
                }
                for k in 0..num_classes {
                    let src = ((k * wd + z) * wh + y) * ww;
                    let dst = k * vox + row;
                    for x in 0..ww {
                        sums[dst + x] += out[src + x].as_f64();
                    }
                }
            }
        }
    }

    let [d, h, w] = image.shape;
    let mut probs = Vec::with_capacity(num_classes * d * h * w);
    for k in 0..num_classes {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * ph + y) * pw + x;
                    probs.push((sums[k * vox + i] / counts[i] as f64) as f32);
                }
            }
        }
    }
    Ok(ProbMap {
        probs: Tensor::new(&[num_classes, d, h, w], probs)?,
        spacing_mm: image.spacing_mm,
    })
}

/// Sliding-window prediction with the model's input size as the window.
/// `image` should already be intensity-normalized.
pub fn sliding_window_infer<T: Scalar>(
    model: &UNesT,
    weights: &ModelWeights<T>,
    image: &Image,
    overlap: f64,
) -> Result<ProbMap> {
    sliding_window_infer_threads(model, weights, image, overlap, 1)
}

/// [`sliding_window_infer`] with windows spread over up to `threads`
/// workers. The blended result is identical for every thread count.
pub fn sliding_window_infer_threads<T: Scalar>(
    model: &UNesT,
    weights: &ModelWeights<T>,
    image: &Image,
    overlap: f64,
    threads: usize,
) -> Result<ProbMap> {
    weights.check_against(model.param_specs())?;
    let cfg = model.config();
    let plan = plan_windows(image.shape, cfg.input_size, overlap)?;
    let padded = reflect_pad(image, plan.padded);
    let n_win = plan.origins.len();
    let workers = threads.clamp(1, n_win);
    let run = |i: usize| -> Result<Tensor<T>> {
        model.predict(
            weights,
            &window_input(&padded, plan.origins[i], plan.window)?,
        )
    };
    let outputs: Vec<Tensor<T>> = if workers == 1 {
        (0..n_win).map(run).collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<Tensor<T>>>> = (0..n_win).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|t| {
                    let run = &run;
                    s.spawn(move || {
                        (t..n_win)
                            .step_by(workers)
                            .map(|i| (i, run(i)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("inference worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|r| r.unwrap())
            .collect::<Result<_>>()?
    };
    blend(image, &plan, &outputs, cfg.num_classes)
}

/// Per-voxel most probable class; ties go to the lower class index.
pub fn argmax_labels(map: &ProbMap) -> Result<Labels> {
    let k = map.num_classes();
    if k == 0 || k > 256 {
        return Err(Error::Config(format!("cannot label {k} classes as u8")));
    }
    let shape = map.shape();
    let vox: usize = shape.iter().product();
    let p = map.probs.data();
    let data = (0..vox)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if p[c * vox + v] > p[best * vox + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Ok(Labels {
        shape,
        spacing_mm: map.spacing_mm,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_plan_origins() {
        let plan = plan_windows([96, 96, 144], [96; 3], 0.5).unwrap();
        let xs: Vec<usize> = plan.origins.iter().map(|o| o[2]).collect();
        assert_eq!(xs, vec![0, 48]);
        assert!(plan.origins.iter().all(|o| o[0] == 0 && o[1] == 0));
    }

    #[test]
    fn last_origin_is_clamped() {
        assert_eq!(axis_origins(100, 32, 16), vec![0, 16, 32, 48, 64, 68]);
        assert_eq!(axis_origins(32, 32, 16), vec![0]);
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (0..9).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
    }
}
