//! Built-in consistency checks run by the `selfcheck` command: finite
//! difference gradients, brute-force metric comparisons, schedule and
//! format anchors.

use crate::dataset::generate_cases;
use crate::error::Result;
use crate::gradcheck::{self, random_tensor, weighted_sum};
use crate::metrics::{dice_score, hausdorff, Mask};
use crate::model::{checkpoint, BoundParams, Dropout, UNesT, UNesTConfig};
use crate::phantom::{window_value, WINDOW_HI, WINDOW_LO};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor, Var};
use crate::train::{dice_ce_loss, lr_at_step, TrainConfig};
use crate::volume::{read_v3d, write_v3d, Labels};

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
const H: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let r = random_tensor;
    vec![
        (
            "mul",
            vec![r(&[3, 4], -1.0, 1.0, 1), r(&[3, 4], -1.0, 1.0, 2)],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "div",
            vec![r(&[3, 4], -1.0, 1.0, 3), r(&[3, 4], 0.5, 2.0, 4)],
            Box::new(|g, v| g.div(v[0], v[1])),
        ),
        (
            "gelu",
            vec![r(&[4, 5], -3.0, 3.0, 5)],
            Box::new(|g, v| Ok(g.gelu(v[0]))),
        ),
        (
            "add_bias",
            vec![r(&[3, 4], -1.0, 1.0, 6), r(&[4], -1.0, 1.0, 7)],
            Box::new(|g, v| g.add_bias(v[0], v[1])),
        ),
        (
            "matmul",
            vec![r(&[2, 3, 4], -1.0, 1.0, 8), r(&[2, 4, 5], -1.0, 1.0, 9)],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "softmax",
            vec![r(&[3, 4, 5], -2.0, 2.0, 10)],
            Box::new(|g, v| g.softmax(v[0], 1)),
        ),
        (
            "log_softmax",
            vec![r(&[3, 4, 5], -2.0, 2.0, 11)],
            Box::new(|g, v| g.log_softmax(v[0], 2)),
        ),
        (
            "layer_norm",
            vec![
                r(&[4, 6], -2.0, 2.0, 12),
                r(&[6], 0.5, 1.5, 13),
                r(&[6], -0.5, 0.5, 14),
            ],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "conv3d",
            vec![
                r(&[1, 2, 4, 5, 3], -1.0, 1.0, 15),
                r(&[3, 2, 3, 3, 3], -1.0, 1.0, 16),
                r(&[3], -1.0, 1.0, 17),
            ],
            Box::new(|g, v| g.conv3d(v[0], v[1], Some(v[2]), 2, 1)),
        ),
        (
            "conv_transpose3d",
            vec![
                r(&[1, 3, 2, 3, 2], -1.0, 1.0, 18),
                r(&[3, 2, 2, 2, 2], -1.0, 1.0, 19),
                r(&[2], -1.0, 1.0, 20),
            ],
            Box::new(|g, v| g.conv_transpose3d(v[0], v[1], Some(v[2]), 2)),
        ),
        (
            "max_pool3d",
            vec![r(&[1, 2, 5, 5, 5], -1.0, 1.0, 21)],
            Box::new(|g, v| g.max_pool3d(v[0], 3, 2, 1)),
        ),
        (
            "permute",
            vec![r(&[2, 3, 4], -1.0, 1.0, 22)],
            Box::new(|g, v| g.permute(v[0], &[2, 0, 1])),
        ),
        (
            "concat",
            vec![r(&[2, 3], -1.0, 1.0, 23), r(&[2, 2], -1.0, 1.0, 24)],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        (
            "slice",
            vec![r(&[2, 5], -1.0, 1.0, 25)],
            Box::new(|g, v| g.slice(v[0], 1, 1, 4)),
        ),
        (
            "sum_axis",
            vec![r(&[2, 3, 4], -1.0, 1.0, 26)],
            Box::new(|g, v| g.sum_axis(v[0], 1)),
        ),
        (
            "dice_ce_loss",
            vec![r(&[1, 3, 4, 4, 4], -2.0, 2.0, 27)],
            Box::new(|g, v| {
                let mut rng = SplitMix64::new(28);
                let labels: Vec<u8> = (0..64).map(|_| rng.below(3) as u8).collect();
                dice_ce_loss(g, v[0], &labels, 1.0, 1.0)
            }),
        ),
    ]
}

fn gradient_checks(out: &mut Vec<CheckResult>, include_model: bool) -> Result<()> {
    for (name, inputs, f) in op_cases() {
        let rep = gradcheck::check(
            |g, v| {
                let y = f(g, v)?;
                weighted_sum(g, y, 99)
            },
            &inputs,
            H,
            None,
            0,
        )?;
        out.push(CheckResult {
            name: format!("grad:{name}"),
            passed: rep.max_rel_err < OP_TOL,
            detail: format!("max_rel_err={:.3e}", rep.max_rel_err),
        });
    }
    if include_model {
        for ablate in [false, true] {
            let cfg = UNesTConfig {
                block_aggregation: !ablate,
                ..UNesTConfig::micro()
            };
            let rep = model_gradcheck(&cfg, 4)?;
            out.push(CheckResult {
                name: format!("grad:model_micro{}", if ablate { "_ablated" } else { "" }),
                passed: rep.max_rel_err < MODEL_TOL,
                detail: format!(
                    "max_rel_err={:.3e} over {} coords",
                    rep.max_rel_err, rep.checked
                ),
            });
        }
    }
    Ok(())
}

/// End-to-end finite-difference check of every parameter tensor and the
/// input, `coords` sampled entries each.
pub fn model_gradcheck(cfg: &UNesTConfig, coords: usize) -> Result<gradcheck::GradCheck> {
    let model = UNesT::new(cfg.clone())?;
    let mut w = model.init_weights::<f64>(2);
    // Perturb away from the zero/one initial values so every path is live.
    for (i, t) in w.tensors_mut().iter_mut().enumerate() {
        let noise = random_tensor(t.shape(), -0.2, 0.2, 100 + i as u64);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let [d, h, ww] = cfg.input_size;
    let mut inputs = w.tensors().to_vec();
    inputs.push(random_tensor(&[1, 1, d, h, ww], -1.0, 1.0, 3));
    let n = inputs.len();
    gradcheck::check(
        |g, vars| {
            let p = BoundParams::from_vars(vars[..n - 1].to_vec());
            let probs = model.forward(g, &p, vars[n - 1], &mut Dropout::eval())?;
            weighted_sum(g, probs, 17)
        },
        &inputs,
        H,
        Some(coords),
        4,
    )
}

fn brute_hausdorff(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Option<f64> {
    let boundary = |m: &Mask| -> Vec<[usize; 3]> {
        let [d, h, w] = m.shape;
        let at = |z: isize, y: isize, x: isize| {
            z >= 0
                && y >= 0
                && x >= 0
                && (z as usize) < d
                && (y as usize) < h
                && (x as usize) < w
                && m.data[(z as usize * h + y as usize) * w + x as usize]
        };
        let mut out = vec![];
        for z in 0..d as isize {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let interior = at(z - 1, y, x)
                        && at(z + 1, y, x)
                        && at(z, y - 1, x)
                        && at(z, y + 1, x)
                        && at(z, y, x - 1)
                        && at(z, y, x + 1);
                    if at(z, y, x) && !interior {
                        out.push([z as usize, y as usize, x as usize]);
                    }
                }
            }
        }
        out
    };
    let (pa, pb) = (boundary(a), boundary(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let d2 = |p: [usize; 3], q: [usize; 3]| -> f64 {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2))
            .sum()
    };
    let directed = |x: &[[usize; 3]], y: &[[usize; 3]]| {
        x.iter()
            .map(|&p| y.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)).sqrt())
}

fn metric_checks(out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = SplitMix64::new(7);
    let mut worst_dsc = 0.0f64;
    let mut worst_hd = 0.0f64;
    for trial in 0..100 {
        let e = 6 + trial % 3;
        let shape = [e, e, e];
        let fill = rng.range(0.05, 0.6);
        let mut mk = || {
            Mask::new(
                shape,
                (0..e * e * e).map(|_| rng.uniform() < fill).collect(),
            )
        };
        let (a, b) = (mk()?, mk()?);
        let inter = a
            .data
            .iter()
            .zip(&b.data)
            .filter(|(x, y)| **x && **y)
            .count();
        let total = a.count() + b.count();
        let want = if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        };
        worst_dsc = worst_dsc.max((dice_score(&a, &b)? - want).abs());
        let spacing = [
            rng.range(0.5, 2.0),
            rng.range(0.5, 2.0),
            rng.range(0.5, 2.0),
        ];
        match (
            hausdorff(&a, &b, spacing)?,
            brute_hausdorff(&a, &b, spacing),
        ) {
            (Some(x), Some(y)) => worst_hd = worst_hd.max((x - y).abs()),
            (None, None) => {}
            _ => worst_hd = f64::INFINITY,
        }
    }
    out.push(CheckResult {
        name: "oracle:dice".into(),
        passed: worst_dsc == 0.0,
        detail: format!("max_abs_diff={worst_dsc:e} over 100 pairs"),
    });
    out.push(CheckResult {
        name: "oracle:hausdorff".into(),
        passed: worst_hd == 0.0,
        detail: format!("max_abs_diff={worst_hd:e} over 100 pairs"),
    });
    Ok(())
}

fn anchor_checks(out: &mut Vec<CheckResult>) -> Result<()> {
    let tc = TrainConfig::default();
    out.push(CheckResult {
        name: "anchor:lr_schedule".into(),
        passed: lr_at_step(0, &tc) == 0.0
            && lr_at_step(500, &tc) == 1e-3
            && lr_at_step(tc.total_steps, &tc) == 0.0,
        detail: format!(
            "lr(0)={} lr(500)={}",
            lr_at_step(0, &tc),
            lr_at_step(500, &tc)
        ),
    });
    out.push(CheckResult {
        name: "anchor:window".into(),
        passed: window_value(WINDOW_LO, WINDOW_LO, WINDOW_HI) == 0.0
            && window_value(WINDOW_HI, WINDOW_LO, WINDOW_HI) == 1.0,
        detail: format!("window [{WINDOW_LO}, {WINDOW_HI}]"),
    });
    let plan = UNesTConfig::reference_large().schedule()?;
    let counts: Vec<usize> = plan.iter().map(|p| p.num_blocks()).collect();
    let ok = counts == [64, 8, 1]
        && plan.iter().all(|p| {
            p.tokens_per_block() == 216
                && p.num_blocks() * p.tokens_per_block() == p.layout.grid_volume()
        });
    out.push(CheckResult {
        name: "anchor:block_schedule".into(),
        passed: ok,
        detail: format!("blocks={counts:?} n={}", plan[0].tokens_per_block()),
    });
    Ok(())
}

fn round_trip_checks(out: &mut Vec<CheckResult>) -> Result<()> {
    let cfg = UNesTConfig::micro();
    let model = UNesT::new(cfg.clone())?;
    let w = model.init_weights::<f32>(1);
    let bytes = checkpoint::encode(&cfg, &w)?;
    let (cfg2, w2) = checkpoint::decode::<f32>(&bytes)?;
    let again = checkpoint::encode(&cfg2, &w2)?;
    out.push(CheckResult {
        name: "roundtrip:checkpoint".into(),
        passed: again == bytes && w2 == w,
        detail: format!("{} bytes", bytes.len()),
    });

    let a = generate_cases(5, 1, [16; 3])?;
    let b = generate_cases(5, 1, [16; 3])?;
    let dir = std::env::temp_dir().join(format!("unest-selfcheck-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
    let path = dir.join("labels.v3d");
    write_v3d(&path, &a[0].labels)?;
    let back: Labels = read_v3d(&path)?;
    let _ = std::fs::remove_dir_all(&dir);
    out.push(CheckResult {
        name: "roundtrip:v3d_and_phantom".into(),
        passed: back == a[0].labels && a == b,
        detail: "labels written and read back; phantom regenerated from seed".into(),
    });
    Ok(())
}

/// Runs every check. `quick` skips the end-to-end model gradient check.
pub fn run(quick: bool) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    gradient_checks(&mut out, !quick)?;
    metric_checks(&mut out)?;
    anchor_checks(&mut out)?;
    round_trip_checks(&mut out)?;
    Ok(out)
}
