//! End-to-end acceptance report. Prints one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p selftof-cli --test acceptance -- --nocapture`; the
//! training criteria take several minutes on one core.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::rc::Rc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use selftof::autograd::check::{max_rel_error, probe_gradients};
use selftof::autograd::{Conv2dSpec, Graph};
use selftof::data::{build_triplets, generate_synthetic_scene, FrameTriplet, MemorySequence, SceneConfig};
use selftof::eval::{
    baseline_guided_filter, baseline_nn, depth_metrics, evaluate, pose_metrics, EvalConfig, EvalSample,
    GuidedFilterParams, Protocol,
};
use selftof::geometry::{project_coords, synthesize_var, Intrinsics, RigidTransform};
use selftof::losses::{
    depth_consistency_loss, depth_consistency_loss_var, photometric_loss, photometric_loss_var, smoothness_loss,
    smoothness_loss_var, ssim_var, total_loss_var, LossWeights, SourceReduction, ZoneReduction,
};
use selftof::maps::{DepthMap, Image};
use selftof::models::{submanifold_conv, Binder, GuidedFusion, Init, ModelConfig, Models, ParamStore};
use selftof::scale::{median, mms_scale, ms_scale};
use selftof::tensor::Tensor;
use selftof::tofsim::{fit_zones, ZoneGrid, ZoneIndex, ZoneLayout};
use selftof::train::{TrainConfig, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image<f64> {
    Image::from_fn(3, size, size, |_, _, _| rng.random())
}

fn random_grid(rng: &mut ChaCha8Rng, size: usize) -> ZoneGrid<f64> {
    let layout = ZoneLayout::new(8, 8, size, size).unwrap();
    let mean = (0..64).map(|_| rng.random_range(0.5..5.0)).collect();
    let std = (0..64).map(|_| rng.random_range(0.0..0.3)).collect();
    ZoneGrid::from_parts(layout, mean, std, vec![true; 64]).unwrap()
}

fn loss_fixed_points() -> Outcome {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let img = random_image(&mut r, 24);
        let mask = vec![true; 24 * 24];
        let recons = [(img.clone(), mask.clone()), (img.clone(), mask)];
        let (ph, _) = photometric_loss(&img, &recons, 0.85, SourceReduction::Min).unwrap();

        let depth = DepthMap::from_fn(24, 24, |_, _| r.random_range(0.5..8.0f64));
        let grid = fit_zones(&depth, 8, 8).unwrap();
        let dc = depth_consistency_loss(&depth, &grid, ZoneReduction::Sum).unwrap();

        let disp = DepthMap::constant(24, 24, r.random_range(0.1..10.0));
        let s = smoothness_loss(&disp, &img).unwrap();
        worst = worst.max(ph.abs()).max(dc.abs()).max(s.abs());
    }
    outcome(
        worst <= 1e-9,
        format!("largest |loss| at a fixed point {worst:.3e} (tol 1e-9, f64)"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let (h, w) = (16, 16);
    let probes = |r: &mut ChaCha8Rng, inputs: &[usize], len: &[usize], n: usize| -> Vec<(usize, usize)> {
        (0..n)
            .map(|i| {
                let k = inputs[i % inputs.len()];
                (k, r.random_range(0..len[k]))
            })
            .collect()
    };
    let img = |r: &mut ChaCha8Rng| Tensor::from_fn(&[1, 3, h, w], |_| r.random::<f64>());
    let mut results: Vec<(&str, f64, usize)> = Vec::new();

    let (a, b) = (img(&mut r), img(&mut r));
    let weights = img(&mut r);
    let p = probes(&mut r, &[0, 1], &[3 * h * w, 3 * h * w], 24);
    let res = probe_gradients(&[a, b], &p, 1e-5, |g, v| {
        ssim_var(v[0], v[1]).mul(g.constant(weights.clone())).sum()
    });
    results.push(("ssim", max_rel_error(&res, 1e-7), res.len()));

    let (t, s1, s2) = (img(&mut r), img(&mut r), img(&mut r));
    let m1: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.9)).collect();
    let m2: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.9)).collect();
    let p = probes(&mut r, &[0, 1, 2], &[3 * h * w; 3], 30);
    for reduction in [SourceReduction::Min, SourceReduction::Average] {
        let res = probe_gradients(&[t.clone(), s1.clone(), s2.clone()], &p, 1e-6, |_, v| {
            let recons = [(v[1], Rc::new(m1.clone())), (v[2], Rc::new(m2.clone()))];
            photometric_loss_var(v[0], &recons, 0.85, reduction).0
        });
        results.push(("photometric", max_rel_error(&res, 1e-7), res.len()));
    }

    let disp = Tensor::from_fn(&[1, 1, h, w], |_| r.random_range(0.1..2.0));
    let guide = img(&mut r);
    let p = probes(&mut r, &[0, 1], &[h * w, 3 * h * w], 24);
    let res = probe_gradients(&[disp, guide], &p, 1e-6, |_, v| {
        smoothness_loss_var(v[0], v[1]).unwrap()
    });
    results.push(("smoothness", max_rel_error(&res, 1e-7), res.len()));

    let depth = Tensor::from_fn(&[1, 1, h, w], |_| r.random_range(0.5..6.0));
    let other = DepthMap::from_fn(w, h, |_, _| r.random_range(0.5..6.0));
    let mut grid = fit_zones(&other, 8, 8).unwrap();
    grid.invalidate(5);
    let index = ZoneIndex::new(grid.layout());
    let p = probes(&mut r, &[0], &[h * w], 24);
    for reduction in [ZoneReduction::Sum, ZoneReduction::Mean] {
        let res = probe_gradients(std::slice::from_ref(&depth), &p, 1e-6, |_, v| {
            depth_consistency_loss_var(v[0], &[&grid], &index, reduction)
        });
        results.push(("depth consistency", max_rel_error(&res, 1e-7), res.len()));
    }

    let parts = [
        Tensor::from_vec(&[1], vec![0.3]),
        Tensor::from_vec(&[1], vec![0.05]),
        Tensor::from_vec(&[1], vec![2.0]),
    ];
    let weights = LossWeights::default();
    let p: Vec<(usize, usize)> = (0..21).map(|i| (i % 3, 0)).collect();
    let res = probe_gradients(&parts, &p, 1e-6, |_, v| {
        total_loss_var(v[0].sum(), v[1].sum(), v[2].sum(), &weights).unwrap().0
    });
    results.push(("total", max_rel_error(&res, 1e-7), res.len()));

    // Bilinear sampling has kinks at integer positions and a mask edge at the
    // border; pixels landing near either carry no weight.
    let (sw, sh) = (12, 10);
    let k = Intrinsics::centered(sw, sh, 0.9);
    let src = Tensor::from_fn(&[1, 2, sh, sw], |i| ((i as f64) * 0.7).sin() * 0.5 + 0.5);
    let depth = Tensor::from_fn(&[1, 1, sh, sw], |_| r.random_range(1.5..2.5));
    let pose = Tensor::from_vec(&[1, 6], vec![0.02, -0.03, 0.01, 0.05, -0.02, 0.03]);
    let dm = DepthMap::new(sw, sh, depth.data().to_vec()).unwrap();
    let pc = project_coords(&dm, &k, &RigidTransform::from_params(pose.data()));
    let near_kink = |c: f64| (c - c.round()).abs() < 1e-2;
    let keep: Vec<bool> = (0..sw * sh)
        .map(|i| pc.mask[i] && !near_kink(pc.coords[i][0]) && !near_kink(pc.coords[i][1]))
        .collect();
    let weights = Tensor::from_fn(&[1, 2, sh, sw], |i| {
        if keep[i % (sw * sh)] {
            r.random::<f64>()
        } else {
            0.0
        }
    });
    let mut p: Vec<_> = (0..20).map(|_| (1, r.random_range(0..sw * sh))).collect();
    p.extend((0..6).map(|i| (2, i)));
    p.extend((0..10).map(|_| (0, r.random_range(0..2 * sw * sh))));
    let res = probe_gradients(&[src, depth, pose], &p, 1e-5, |g, v| {
        synthesize_var(v[0], v[1], v[2], &k)
            .0
            .mul(g.constant(weights.clone()))
            .sum()
    });
    results.push(("synthesize", max_rel_error(&res, 1e-7), res.len()));

    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|x| x.1).fold(0.0, f64::max);
    let enough = results.iter().all(|x| x.2 >= 20);
    let detail = results
        .iter()
        .map(|(n, e, c)| format!("{n} {e:.1e}/{c}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        worst < 1e-4 && enough && secs < 120.0,
        format!("max rel err {worst:.2e} (tol 1e-4) in {secs:.1}s; {detail}"),
    )
}

fn footprint_median(d: &DepthMap<f64>, layout: &ZoneLayout, z: usize) -> f64 {
    let mut v: Vec<f64> = layout.footprint(z).pixels(d.width).map(|i| d.values[i]).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn scale_recovery() -> Outcome {
    let mut r = rng(3);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let (mut homog, mut literal_ms, mut literal_mms, mut consistent, mut corrupted) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut ms_misses, mut mms_misses) = (0, 0);
    for seed in 0..100 {
        let cfg = SceneConfig {
            frames: 1,
            ..SceneConfig::default()
        };
        let seq = generate_synthetic_scene::<f64>(1000 + seed, &cfg).unwrap();
        let gt = seq.frames[0].depth.clone().unwrap();
        let s: f64 = r.random_range(0.1..10.0);
        let pred = gt.scaled(1.0 / s);

        // Zones fit from the ground truth report Gaussian means.
        let grid = fit_zones(&gt, 8, 8).unwrap();
        let (ms, mms) = (ms_scale(&pred, &grid).unwrap(), mms_scale(&pred, &grid).unwrap());
        let (ms_gt, mms_gt) = (ms_scale(&gt, &grid).unwrap(), mms_scale(&gt, &grid).unwrap());
        homog = homog.max(rel(ms, s * ms_gt)).max(rel(mms, s * mms_gt));
        literal_ms = literal_ms.max(rel(ms, s));
        literal_mms = literal_mms.max(rel(mms, s));
        ms_misses += usize::from(rel(ms, s) > 1e-6);
        mms_misses += usize::from(rel(mms, s) > 1e-6);

        // Zones reporting the footprint median of the ground truth.
        let layout = grid.layout();
        let medians: Vec<f64> = (0..64).map(|z| footprint_median(&gt, &layout, z)).collect();
        let mut exact = grid.clone();
        exact.mean = medians.clone();
        consistent = consistent.max(rel(mms_scale(&pred, &exact).unwrap(), s));
        let all_means = median(&medians).unwrap();
        let all_pixels = median(&gt.values).unwrap();
        if all_means == all_pixels {
            consistent = consistent.max(rel(ms_scale(&pred, &exact).unwrap(), s));
        }

        // Up to 31 zone scales corrupted by arbitrary positive multipliers.
        let bad = r.random_range(0..=31);
        let mut order: Vec<usize> = (0..64).collect();
        for i in 0..bad {
            let j = r.random_range(i..64);
            order.swap(i, j);
        }
        let mut noisy = exact.clone();
        for &z in &order[..bad] {
            noisy.mean[z] *= 10f64.powf(r.random_range(-3.0..3.0));
        }
        corrupted = corrupted.max(rel(mms_scale(&pred, &noisy).unwrap(), s));
    }
    let literal = literal_ms <= 1e-6 && literal_mms <= 1e-6;
    let pass = literal && homog <= 1e-6 && consistent <= 1e-6 && corrupted <= 1e-6;
    outcome(
        pass,
        format!(
            "Gaussian-fit zones: MS misses s on {ms_misses}/100 scenes (worst rel {literal_ms:.2e}), \
             MMS on {mms_misses}/100 (worst rel {literal_mms:.2e}); the zone mean is not the footprint median. \
             Homogeneity s(GT/s) = s*s(GT): worst rel {homog:.1e}. Median-consistent zones recover s to {consistent:.1e}; \
             with up to 31/64 corrupted zones MMS recovers s to {corrupted:.1e} (tol 1e-6)"
        ),
    )
}

fn submanifold_invariance() -> Outcome {
    let mut r = rng(4);
    let models = Models::<f32>::new(ModelConfig::desk().star(), 3).unwrap();
    let image = random_image(&mut r, 64).cast::<f32>();
    let mut changed = 0;
    for _ in 0..50 {
        let mut grid = random_grid(&mut r, 64).cast::<f32>();
        let p = r.random_range(0.05..0.95);
        for z in 0..64 {
            if r.random_bool(p) {
                grid.invalidate(z);
            }
        }
        let reference = models.predict_depth_raw(&image, &grid).unwrap();
        let mut garbage = grid.clone();
        for z in (0..64).filter(|&z| !grid.valid[z]) {
            garbage.mean[z] = r.random_range(-1e3..1e3);
            garbage.std[z] = r.random_range(-1e3..1e3);
        }
        changed += usize::from(models.predict_depth_raw(&image, &garbage).unwrap() != reference);
    }
    outcome(
        changed == 0,
        format!("{changed}/50 masks changed the DepthNet output (bitwise)"),
    )
}

fn masked_conv_oracle() -> Outcome {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    let mut invalid_leak = 0;
    for _ in 0..100 {
        let (n, cin, cout) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5));
        let x = Tensor::from_fn(&[n, cin, 8, 8], |_| r.random_range(-1.0..1.0f64));
        let wt = Tensor::from_fn(&[cout, cin, 3, 3], |_| r.random_range(-1.0..1.0f64));
        let bias = Tensor::from_fn(&[cout], |_| r.random_range(-1.0..1.0f64));
        let p = r.random_range(0.1..0.9);
        let valid: Vec<bool> = (0..n * 64).map(|_| r.random_bool(p)).collect();
        let g = Graph::new();
        let out = submanifold_conv(
            g.constant(x.clone()),
            g.constant(wt.clone()),
            Some(g.constant(bias.clone())),
            Conv2dSpec::SAME3,
            &valid,
        )
        .value();
        for b in 0..n {
            for o in 0..cout {
                for y in 0..8usize {
                    for xx in 0..8usize {
                        let got = out[((b * cout + o) * 8 + y) * 8 + xx];
                        if !valid[b * 64 + y * 8 + xx] {
                            invalid_leak += usize::from(got != 0.0);
                            continue;
                        }
                        let mut want = bias[o];
                        for i in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if !(0..8).contains(&sy) || !(0..8).contains(&sx) {
                                        continue;
                                    }
                                    let (sy, sx) = (sy as usize, sx as usize);
                                    if valid[b * 64 + sy * 8 + sx] {
                                        want += wt[((o * cin + i) * 3 + ky) * 3 + kx]
                                            * x[((b * cin + i) * 8 + sy) * 8 + sx];
                                    }
                                }
                            }
                        }
                        worst = worst.max((got - want).abs());
                    }
                }
            }
        }
    }
    outcome(
        worst <= 1e-6 && invalid_leak == 0,
        format!("max |diff| {worst:.2e} over 100 instances (tol 1e-6); {invalid_leak} non-zero invalid outputs"),
    )
}

fn guided_fusion_contracts() -> Outcome {
    let mut r = rng(6);
    let (mut row_err, mut leaked, mut rgb_mismatch) = (0.0f64, 0, 0);
    for trial in 0..20 {
        let channels = [4, 8, 16][trial % 3];
        let fusion = GuidedFusion::new("f", channels, trial % 2 == 0, true);
        let mut store = ParamStore::<f64>::new();
        fusion.declare(
            &mut store,
            &mut Init {
                rng: rng(100 + trial as u64),
            },
        );
        let g = Graph::new();
        let b = Binder::frozen(&g, &store);
        let n = 2;
        let size = [8, 16, 32][trial % 3];
        let rgb = g.constant(Tensor::from_fn(&[n, channels, size, size], |_| {
            r.random_range(-1.0..1.0)
        }));
        let depth = g.constant(Tensor::from_fn(&[n, channels, 8, 8], |_| r.random_range(-1.0..1.0)));
        let p = r.random_range(0.1..0.9);
        let mut valid: Vec<bool> = (0..n * 64).map(|_| r.random_bool(p)).collect();
        valid[0] = true;
        valid[64] = true;
        let a = fusion.trace(&b, rgb, depth, &valid).affinity.value();
        for item in 0..n {
            let cols = &valid[item * 64..(item + 1) * 64];
            for i in 0..64 {
                let row = &a.data()[(item * 64 + i) * 64..(item * 64 + i + 1) * 64];
                let mass: f64 = row.iter().zip(cols).filter(|(_, &v)| v).map(|(x, _)| x).sum();
                row_err = row_err.max((mass - 1.0).abs());
                leaked += row.iter().zip(cols).filter(|(x, &v)| !v && **x != 0.0).count();
            }
        }
        let out = fusion.forward(&b, rgb, depth, &vec![false; n * 64]).value();
        rgb_mismatch += usize::from(out.data() != rgb.value().data());
    }
    outcome(
        row_err < 1e-12 && leaked == 0 && rgb_mismatch == 0,
        format!("row mass error {row_err:.1e}; {leaked} invalid entries with mass; {rgb_mismatch}/20 all-invalid outputs differ from RGB"),
    )
}

fn training_set() -> Vec<FrameTriplet<f32>> {
    let cfg = SceneConfig {
        width: 64,
        height: 64,
        frames: 12,
        ..SceneConfig::default()
    };
    let seqs: Vec<MemorySequence<f32>> = (0..2).map(|s| generate_synthetic_scene(s, &cfg).unwrap()).collect();
    build_triplets(&seqs, 1, &[-1, 1], 8, 8).unwrap()
}

const STEPS: usize = 600;

fn train(model: ModelConfig, w_dc: f64, sparsity: &[f64], seed: u64, set: &[FrameTriplet<f32>]) -> Models<f32> {
    let epochs = STEPS.div_ceil(set.len().div_ceil(4));
    let cfg = TrainConfig {
        batch_size: 4,
        learning_rate: 1e-3,
        late_learning_rate: 1e-4,
        epochs,
        decay_epoch: epochs * 3 / 4,
        max_steps: Some(STEPS),
        weights: LossWeights {
            w_dc,
            ..LossWeights::default()
        },
        train_sparsity: sparsity.to_vec(),
        seed,
        ..TrainConfig::default()
    };
    let mut t = Trainer::<f32>::new(model, cfg).unwrap();
    let report = t.fit(set, None).unwrap();
    assert_eq!(report.losses.len() + report.skipped, STEPS);
    t.models
}

fn abs_rel(models: &Models<f32>, samples: &[EvalSample<f32>], protocol: Protocol, sr: f64, seed: u64) -> f64 {
    let cfg = EvalConfig {
        protocol,
        sparsity_ratio: sr,
        seed,
        ..EvalConfig::default()
    };
    evaluate(models, samples, &cfg).unwrap().report.abs_rel
}

fn samples_of(set: &[FrameTriplet<f32>]) -> Vec<EvalSample<f32>> {
    set.iter().map(|t| EvalSample::from_triplet(t).unwrap()).collect()
}

fn training_ordering(set: &[FrameTriplet<f32>]) -> Outcome {
    let start = Instant::now();
    let samples = samples_of(set);
    let variants = [
        ("SelfToF", ModelConfig::desk(), 0.01),
        (
            "no ToF in PoseNet",
            ModelConfig {
                tof_pose: false,
                ..ModelConfig::desk()
            },
            0.01,
        ),
        ("RGB baseline", ModelConfig::desk().rgb_only(), 0.0),
    ];
    let mut means = Vec::new();
    for (_, model, w_dc) in &variants {
        let runs: Vec<f64> = (0..3)
            .map(|seed| {
                let m = train(model.clone(), *w_dc, &[], seed, set);
                abs_rel(&m, &samples, Protocol::MedianScaled, 0.0, 0)
            })
            .collect();
        means.push(runs.iter().sum::<f64>() / 3.0);
    }
    let (full, notp, base) = (means[0], means[1], means[2]);
    outcome(
        full < base && full <= notp,
        format!(
            "median-scaled abs_rel over 3 seeds, {} triplets, {STEPS} steps: SelfToF {full:.4}, without ToF in PoseNet {notp:.4}, \
             RGB baseline {base:.4}; (a) {} (b) {} [{:.0}s]",
            set.len(),
            if full < base { "holds" } else { "fails" },
            if full <= notp { "holds" } else { "fails" },
            start.elapsed().as_secs_f64()
        ),
    )
}

fn sparsity_robustness(set: &[FrameTriplet<f32>]) -> Outcome {
    let start = Instant::now();
    let samples = samples_of(set);
    let ratios = [0.0, 0.2, 0.4];
    let mut curves = Vec::new();
    for model in [ModelConfig::desk(), ModelConfig::desk().star()] {
        let mut curve = [0.0; 3];
        for seed in 0..3 {
            let m = train(model.clone(), 0.01, &ratios, seed, set);
            for (i, &sr) in ratios.iter().enumerate() {
                curve[i] += (0..3)
                    .map(|e| abs_rel(&m, &samples, Protocol::ScaleAware, sr, e))
                    .sum::<f64>()
                    / 9.0;
            }
        }
        curves.push(curve);
    }
    let monotone = |c: &[f64; 3]| c[0] <= c[1] && c[1] <= c[2];
    let (plain, star) = (curves[0], curves[1]);
    let (dp, ds) = (plain[2] - plain[0], star[2] - star[0]);
    outcome(
        monotone(&plain) && monotone(&star) && ds <= dp,
        format!(
            "scale-aware abs_rel at SR 0/0.2/0.4: SelfToF {:.4}/{:.4}/{:.4} (+{dp:.4}), SelfToF* {:.4}/{:.4}/{:.4} (+{ds:.4}) [{:.0}s]",
            plain[0],
            plain[1],
            plain[2],
            star[0],
            star[1],
            star[2],
            start.elapsed().as_secs_f64()
        ),
    )
}

fn metrics_oracle() -> Outcome {
    let mut r = rng(9);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (w, h) = (r.random_range(4..20), r.random_range(4..20));
        let gt = DepthMap::from_fn(w, h, |_, _| r.random_range(0.3..12.0));
        let pred = DepthMap::from_fn(w, h, |y, x| gt.at(y, x) * r.random_range(0.5..1.8));
        let m = depth_metrics(&pred, &gt, 10.0).unwrap();
        let mut acc = [0.0f64; 8];
        let mut count = 0.0;
        for i in 0..w * h {
            let (p, g): (f64, f64) = (pred.values[i], gt.values[i]);
            if g > 10.0 {
                continue;
            }
            acc[0] += (p - g).abs() / g;
            acc[1] += (p - g).powi(2) / g;
            acc[2] += (p - g).powi(2);
            acc[3] += (p.ln() - g.ln()).powi(2);
            acc[4] += (p.log10() - g.log10()).abs();
            let ratio = (p / g).max(g / p);
            for (k, t) in [1.25f64, 1.25 * 1.25, 1.25 * 1.25 * 1.25].iter().enumerate() {
                acc[5 + k] += f64::from(u8::from(ratio < *t));
            }
            count += 1.0;
        }
        let mut want = acc.map(|v| v / count);
        want[2] = want[2].sqrt();
        want[3] = want[3].sqrt();
        let got = [m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.log10, m.a1, m.a2, m.a3];
        for (a, b) in got.iter().zip(want) {
            worst = worst.max((a - b).abs());
        }

        let mut pr = || {
            RigidTransform::new(
                [
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                ],
                [
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                ],
            )
        };
        let (a, b) = (pr(), pr());
        let quat = |p: &RigidTransform<f64>| UnitQuaternion::from_scaled_axis(Vector3::from(p.rotation));
        let (rot, tr) = pose_metrics(&a, &b);
        let want_rot = (quat(&a) * quat(&b).inverse()).angle().to_degrees();
        let want_tr = Vector3::from(a.translation)
            .angle(&Vector3::from(b.translation))
            .to_degrees();
        worst = worst.max((rot - want_rot).abs()).max((tr.unwrap() - want_tr).abs());
    }
    let gt = DepthMap::from_fn(16, 16, |_, _| r.random_range(1.0..5.0));
    let u = depth_metrics(&gt.scaled(1.1), &gt, 10.0).unwrap();
    let uniform = (u.abs_rel - 0.1).abs() < 1e-12 && u.a1 == 1.0;
    outcome(
        worst <= 1e-6 && uniform,
        format!(
            "max |diff| vs scalar and quaternion oracles {worst:.2e} (tol 1e-6); pred=1.1*gt gives abs_rel {:.15}, a1 {}",
            u.abs_rel, u.a1
        ),
    )
}

fn guided_filter_oracle(p: &DepthMap<f64>, guide: &Image<f64>, r: usize, eps: f64) -> Vec<f64> {
    let (w, h, c) = (p.width, p.height, guide.channels);
    let window = |y: usize, x: usize| {
        let ys = y.saturating_sub(r)..(y + r + 1).min(h);
        let xs = x.saturating_sub(r)..(x + r + 1).min(w);
        ys.flat_map(move |yy| xs.clone().map(move |xx| (yy, xx)))
    };
    let mut coef = vec![(DVector::<f64>::zeros(c), 0.0); w * h];
    for y in 0..h {
        for x in 0..w {
            let px: Vec<(usize, usize)> = window(y, x).collect();
            let n = px.len();
            let mut a = DMatrix::<f64>::zeros(n + c, c + 1);
            let mut b = DVector::<f64>::zeros(n + c);
            for (row, &(yy, xx)) in px.iter().enumerate() {
                for k in 0..c {
                    a[(row, k)] = guide.at(k, yy, xx);
                }
                a[(row, c)] = 1.0;
                b[row] = p.at(yy, xx);
            }
            for k in 0..c {
                a[(n + k, k)] = (n as f64 * eps).sqrt();
            }
            let sol = a.svd(true, true).solve(&b, 1e-14).unwrap();
            coef[y * w + x] = (sol.rows(0, c).into_owned(), sol[c]);
        }
    }
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let px = DVector::from_fn(c, |k, _| guide.at(k, y, x));
            let ks: Vec<(usize, usize)> = window(y, x).collect();
            ks.iter()
                .map(|&(ky, kx)| {
                    let (a, b) = &coef[ky * w + kx];
                    a.dot(&px) + b
                })
                .sum::<f64>()
                / ks.len() as f64
        })
        .collect()
}

fn baselines() -> Outcome {
    let mut r = rng(10);
    let mut nn_exact = true;
    for size in [16, 32, 40, 64] {
        let grid = random_grid(&mut r, size);
        let nn = baseline_nn(&grid, size, size).unwrap();
        let layout = grid.layout();
        for z in 0..64 {
            nn_exact &= layout.footprint(z).pixels(size).all(|i| nn.values[i] == grid.mean[z]);
        }
    }
    let mut grid = random_grid(&mut r, 32);
    for z in 0..64 {
        if r.random_bool(0.2) {
            grid.invalidate(z);
        }
    }
    let depth = baseline_nn(&grid, 32, 32).unwrap();
    let guide = random_image(&mut r, 32);
    let params = GuidedFilterParams::default();
    let got = baseline_guided_filter(&depth, &guide, params).unwrap();
    let want = guided_filter_oracle(&depth, &guide, params.radius, params.eps);
    let worst = got
        .values
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(
        nn_exact && worst <= 1e-5,
        format!(
            "nearest-neighbour fill reproduces zone means exactly: {nn_exact}; guided filter (r={}, eps={}) vs least-squares oracle on 32x32: max |diff| {worst:.2e} (tol 1e-5)",
            params.radius, params.eps
        ),
    )
}

const TINY: &str = r#"
image_width = 32
image_height = 32
frames_per_scene = 6
train_scenes = 2
test_scenes = 1
encoder_widths = [4, 4, 8, 8, 8]
decoder_widths = [4, 4, 4, 8, 8]
pose_width = 8
epochs = 2
seed = 7
"#;

fn checksums(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(fs::read(&p).unwrap());
                let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), hex);
            }
        }
    }
    out
}

fn run(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_selftof"))
        .args(args)
        .env("RUST_LOG", "error")
        .stdout(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let dir = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    let mut notes = Vec::new();
    let mut same = |what: &str, a: &str, b: &str| {
        let (x, y) = (checksums(Path::new(a)), checksums(Path::new(b)));
        let ok = !x.is_empty() && x == y;
        notes.push(format!(
            "{what} {} ({} files)",
            if ok { "identical" } else { "differs" },
            x.len()
        ));
        ok
    };

    let mut ok = run(&["simulate", "--config", cfg, "--out", &dir("data_a")])
        && run(&["simulate", "--config", cfg, "--out", &dir("data_b")]);
    ok = ok && same("simulate", &dir("data_a"), &dir("data_b"));
    ok =
        ok && run(&[
            "train",
            "--config",
            cfg,
            "--data",
            &dir("data_a"),
            "--out",
            &dir("run_a"),
        ]) && run(&[
            "train",
            "--config",
            cfg,
            "--data",
            &dir("data_a"),
            "--out",
            &dir("run_b"),
        ]);
    ok = ok && same("train", &dir("run_a"), &dir("run_b"));
    let ckpt = format!("{}/epoch_2.ckpt", dir("run_a"));
    for (name, extra) in [
        (
            "eval",
            vec!["--checkpoint", ckpt.as_str(), "--sr", "0.2", "--seed", "3", "--dump"],
        ),
        ("eval nn", vec!["--baseline", "nn"]),
    ] {
        let mut outs = Vec::new();
        for side in ["a", "b"] {
            let out = dir(&format!("{name}_{side}").replace(' ', "_"));
            let data = dir("data_a");
            let args = [
                &["eval", "--config", cfg, "--data", &data, "--out", &out][..],
                extra.as_slice(),
            ]
            .concat();
            ok = ok && run(&args);
            outs.push(out);
        }
        ok = ok && same(name, &outs[0], &outs[1]);
    }
    outcome(ok, notes.join("; "))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|v| v.contains(&n));
    let mut set = None;
    let mut set = || set.get_or_insert_with(training_set).clone();

    let mut results = Vec::new();
    for n in 1..=11 {
        if !wanted(n) {
            continue;
        }
        let o = match n {
            1 => loss_fixed_points(),
            2 => gradient_suite(),
            3 => scale_recovery(),
            4 => submanifold_invariance(),
            5 => masked_conv_oracle(),
            6 => guided_fusion_contracts(),
            7 => training_ordering(&set()),
            8 => sparsity_robustness(&set()),
            9 => metrics_oracle(),
            10 => baselines(),
            _ => determinism(),
        };
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push(o.pass);
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
}
