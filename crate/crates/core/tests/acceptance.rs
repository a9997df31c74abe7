//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches the console. Set
//! `MVCI_ACCEPTANCE_STRICT` to make any failure exit non-zero.

use std::time::{Duration, Instant};

use mvci::camera::{back_project, project, rig_with_resolution, CameraRig, Intrinsics, Pixel3, ViewPose};
use mvci::consistency::{
    all_pairwise_distances, closest_point_pooling, consistency_forward, pooled_distances, ConsistencyConfig,
    ConsistencyTape,
};
use mvci::energy::{consistency_loss_backward, descriptor_optimize, direct_optimize, EnergyConfig};
use mvci::generator::{Generator, ShapeDescriptor, ToyGenerator, ToyGeneratorConfig};
use mvci::io::{decode_loss_map, encode_loss_map};
use mvci::metrics::{chamfer_distance, fuse_views, PointCloud};
use mvci::raster::{reproject_view, DepthImage};
use mvci::synth::{carve_holes, make_scene, ray_cast_view, SceneSpec, Shape, SplitMix64, SyntheticScene};
use mvci::Point3;
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Resolution of the perturbed-sphere benchmark used by the ablation criteria.
const BENCH_RES: usize = 128;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut out = f();
    let took = start.elapsed();
    out.detail += &format!("; {:.2}s", took.as_secs_f64());
    if let Some(limit) = limit {
        if took > limit {
            out.pass = false;
            out.detail += &format!(" exceeds {}s", limit.as_secs());
        }
    }
    out
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q = nalgebra::Quaternion::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..10_000 {
        let pose = ViewPose::new(
            random_rotation(&mut rng),
            Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
        )
        .unwrap();
        let (fx, fy) = (rng.gen_range(10.0..1000.0), rng.gen_range(10.0..1000.0));
        let (cx, cy) = (rng.gen_range(0.0..512.0), rng.gen_range(0.0..512.0));
        let k = if i % 4 == 3 {
            Intrinsics::orthographic(fx, fy, cx, cy).unwrap()
        } else {
            Intrinsics::perspective(fx, fy, cx, cy).unwrap()
        };
        let px = Pixel3::new(rng.gen_range(0.0..512.0), rng.gen_range(0.0..512.0), rng.gen_range(0.05..20.0));
        let back = project(&back_project(px, &pose, &k).unwrap(), &pose, &k).unwrap();
        for (a, b) in [(back.u, px.u), (back.v, px.v), (back.d, px.d)] {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    Outcome { pass: worst <= 1e-9, detail: format!("max relative error {worst:.2e} over 10000 triples") }
}

fn three_view_scene(seed: u64) -> (CameraRig, Vec<DepthImage>, Vec<DepthImage>) {
    let rig = rig_with_resolution(16, 16).truncated(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::Sphere {
        center: [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
        radius: rng.gen_range(0.35..0.6),
    };
    let spec = SceneSpec { shape, samples: 10, hole_fraction: 0.2, noise_fraction: 0.02 };
    let scene = make_scene(&spec, &rig, seed).unwrap();
    (rig, scene.perturbed, scene.inputs)
}

fn with_pixel(views: &[DepthImage], k: usize, i: usize, delta: f64) -> Vec<DepthImage> {
    let mut v = views.to_vec();
    v[k].data_mut()[i] += delta;
    v
}

fn tape(views: &[DepthImage], inputs: &[DepthImage], rig: &CameraRig, cfg: &ConsistencyConfig) -> ConsistencyTape {
    consistency_forward(views, inputs, rig, cfg).unwrap().tape
}

fn criterion_2() -> Outcome {
    let (mut fg, mut qualified, mut matched) = (0usize, 0usize, 0usize);
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let (rig, views, inputs) = three_view_scene(seed);
        let cfg = ConsistencyConfig { j_views: 3, ..ConsistencyConfig::default() }.resolved(&inputs).unwrap();
        let fwd = consistency_forward(&views, &inputs, &rig, &cfg).unwrap();
        let grad = consistency_loss_backward(&fwd, &views, &rig).unwrap();
        let loss = |v: &[DepthImage]| consistency_forward(v, &inputs, &rig, &cfg).unwrap().loss;
        for k in 0..3 {
            for (i, ..) in views[k].foreground() {
                fg += 1;
                // the argmins must survive a 1e-3 move of this pixel
                let margin = 1e-3;
                if tape(&with_pixel(&views, k, i, margin), &inputs, &rig, &cfg) != fwd.tape
                    || tape(&with_pixel(&views, k, i, -margin), &inputs, &rig, &cfg) != fwd.tape
                {
                    continue;
                }
                qualified += 1;
                let h = 1e-4;
                let fd = (loss(&with_pixel(&views, k, i, h)) - loss(&with_pixel(&views, k, i, -h))) / (2.0 * h);
                let a = grad[k][i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-300);
                if (a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()) + 1e-12 {
                    matched += 1;
                } else {
                    worst = worst.max(err);
                }
            }
        }
    }
    let frac = qualified as f64 / fg as f64;
    Outcome {
        pass: matched == qualified && frac >= 0.95,
        detail: format!(
            "{matched}/{qualified} qualifying pixels match, {:.1}% of {fg} foreground pixels qualify, worst mismatch {worst:.1e}",
            100.0 * frac
        ),
    }
}

fn unit_sphere_views(rig: &CameraRig) -> Vec<DepthImage> {
    let shape = Shape::sphere(0.5);
    rig.views.iter().map(|v| ray_cast_view(&shape, v, (rig.height, rig.width), 10.0)).collect()
}

fn criterion_3() -> Outcome {
    let rig = rig_with_resolution(256, 256);
    let views = unit_sphere_views(&rig);
    let cfg = ConsistencyConfig::default().resolved(&views).unwrap();
    // empty inputs, so every pooled distance comes from another view
    let empty: Vec<DepthImage> = views.iter().map(|v| DepthImage::background(v.width(), v.height(), 10.0)).collect();
    let fwd = consistency_forward(&views, &empty, &rig, &cfg).unwrap();
    let span = cfg.depth_range.unwrap().span();
    let mut darkest: f64 = 0.0;
    for m in &fwd.loss_maps {
        let (_, _, gray, _) = decode_loss_map(&encode_loss_map(m, span).unwrap()).unwrap();
        darkest = darkest.max(gray.iter().map(|&g| g as f64).sum::<f64>() / gray.len() as f64);
    }
    let rel = fwd.loss / span;
    Outcome {
        pass: rel < 0.01 && darkest < 0.01 * 255.0,
        detail: format!("loss = {:.3e} = {:.4}% of depth range, brightest map mean gray {darkest:.3}", fwd.loss, 100.0 * rel),
    }
}

fn bench(seed: u64) -> (CameraRig, SyntheticScene) {
    let rig = rig_with_resolution(BENCH_RES, BENCH_RES);
    let scene = make_scene(&SceneSpec::perturbed_sphere(), &rig, seed).unwrap();
    (rig, scene)
}

fn cd_to_gt(views: &[DepthImage], rig: &CameraRig, gt: &PointCloud) -> f64 {
    chamfer_distance(&fuse_views(views, rig).unwrap(), gt, false).unwrap()
}

fn criterion_4() -> Outcome {
    let rig = rig_with_resolution(256, 256);
    let scene = make_scene(&SceneSpec::perturbed_sphere(), &rig, 7).unwrap();
    let report = direct_optimize(&scene.perturbed, &scene.inputs, &rig, &EnergyConfig::direct()).unwrap();
    let initial = report.initial.unwrap().consistency_loss;
    let fin = report.selected().unwrap().consistency_loss;
    let cd0 = cd_to_gt(&scene.perturbed, &rig, &scene.gt_cloud);
    let cd1 = cd_to_gt(&report.final_views, &rig, &scene.gt_cloud);
    Outcome {
        pass: fin < 0.5 * initial && cd1 < cd0,
        detail: format!("consistency {initial:.3e} -> {fin:.3e} (ratio {:.3}), CD {cd0:.5} -> {cd1:.5}", fin / initial),
    }
}

fn criterion_5() -> Outcome {
    let res = 128;
    let rig = rig_with_resolution(res, res);
    let gen = ToyGenerator::new(ToyGeneratorConfig::standard(), rig.clone()).unwrap();
    let mut rng = SplitMix64::new(2024);
    let truth = ShapeDescriptor::new((0..32).map(|_| 0.5 * rng.normal()).collect()).unwrap();
    let complete = gen.forward(&truth, &[]).unwrap();
    let inputs: Vec<DepthImage> = complete.iter().map(|v| carve_holes(v, 0.3, &mut rng)).collect();
    let dir: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let z0 = ShapeDescriptor::new(truth.values().iter().zip(&dir).map(|(t, d)| t + 0.5 * d / norm).collect()).unwrap();
    let cfg = EnergyConfig::descriptor();
    let report = descriptor_optimize(&gen, &z0, &inputs, &rig, &cfg).unwrap();
    let initial = report.initial.unwrap().consistency_loss;
    let fin = report.selected().unwrap().consistency_loss;
    let window_min = report.selection_is_window_minimum(cfg.select_window);
    let z = report.descriptor.as_ref().unwrap();
    let dist = |a: &[f64]| a.iter().zip(truth.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    Outcome {
        pass: fin < initial && window_min,
        detail: format!(
            "consistency {initial:.4e} -> {fin:.4e} at step {}, window minimum: {window_min}, |z - z_true| {:.3} -> {:.3}",
            report.selected_step,
            dist(z0.values()),
            dist(z)
        ),
    }
}

fn mean_present_distance(scene: &SyntheticScene, rig: &CameraRig, u: usize) -> f64 {
    let cfg = ConsistencyConfig { u_factor: u, ..ConsistencyConfig::default() }.resolved(&scene.inputs).unwrap();
    let all = all_pairwise_distances(&scene.perturbed, &scene.inputs, rig, &cfg).unwrap();
    let (mut sum, mut n) = (0.0, 0usize);
    for (t, row) in all.iter().enumerate() {
        for (s, m) in row.iter().enumerate() {
            if s != t {
                sum += m.present().sum::<f64>();
                n += m.present_count();
            }
        }
    }
    sum / n as f64
}

fn criterion_6() -> Outcome {
    let mut means = [0.0; 3];
    for seed in SEEDS {
        let (rig, scene) = bench(seed);
        for (m, u) in means.iter_mut().zip([1, 3, 5]) {
            *m += mean_present_distance(&scene, &rig, u) / SEEDS.len() as f64;
        }
    }
    Outcome {
        pass: means[2] <= means[1] && means[1] <= means[0],
        detail: format!("mean present distance U=1 {:.4e}, U=3 {:.4e}, U=5 {:.4e}", means[0], means[1], means[2]),
    }
}

fn criterion_7() -> Outcome {
    let (rig, scene) = bench(11);
    let cfg = ConsistencyConfig::default().resolved(&scene.inputs).unwrap();
    let all = all_pairwise_distances(&scene.perturbed, &scene.inputs, &rig, &cfg).unwrap();
    let mut checked = 0;
    let mut violations = 0;
    for (t, row) in all.iter().enumerate() {
        let pooled: Vec<_> = [3, 5, 8].iter().map(|&j| pooled_distances(row, &rig, t, j).unwrap()).collect();
        for i in 0..pooled[0].data.len() {
            for (small, large) in [(&pooled[0], &pooled[1]), (&pooled[1], &pooled[2])] {
                if let Some(a) = small.data[i] {
                    checked += 1;
                    if large.data[i].is_none_or(|b| b > a) {
                        violations += 1;
                    }
                }
            }
        }
    }
    Outcome { pass: violations == 0 && checked > 0, detail: format!("{violations} violations over {checked} pixel comparisons") }
}

fn criterion_8() -> Outcome {
    let mut cd = [0.0; 2];
    for seed in SEEDS {
        let (rig, scene) = bench(seed);
        for (slot, mu) in cd.iter_mut().zip([1.0, 0.0]) {
            let cfg = EnergyConfig { mu, ..EnergyConfig::direct() };
            let report = direct_optimize(&scene.perturbed, &scene.inputs, &rig, &cfg).unwrap();
            *slot += cd_to_gt(&report.final_views, &rig, &scene.gt_cloud) / SEEDS.len() as f64;
        }
    }
    Outcome { pass: cd[0] <= cd[1], detail: format!("mean final CD mu=1 {:.6}, mu=0 {:.6}", cd[0], cd[1]) }
}

fn brute_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    let one = |x: &[Point3], y: &[Point3]| {
        x.iter().map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
    };
    one(a, b) + one(b, a)
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = |rng: &mut ChaCha8Rng| -> Vec<Point3> {
        (0..100).map(|_| Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    };
    let mut worst: f64 = 0.0;
    let mut self_zero = true;
    for _ in 0..50 {
        let (a, b) = (cloud(&mut rng), cloud(&mut rng));
        let fast = chamfer_distance(&PointCloud::new(a.clone()), &PointCloud::new(b.clone()), false).unwrap();
        worst = worst.max((fast - brute_chamfer(&a, &b)).abs());
        self_zero &= chamfer_distance(&PointCloud::new(a.clone()), &PointCloud::new(a), false).unwrap() == 0.0;
    }
    Outcome { pass: worst <= 1e-9 && self_zero, detail: format!("max |kd - brute| {worst:.2e}, CD(A,A) = 0: {self_zero}") }
}

fn criterion_10() -> Outcome {
    let rig = rig_with_resolution(32, 32);
    let views = make_scene(&SceneSpec { noise_fraction: 0.02, ..SceneSpec::perturbed_sphere() }, &rig, 10).unwrap().perturbed;
    let mut compared = 0;
    let mut mismatches = 0;
    let mut pairs = 0;
    for t in 0..rig.len() {
        for s in 0..rig.len() {
            if s == t {
                continue;
            }
            let (src, tgt) = (&rig.views[s], &rig.views[t]);
            // exhaustive oracle: every source pixel mapped independently
            let mut hits: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); 32 * 32];
            for (_, x, y, d) in views[s].foreground() {
                let p = back_project(Pixel3::new(x as f64, y as f64, d), &src.pose, &src.intrinsics).unwrap();
                let q = project(&p, &tgt.pose, &tgt.intrinsics).unwrap();
                let (fx, fy) = (q.u + 0.5, q.v + 0.5);
                if fx >= 0.0 && fy >= 0.0 && fx < 32.0 && fy < 32.0 {
                    hits[fy.floor() as usize * 32 + fx.floor() as usize].push((x, y, q.d));
                }
            }
            // smallest U for which no two candidates share a sub-cell
            let Some(u) = (1..=64).find(|&u| {
                let buf = reproject_view(&views[s], src, tgt, (32, 32), u).unwrap();
                buf.occupancy() == hits.iter().map(Vec::len).sum::<usize>()
            }) else {
                continue;
            };
            pairs += 1;
            let buf = reproject_view(&views[s], src, tgt, (32, 32), u).unwrap();
            let pooled = closest_point_pooling(&buf, &views[t]).unwrap();
            for (i, cands) in hits.iter().enumerate() {
                let v = views[t].data()[i];
                let want = cands.iter().map(|c| (c.2 - v).abs()).reduce(f64::min);
                compared += 1;
                if pooled.data[i] != want {
                    mismatches += 1;
                }
            }
        }
    }
    Outcome {
        pass: mismatches == 0 && pairs > 0,
        detail: format!("{mismatches} mismatches over {compared} pixels in {pairs} collision-free view pairs"),
    }
}

fn criterion_11() -> Outcome {
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        let argv: Vec<String> = ["mvci", "ablate", "--seed", "3", "--res", "24", "24", "--steps", "3", "--select-window", "2", "--out"]
            .iter()
            .map(|s| s.to_string())
            .chain([d.path().display().to_string()])
            .collect();
        let code = mvci::cli::run(argv);
        if code != 0 {
            return Outcome { pass: false, detail: format!("ablate exited with {code}") };
        }
    }
    let listing = |root: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for e in std::fs::read_dir(dir).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "pfm")) {
                    out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    };
    let (a, b) = (listing(dirs[0].path()), listing(dirs[1].path()));
    let csv = a.iter().filter(|f| f.0.ends_with(".csv")).count();
    let pfm = a.iter().filter(|f| f.0.ends_with(".pfm")).count();
    Outcome {
        pass: a == b && csv > 0 && pfm > 0,
        detail: format!("{csv} CSV and {pfm} PFM files, identical: {}", a == b),
    }
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    type Criterion = (usize, &'static str, Option<u64>, fn() -> Outcome);
    let criteria: [Criterion; 11] = [
        (1, "projection round trip", Some(1), criterion_1),
        (2, "consistency gradient vs finite differences", Some(30), criterion_2),
        (3, "self-consistency floor", Some(10), criterion_3),
        (4, "direct optimization efficacy", Some(120), criterion_4),
        (5, "descriptor optimization", Some(120), criterion_5),
        (6, "U ablation trend", Some(120), criterion_6),
        (7, "J monotonicity", None, criterion_7),
        (8, "mu ablation", None, criterion_8),
        (9, "Chamfer oracle", Some(5), criterion_9),
        (10, "pooling brute-force equivalence", None, criterion_10),
        (11, "ablate determinism", None, criterion_11),
    ];
    let mut failed = 0;
    for (id, name, limit, f) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let out = timed(limit.map(Duration::from_secs), f);
        failed += usize::from(!out.pass);
        println!("criterion {id:>2} {} {name}: {}", if out.pass { "PASS" } else { "FAIL" }, out.detail);
    }
    println!("{failed} criteria failed");
    // Failures are reported above; a failing exit code would stop the
    // remaining test targets, so it is opt-in.
    if failed > 0 && std::env::var_os("MVCI_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
