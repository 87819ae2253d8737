use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use densify::cli::run_command_with;
use densify::cloud::{extract_patches, Point, PointCloud};
use densify::error::Error;
use densify::gradcheck::{joint_suite, neu_suite, renderer_suite, SuiteOptions};
use densify::io::{format_xyz, parse_off, parse_xyz, read_xyz, write_xyz};
use densify::losses::{emd, joint_loss, LossWeights};
use densify::metrics::{chamfer, evaluate, hausdorff_metric, p2f, ReferenceMesh};
use densify::neu::{init_params, upsampler_forward, NeuDims};
use densify::optim::{train_neu, upsample_direct, OptimConfig};
use densify::render::{make_view_ring, triangle_frame, Camera, CameraRig, FrameMode, RenderParams};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, r: f64) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| Point::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r)))
            .collect(),
    )
    .unwrap()
}

fn fibonacci_sphere(n: usize) -> PointCloud {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    PointCloud::new(
        (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let rho = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                Point::from(Vector3::new(rho * phi.cos(), rho * phi.sin(), z).normalize())
            })
            .collect(),
    )
    .unwrap()
}

fn renderer_gradients() -> Outcome {
    let start = Instant::now();
    let out = renderer_suite(&SuiteOptions { seed: 2024, instances: 50, corrupt: false }).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(out.passed(), out.to_string())?;
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} coordinates, max relative error {:.2e}, {:.1}s",
        out.report.checked,
        out.report.max_error(),
        elapsed.as_secs_f64()
    ))
}

fn check_frame(dirs: &[Vector3<f64>; 3], view: Option<Vector3<f64>>) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for (a, v) in dirs.iter().enumerate() {
        worst = worst.max((v.norm() - 1.0).abs());
        for w in &dirs[a + 1..] {
            worst = worst.max((v.dot(w) + 0.5).abs());
        }
        if let Some(x) = view {
            worst = worst.max(v.dot(&x.normalize()).abs());
        }
    }
    ensure(worst <= 1e-9, format!("frame error {worst:e}"))?;
    Ok(worst)
}

fn triangle_construction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut fallbacks = 0;
    let mut pairs = 0;
    while pairs < 1000 {
        let pos = random_cloud(&mut rng, 1, 4.0)[0];
        let target = random_cloud(&mut rng, 1, 0.5)[0];
        let up = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let Ok(cam) = Camera::look_at(pos, target, up, 1.0) else { continue };
        let p = if pairs % 10 == 0 {
            // on the camera's x axis, so the view ray is parallel to it
            pos + cam.right() * rng.random_range(0.5..3.0)
        } else {
            random_cloud(&mut rng, 1, 1.0)[0]
        };
        let x = p - cam.position();
        let tangent = triangle_frame(&p, &cam, FrameMode::Tangent).map_err(|e| e.to_string())?;
        let literal = triangle_frame(&p, &cam, FrameMode::Literal).map_err(|e| e.to_string())?;
        ensure(tangent.used_fallback == (pairs % 10 == 0), format!("fallback flag wrong at pair {pairs}"))?;
        fallbacks += tangent.used_fallback as usize;
        worst = worst.max(check_frame(&tangent.dirs, Some(x))?);
        worst = worst.max(check_frame(&literal.dirs, None)?);
        pairs += 1;
    }
    Ok(format!("{pairs} pairs ({fallbacks} on the fallback path), max deviation {worst:.1e}"))
}

fn brute_emd(a: &PointCloud, b: &PointCloud) -> f64 {
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let cost = |perm: &[usize]| -> f64 {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| (a[i] - b[j]).norm_squared())
            .sum::<f64>()
            / n as f64
    };
    let mut best = cost(&perm);
    // Heap's algorithm
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn emd_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let a = random_cloud(&mut rng, n, 1.0);
        let b = random_cloud(&mut rng, n, 1.0);
        let diff = (emd(&a, &b).map_err(|e| e.to_string())? - brute_emd(&a, &b)).abs();
        worst = worst.max(diff);
    }
    ensure(worst <= 1e-12, format!("max difference {worst:e}"))?;
    Ok(format!("200 pairs, max difference {worst:.1e}"))
}

fn loss_recomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rig = make_view_ring(2, 2.5, 20.0, (16, 16)).map_err(|e| e.to_string())?;
    let render = RenderParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let weights = LossWeights::new(
            rng.random_range(0.0..100.0),
            rng.random_range(0.0..100.0),
            rng.random_range(0.0..100.0),
            rng.random_range(0.0..100.0),
        )
        .unwrap();
        let n = rng.random_range(2..10);
        let s = random_cloud(&mut rng, n, 0.7);
        let m = n * rng.random_range(1..4);
        let d = random_cloud(&mut rng, m, 0.7);
        let r = joint_loss(&s, &d, &rig, &weights, &render).map_err(|e| e.to_string())?;
        let recomposed = weights.sc * r.sc + weights.ic * r.ic + weights.hd * r.hd + weights.un * r.un;
        worst = worst.max((r.joint - recomposed).abs());
        let same = joint_loss(&s, &s, &rig, &weights, &render).map_err(|e| e.to_string())?;
        ensure(
            same.sc == 0.0 && same.ic == 0.0 && same.hd == 0.0,
            format!("identical clouds gave sc={} ic={} hd={}", same.sc, same.ic, same.hd),
        )?;
    }
    ensure(worst <= 1e-12, format!("max recomposition error {worst:e}"))?;
    Ok(format!("100 pairs, max recomposition error {worst:.1e}"))
}

fn joint_gradients() -> Outcome {
    let out = joint_suite(&SuiteOptions { seed: 100, instances: 20, corrupt: false }).map_err(|e| e.to_string())?;
    ensure(out.passed(), out.to_string())?;
    Ok(format!(
        "{} coordinates, {:.1}% excluded, max relative error {:.2e}, max abs difference {:.2e}",
        out.report.checked,
        100.0 * out.report.excluded_fraction(),
        out.report.max_error(),
        out.report.max_abs_diff
    ))
}

fn neu_gradients() -> Outcome {
    let out = neu_suite(&SuiteOptions { seed: 0, instances: 20, corrupt: false }).map_err(|e| e.to_string())?;
    ensure(out.passed(), out.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let n = rng.random_range(1..=12);
        let r = rng.random_range(1..=n);
        let cloud = random_cloud(&mut rng, n, 1.0);
        let params = init_params(rng.random(), NeuDims { feature_width: 4, rate: r }).unwrap();
        let len = upsampler_forward(&cloud, r, &params).map_err(|e| e.to_string())?.len();
        ensure(len == r * n, format!("N={n} r={r} gave {len} points"))?;
    }
    Ok(format!(
        "{} parameters over 20 seeds, max relative error {:.2e}; 20 random (N, r) shapes",
        out.report.checked,
        out.report.max_error()
    ))
}

fn direct_upsampling() -> Outcome {
    let sphere = fibonacci_sphere(256);
    let rig = CameraRig::default();
    let config = OptimConfig::default();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (dense, trace) = pool
        .install(|| upsample_direct(&sphere, 4, &rig, &config))
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let initial = trace.reports[0].joint;
    let last = trace.final_report.map(|r| r.joint).unwrap_or(f64::NAN);
    let drift = dense.points().iter().map(|p| (p.coords.norm() - 1.0).abs()).sum::<f64>() / dense.len() as f64;
    let summary = format!(
        "{} points, joint {initial:.4} -> {last:.4} ({:.1}%), radial drift {drift:.4}, {:.0}s",
        dense.len(),
        100.0 * last / initial,
        elapsed.as_secs_f64()
    );
    ensure(dense.len() == 1024, format!("{} points", dense.len()))?;
    ensure(trace.len() == config.iterations, "trace length")?;
    ensure(last < 0.5 * initial, summary.clone())?;
    ensure(drift < 0.02, summary.clone())?;
    ensure(elapsed < Duration::from_secs(600), summary.clone())?;
    Ok(summary)
}

fn neu_training() -> Outcome {
    let cloud = fibonacci_sphere(512);
    let patches = extract_patches(&cloud, 8, 64).map_err(|e| e.to_string())?;
    let rig = CameraRig::default();
    let config = OptimConfig {
        epochs: 30,
        batch_size: 8,
        rate: 4,
        feature_width: 16,
        seed: 11,
        ..OptimConfig::default()
    };
    let (p1, t1) = train_neu(&patches, 4, &rig, &config).map_err(|e| e.to_string())?;
    let (p2, t2) = train_neu(&patches, 4, &rig, &config).map_err(|e| e.to_string())?;
    let (first, last) = (t1.epoch_means[0], t1.epoch_means[29]);
    let summary = format!("epoch 1 mean {first:.4}, epoch 30 mean {last:.4}");
    ensure(last < first, summary.clone())?;
    ensure(p1 == p2 && t1.reports == t2.reports && t1.epoch_means == t2.epoch_means, "runs differ")?;
    Ok(format!("{summary}, two runs identical"))
}

fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let side = |x: &PointCloud, y: &PointCloud| {
        let mut total = 0.0;
        for p in x.points() {
            let mut best = f64::INFINITY;
            for q in y.points() {
                best = best.min((p - q).norm_squared());
            }
            total += best;
        }
        total / x.len() as f64
    };
    side(a, b) + side(b, a)
}

fn brute_hausdorff(a: &PointCloud, b: &PointCloud) -> f64 {
    let side = |x: &PointCloud, y: &PointCloud| {
        let mut worst: f64 = 0.0;
        for p in x.points() {
            let mut best = f64::INFINITY;
            for q in y.points() {
                best = best.min((p - q).norm());
            }
            worst = worst.max(best);
        }
        worst
    };
    side(a, b).max(side(b, a))
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let (n, m) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let a = random_cloud(&mut rng, n, 1.0);
        let b = random_cloud(&mut rng, m, 1.0);
        let cd = chamfer(&a, &b).unwrap();
        let hd = hausdorff_metric(&a, &b).unwrap();
        ensure(cd == brute_chamfer(&a, &b), format!("chamfer differs for {n}x{m}"))?;
        ensure(hd == brute_hausdorff(&a, &b), format!("hausdorff differs for {n}x{m}"))?;
        let report = evaluate(&a, &b, None).unwrap();
        ensure(report.cd == cd * 1e3 && report.hd == hd * 1e3, "report is not scaled by 10^3")?;
    }
    let mesh = ReferenceMesh::new(
        vec![Point::new(0.0, 0.0, 0.0), Point::new(1.0, 0.0, 0.0), Point::new(0.0, 1.0, 0.0)],
        vec![[0, 1, 2]],
    )
    .unwrap();
    let inside = p2f(&PointCloud::from_xyz(&[[0.25, 0.25, 2.0]]).unwrap(), &mesh).unwrap().0;
    let edge = p2f(&PointCloud::from_xyz(&[[2.0, 0.0, 1.0]]).unwrap(), &mesh).unwrap().0;
    ensure((inside - 2.0).abs() <= 1e-12, format!("interior projection {inside}"))?;
    ensure((edge - 2f64.sqrt()).abs() <= 1e-12, format!("edge projection {edge}"))?;
    let pred = PointCloud::from_xyz(&[[0.25, 0.25, 2.0], [2.0, 0.0, 1.0]]).unwrap();
    let report = evaluate(&pred, &pred, Some(&mesh)).unwrap();
    let (mean, std) = p2f(&pred, &mesh).unwrap();
    ensure(report.p2f_mean == Some(mean * 1e3) && report.p2f_std == Some(std * 1e3), "p2f is not scaled by 10^3")?;
    Ok("100 random pairs match brute force exactly; p2f hand cases 2 and sqrt(2)".into())
}

fn cli_round_trips() -> Outcome {
    ensure(parse_xyz("0 0 0\n1 0 0\n").map(|c| c.len()).ok() == Some(2), "two-point parse")?;
    ensure(parse_xyz("# header\n0 0 0\n").map(|c| c.len()).ok() == Some(1), "comment skip")?;
    ensure(matches!(parse_xyz("0 0\n"), Err(Error::Parse { line: 1, .. })), "arity error at line 1")?;
    ensure(matches!(format_xyz(&PointCloud::empty()), Err(Error::InvalidArgument(_))), "empty write refused")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for k in 0..20 {
        let cloud = random_cloud(&mut rng, 50, 10f64.powi(k % 4));
        let path = dir.path().join("c.xyz");
        write_xyz(&cloud, &path).map_err(|e| e.to_string())?;
        let back = read_xyz(&path).map_err(|e| e.to_string())?;
        let worst = cloud
            .to_flat()
            .iter()
            .zip(back.to_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure(worst <= 1e-9, format!("xyz round trip error {worst:e}"))?;
    }

    ensure(
        parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").map(|m| m.triangles().len()).ok() == Some(1),
        "minimal OFF",
    )?;
    ensure(
        matches!(
            parse_off("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"),
            Err(Error::UnsupportedFace { arity: 4, .. })
        ),
        "quad face",
    )?;
    ensure(matches!(parse_off("3 1 0\n0 0 0\n"), Err(Error::Parse { .. })), "missing header")?;

    let input = dir.path().join("patch.xyz");
    let output = dir.path().join("dense.xyz");
    write_xyz(&fibonacci_sphere(256), &input).map_err(|e| e.to_string())?;
    let argv = [
        "densify",
        "upsample",
        "--input",
        input.to_str().unwrap(),
        "--rate",
        "4",
        "--iters",
        "10",
        "--out",
        output.to_str().unwrap(),
    ];
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_command_with(argv, &mut out, &mut err);
    ensure(code == 0, format!("exit {code}: {}", String::from_utf8_lossy(&err)))?;
    let n = read_xyz(&output).map_err(|e| e.to_string())?.len();
    ensure(n == 1024, format!("{n} points written"))?;
    Ok("xyz/OFF examples and round trips pass; upsample --rate 4 wrote 1024 points".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("renderer gradient fidelity", renderer_gradients),
        ("triangle construction", triangle_construction),
        ("EMD oracle", emd_oracle),
        ("loss recomposition", loss_recomposition),
        ("joint-loss gradient", joint_gradients),
        ("upsampler gradient and output count", neu_gradients),
        ("desk-scale direct upsampling", direct_upsampling),
        ("tiny upsampler training", neu_training),
        ("metrics", metrics),
        ("CLI round trips", cli_round_trips),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
