//! Acceptance criteria 1 to 10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use common::{camera, random_cloud, random_image, random_parts};
use gs4c::codec::{huffman_decode, huffman_encode, lzma_unwrap, lzma_wrap, pack, payload_bits, unpack, CompressedModel};
use gs4c::merge::{build_clusters, optimize_merge, similarity, ClusterSet, MergeConfig};
use gs4c::model::{Camera, CameraFrame, Gaussian4D, GaussianCloud, Image, StageTag};
use gs4c::pipeline::{run, MilestoneKind, PipelineConfig, PipelineSchedule, Preset};
use gs4c::select::{accumulate_scores, prune, sample_count, ScoreTable, SelectionConfig};
use gs4c::splat::{image_loss, render, render_backward, render_view, LossKind, RenderOptions};
use gs4c::svq::train_codebook;
use gs4c::synth::{generate, SyntheticSceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn loss(cloud: &GaussianCloud<f64>, frame: &CameraFrame<f64>, opts: &RenderOptions<f64>) -> f64 {
    let img = render_view(cloud, &frame.camera, frame.timestamp, None, opts).unwrap().image;
    image_loss(&img, &frame.image, LossKind::L1)
}

/// Central difference of `f` at 0. The loss is piecewise smooth (pixels
/// enter and leave a Gaussian's footprint at the alpha cutoff), so when the
/// one-sided differences disagree the stencil straddles a jump and `h`
/// shrinks. Returns the estimate and whether shrinking was needed.
fn central_difference(f: &dyn Fn(f64) -> f64, rtol: f64, atol: f64) -> (f64, bool) {
    let z = f(0.0);
    let mut last = 0.0;
    for (k, h) in [1e-5, 1e-6, 1e-7].into_iter().enumerate() {
        let (p, m) = (f(h), f(-h));
        let (fwd, bwd) = ((p - z) / h, (z - m) / h);
        last = (p - m) / (2.0 * h);
        if (fwd - bwd).abs() <= 2.0 * (atol + rtol * last.abs()) {
            return (last, k > 0);
        }
    }
    (last, true)
}

/// Analytic screen-space and temporal gradients against central finite
/// differences on random toy scenes.
fn gradient_fidelity() -> Outcome {
    let (rtol, atol) = (1e-3, 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut checked, mut refined, mut worst) = (0usize, 0usize, 0.0f64);
    for scene in 0..60u64 {
        let n = rng.random_range(1..=10);
        let cloud = random_cloud(1000 + scene, n, 0);
        let frames: Vec<_> = (0..3)
            .map(|j| {
                let t = rng.random_range(0.2..0.8);
                CameraFrame::new(camera(16), t, random_image(scene * 3 + j, 16, 16)).unwrap()
            })
            .collect();
        for (j, frame) in frames.iter().enumerate() {
            let (_, g) = render_backward(&cloud, frame, LossKind::L1).map_err(|e| e.to_string())?;
            for i in 0..n {
                for axis in 0..2 {
                    let probe = |d: f64| {
                        let mut o = [0.0; 2];
                        o[axis] = d;
                        loss(&cloud, frame, &RenderOptions { screen_offset: Some((i, o)) })
                    };
                    let (fd, r) = central_difference(&probe, rtol, atol);
                    refined += r as usize;
                    let a = g.d_loss_d_u[i][axis];
                    worst = worst.max((a - fd).abs() / (atol + rtol * fd.abs()));
                    ensure((a - fd).abs() <= atol + rtol * fd.abs(), || {
                        format!("scene {scene} frame {j} gaussian {i} u{axis}: {a:e} vs {fd:e}")
                    })?;
                    checked += 1;
                }
                let probe = |d: f64| {
                    let mut c = cloud.clone();
                    c.gaussians_mut()[i].mean_t += d;
                    loss(&c, frame, &RenderOptions::default())
                };
                let (fd, r) = central_difference(&probe, rtol, atol);
                refined += r as usize;
                let a = g.d_loss_d_t[i];
                worst = worst.max((a - fd).abs() / (atol + rtol * fd.abs()));
                ensure((a - fd).abs() <= atol + rtol * fd.abs(), || {
                    format!("scene {scene} frame {j} gaussian {i} t: {a:e} vs {fd:e}")
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "60 scenes, {checked} derivatives ({refined} re-probed at smaller h next to an alpha-cutoff jump), worst error {:.2e} of tolerance",
        worst
    ))
}

/// Two frames symmetric about the temporal mean cancel in the signed sum.
fn flicker_suppression() -> Outcome {
    let g = Gaussian4D::axis_aligned([0.0, 0.0, 0.0], 0.5, [-1.5; 3], -2.0, 1.0, [0.8, 0.4, 0.2], 0);
    let cloud = GaussianCloud::new(vec![g], StageTag::Pretrained).unwrap();
    let target = random_image(4, 16, 16);
    let frames: Vec<_> = [0.4, 0.6]
        .iter()
        .map(|&t| CameraFrame::new(camera(16), t, target.clone()).unwrap())
        .collect();
    let both = accumulate_scores(&cloud, &frames, None, LossKind::L1).map_err(|e| e.to_string())?;
    let per_frame: f64 = frames
        .iter()
        .map(|f| {
            accumulate_scores(&cloud, std::slice::from_ref(f), None, LossKind::L1)
                .unwrap()
                .t_grad[0]
                .abs()
        })
        .sum();
    let t = both.t_grad[0].abs();
    ensure(t < 1e-6 && per_frame > 1e-3, || {
        format!("|t_grad| {t:e}, per-frame sum {per_frame:e}")
    })?;
    Ok(format!("|t_grad| = {t:.1e}, sum of per-frame magnitudes = {per_frame:.3e}"))
}

fn sampled_cloud(n: usize) -> GaussianCloud<f64> {
    let gs = (0..n)
        .map(|i| Gaussian4D::axis_aligned([i as f64 * 0.01, 0.0, 0.0], 0.5, [-2.0; 3], -1.0, 0.0, [0.5; 3], 0))
        .collect();
    GaussianCloud::new(gs, StageTag::Sampled).unwrap()
}

/// Brute force: sort ascending, take the value at rank ceil(p n) for each
/// score, keep anything at or above either threshold.
fn prune_oracle(s: &[f64], t: &[f64], p: f64) -> Vec<usize> {
    let thr = |v: &[f64]| {
        let mut sorted = v.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut rank = 1;
        while (rank as f64) < p * v.len() as f64 - 1e-9 {
            rank += 1;
        }
        sorted[rank.min(v.len()) - 1]
    };
    let (ts, tt) = (thr(s), thr(t));
    (0..s.len()).filter(|&i| s[i] >= ts || t[i] >= tt).collect()
}

fn prune_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let n = rng.random_range(1..80);
        // Integer-valued scores half the time so that ties occur.
        let ties = case % 2 == 0;
        let mut draw = |lo: f64, hi: f64| {
            let v = rng.random_range(lo..hi);
            if ties {
                v.round()
            } else {
                v
            }
        };
        let s: Vec<f64> = (0..n).map(|_| draw(0.0, 10.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| draw(-10.0, 10.0)).collect();
        let p = rng.random_range(0.01..0.99);
        let cloud = sampled_cloud(n);
        let table = ScoreTable::from_parts(s.clone(), t.clone(), cloud.fingerprint());
        let cfg = SelectionConfig { tau_gs: 0.2, quantile_p: p };
        let (_, map) = prune(&cloud, &table, &cfg).map_err(|e| format!("case {case}: {e}"))?;
        let want = prune_oracle(&s, &t, p);
        ensure(map.0 == want, || format!("case {case}: kept {:?}, oracle {want:?}", map.0))?;
    }
    Ok("1000 random score tables, identical kept sets".into())
}

/// Per-cell O(n^2) clustering, deduplication and subset removal.
fn cluster_oracle(cloud: &GaussianCloud<f64>, cfg: &MergeConfig) -> BTreeSet<Vec<usize>> {
    let gs = cloud.gaussians();
    let cell = |g: &Gaussian4D<f64>| {
        [
            (g.mean_xyz[0] / cfg.grid_xyz).floor() as i64,
            (g.mean_xyz[1] / cfg.grid_xyz).floor() as i64,
            (g.mean_xyz[2] / cfg.grid_xyz).floor() as i64,
            (g.mean_t / cfg.grid_t).floor() as i64,
        ]
    };
    let mut out = BTreeSet::new();
    let mut cells: BTreeMap<[i64; 4], Vec<usize>> = BTreeMap::new();
    for (i, g) in gs.iter().enumerate() {
        cells.entry(cell(g)).or_default().push(i);
    }
    for members in cells.values() {
        let cands: BTreeSet<Vec<usize>> = members
            .iter()
            .map(|&i| {
                members
                    .iter()
                    .copied()
                    .filter(|&j| j == i || similarity(&gs[i], &gs[j], cfg.lambda_app) >= cfg.tau_sim)
                    .collect()
            })
            .collect();
        for c in &cands {
            let strict_subset = cands.iter().any(|d| d.len() > c.len() && c.iter().all(|x| d.contains(x)));
            if c.len() >= 2 && !strict_subset {
                out.insert(c.clone());
            }
        }
    }
    out
}

fn cluster_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut clusters = 0;
    for case in 0..500 {
        let n = rng.random_range(2..=50);
        let spread = rng.random_range(0.05..0.3);
        let gs: Vec<_> = (0..n)
            .map(|_| {
                let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..spread));
                let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.4..0.45));
                Gaussian4D::axis_aligned(p, rng.random_range(0.0..1.0), [-2.0; 3], 0.0, 1.0, c, 0)
            })
            .collect();
        let cloud = GaussianCloud::new(gs, StageTag::Pruned).unwrap();
        let cfg = MergeConfig {
            tau_sim: -rng.random_range(1e-4..5e-3),
            ..Default::default()
        };
        let cs = build_clusters(&cloud, &cfg).map_err(|e| e.to_string())?;
        let got: BTreeSet<Vec<usize>> = cs.maximal.iter().cloned().collect();
        ensure(got.len() == cs.maximal.len(), || format!("case {case}: duplicate clusters"))?;
        let want = cluster_oracle(&cloud, &cfg);
        ensure(got == want, || format!("case {case}: {got:?} vs oracle {want:?}"))?;
        clusters += want.len();
    }
    Ok(format!("500 random instances ({clusters} maximal clusters), identical sets"))
}

fn merge_descent() -> Outcome {
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let mut member = || {
            let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
            let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
            Gaussian4D::axis_aligned(p, 0.5, [-2.0; 3], 0.0, 1.0, c, 0)
        };
        let members: Vec<_> = (0..3).map(|_| member()).collect();
        let target = GaussianCloud::new(vec![members[0].clone()], StageTag::Pruned).unwrap();
        let frames: Vec<_> = (0..3)
            .map(|k| {
                let a = k as f64 * 0.5 - 0.5;
                let cam = Camera::look_at([3.0 * a.sin(), 0.3, -3.0 * a.cos()], [0.0; 3], [0.0, 1.0, 0.0], 19.2, 16, 16);
                let mut f = CameraFrame::new(cam, 0.5, Image::new(16, 16)).unwrap();
                f.image = render(&target, &f, None).unwrap().image;
                f
            })
            .collect();
        let cloud = GaussianCloud::new(members, StageTag::Pruned).unwrap();
        let cs = ClusterSet::from_clusters(3, vec![vec![0, 1, 2]]);
        let cfg = MergeConfig { seed, ..Default::default() };
        let (out, _) = optimize_merge(&cloud, &cs, &frames, 200, &cfg).map_err(|e| e.to_string())?;
        let (wx, wf) = out.weights(0);
        ensure(wx[0] > wx[1] && wx[0] > wx[2] && wf[0] > wf[1] && wf[0] > wf[2], || {
            format!("seed {seed}: w_x {wx:?}, w_f {wf:?}")
        })?;
        detail.push(format!("{:.2}/{:.2}", wx[0], wf[0]));
    }
    Ok(format!("5/5 seeds, reproducing member weights (x/f) {}", detail.join(" ")))
}

fn svq_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut vectors = 0;
    for table in 0..100 {
        let dim = rng.random_range(1..=5);
        let n = rng.random_range(1..600);
        let bits = rng.random_range(1..=6);
        let v: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cb = train_codebook(&v, dim, bits, table).map_err(|e| e.to_string())?;
        for w in cb.objective_trace.windows(2) {
            ensure(w[1] <= w[0], || format!("table {table}: objective rose {:?}", cb.objective_trace))?;
        }
        for i in 0..n {
            let x = &v[i * dim..(i + 1) * dim];
            let dist = |k: usize| -> f64 { cb.codeword(k).iter().zip(x).map(|(&c, &y)| (y - c as f64).powi(2)).sum() };
            let best = (0..cb.len()).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
            let got = cb.assignments[i] as usize;
            ensure(got == best || dist(got) == dist(best), || {
                format!("table {table} vector {i}: assigned {got}, nearest {best}")
            })?;
        }
        vectors += n;
    }
    Ok(format!("100 tables, {vectors} assignments exhaustive-optimal, objectives monotone"))
}

fn codec_bit_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000u64 {
        let n = rng.random_range(0..40);
        let fd = [0, 3, 8][case as usize % 3];
        let parts = random_parts(case, n, fd, case % 2 == 0);
        let bytes = pack(&parts).map_err(|e| format!("pack {case}: {e}"))?.to_bytes();
        let back = unpack(&CompressedModel::from_bytes(&bytes).map_err(|e| e.to_string())?)
            .map_err(|e| format!("unpack {case}: {e}"))?;
        ensure(back == parts, || format!("container case {case} differs"))?;

        let alphabet = rng.random_range(1..5000u32);
        let len = rng.random_range(0..2000);
        let symbols: Vec<u32> = (0..len).map(|_| rng.random_range(0..alphabet)).collect();
        let enc = huffman_encode(&symbols, alphabet).map_err(|e| e.to_string())?;
        let (dec, used) = huffman_decode(&enc).map_err(|e| e.to_string())?;
        ensure(dec == symbols && used == enc.len(), || format!("huffman case {case}"))?;

        let raw: Vec<u8> = (0..rng.random_range(0..3000)).map(|_| rng.random_range(0..=255u8)).collect();
        ensure(lzma_unwrap(&lzma_wrap(&raw).map_err(|e| e.to_string())?).map_err(|e| e.to_string())? == raw, || {
            format!("lzma case {case}")
        })?;

        // Skewed stream: symbol 0 takes at least half of the mass.
        let bits = rng.random_range(2..12u32);
        let k = 1u32 << bits;
        let count = rng.random_range(16..1000usize);
        let skew = rng.random_range(0.5..0.99);
        let mut stream: Vec<u32> = (0..count)
            .map(|_| if rng.random_bool(skew) { 0 } else { rng.random_range(1..k) })
            .collect();
        stream.sort_unstable_by_key(|&s| s != 0);
        let zeros = stream.iter().filter(|&&s| s == 0).count();
        if zeros * 2 < count {
            continue;
        }
        let enc = huffman_encode(&stream, k).map_err(|e| e.to_string())?;
        let coded = payload_bits(&enc).map_err(|e| e.to_string())?;
        let fixed = bits as u64 * count as u64;
        ensure(coded < fixed, || format!("skewed case {case}: {coded} bits vs fixed {fixed}"))?;
    }
    Ok("1000 fuzzed containers, Huffman and LZMA streams roundtrip; skewed streams beat fixed width".into())
}

fn desk_scale_rate_quality() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSceneSpec::default();
    ensure(
        spec.gaussian_count == 2000 && spec.camera_count == 16 && spec.frame_count == 20 && spec.width == 64,
        || "default synthetic spec drifted".into(),
    )?;
    let scene = generate(&spec).map_err(|e| e.to_string())?;
    let schedule = PipelineSchedule {
        t_gs: 100,
        t_gp: 100,
        t_gm: 100,
        merge_rounds: 2,
        mlp_start: 400,
        svq3d_start: 700,
        svq4d_start: 800,
        total_iters: 900,
    };
    let mut results = Vec::new();
    for p in [Preset::L, Preset::M] {
        let mut cfg = PipelineConfig::preset(p);
        cfg.schedule = schedule.clone();
        let out = run(&scene.truth, &scene.frames.frames, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
        let tau = cfg.selection.tau_gs;
        let n = scene.truth.len();
        let sampled = out.reports[0].gaussians;
        ensure(sampled == sample_count(tau, n), || format!("{p:?}: sampled {sampled}, expected ceil({tau}*{n})"))?;
        let end = out.reports.last().unwrap();
        let eps = 0.01;
        ensure(end.gaussians as f64 <= tau * (1.0 + eps) * n as f64, || {
            format!("{p:?}: final count {} above {tau}*(1+{eps})*{n}", end.gaussians)
        })?;
        results.push((p, end.size_mb.unwrap(), end.psnr, end.gaussians));
    }
    let (l, m) = (&results[0], &results[1]);
    let summary = format!(
        "L: {:.4} MB {:.2} dB {} G; M: {:.4} MB {:.2} dB {} G; {:.0} s",
        l.1,
        l.2,
        l.3,
        m.1,
        m.2,
        m.3,
        start.elapsed().as_secs_f64()
    );
    ensure(m.1 < l.1, || format!("size(M) >= size(L): {summary}"))?;
    ensure(m.2 <= l.2 + 0.1, || format!("PSNR(M) > PSNR(L) + 0.1: {summary}"))?;
    ensure(start.elapsed().as_secs() < 15 * 60, || format!("too slow: {summary}"))?;
    Ok(summary)
}

fn small_scene() -> (GaussianCloud<f64>, Vec<CameraFrame<f64>>) {
    let s = generate(&SyntheticSceneSpec {
        seed: 10,
        gaussian_count: 120,
        frame_count: 3,
        camera_count: 2,
        width: 16,
        height: 16,
        ..Default::default()
    })
    .unwrap();
    (s.truth, s.frames.frames)
}

fn default_run() -> Result<gs4c::pipeline::PipelineOutput<f64>, String> {
    let (cloud, frames) = small_scene();
    let cfg = PipelineConfig::default();
    run(&cloud, &frames, &cfg, &mut |_| {}).map_err(|e| e.to_string())
}

fn schedule_conformance(out: &gs4c::pipeline::PipelineOutput<f64>) -> Outcome {
    let trace: Vec<(MilestoneKind, usize)> = out.reports.iter().map(|r| (r.milestone, r.iteration)).collect();
    use MilestoneKind::*;
    let want = vec![
        (Sample, 0),
        (Prune, 1000),
        (Merge, 2000),
        (Merge, 3000),
        (Mlp, 4000),
        (Svq3d, 9000),
        (Svq4d, 10000),
        (End, 12000),
    ];
    ensure(trace == want, || format!("trace {trace:?}"))?;
    // Every milestone after the merges is reached with exactly that many
    // iterations spent.
    for r in &out.reports {
        let expected = match r.milestone {
            Sample | Prune | Svq3d | Svq4d | End => r.iteration,
            Merge => r.iteration + 1000,
            Mlp => r.iteration + 500,
        };
        ensure(r.trained == expected, || format!("{} reached after {} iterations", r.milestone, r.trained))?;
    }
    Ok("executed default schedule hits 0/1000/2000/3000/4000/9000/10000, ends at 12000".into())
}

fn determinism(first: &gs4c::pipeline::PipelineOutput<f64>) -> Outcome {
    let second = default_run()?;
    let (a, b) = (first.model.to_bytes(), second.model.to_bytes());
    ensure(a == b, || "containers differ between runs".into())?;
    Ok(format!("two runs of the default config give identical {}-byte containers", a.len()))
}

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(msg) => println!("criterion {id:>2} PASS  {name}: {msg} ({secs:.1} s)"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {msg} ({secs:.1} s)");
            }
        }
    };
    report(1, "gradient fidelity", &gradient_fidelity);
    report(2, "flicker suppression", &flicker_suppression);
    report(3, "pruning oracle", &prune_oracle_equivalence);
    report(4, "clustering oracle", &cluster_oracle_equivalence);
    report(5, "merge descent", &merge_descent);
    report(6, "SVQ optimality", &svq_optimality);
    report(7, "codec bit-exactness", &codec_bit_exactness);
    report(8, "desk-scale rate and quality", &desk_scale_rate_quality);
    let t = Instant::now();
    let full = default_run();
    println!("(default-schedule pipeline run on a 120-Gaussian scene: {:.1} s)", t.elapsed().as_secs_f64());
    report(9, "schedule conformance", &|| schedule_conformance(full.as_ref().map_err(Clone::clone)?));
    report(10, "determinism", &|| determinism(full.as_ref().map_err(Clone::clone)?));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
