mod common;

use std::collections::BTreeSet;

use common::{random_cloud, random_frame};
use gs4c::merge::{
    build_clusters, logit_gradients, maximal_clusters, merge_proxy, optimize_merge, run_merging_rounds, similarity,
    ClusterSet, MergeConfig,
};
use gs4c::model::{CameraFrame, Gaussian4D, GaussianCloud, StageTag};
use gs4c::splat::{image_loss, render, LossKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn g_at(x: [f64; 3], color: [f64; 3]) -> Gaussian4D<f64> {
    Gaussian4D::axis_aligned(x, 0.5, [-2.0; 3], 0.0, 1.0, color, 0)
}

fn cloud_of(gs: Vec<Gaussian4D<f64>>) -> GaussianCloud<f64> {
    GaussianCloud::new(gs, StageTag::Pruned).unwrap()
}

fn one_cell_cloud(seed: u64, n: usize) -> GaussianCloud<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gs = (0..n)
        .map(|_| {
            g_at(
                [rng.random_range(0.0..0.099), rng.random_range(0.0..0.099), rng.random_range(0.0..0.099)],
                [rng.random_range(0.0..0.02), 0.5, rng.random_range(0.0..0.02)],
            )
        })
        .collect();
    cloud_of(gs)
}

fn brute_force_maximal(cloud: &GaussianCloud<f64>, cfg: &MergeConfig) -> BTreeSet<Vec<usize>> {
    let gs = cloud.gaussians();
    let n = gs.len();
    let all: BTreeSet<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j == i || similarity(&gs[i], &gs[j], cfg.lambda_app) >= cfg.tau_sim).collect())
        .collect();
    all.iter()
        .filter(|c| c.len() >= 2)
        .filter(|c| !all.iter().any(|d| d.len() > c.len() && c.iter().all(|x| d.contains(x))))
        .cloned()
        .collect()
}

#[test]
fn similarity_examples() {
    let a = g_at([0.0; 3], [0.3, 0.3, 0.3]);
    assert_eq!(similarity(&a, &a, 1.0), 0.0);
    let b = g_at([1.0, 0.0, 0.0], [0.3, 0.3, 0.3]);
    assert_eq!(similarity(&a, &b, 1.0), -1.0);
}

#[test]
fn different_cells_form_no_clusters() {
    let cloud = cloud_of(vec![g_at([0.01; 3], [0.5; 3]), g_at([0.51, 0.01, 0.01], [0.5; 3])]);
    let cs = build_clusters(&cloud, &MergeConfig::default()).unwrap();
    assert!(cs.clusters.is_empty() && cs.maximal.is_empty());
    assert_eq!(cs.singletons, vec![0, 1]);
}

#[test]
fn identical_gaussians_form_one_cluster() {
    let g = g_at([0.05; 3], [0.2, 0.4, 0.6]);
    let cloud = cloud_of(vec![g.clone(), g.clone(), g]);
    let cs = build_clusters(&cloud, &MergeConfig::default()).unwrap();
    assert_eq!(cs.maximal, vec![vec![0, 1, 2]]);
    assert_eq!(cs.clusters, vec![vec![0, 1, 2]]);
    assert!(cs.singletons.is_empty());
}

#[test]
fn twenty_in_one_cell_match_brute_force() {
    let cfg = MergeConfig {
        tau_sim: -2e-3,
        ..Default::default()
    };
    for seed in 0..10 {
        let cloud = one_cell_cloud(seed, 20);
        let cs = build_clusters(&cloud, &cfg).unwrap();
        let got: BTreeSet<Vec<usize>> = cs.maximal.iter().cloned().collect();
        assert_eq!(got.len(), cs.maximal.len());
        assert_eq!(got, brute_force_maximal(&cloud, &cfg));
    }
}

#[test]
fn partition_covers_every_gaussian_once() {
    let cfg = MergeConfig {
        tau_sim: -3e-3,
        ..Default::default()
    };
    let cloud = one_cell_cloud(3, 30);
    let cs = build_clusters(&cloud, &cfg).unwrap();
    let mut seen = vec![0; cloud.len()];
    for c in &cs.clusters {
        assert!(c.len() >= 2);
        for &i in c {
            seen[i] += 1;
        }
    }
    for &i in &cs.singletons {
        seen[i] += 1;
    }
    assert!(seen.iter().all(|&s| s == 1));
    let merged = merge_proxy(&cloud, &cs).unwrap();
    assert_eq!(merged.len(), cs.clusters.len() + cs.singletons.len());
    assert!(merged.len() < cloud.len());
}

#[test]
fn zero_logits_merge_to_midpoint() {
    let cloud = cloud_of(vec![g_at([0.0, 0.0, 0.0], [0.2, 0.4, 0.6]), g_at([0.02, 0.04, 0.0], [0.4, 0.4, 0.2])]);
    let cs = ClusterSet::from_clusters(2, vec![vec![0, 1]]);
    let m = merge_proxy(&cloud, &cs).unwrap();
    let p = &m.gaussians()[0];
    assert_eq!(m.len(), 1);
    for c in 0..3 {
        assert!((p.mean_xyz[c] - [0.01, 0.02, 0.0][c]).abs() < 1e-15);
        assert!((p.color_f[c] - [0.3, 0.4, 0.4][c]).abs() < 1e-15);
    }
    assert_eq!(m.stage(), StageTag::Merged);
}

#[test]
fn saturated_logits_pick_first_member() {
    let mut a = g_at([0.0; 3], [0.9, 0.1, 0.1]);
    a.scale_xyz = [-3.0; 3];
    let b = g_at([0.05; 3], [0.1, 0.9, 0.1]);
    let cloud = cloud_of(vec![a.clone(), b]);
    let mut cs = ClusterSet::from_clusters(2, vec![vec![0, 1]]);
    cs.logits_x[0] = vec![10.0, -10.0];
    cs.logits_f[0] = vec![10.0, -10.0];
    let (wx, _) = cs.weights(0);
    assert!((wx[0] - 1.0).abs() < 1e-4 && wx[1] < 1e-4);
    let merged = merge_proxy(&cloud, &cs).unwrap();
    let p = &merged.gaussians()[0];
    for c in 0..3 {
        assert!((p.mean_xyz[c] - a.mean_xyz[c]).abs() < 1e-4);
        assert!((p.color_f[c] - a.color_f[c]).abs() < 1e-4);
    }
    assert_eq!(p.scale_xyz, a.scale_xyz);
}

#[test]
fn random_logits_match_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = one_cell_cloud(1, 7);
    let mut cs = ClusterSet::from_clusters(7, vec![vec![0, 3, 5], vec![1, 2, 6]]);
    for q in 0..2 {
        for k in 0..3 {
            cs.logits_x[q][k] = rng.random_range(-3.0..3.0);
            cs.logits_f[q][k] = rng.random_range(-3.0..3.0);
        }
    }
    let merged = merge_proxy(&cloud, &cs).unwrap();
    for (q, members) in cs.clusters.iter().enumerate() {
        let sig: Vec<f64> = cs.logits_x[q].iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect();
        let total: f64 = sig.iter().sum();
        let (wx, wf) = cs.weights(q);
        assert!((wx.iter().sum::<f64>() - 1.0).abs() < 1e-7);
        assert!((wf.iter().sum::<f64>() - 1.0).abs() < 1e-7);
        for c in 0..3 {
            let want: f64 = members
                .iter()
                .zip(&sig)
                .map(|(&i, s)| s / total * cloud.gaussians()[i].mean_xyz[c])
                .sum();
            assert!((merged.gaussians()[q].mean_xyz[c] - want).abs() < 1e-7);
        }
    }
    assert_eq!(merged.gaussians()[2], cloud.gaussians()[4]);
}

fn views(cloud: &GaussianCloud<f64>, n: usize) -> Vec<CameraFrame<f64>> {
    (0..n)
        .map(|k| {
            let ang = k as f64 * 0.4 - 0.4;
            let cam = gs4c::model::Camera::look_at([3.0 * ang.sin(), 0.2, -3.0 * ang.cos()], [0.0; 3], [0.0, 1.0, 0.0], 19.2, 16, 16);
            let mut f = CameraFrame::new(cam, 0.5, gs4c::model::Image::new(16, 16)).unwrap();
            f.image = render(cloud, &f, None).unwrap().image;
            f
        })
        .collect()
}

#[test]
fn zero_steps_leave_logits_unchanged() {
    let cloud = one_cell_cloud(2, 4);
    let cs = ClusterSet::from_clusters(4, vec![vec![0, 1]]);
    let (out, losses) = optimize_merge(&cloud, &cs, &views(&cloud, 2), 0, &MergeConfig::default()).unwrap();
    assert_eq!(out, cs);
    assert!(losses.is_empty());
}

#[test]
fn optimization_favors_member_that_explains_target() {
    let a = g_at([0.0, 0.0, 0.0], [0.9, 0.2, 0.1]);
    let b = g_at([0.15, 0.1, 0.0], [0.1, 0.3, 0.9]);
    let target_cloud = cloud_of(vec![a.clone()]);
    let frames = views(&target_cloud, 3);
    let cloud = cloud_of(vec![a, b]);
    let cs = ClusterSet::from_clusters(2, vec![vec![0, 1]]);
    let cfg = MergeConfig {
        lr: 0.05,
        ..Default::default()
    };
    let (out, losses) = optimize_merge(&cloud, &cs, &frames, 60, &cfg).unwrap();
    let (wx, wf) = out.weights(0);
    assert!(wx[0] > wx[1], "{wx:?}");
    assert!(wf[0] > wf[1], "{wf:?}");
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn logit_gradient_matches_finite_differences() {
    let cloud = random_cloud(55, 4, 0);
    let frame = random_frame(3, 16, 0.5);
    let mut cs = ClusterSet::from_clusters(4, vec![vec![0, 1], vec![2, 3]]);
    cs.logits_x = vec![vec![0.3, -0.4], vec![1.1, 0.2]];
    cs.logits_f = vec![vec![-0.5, 0.6], vec![0.0, 0.9]];
    let (_, grad) = logit_gradients(&cloud, &cs, &frame, LossKind::L1).unwrap();
    let h = 1e-6;
    let loss_at = |cs: &ClusterSet| {
        let m = merge_proxy(&cloud, cs).unwrap();
        image_loss(&render(&m, &frame, None).unwrap().image, &frame.image, LossKind::L1)
    };
    let mut k = 0;
    for which in 0..2 {
        for q in 0..2 {
            for m in 0..2 {
                let mut p = cs.clone();
                let mut n = cs.clone();
                if which == 0 {
                    p.logits_x[q][m] += h;
                    n.logits_x[q][m] -= h;
                } else {
                    p.logits_f[q][m] += h;
                    n.logits_f[q][m] -= h;
                }
                let fd = (loss_at(&p) - loss_at(&n)) / (2.0 * h);
                assert!((grad[k] - fd).abs() <= 1e-6 + 1e-3 * fd.abs(), "logit {k}: {} vs {fd}", grad[k]);
                k += 1;
            }
        }
    }
}

#[test]
fn zero_rounds_is_identity() {
    let cloud = one_cell_cloud(4, 10);
    let cfg = MergeConfig {
        rounds: 0,
        ..Default::default()
    };
    let (out, reports) = run_merging_rounds(&cloud, &cfg, &[]).unwrap();
    assert_eq!(out.gaussians(), cloud.gaussians());
    assert!(reports.is_empty());
}

#[test]
fn rounds_never_increase_count() {
    for seed in 0..4 {
        let cloud = one_cell_cloud(seed, 25);
        let frames = views(&cloud, 2);
        let cfg = MergeConfig {
            tau_sim: -2e-3,
            rounds: 3,
            steps: 3,
            ..Default::default()
        };
        let (out, reports) = run_merging_rounds(&cloud, &cfg, &frames).unwrap();
        let mut prev = cloud.len();
        for r in &reports {
            assert_eq!(r.before, prev);
            assert!(r.after <= r.before);
            prev = r.after;
        }
        assert_eq!(out.len(), prev);
        assert!((reports[1].grid_xyz - 0.12).abs() < 1e-12);
    }
}

#[test]
fn cluster_dump_is_json_lines() {
    let cs = ClusterSet::from_clusters(5, vec![vec![0, 1], vec![2, 4]]);
    let mut buf = Vec::new();
    cs.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["members"], serde_json::json!([2, 4]));
    assert_eq!(lines[0]["weights_x"], serde_json::json!([0.5, 0.5]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_is_symmetric(a in prop::array::uniform3(-1.0f64..1.0), b in prop::array::uniform3(-1.0f64..1.0),
                               ca in prop::array::uniform3(0.0f64..1.0), cb in prop::array::uniform3(0.0f64..1.0),
                               lambda in 0.0f64..3.0) {
        let (x, y) = (g_at(a, ca), g_at(b, cb));
        prop_assert_eq!(similarity(&x, &y, lambda), similarity(&y, &x, lambda));
    }

    #[test]
    fn maximal_matches_brute_force(seed in any::<u64>(), n in 2usize..50, tau in -4e-3f64..0.0) {
        let cloud = one_cell_cloud(seed, n);
        let cfg = MergeConfig { tau_sim: tau, ..Default::default() };
        let cs = build_clusters(&cloud, &cfg).unwrap();
        let got: BTreeSet<Vec<usize>> = cs.maximal.iter().cloned().collect();
        prop_assert_eq!(got, brute_force_maximal(&cloud, &cfg));
    }

    #[test]
    fn clustering_is_order_insensitive(seed in any::<u64>(), n in 2usize..30) {
        let cloud = one_cell_cloud(seed, n);
        let cfg = MergeConfig { tau_sim: -2e-3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled = cloud_of(perm.iter().map(|&i| cloud.gaussians()[i].clone()).collect());
        let a: BTreeSet<Vec<usize>> = build_clusters(&cloud, &cfg).unwrap().maximal.into_iter().collect();
        let b: BTreeSet<Vec<usize>> = build_clusters(&shuffled, &cfg)
            .unwrap()
            .maximal
            .into_iter()
            .map(|c| {
                let mut m: Vec<usize> = c.into_iter().map(|k| perm[k]).collect();
                m.sort_unstable();
                m
            })
            .collect();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn maximal_helper_handles_empty() {
    assert!(maximal_clusters(vec![]).is_empty());
}
