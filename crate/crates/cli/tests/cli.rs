use std::path::Path;
use std::process::{Command, Output};

use gs4c::codec::{read_container, unpack};
use gs4c::frames::FrameSet;
use gs4c::model::{load_ply, GaussianCloud};
use gs4c::splat::{render, render_view, RenderOptions};

fn gs4c(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gs4c"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SPEC: &str = "seed = 3\ngaussian_count = 200\nframe_count = 3\ncamera_count = 3\nwidth = 24\nheight = 24\n";

const TINY: &str = "[schedule]\nt_gs = 3\nt_gp = 3\nt_gm = 2\nmlp_start = 10\nsvq3d_start = 14\nsvq4d_start = 16\ntotal_iters = 18\n[distill]\nwarmup_steps = 3\n[svq]\nrefresh_every = 2\n";

const ZERO: &str = "[schedule]\nt_gs = 0\nt_gp = 0\nt_gm = 0\nmerge_rounds = 0\nmlp_start = 0\nsvq3d_start = 0\nsvq4d_start = 0\ntotal_iters = 0\n";

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.toml"), SPEC).unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    std::fs::write(dir.path().join("zero.toml"), ZERO).unwrap();
    dir
}

fn compress_tiny(dir: &Path, out: &str) -> Output {
    gs4c(
        &["compress", "--synth", "spec.toml", "--config", "tiny.toml", "--preset", "M", "--seed", "7", "--out", out],
        dir,
    )
}

#[test]
fn missing_config_file_exits_2() {
    let dir = workspace();
    let o = gs4c(&["compress", "--synth", "spec.toml", "--config", "absent.toml", "--out", "x.gs4c"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!dir.path().join("x.gs4c").exists());
}

#[test]
fn unknown_config_keys_and_presets_exit_2() {
    let dir = workspace();
    std::fs::write(dir.path().join("typo.toml"), "[schedule]\nt_gss = 5\n").unwrap();
    let o = gs4c(&["compress", "--synth", "spec.toml", "--config", "typo.toml", "--out", "x.gs4c"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("schedule.t_gss"), "{}", stderr(&o));
    let o = gs4c(&["compress", "--synth", "spec.toml", "--preset", "XL", "--out", "x.gs4c"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn degenerate_schedule_produces_a_container_and_reports_psnr() {
    let dir = workspace();
    let o = gs4c(
        &["compress", "--synth", "spec.toml", "--config", "zero.toml", "--out", "z.gs4c"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let last = out.lines().last().unwrap();
    assert!(last.starts_with("PSNR ") && last.contains("Gaussians") && last.contains("MB"), "{last}");
    let model = read_container(&dir.path().join("z.gs4c")).unwrap();
    let reports: Vec<serde_json::Value> = out
        .lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(reports.len(), 3);
    assert!(reports[2]["psnr"].as_f64().unwrap().is_finite());
    // Sampling keeps 20% of 200, pruning keeps fewer still.
    assert_eq!(reports[0]["gaussians"], 40);
    assert_eq!(reports[2]["gaussians"].as_u64().unwrap(), model.count as u64);
    assert!(model.count < 40);
}

#[test]
fn same_seed_gives_identical_containers() {
    let dir = workspace();
    assert_eq!(code(&compress_tiny(dir.path(), "a.gs4c")), 0);
    assert_eq!(code(&compress_tiny(dir.path(), "b.gs4c")), 0);
    let a = std::fs::read(dir.path().join("a.gs4c")).unwrap();
    let b = std::fs::read(dir.path().join("b.gs4c")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn decompressed_model_renders_like_the_container() {
    let dir = workspace();
    let o = compress_tiny(dir.path(), "m.gs4c");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = gs4c(&["decompress", "m.gs4c", "m.ply"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let parts = unpack(&read_container(&dir.path().join("m.gs4c")).unwrap()).unwrap();
    let direct: GaussianCloud<f64> = parts.to_cloud().unwrap();
    let app = parts.appearance.as_ref().map(|m| m.cast::<f64>());
    let ply: GaussianCloud<f64> = load_ply(dir.path().join("m.ply")).unwrap();
    let mlp = std::fs::read(dir.path().join("m.mlp")).unwrap();
    let app2 = gs4c::appearance::AppearanceModel::<f32>::from_bytes(&mlp).unwrap().cast::<f64>();
    assert!(app.is_some());

    let cams = gs4c::synth::camera_ring(&toml::from_str(SPEC).unwrap());
    for (i, cam) in cams.iter().enumerate() {
        let t = i as f64 / 2.0;
        let a = render_view(&direct, cam, t, app.as_ref(), &RenderOptions::default()).unwrap().image;
        let b = render_view(&ply, cam, t, Some(&app2), &RenderOptions::default()).unwrap().image;
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn damaged_containers_exit_5() {
    let dir = workspace();
    assert_eq!(code(&compress_tiny(dir.path(), "m.gs4c")), 0);
    let bytes = std::fs::read(dir.path().join("m.gs4c")).unwrap();

    std::fs::write(dir.path().join("cut.gs4c"), &bytes[..bytes.len() / 2]).unwrap();
    let o = gs4c(&["decompress", "cut.gs4c", "cut.ply"], dir.path());
    assert_eq!(code(&o), 5, "{}", stderr(&o));

    let mut v2 = bytes.clone();
    v2[4..6].copy_from_slice(&2u16.to_le_bytes());
    std::fs::write(dir.path().join("v2.gs4c"), &v2).unwrap();
    let o = gs4c(&["decompress", "v2.gs4c", "v2.ply"], dir.path());
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("unknown version"), "{}", stderr(&o));

    let mut flipped = bytes;
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    std::fs::write(dir.path().join("flip.gs4c"), &flipped).unwrap();
    let o = gs4c(&["decompress", "flip.gs4c", "flip.ply"], dir.path());
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = workspace();
    for out in ["s1", "s2"] {
        let o = gs4c(&["synth", "--config", "spec.toml", "--seed", "11", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let mut names: Vec<_> = std::fs::read_dir(dir.path().join("s1"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 3 * 3 + 2);
    for n in names {
        let a = std::fs::read(dir.path().join("s1").join(&n)).unwrap();
        let b = std::fs::read(dir.path().join("s2").join(&n)).unwrap();
        assert_eq!(a, b, "{n:?}");
    }
}

#[test]
fn synth_into_unwritable_directory_exits_3() {
    let dir = workspace();
    std::fs::write(dir.path().join("blocker"), b"file").unwrap();
    let o = gs4c(&["synth", "--config", "spec.toml", "--out", "blocker/scene"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn eval_matches_an_independent_psnr() {
    let dir = workspace();
    assert_eq!(code(&gs4c(&["synth", "--config", "spec.toml", "--out", "scene"], dir.path())), 0);
    assert_eq!(code(&compress_tiny(dir.path(), "m.gs4c")), 0);
    let o = gs4c(&["eval", "--model", "m.gs4c", "--frames", "scene"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();

    let parts = unpack(&read_container(&dir.path().join("m.gs4c")).unwrap()).unwrap();
    let cloud: GaussianCloud<f64> = parts.to_cloud().unwrap();
    let app = parts.appearance.as_ref().map(|m| m.cast::<f64>());
    let set = FrameSet::<f64>::load(&dir.path().join("scene")).unwrap();
    let mut total = 0.0;
    for (i, f) in set.frames.iter().enumerate() {
        let img = render(&cloud, f, app.as_ref()).unwrap().image;
        let mut se = 0.0;
        for (a, b) in img.data.iter().zip(&f.image.data) {
            se += (a - b) * (a - b);
        }
        let mse = f64::max(se / img.data.len() as f64, 1e-10);
        let p = 10.0 * (1.0 / mse).log10();
        let got = report["frames"][i]["psnr"].as_f64().unwrap();
        assert!((got - p).abs() < 1e-9, "frame {i}: {got} vs {p}");
        total += p;
    }
    let mean = report["mean_psnr"].as_f64().unwrap();
    assert!((mean - total / set.frames.len() as f64).abs() < 1e-9);
}

#[test]
fn eval_with_mismatched_frame_size_exits_3() {
    let dir = workspace();
    assert_eq!(code(&gs4c(&["synth", "--config", "spec.toml", "--out", "scene"], dir.path())), 0);
    image::RgbImage::new(16, 16).save(dir.path().join("scene/f0001_c02.png")).unwrap();
    let o = gs4c(&["eval", "--model", "scene/truth.ply", "--frames", "scene"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn render_writes_one_image_per_view() {
    let dir = workspace();
    assert_eq!(code(&gs4c(&["synth", "--config", "spec.toml", "--out", "scene"], dir.path())), 0);
    let o = gs4c(
        &["render", "--model", "scene/truth.ply", "--frames", "scene", "--out", "r", "--raw"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["f0000_c00.png", "f0002_c02.png", "f0002_c02.f32"] {
        assert!(dir.path().join("r").join(name).exists(), "{name}");
    }
    // Re-rendering the truth reproduces the synthesized frame.
    let a = std::fs::read(dir.path().join("r/f0001_c01.png")).unwrap();
    let b = std::fs::read(dir.path().join("scene/f0001_c01.png")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_emits_one_csv_row_per_preset() {
    let dir = workspace();
    let o = gs4c(
        &["sweep", "--synth", "spec.toml", "--config", "tiny.toml", "--presets", "L,M", "--out", "rd.csv"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("rd.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["preset", "size_mb", "psnr", "count"]);
    assert_eq!(rows.len(), 3);
    assert_eq!((rows[1][0], rows[2][0]), ("L", "M"));
    let count = |r: &Vec<&str>| r[3].parse::<usize>().unwrap();
    assert!(count(&rows[2]) < count(&rows[1]));
}

#[test]
fn compress_never_touches_its_inputs() {
    let dir = workspace();
    assert_eq!(code(&gs4c(&["synth", "--config", "spec.toml", "--out", "scene"], dir.path())), 0);
    let before = std::fs::read(dir.path().join("scene/truth.ply")).unwrap();
    let o = gs4c(
        &["compress", "--input", "scene/truth.ply", "--frames", "scene", "--config", "tiny.toml", "--out", "scene/truth.ply"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    let o = gs4c(
        &["compress", "--input", "scene/truth.ply", "--frames", "scene", "--config", "tiny.toml", "--out", "c.gs4c"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("scene/truth.ply")).unwrap(), before);
}
