use std::path::Path;
use std::process::{Command, Output};

use mmdrive::numerics::Matrix;
use mmdrive::pipeline::{read_feature, write_feature, FeatureHeader, FeatureModality, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mmdrive(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmdrive")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_CONFIG: &str = "seed = 3\n\n[optimizer]\nepochs = 2\n\n[task]\ntrain_samples = 12\ntest_samples = 6\n";

fn write_sample(dir: &Path) {
    let d = RunConfig::default().dims;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (m, rows, cols) in [
        (FeatureModality::Image, d.image_tokens, d.latent),
        (FeatureModality::Lidar, d.lidar_tokens, d.lidar),
        (FeatureModality::Occ, d.occ_tokens, d.occ),
        (FeatureModality::Desc, d.desc_tokens, d.desc),
        (FeatureModality::Question, d.question_tokens, d.question),
    ] {
        let x = Matrix::random_normal(rows, cols, 0.0, 1.0, &mut rng);
        let path = dir.join(format!("{}.mmdf", m.file_stem()));
        write_feature(&path, &FeatureHeader::new(m, "fixture-0", x.shape()), &x).unwrap();
    }
}

#[test]
fn gradcheck_passes_for_seed_seven() {
    let o = mmdrive(&["gradcheck", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    let err: f64 = last.strip_prefix("max rel error ").unwrap().parse().unwrap();
    assert!(err < 1e-6);
}

#[test]
fn usage_errors_exit_two() {
    let o = mmdrive(&["gradcheck", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(mmdrive(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(mmdrive(&["ablate", "--groups", "colors"]).status.code(), Some(2));
    assert_eq!(mmdrive(&["describe", "--views-dir", ".", "--mock", "--replay", "x.json"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.xyz");
    let out = dir.path().join("out.xyz");
    let o = mmdrive(&["normals", "--input", p(&missing), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = mmdrive(&["describe", "--views-dir", p(&missing), "--mock"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mmdrive(&["fuse", "--sample-dir", p(dir.path()), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fuse_writes_weights_that_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let sample = dir.path().join("sample");
    std::fs::create_dir(&sample).unwrap();
    write_sample(&sample);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = mmdrive(&["fuse", "--sample-dir", p(&sample), "--out", p(&a)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let d = RunConfig::default();
    let rows = d.dims.question_tokens + d.cma.num_tokens + d.dims.image_tokens + 6;
    assert!(text.contains(&format!("sequence rows {rows}")), "{text}");

    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("weights.json")).unwrap()).unwrap();
    let w = &summary["weights"];
    let ws = [w["lidar"].as_f64().unwrap(), w["occ"].as_f64().unwrap(), w["desc"].as_f64().unwrap()];
    assert!(ws.iter().all(|v| *v >= 0.0));
    assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let (h, f_a) = read_feature(&a.join("abstract.mmdf")).unwrap();
    assert_eq!(h.modality, FeatureModality::Abstract);
    assert_eq!(h.sample_id, "fixture-0");
    assert_eq!(f_a.shape(), (d.cma.num_tokens, d.dims.latent));
    let (_, fused) = read_feature(&a.join("fused.mmdf")).unwrap();
    assert_eq!(fused.shape(), (d.dims.image_tokens, d.dims.latent));

    let again = mmdrive(&["fuse", "--sample-dir", p(&sample), "--out", p(&b)]);
    assert_eq!(stdout(&again), text);
    for f in ["weights.json", "fused.mmdf", "abstract.mmdf"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn fuse_with_trained_params() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let model = dir.path().join("model.json");
    let o = mmdrive(&["train-toy", "--config", p(&cfg), "--model-out", p(&model)]);
    assert_eq!(o.status.code(), Some(0));
    let sample = dir.path().join("sample");
    std::fs::create_dir(&sample).unwrap();
    write_sample(&sample);
    let out = dir.path().join("out");
    let o = mmdrive(&["fuse", "--config", p(&cfg), "--sample-dir", p(&sample), "--out", p(&out), "--params", p(&model)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("omega lidar"));
}

#[test]
fn ablate_token_grid_reports_k_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let report = dir.path().join("report.json");
    let o = mmdrive(&["ablate", "--config", p(&cfg), "--groups", "tokens", "--report", p(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 5);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let rows = r["rows"].as_array().unwrap();
    let ks: Vec<(u64, u64)> = rows
        .iter()
        .map(|row| (row["num_tokens"].as_u64().unwrap(), row["abstract_rows"].as_u64().unwrap()))
        .collect();
    assert_eq!(ks, vec![(8, 8), (16, 16), (24, 24), (32, 32)]);
}

#[test]
fn train_toy_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let run = |name: &str| {
        let report = dir.path().join(name);
        let o = mmdrive(&["train-toy", "--config", p(&cfg), "--seed", "5", "--report", p(&report)]);
        assert_eq!(o.status.code(), Some(0));
        (stdout(&o), std::fs::read(report).unwrap())
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn normals_on_a_planar_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("plane.xyz");
    let mut text = String::new();
    for i in 0..6 {
        for j in 0..6 {
            text.push_str(&format!("{} {} 2.5\n", i as f64 * 0.3, j as f64 * 0.3));
        }
    }
    std::fs::write(&input, text).unwrap();
    for oracle in [false, true] {
        let out = dir.path().join(format!("n{oracle}.xyz"));
        let mut args = vec!["normals", "--input", p(&input), "--output", p(&out), "--radius", "1.0"];
        if oracle {
            args.push("--oracle");
        }
        let o = mmdrive(&args);
        assert_eq!(o.status.code(), Some(0));
        assert!(stdout(&o).contains("points 36  invalid 0"));
        for line in std::fs::read_to_string(&out).unwrap().lines() {
            let v: Vec<f64> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
            assert_eq!(v.len(), 6);
            assert!(v[3].abs() < 1e-9 && v[4].abs() < 1e-9 && (v[5].abs() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn describe_mock_is_run_to_run_identical() {
    let views = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/views");
    let a = mmdrive(&["describe", "--views-dir", p(&views), "--mock"]);
    let b = mmdrive(&["describe", "--views-dir", p(&views), "--mock"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let doc: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(doc["views"].as_array().unwrap().len(), 6);

    let transcript = views.parent().unwrap().join("views_transcript.json");
    let r = mmdrive(&["describe", "--views-dir", p(&views), "--replay", p(&transcript)]);
    assert_eq!(r.status.code(), Some(0));
    assert_eq!(r.stdout, std::fs::read(views.parent().unwrap().join("views_scene.json")).unwrap());
}
