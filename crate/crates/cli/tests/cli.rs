use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use safl_core::dataset::{generate_synthetic_sequence, read_dataset, SyntheticWorldSpec};
use safl_core::formats::{read_features, read_top_view, read_voxel_grid, HEADER_LEN};
use safl_core::mapper::{build_maps_from_viewpoints, ExtractionConfig, OctreeConfig};
use tempfile::TempDir;

const SMALL: &str = r#"
[world]
n_frames = 24
loop_segments = [{ query = { start = 16, end = 24 }, reference = { start = 2, end = 10 } }]

[world.scan]
beams = 8
azimuth_steps = 120

[extraction]
grid_size = 16
top_height = 16
top_width = 16

[architecture.map2d]
input_size = 16
latent_dim = 8
channels = [4, 8]
code_hidden = 16
joint_hidden = 16

[architecture.map3d]
input_size = 16
latent_dim = 8
channels = [2, 4]
code_hidden = 16
joint_hidden = 16

[training]
epochs = 2
batch_size = 4

[matching]
split = 12

[matching.sequence]
ds = 3
exclusion_window = 4
"#;

fn safl(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_safl"))
        .args(args)
        .env_remove("SAFL_CONFIG")
        .output()
        .expect("spawn safl");
    out
}

fn ok(args: &[&str]) -> Output {
    let out = safl(args);
    assert!(
        out.status.success(),
        "safl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{SMALL}\n{extra}")).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                v.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    v.sort();
    v
}

#[test]
fn synth_with_no_frames_writes_an_empty_dataset() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("empty.toml");
    fs::write(&cfg, "[world]\nn_frames = 0\nloop_segments = []\n").unwrap();
    let out = tmp.path().join("ds");
    ok(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    let seq = read_dataset(&out).unwrap();
    assert!(seq.clouds.is_empty() && seq.poses.is_empty());
}

#[test]
fn synth_is_byte_identical_across_runs_and_round_trips() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(files(&a), files(&b));

    let c = tmp.path().join("c");
    ok(&["synth", "--config", s(&cfg), "--seed", "99", "--out", s(&c)]);
    assert_ne!(files(&a), files(&c));

    let spec: SyntheticWorldSpec = {
        let text = fs::read_to_string(&cfg).unwrap();
        let doc: toml::Table = toml::from_str(&text).unwrap();
        doc["world"].clone().try_into().unwrap()
    };
    let expected = generate_synthetic_sequence(&spec).unwrap();
    let read = read_dataset(&a).unwrap();
    assert_eq!(read.poses.len(), 24);
    for (p, q) in read.poses.iter().zip(&expected.poses) {
        assert!((p.translation - q.translation).norm() < 1e-9);
    }
    for (c1, c2) in read.clouds.iter().zip(&expected.clouds) {
        assert_eq!(c1.len(), c2.len());
    }
}

#[test]
fn extract_matches_in_process_extraction() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let ds = tmp.path().join("ds");
    let maps = tmp.path().join("maps");
    ok(&["synth", "--config", s(&cfg), "--out", s(&ds)]);
    ok(&["extract", "--config", s(&cfg), "--input", s(&ds), "--out", s(&maps)]);

    let seq = read_dataset(&ds).unwrap();
    let frames: Vec<_> = seq.clouds.into_iter().zip(seq.poses.iter().copied()).collect();
    let extraction = ExtractionConfig { grid_size: 16, top_height: 16, top_width: 16, ..Default::default() };
    let expected = build_maps_from_viewpoints(&frames, &seq.poses, &OctreeConfig::default(), &extraction).unwrap();
    assert_eq!(expected.len(), 24);
    for k in [0, 11, 23] {
        let g = read_voxel_grid(&mut fs::File::open(maps.join(format!("{k:06}.vox"))).unwrap()).unwrap();
        let t = read_top_view(&mut fs::File::open(maps.join(format!("{k:06}.top"))).unwrap()).unwrap();
        assert_eq!(g.occupancy, expected[k].0.occupancy, "frame {k}");
        assert_eq!(t.pixels, expected[k].1.pixels, "frame {k}");
    }
    assert!(maps.join("poses.txt").exists());
}

#[test]
fn train_checkpoints_and_resumes() {
    let tmp = TempDir::new().unwrap();
    let cfg0 = write_config(tmp.path(), "");
    let ds = tmp.path().join("ds");
    let maps = tmp.path().join("maps");
    let model = tmp.path().join("model");
    ok(&["synth", "--config", s(&cfg0), "--out", s(&ds)]);
    ok(&["extract", "--config", s(&cfg0), "--input", s(&ds), "--out", s(&maps)]);

    let zero = tmp.path().join("zero.toml");
    fs::write(&zero, SMALL.replace("epochs = 2", "epochs = 0")).unwrap();
    ok(&["train", "--config", s(&zero), "--input", s(&maps), "--out", s(&model)]);
    let state = fs::read_to_string(model.join("trainer.toml")).unwrap();
    assert!(state.contains("epochs_done = 0"), "{state}");

    let one = tmp.path().join("one.toml");
    fs::write(&one, SMALL.replace("epochs = 2", "epochs = 1")).unwrap();
    ok(&["train", "--config", s(&one), "--input", s(&maps), "--out", s(&model)]);
    assert!(fs::read_to_string(model.join("trainer.toml")).unwrap().contains("epochs_done = 1"));

    ok(&["train", "--config", s(&cfg0), "--input", s(&maps), "--out", s(&model), "--resume"]);
    assert!(fs::read_to_string(model.join("trainer.toml")).unwrap().contains("epochs_done = 2"));
    let weights = fs::read_to_string(model.join("weights.csv")).unwrap();
    let epochs: Vec<&str> = weights.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["0", "1", "2"], "{weights}");
}

#[test]
fn feature_file_size_and_empty_match() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("full.toml");
    fs::write(
        &cfg,
        "[world]\nn_frames = 3\nloop_segments = []\n[world.scan]\nbeams = 4\nazimuth_steps = 60\n[training]\nepochs = 0\n",
    )
    .unwrap();
    let ds = tmp.path().join("ds");
    let maps = tmp.path().join("maps");
    let model = tmp.path().join("model");
    let feats = tmp.path().join("f.bin");
    ok(&["synth", "--config", s(&cfg), "--out", s(&ds)]);
    ok(&["extract", "--config", s(&cfg), "--input", s(&ds), "--out", s(&maps)]);
    ok(&["train", "--config", s(&cfg), "--input", s(&maps), "--out", s(&model)]);
    ok(&["infer", "--config", s(&cfg), "--input", s(&maps), "--model", s(&model), "--out", s(&feats)]);
    let bytes = fs::read(&feats).unwrap();
    assert_eq!(bytes.len(), HEADER_LEN + 8 + 3 * 4096);
    let f = read_features(&mut bytes.as_slice()).unwrap();
    assert_eq!((f.count(), f.dim), (3, 1024));

    // split 100 > 3 frames: every frame is a reference and no query remains.
    let m = tmp.path().join("m");
    ok(&["match", "--config", s(&cfg), "--input", s(&feats), "--out", s(&m)]);
    let csv = fs::read_to_string(m.join("matches.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1, "{csv}");
}

#[test]
fn full_small_pipeline_beats_chance() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let p = |n: &str| tmp.path().join(n);
    ok(&["synth", "--config", s(&cfg), "--out", s(&p("ds"))]);
    ok(&["extract", "--config", s(&cfg), "--input", s(&p("ds")), "--out", s(&p("maps"))]);
    ok(&["train", "--config", s(&cfg), "--input", s(&p("maps")), "--out", s(&p("model")), "--jobs", "2"]);
    for kind in ["mix", "sad"] {
        let f = p(&format!("{kind}.bin"));
        ok(&[
            "infer", "--config", s(&cfg), "--input", s(&p("maps")), "--model", s(&p("model")),
            "--features", kind, "--out", s(&f),
        ]);
        ok(&["match", "--config", s(&cfg), "--input", s(&f), "--out", s(&p(&format!("m_{kind}")))]);
    }
    let mix = format!("mix={}", s(&p("m_mix").join("matches.csv")));
    let sad = format!("sad={}", s(&p("m_sad").join("matches.csv")));
    let poses = p("maps").join("poses.txt");
    ok(&["eval", "--config", s(&cfg), "--input", &mix, "--input", &sad, "--poses", s(&poses), "--out", s(&p("report"))]);

    let summary = fs::read_to_string(p("report").join("summary.csv")).unwrap();
    let auc = |name: &str| -> f64 {
        let header: Vec<&str> = summary.lines().find(|l| l.starts_with("method,")).unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "auc").expect("auc column");
        let row = summary.lines().find(|l| l.starts_with(&format!("{name},"))).expect("method row");
        row.split(',').nth(col).unwrap().parse().unwrap()
    };
    assert!(auc("mix") > 0.5, "{summary}");
    assert!(auc("sad") > 0.5, "{summary}");
    for f in ["mix_pr.csv", "mix_roc.csv", "sad_pr.csv", "pr.svg", "roc.svg"] {
        assert!(p("report").join(f).exists(), "{f}");
    }

    ok(&["plot", "--input", s(&p("report")), "--out", s(&p("plots"))]);
    let svg = fs::read_to_string(p("plots").join("roc.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("mix") && svg.contains("sad"));
}

#[test]
fn exit_codes_classify_failures() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[octree]\nleaf_res = 0.2\n").unwrap();
    let out = safl(&["synth", "--config", s(&bad), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("leaf_res"));

    let invalid = tmp.path().join("invalid.toml");
    fs::write(&invalid, "[training]\nbatch_size = 0\n").unwrap();
    assert_eq!(safl(&["synth", "--config", s(&invalid)]).status.code(), Some(2));

    let env = Command::new(env!("CARGO_BIN_EXE_safl"))
        .args(["synth", "--out", s(&tmp.path().join("y"))])
        .env("SAFL_CONFIG", &bad)
        .output()
        .unwrap();
    assert_eq!(env.status.code(), Some(2));

    let missing = safl(&["extract", "--input", s(&tmp.path().join("nope")), "--out", s(&tmp.path().join("z"))]);
    assert_eq!(missing.status.code(), Some(3), "{}", String::from_utf8_lossy(&missing.stderr));

    let junk = tmp.path().join("junk.bin");
    fs::write(&junk, b"not a feature file").unwrap();
    let malformed = safl(&["match", "--input", s(&junk), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(malformed.status.code(), Some(4));
}
