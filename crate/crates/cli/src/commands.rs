//! Pipeline stages. Each reads the previous stage's files and writes its own.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use safl_core::dataset::{
    format_pose_file, generate_synthetic_sequence, inject_viewpoint_noise, parse_pose_file, read_dataset,
    write_dataset, Pose,
};
use safl_core::eval::{
    compare_methods, evaluate, label_matches, write_pr_csv, write_roc_csv, EvalReport, MethodResult,
};
use safl_core::formats::{
    read_features, read_top_view, read_voxel_grid, write_difference_matrix, write_features, write_top_view,
    write_voxel_grid, FeatureMatrix,
};
use safl_core::mapper::{build_maps_from_viewpoints, TopViewImage, VoxelGrid3D};
use safl_core::matcher::{difference_matrix, read_matches_csv, sad_feature, sequence_match, write_matches_csv};
use safl_core::sync::{
    encode_all, infer_sequence, train_with, write_epoch_log, write_weight_history, DualBiGAN, Trainer,
    TrainerState, TrainingPair,
};

use crate::config::{ConfigError, RunConfig};
use crate::svg::{line_chart, Series};

const POSES: &str = "poses.txt";
const TRAINER_STATE: &str = "trainer.toml";

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seq = generate_synthetic_sequence(&cfg.world)?;
    write_dataset(out, &seq).with_context(|| format!("writing dataset to {}", out.display()))?;
    println!("wrote {} frames to {}", seq.clouds.len(), out.display());
    Ok(())
}

/// Extraction viewpoints: true poses before `first_frame`, perturbed after.
fn viewpoints(cfg: &RunConfig, poses: &[Pose]) -> Vec<Pose> {
    let noisy = inject_viewpoint_noise(poses, &cfg.noise.spec());
    poses
        .iter()
        .zip(noisy)
        .enumerate()
        .map(|(k, (p, n))| if k < cfg.noise.first_frame { *p } else { n })
        .collect()
}

pub fn extract(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let seq = read_dataset(input).with_context(|| format!("reading dataset {}", input.display()))?;
    fs::create_dir_all(out)?;
    let views = viewpoints(cfg, &seq.poses);
    let frames: Vec<_> = seq.clouds.into_iter().zip(seq.poses.iter().copied()).collect();
    let start = Instant::now();
    let maps = build_maps_from_viewpoints(&frames, &views, &cfg.octree, &cfg.extraction)?;
    let secs = start.elapsed().as_secs_f64();
    for (k, (grid, top)) in maps.iter().enumerate() {
        let mut w = create(&out.join(format!("{k:06}.vox")))?;
        write_voxel_grid(&mut w, grid)?;
        w.flush()?;
        let mut w = create(&out.join(format!("{k:06}.top")))?;
        write_top_view(&mut w, top)?;
        w.flush()?;
    }
    fs::write(out.join(POSES), format_pose_file(&seq.poses))?;
    if !maps.is_empty() {
        println!(
            "extracted {} frames at {:.1} Hz (target 7-10 Hz)",
            maps.len(),
            maps.len() as f64 / secs.max(1e-9)
        );
    } else {
        println!("extracted 0 frames");
    }
    Ok(())
}

fn frame_count(dir: &Path) -> Result<usize> {
    let mut n = 0;
    while dir.join(format!("{n:06}.vox")).exists() {
        n += 1;
    }
    Ok(n)
}

pub fn read_maps(dir: &Path) -> Result<Vec<(VoxelGrid3D, TopViewImage)>> {
    (0..frame_count(dir)?)
        .map(|k| {
            let vp = dir.join(format!("{k:06}.vox"));
            let tp = dir.join(format!("{k:06}.top"));
            let g = read_voxel_grid(&mut open(&vp)?).with_context(|| format!("reading {}", vp.display()))?;
            let t = read_top_view(&mut open(&tp)?).with_context(|| format!("reading {}", tp.display()))?;
            Ok((g, t))
        })
        .collect()
}

fn save_checkpoint(model: &DualBiGAN, trainer: &Trainer, out: &Path) -> safl_core::Result<()> {
    model.save(out)?;
    let state = toml::to_string(&trainer.state())
        .map_err(|e| safl_core::Error::InvalidConfig(format!("trainer state: {e}")))?;
    fs::write(out.join(TRAINER_STATE), state)?;
    Ok(())
}

pub fn train(cfg: &RunConfig, input: &Path, out: &Path, resume: bool, jobs: usize) -> Result<()> {
    let maps = read_maps(input)?;
    if maps.is_empty() {
        bail!(ConfigError(format!("no maps found in {}", input.display())));
    }
    let pairs: Vec<TrainingPair> = maps
        .iter()
        .enumerate()
        .map(|(i, (g, t))| TrainingPair { id: i, map3d: g.to_f32(), map2d: t.pixels.clone() })
        .collect();
    let mut tcfg = cfg.training.clone();
    tcfg.parallel_branches &= jobs >= 2;
    fs::create_dir_all(out)?;
    let (mut model, mut trainer) = if resume && out.join(TRAINER_STATE).exists() {
        let state: TrainerState = toml::from_str(&fs::read_to_string(out.join(TRAINER_STATE))?)
            .map_err(|e| ConfigError(format!("trainer state: {e}")))?;
        if state.weights.len() != pairs.len() {
            bail!(ConfigError(format!(
                "trainer state covers {} samples, found {} maps",
                state.weights.len(),
                pairs.len()
            )));
        }
        (DualBiGAN::load(out, tcfg.adam())?, Trainer::from_state(&state, tcfg.seed))
    } else {
        (
            DualBiGAN::new(cfg.architecture.map2d.clone(), cfg.architecture.map3d.clone(), tcfg.seed, tcfg.adam())?,
            Trainer::new(pairs.len(), tcfg.seed),
        )
    };
    let start = trainer.epochs_done;
    let remaining = tcfg.epochs.saturating_sub(start);
    let run = safl_core::sync::TrainConfig { epochs: remaining, ..tcfg };
    let every = cfg.schedule.checkpoint_every;
    let log = train_with(&mut trainer, &pairs, &mut model, &run, |stats, m, t| {
        println!(
            "epoch {:>3}  V3d {:+.4}  V2d {:+.4}",
            stats.epoch, stats.value3d.v, stats.value2d.v
        );
        if every > 0 && (stats.epoch + 1) % every == 0 {
            save_checkpoint(m, t, out)?;
        }
        Ok(())
    })?;
    save_checkpoint(&model, &trainer, out)?;
    append_logs(out, &log, resume.then_some(start))?;
    Ok(())
}

/// Weight history and value estimates as CSV; a resumed run (`resumed_at`
/// epochs already done) appends its rows.
fn append_logs(out: &Path, log: &safl_core::sync::TrainLog, resumed_at: Option<usize>) -> Result<()> {
    let mut buf = Vec::new();
    write_weight_history(&mut buf, &log.weight_history)?;
    let mut ebuf = Vec::new();
    write_epoch_log(&mut ebuf, &log.epochs)?;
    let (wpath, epath) = (out.join("weights.csv"), out.join("epochs.csv"));
    match resumed_at {
        Some(start) if wpath.exists() && epath.exists() => {
            let text = String::from_utf8_lossy(&buf);
            let rows: String = text
                .lines()
                .skip(2)
                .enumerate()
                .map(|(k, l)| format!("{},{}\n", start + k + 1, l.split_once(',').map_or("", |(_, r)| r)))
                .collect();
            fs::OpenOptions::new().append(true).open(&wpath)?.write_all(rows.as_bytes())?;
            let text = String::from_utf8_lossy(&ebuf);
            let rows: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
            fs::OpenOptions::new().append(true).open(&epath)?.write_all(rows.as_bytes())?;
        }
        _ => {
            fs::write(wpath, buf)?;
            fs::write(epath, ebuf)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FeatureKind {
    /// Stitched 2D and 3D codes.
    Mix,
    Map2d,
    Map3d,
    /// Patch-normalized top views, no model needed.
    Sad,
}

pub fn infer(cfg: &RunConfig, input: &Path, model_dir: Option<&Path>, kind: FeatureKind, out: &Path) -> Result<()> {
    let maps = read_maps(input)?;
    let load = || -> Result<DualBiGAN> {
        let dir = model_dir.context("--model is required for learned features")?;
        Ok(DualBiGAN::load(dir, cfg.training.adam()).with_context(|| format!("loading model {}", dir.display()))?)
    };
    let features = match kind {
        FeatureKind::Sad => {
            let rows = maps
                .iter()
                .map(|(_, t)| sad_feature(t, 1))
                .collect::<safl_core::Result<Vec<_>>>()?;
            let dim = rows.first().map_or(0, Vec::len);
            FeatureMatrix::from_rows(dim, &rows)?
        }
        FeatureKind::Mix => {
            let model = load()?;
            let pairs: Vec<(Vec<f32>, Vec<f32>)> = maps.iter().map(|(g, t)| (g.to_f32(), t.pixels.clone())).collect();
            let (f, lat) = infer_sequence(&model, &pairs)?;
            println!(
                "per-frame latency: 3D {:.3} ms, 2D {:.3} ms, stitch {:.4} ms",
                lat.encode3d_ms, lat.encode2d_ms, lat.stitch_ms
            );
            f
        }
        FeatureKind::Map2d => {
            let model = load()?;
            let tops: Vec<&[f32]> = maps.iter().map(|(_, t)| t.pixels.as_slice()).collect();
            encode_all(&model.b2d, &tops, 16)?
        }
        FeatureKind::Map3d => {
            let model = load()?;
            let grids: Vec<Vec<f32>> = maps.iter().map(|(g, _)| g.to_f32()).collect();
            let refs: Vec<&[f32]> = grids.iter().map(Vec::as_slice).collect();
            encode_all(&model.b3d, &refs, 16)?
        }
    };
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = create(out)?;
    write_features(&mut w, &features)?;
    w.flush()?;
    println!("wrote {} features of dimension {} to {}", features.count(), features.dim, out.display());
    Ok(())
}

pub fn match_features(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let all = read_features(&mut open(input)?).with_context(|| format!("reading {}", input.display()))?;
    let split = cfg.matching.split.min(all.count());
    let rows: Vec<Vec<f32>> = all.rows().map(<[f32]>::to_vec).collect();
    let refs = FeatureMatrix::from_rows(all.dim, &rows[..split])?;
    let queries = FeatureMatrix::from_rows(all.dim, &rows[split..])?;
    let dm = difference_matrix(&queries, &refs, cfg.matching.metric.into())?;
    let matches = sequence_match(&dm, &cfg.matching.sequence)?;
    fs::create_dir_all(out)?;
    let mut w = create(&out.join("matches.csv"))?;
    write_matches_csv(&mut w, &matches)?;
    w.flush()?;
    let mut w = create(&out.join("difference.bin"))?;
    write_difference_matrix(&mut w, &dm)?;
    w.flush()?;
    let n = matches.iter().filter(|q| q.matched().is_some()).count();
    println!("{n} of {} queries matched against {split} references", queries.count());
    Ok(())
}

/// `name=path` pairs; a bare path is named after its parent directory.
pub fn parse_named(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(arg);
            let name = p
                .parent()
                .and_then(|d| d.file_name())
                .map_or_else(|| "method".to_string(), |s| s.to_string_lossy().into_owned());
            (name, p)
        }
    }
}

pub fn eval(
    cfg: &RunConfig,
    inputs: &[(String, PathBuf)],
    poses_path: &Path,
    baseline: &str,
    setting: &str,
    out: &Path,
) -> Result<()> {
    let poses = parse_pose_file(&fs::read_to_string(poses_path).with_context(|| format!("reading {}", poses_path.display()))?)
        .with_context(|| format!("parsing {}", poses_path.display()))?;
    let split = cfg.matching.split.min(poses.len());
    let (refs, queries) = poses.split_at(split);
    fs::create_dir_all(out)?;
    let mut results = Vec::new();
    let mut reports = Vec::new();
    for (name, path) in inputs {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let proposals = read_matches_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
        let labeled = label_matches(&proposals, queries, refs, &cfg.evaluation)?;
        let report = evaluate(&labeled.matches, &cfg.evaluation).with_context(|| format!("evaluating {name}"))?;
        let mut w = create(&out.join(format!("{name}_pr.csv")))?;
        write_pr_csv(&mut w, &report, &cfg.evaluation)?;
        w.flush()?;
        let mut w = create(&out.join(format!("{name}_roc.csv")))?;
        write_roc_csv(&mut w, &report, &cfg.evaluation)?;
        w.flush()?;
        println!(
            "{name}: AUC {:.4}, recall at 100% precision {:.4}",
            report.auc, report.recall_at_full_precision
        );
        results.push(MethodResult::new(name, setting, &report));
        reports.push((name.clone(), report));
    }
    fs::write(
        out.join("summary.csv"),
        compare_methods(&results, baseline, cfg.evaluation.d_thresh),
    )?;
    write_plots(&reports, out)?;
    Ok(())
}

fn write_plots(reports: &[(String, EvalReport)], out: &Path) -> Result<()> {
    let pr: Vec<Series> = reports
        .iter()
        .map(|(n, r)| Series { name: n.clone(), points: r.pr_curve.iter().map(|&(p, rc)| (rc, p)).collect() })
        .collect();
    let roc: Vec<Series> = reports
        .iter()
        .map(|(n, r)| Series { name: format!("{n} ({:.3})", r.auc), points: r.roc_curve.clone() })
        .collect();
    fs::write(out.join("pr.svg"), line_chart("Precision-recall", "recall", "precision", &pr))?;
    fs::write(out.join("roc.svg"), line_chart("ROC", "false positive rate", "true positive rate", &roc))?;
    Ok(())
}

/// Parses one curve CSV written by `eval`: `(x, y)` taken from the given
/// column indices.
fn read_curve(path: &Path, x: usize, y: usize) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("threshold") || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let get = |k: usize| -> Result<f64> {
            cells
                .get(k)
                .and_then(|c| c.trim().parse().ok())
                .with_context(|| format!("{} line {}: bad number", path.display(), i + 1))
        };
        pts.push((get(x)?, get(y)?));
    }
    Ok(pts)
}

/// Re-renders PR and ROC charts from the curve CSVs in a report directory.
pub fn plot(input: &Path, out: &Path) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(input)
        .with_context(|| format!("listing {}", input.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_pr.csv")).map(str::to_string))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!(ConfigError(format!("no *_pr.csv curves in {}", input.display())));
    }
    let mut pr = Vec::new();
    let mut roc = Vec::new();
    for n in &names {
        let p = read_curve(&input.join(format!("{n}_pr.csv")), 2, 1)?;
        pr.push(Series { name: n.clone(), points: p });
        let mut r = vec![(0.0, 0.0)];
        r.extend(read_curve(&input.join(format!("{n}_roc.csv")), 1, 2)?);
        r.push((1.0, 1.0));
        roc.push(Series { name: n.clone(), points: r });
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("pr.svg"), line_chart("Precision-recall", "recall", "precision", &pr))?;
    fs::write(out.join("roc.svg"), line_chart("ROC", "false positive rate", "true positive rate", &roc))?;
    println!("plotted {} methods into {}", names.len(), out.display());
    Ok(())
}
