//! Synchronous training of the 2D and 3D branches with unfamiliarity-driven
//! sample reweighting, and mixture-feature inference.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safl_autodiff::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::bigan::{stitch, BiGANBranch, BranchArchitecture, ValueEstimate};
use crate::error::{Error, Result};
use crate::formats::FeatureMatrix;

/// One aligned training sample: flattened 3D voxel grid and 2D top view of
/// the same frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub id: usize,
    pub map3d: Vec<f32>,
    pub map2d: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnfamiliarityRecord {
    pub u: f64,
    pub d3d: f64,
    pub d2d: f64,
}

/// Reciprocal of the mean discriminator value, with both values clamped to
/// `[eps, 1 - eps]`.
pub fn unfamiliarity(d3d: f64, d2d: f64, eps: f64) -> f64 {
    let a = d3d.clamp(eps, 1.0 - eps);
    let b = d2d.clamp(eps, 1.0 - eps);
    2.0 / (a + b)
}

pub fn unfamiliarity_record(d3d: f64, d2d: f64, eps: f64) -> UnfamiliarityRecord {
    UnfamiliarityRecord {
        u: unfamiliarity(d3d, d2d, eps),
        d3d: d3d.clamp(eps, 1.0 - eps),
        d2d: d2d.clamp(eps, 1.0 - eps),
    }
}

/// Softmax of the unfamiliarities, shifted by their maximum.
pub fn reweight(u: &[f64]) -> Vec<f64> {
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reweighting {
    /// Draw `N` samples with replacement from the weights each epoch.
    #[default]
    Resample,
    /// Visit every sample once per epoch and scale its loss by `N·W_i`.
    LossScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    /// Consecutive drawn samples form the mini-batches.
    #[default]
    Grouped,
    /// Every drawn sample gets its own mini-batch, filled up with further
    /// draws from the same weights.
    Fill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub batch_mode: BatchMode,
    pub reweighting: Reweighting,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Run the 2D and 3D updates of a batch on two threads.
    pub parallel_branches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            batch_mode: BatchMode::Grouped,
            reweighting: Reweighting::Resample,
            seed: 0,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            parallel_branches: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("optimizer settings out of range".into()));
        }
        Ok(())
    }
}

/// The two branches trained together.
#[derive(Debug, Clone)]
pub struct DualBiGAN {
    pub b2d: BiGANBranch<f32>,
    pub b3d: BiGANBranch<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub epochs_done: usize,
    pub weights: Vec<f64>,
    /// Last unfamiliarity per sample; NaN where none was recorded yet.
    pub unfamiliarity: Vec<f64>,
}

impl DualBiGAN {
    pub fn new(arch2d: BranchArchitecture, arch3d: BranchArchitecture, seed: u64, adam: AdamConfig) -> Result<Self> {
        Ok(Self {
            b2d: BiGANBranch::new(arch2d, seed.wrapping_mul(2).wrapping_add(1), adam)?,
            b3d: BiGANBranch::new(arch3d, seed.wrapping_mul(2).wrapping_add(2), adam)?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.b2d.latent_dim() + self.b3d.latent_dim()
    }

    /// Writes `branch2d.ckpt`, `branch3d.ckpt` and their architecture sidecars.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (tag, b) in [("branch2d", &self.b2d), ("branch3d", &self.b3d)] {
            let mut buf = Vec::new();
            b.save_checkpoint(&mut buf)?;
            fs::write(dir.join(format!("{tag}.ckpt")), buf)?;
            fs::write(dir.join(format!("{tag}.toml")), b.arch.to_sidecar())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, adam: AdamConfig) -> Result<Self> {
        let load = |tag: &str| -> Result<BiGANBranch<f32>> {
            let arch = BranchArchitecture::from_sidecar(&fs::read_to_string(dir.join(format!("{tag}.toml")))?)?;
            let bytes = fs::read(dir.join(format!("{tag}.ckpt")))?;
            BiGANBranch::load_checkpoint(arch, adam, &mut bytes.as_slice())
        };
        Ok(Self {
            b2d: load("branch2d")?,
            b3d: load("branch3d")?,
        })
    }
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub value3d: ValueEstimate,
    pub value2d: ValueEstimate,
    /// Number of times each sample was trained on.
    pub draws: Vec<usize>,
    /// Weights after the end-of-epoch reweighting.
    pub weights: Vec<f64>,
}

fn validate_pairs(pairs: &[TrainingPair], model: &DualBiGAN) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one pair".into()));
    }
    let (n3, n2) = (model.b3d.arch.input_len(), model.b2d.arch.input_len());
    for p in pairs {
        if p.map3d.len() != n3 || p.map2d.len() != n2 {
            return Err(Error::ShapeMismatch(format!(
                "pair {} has map sizes ({}, {}), branches expect ({n3}, {n2})",
                p.id,
                p.map3d.len(),
                p.map2d.len()
            )));
        }
    }
    Ok(())
}

fn mean_estimate(v: &[ValueEstimate]) -> ValueEstimate {
    let n = v.len().max(1) as f64;
    ValueEstimate {
        v: v.iter().map(|e| e.v).sum::<f64>() / n,
        d_real_mean: v.iter().map(|e| e.d_real_mean).sum::<f64>() / n,
        d_fake_mean: v.iter().map(|e| e.d_fake_mean).sum::<f64>() / n,
    }
}

/// One discriminator step then one generator step on a batch, followed by
/// `D(x, En x)` for the first `report` maps.
fn update_branch(
    b: &mut BiGANBranch<f32>,
    maps: &[&[f32]],
    scale: Option<&[f32]>,
    report: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ValueEstimate, Vec<f64>)> {
    let x = b.batch(maps)?;
    let z = b.sample_latent(maps.len(), rng);
    let est = b.discriminator_step(&x, &z, scale)?;
    let z = b.sample_latent(maps.len(), rng);
    b.generator_step(&x, &z, scale)?;
    let head = b.batch(&maps[..report])?;
    Ok((est, b.discriminate_real(&head)?))
}

/// Mutable training state carried between epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub weights: Vec<f64>,
    pub records: Vec<Option<UnfamiliarityRecord>>,
    pub epochs_done: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            weights: vec![1.0 / n.max(1) as f64; n],
            records: vec![None; n],
            epochs_done: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            epochs_done: self.epochs_done,
            weights: self.weights.clone(),
            unfamiliarity: self.records.iter().map(|r| r.map_or(f64::NAN, |r| r.u)).collect(),
        }
    }

    /// Resumes from a saved state; the sampling stream restarts from a seed
    /// derived from `seed` and the epoch count.
    pub fn from_state(state: &TrainerState, seed: u64) -> Self {
        Self {
            weights: state.weights.clone(),
            records: state
                .unfamiliarity
                .iter()
                .map(|&u| {
                    u.is_finite().then_some(UnfamiliarityRecord {
                        u,
                        d3d: f64::NAN,
                        d2d: f64::NAN,
                    })
                })
                .collect(),
            epochs_done: state.epochs_done,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (state.epochs_done as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }

    /// Indices visited this epoch: `N` weighted draws with replacement,
    /// shuffled.
    pub fn draw(&mut self, n: usize) -> Result<Vec<usize>> {
        let dist = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::InvalidConfig(format!("sample weights: {e}")))?;
        let mut drawn: Vec<usize> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        drawn.shuffle(&mut self.rng);
        Ok(drawn)
    }

    /// Trains every drawn sample once (both branches), records its
    /// unfamiliarity, then reweights.
    pub fn train_epoch(&mut self, pairs: &[TrainingPair], model: &mut DualBiGAN, cfg: &TrainConfig) -> Result<EpochStats> {
        validate_pairs(pairs, model)?;
        if self.weights.len() != pairs.len() {
            return Err(Error::DimensionMismatch {
                expected: pairs.len(),
                got: self.weights.len(),
            });
        }
        let n = pairs.len();
        let epoch = self.epochs_done;
        let eps = model.b3d.arch.d_eps;
        let (order, scales): (Vec<usize>, Option<Vec<f32>>) = match cfg.reweighting {
            Reweighting::Resample => (self.draw(n)?, None),
            Reweighting::LossScale => {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut self.rng);
                let s = self.weights.iter().map(|&w| (w * n as f64) as f32).collect();
                (o, Some(s))
            }
        };
        // Each unit: (indices in the batch, number of leading indices to record).
        let units: Vec<(Vec<usize>, usize)> = match (cfg.batch_mode, cfg.reweighting) {
            (BatchMode::Fill, Reweighting::Resample) => {
                let dist = WeightedIndex::new(&self.weights)
                    .map_err(|e| Error::InvalidConfig(format!("sample weights: {e}")))?;
                order
                    .iter()
                    .map(|&i| {
                        let mut b = vec![i];
                        b.extend((1..cfg.batch_size).map(|_| dist.sample(&mut self.rng)));
                        (b, 1)
                    })
                    .collect()
            }
            _ => order.chunks(cfg.batch_size).map(|c| (c.to_vec(), c.len())).collect(),
        };
        let mut draws = vec![0usize; n];
        let (mut e3, mut e2) = (Vec::new(), Vec::new());
        let seed3 = cfg.seed ^ 0x3D ^ ((epoch as u64) << 20);
        let mut rng3 = ChaCha8Rng::seed_from_u64(seed3);
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed3 ^ 0x2D2D);
        for (batch, report) in &units {
            for &i in batch {
                draws[i] += 1;
            }
            let m3: Vec<&[f32]> = batch.iter().map(|&i| pairs[i].map3d.as_slice()).collect();
            let m2: Vec<&[f32]> = batch.iter().map(|&i| pairs[i].map2d.as_slice()).collect();
            let sc: Option<Vec<f32>> = scales.as_ref().map(|s| batch.iter().map(|&i| s[i]).collect());
            let (b3, b2) = (&mut model.b3d, &mut model.b2d);
            let (r3, r2) = if cfg.parallel_branches {
                std::thread::scope(|s| {
                    let h = s.spawn(|| update_branch(b3, &m3, sc.as_deref(), *report, &mut rng3));
                    let r2 = update_branch(b2, &m2, sc.as_deref(), *report, &mut rng2);
                    (h.join().expect("3D update thread"), r2)
                })
            } else {
                (
                    update_branch(b3, &m3, sc.as_deref(), *report, &mut rng3),
                    update_branch(b2, &m2, sc.as_deref(), *report, &mut rng2),
                )
            };
            let ((v3, d3), (v2, d2)) = (r3?, r2?);
            if !v3.is_finite() || !v2.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    sample: pairs[batch[0]].id,
                });
            }
            e3.push(v3);
            e2.push(v2);
            for (k, &i) in batch[..*report].iter().enumerate() {
                let rec = unfamiliarity_record(d3[k], d2[k], eps);
                if !rec.u.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        sample: pairs[i].id,
                    });
                }
                self.records[i] = Some(rec);
            }
        }
        self.weights = reweight(&self.current_u());
        self.epochs_done += 1;
        Ok(EpochStats {
            epoch,
            value3d: mean_estimate(&e3),
            value2d: mean_estimate(&e2),
            draws,
            weights: self.weights.clone(),
        })
    }

    /// Unfamiliarity per sample; samples without a record get the median of
    /// the recorded ones.
    pub fn current_u(&self) -> Vec<f64> {
        let mut known: Vec<f64> = self.records.iter().flatten().map(|r| r.u).collect();
        known.sort_by(f64::total_cmp);
        let median = match known.len() {
            0 => 1.0,
            k if k % 2 == 1 => known[k / 2],
            k => 0.5 * (known[k / 2 - 1] + known[k / 2]),
        };
        self.records.iter().map(|r| r.map_or(median, |r| r.u)).collect()
    }
}

/// Result of a full training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Row 0 is the initial uniform weighting, then one row per epoch.
    pub weight_history: Vec<Vec<f64>>,
    pub epochs: Vec<EpochStats>,
}

/// Runs `cfg.epochs` epochs from uniform weights. `on_epoch` is called after
/// every epoch (for checkpoints and logging).
pub fn train(
    pairs: &[TrainingPair],
    model: &mut DualBiGAN,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &DualBiGAN, &Trainer) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    validate_pairs(pairs, model)?;
    let mut trainer = Trainer::new(pairs.len(), cfg.seed);
    train_with(&mut trainer, pairs, model, cfg, &mut on_epoch)
}

/// Continues training from an existing trainer state.
pub fn train_with(
    trainer: &mut Trainer,
    pairs: &[TrainingPair],
    model: &mut DualBiGAN,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &DualBiGAN, &Trainer) -> Result<()>,
) -> Result<TrainLog> {
    let mut log = TrainLog {
        weight_history: vec![trainer.weights.clone()],
        epochs: Vec::new(),
    };
    for _ in 0..cfg.epochs {
        let stats = trainer.train_epoch(pairs, model, cfg)?;
        on_epoch(&stats, model, trainer)?;
        log.weight_history.push(stats.weights.clone());
        log.epochs.push(stats);
    }
    Ok(log)
}

pub fn write_weight_history<W: Write>(w: &mut W, history: &[Vec<f64>]) -> Result<()> {
    let n = history.first().map_or(0, Vec::len);
    let mut header = vec!["epoch".to_string()];
    header.extend((0..n).map(|i| format!("w{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (e, row) in history.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
        writeln!(w, "{e},{}", cells.join(","))?;
    }
    Ok(())
}

pub fn write_epoch_log<W: Write>(w: &mut W, epochs: &[EpochStats]) -> Result<()> {
    writeln!(w, "epoch,v3d,d_real3d,d_fake3d,v2d,d_real2d,d_fake2d")?;
    for e in epochs {
        let (a, b) = (e.value3d, e.value2d);
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            e.epoch, a.v, a.d_real_mean, a.d_fake_mean, b.v, b.d_real_mean, b.d_fake_mean
        )?;
    }
    Ok(())
}

/// Mean per-frame inference latency, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatencyReport {
    pub encode2d_ms: f64,
    pub encode3d_ms: f64,
    pub stitch_ms: f64,
}

impl LatencyReport {
    pub fn total_ms(&self) -> f64 {
        self.encode2d_ms + self.encode3d_ms + self.stitch_ms
    }
}

/// Stitched mixture features for every frame, plus latency.
pub fn infer_sequence(model: &DualBiGAN, maps: &[(Vec<f32>, Vec<f32>)]) -> Result<(FeatureMatrix, LatencyReport)> {
    let mut out = FeatureMatrix::new(model.feature_dim());
    let (mut t2, mut t3, mut ts) = (0.0, 0.0, 0.0);
    let tag = |i: usize| {
        move |e: Error| match e {
            Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("frame {i}: {m}")),
            other => other,
        }
    };
    for (i, (m3, m2)) in maps.iter().enumerate() {
        let s = Instant::now();
        let c3 = model.b3d.encode(&model.b3d.batch(&[m3]).map_err(tag(i))?)?;
        t3 += s.elapsed().as_secs_f64();
        let s = Instant::now();
        let c2 = model.b2d.encode(&model.b2d.batch(&[m2]).map_err(tag(i))?)?;
        t2 += s.elapsed().as_secs_f64();
        let s = Instant::now();
        let f = stitch(&c2[0], &c3[0], model.b2d.latent_dim(), model.b3d.latent_dim())?;
        out.push(&f)?;
        ts += s.elapsed().as_secs_f64();
    }
    let n = maps.len().max(1) as f64;
    Ok((
        out,
        LatencyReport {
            encode2d_ms: 1e3 * t2 / n,
            encode3d_ms: 1e3 * t3 / n,
            stitch_ms: 1e3 * ts / n,
        },
    ))
}

/// Codes of a single branch for every map (single-domain baselines).
pub fn encode_all(branch: &BiGANBranch<f32>, maps: &[&[f32]], chunk: usize) -> Result<FeatureMatrix> {
    let mut out = FeatureMatrix::new(branch.latent_dim());
    for c in maps.chunks(chunk.max(1)) {
        for code in branch.encode(&branch.batch(c)?)? {
            out.push(&code)?;
        }
    }
    Ok(out)
}
