//! BiGAN branches: encoder, decoder and joint discriminator per map domain,
//! the adversarial value function and single update steps.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use safl_autodiff::checkpoint::{read_checkpoint, write_checkpoint, FORMAT_VERSION};
use safl_autodiff::{Adam, AdamConfig, ConvSpec, Graph, ParameterSet, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const KERNEL: usize = 4;
const CONV: ConvSpec = ConvSpec { stride: 2, pad: 1 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Map2d,
    Map3d,
}

impl Domain {
    pub fn spatial_rank(self) -> usize {
        match self {
            Domain::Map2d => 2,
            Domain::Map3d => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorLoss {
    /// `-mean log(1 - D(x, En x)) - mean log D(De z, z)`.
    #[default]
    NonSaturating,
    /// Minimizes the value function directly.
    Saturating,
}

/// Network shapes of one branch. Convolution stages use kernel 4, stride 2,
/// padding 1, so each stage halves the spatial size. With no stages the
/// branch is fully dense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchArchitecture {
    pub domain: Domain,
    pub input_size: usize,
    pub latent_dim: usize,
    pub channels: Vec<usize>,
    pub code_hidden: usize,
    pub joint_hidden: usize,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub init_std: f64,
    pub d_eps: f64,
    pub output: OutputActivation,
}

impl Default for BranchArchitecture {
    fn default() -> Self {
        Self::default_3d()
    }
}

impl BranchArchitecture {
    pub fn default_2d() -> Self {
        Self {
            domain: Domain::Map2d,
            input_size: 64,
            latent_dim: 512,
            channels: vec![32, 64, 128, 256],
            code_hidden: 512,
            joint_hidden: 1024,
            leaky_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init_std: 0.02,
            d_eps: 1e-6,
            output: OutputActivation::Sigmoid,
        }
    }

    pub fn default_3d() -> Self {
        Self {
            domain: Domain::Map3d,
            input_size: 32,
            ..Self::default_2d()
        }
    }

    /// Fully dense branch on a flat input of `input_len` values.
    pub fn dense(input_len: usize, latent_dim: usize, hidden: usize) -> Self {
        Self {
            domain: Domain::Map2d,
            input_size: input_len,
            latent_dim,
            channels: Vec::new(),
            code_hidden: hidden,
            joint_hidden: hidden,
            output: OutputActivation::Identity,
            init_std: 0.3,
            ..Self::default_2d()
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Per-sample input shape `[1, S, S]` or `[1, S, S, S]`; dense branches
    /// use `[1, 1, n]`.
    pub fn input_shape(&self) -> Vec<usize> {
        let s = self.input_size;
        if self.stages() == 0 {
            return vec![1, 1, s];
        }
        match self.domain {
            Domain::Map2d => vec![1, s, s],
            Domain::Map3d => vec![1, s, s, s],
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    fn min_size(&self) -> usize {
        self.input_size >> self.stages()
    }

    fn spatial(&self, size: usize) -> Vec<usize> {
        vec![size; self.domain.spatial_rank()]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_size == 0 || self.latent_dim == 0 || self.code_hidden == 0 || self.joint_hidden == 0 {
            return bad("architecture sizes must be positive".into());
        }
        if self.stages() > 0 && self.input_size % (1 << self.stages()) != 0 {
            return bad(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size,
                self.stages()
            ));
        }
        if self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if !(self.d_eps > 0.0 && self.d_eps < 0.5) || !(self.bn_eps > 0.0) {
            return bad("epsilons out of range".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn to_sidecar(&self) -> String {
        toml::to_string(self).expect("architecture serializes")
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let arch: Self =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("architecture sidecar: {e}")))?;
        arch.validate()?;
        Ok(arch)
    }
}

/// Batch estimate of the value function with its two discriminator means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueEstimate {
    pub v: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

impl ValueEstimate {
    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.d_real_mean.is_finite() && self.d_fake_mean.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Train,
    Eval,
}

/// Running normalization statistics keyed by layer label.
pub type RunningStats<T> = BTreeMap<String, (Vec<T>, Vec<T>)>;

#[derive(Debug, Clone)]
pub struct BiGANBranch<T: Scalar> {
    pub arch: BranchArchitecture,
    pub en: ParameterSet<T>,
    pub de: ParameterSet<T>,
    pub d: ParameterSet<T>,
    pub running: RunningStats<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub generator_loss: GeneratorLoss,
}

fn conv_shape(cout: usize, cin: usize, rank: usize) -> Vec<usize> {
    let mut s = vec![cout, cin];
    s.extend(std::iter::repeat_n(KERNEL, rank));
    s
}

fn fill_missing_grads<T: Scalar>(set: &mut ParameterSet<T>) {
    for (_, t) in set.iter_mut() {
        if t.grad.is_none() {
            t.grad = Some(vec![T::zero(); t.len()]);
        }
    }
}

impl<T: Scalar> BiGANBranch<T> {
    /// Seeded initialization: centered normal weights, unit normalization
    /// scales, zero shifts and biases.
    pub fn new(arch: BranchArchitecture, seed: u64, adam: AdamConfig) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = arch.init_std;
        let rank = arch.domain.spatial_rank();
        let n = arch.stages();
        let (mut en, mut de, mut d) = (ParameterSet::new(), ParameterSet::new(), ParameterSet::new());
        let mut running = RunningStats::new();
        let norm = |set: &mut ParameterSet<T>, running: &mut RunningStats<T>, label: String, c: usize| {
            set.insert(format!("{label}.gamma"), Tensor::filled(&[c], T::one()))?;
            set.insert(format!("{label}.beta"), Tensor::zeros(&[c]))?;
            running.insert(label, (vec![T::zero(); c], vec![T::one(); c]));
            Ok::<(), Error>(())
        };
        let feat_len = if n == 0 {
            arch.input_len()
        } else {
            arch.channels[n - 1] * arch.min_size().pow(rank as u32)
        };

        let mut cin = 1;
        for (i, &c) in arch.channels.iter().enumerate() {
            en.insert(format!("en.conv{i}.w"), Tensor::randn(&conv_shape(c, cin, rank), std, &mut rng))?;
            if i == 0 {
                en.insert(format!("en.conv{i}.b"), Tensor::zeros(&[c]))?;
            } else {
                norm(&mut en, &mut running, format!("en.bn{i}"), c)?;
            }
            cin = c;
        }
        en.insert("en.fc.w", Tensor::randn(&[arch.latent_dim, feat_len], std, &mut rng))?;
        en.insert("en.fc.b", Tensor::zeros(&[arch.latent_dim]))?;

        de.insert("de.fc.w", Tensor::randn(&[feat_len, arch.latent_dim], std, &mut rng))?;
        if n == 0 {
            de.insert("de.fc.b", Tensor::zeros(&[feat_len]))?;
        } else {
            norm(&mut de, &mut running, "de.bn0".into(), arch.channels[n - 1])?;
        }
        for i in 0..n {
            let ci = arch.channels[n - 1 - i];
            let co = if i + 1 == n { 1 } else { arch.channels[n - 2 - i] };
            de.insert(format!("de.deconv{i}.w"), Tensor::randn(&conv_shape(ci, co, rank), std, &mut rng))?;
            if i + 1 == n {
                de.insert(format!("de.deconv{i}.b"), Tensor::zeros(&[co]))?;
            } else {
                norm(&mut de, &mut running, format!("de.bn{}", i + 1), co)?;
            }
        }

        let mut cin = 1;
        for (i, &c) in arch.channels.iter().enumerate() {
            d.insert(format!("d.conv{i}.w"), Tensor::randn(&conv_shape(c, cin, rank), std, &mut rng))?;
            d.insert(format!("d.conv{i}.b"), Tensor::zeros(&[c]))?;
            cin = c;
        }
        d.insert("d.code.w", Tensor::randn(&[arch.code_hidden, arch.latent_dim], std, &mut rng))?;
        d.insert("d.code.b", Tensor::zeros(&[arch.code_hidden]))?;
        d.insert(
            "d.joint.w",
            Tensor::randn(&[arch.joint_hidden, feat_len + arch.code_hidden], std, &mut rng),
        )?;
        d.insert("d.joint.b", Tensor::zeros(&[arch.joint_hidden]))?;
        d.insert("d.out.w", Tensor::randn(&[1, arch.joint_hidden], std, &mut rng))?;
        d.insert("d.out.b", Tensor::zeros(&[1]))?;

        Ok(Self {
            arch,
            en,
            de,
            d,
            running,
            opt_g: Adam::new(adam),
            opt_d: Adam::new(adam),
            generator_loss: GeneratorLoss::NonSaturating,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    /// Standard-normal codes, `[n, latent_dim]`.
    pub fn sample_latent<R: Rng>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        let data = (0..n * self.arch.latent_dim)
            .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::new(vec![n, self.arch.latent_dim], data).expect("length matches")
    }

    /// Stacks flat maps into a `[B, input_shape..]` batch.
    pub fn batch(&self, maps: &[&[f32]]) -> Result<Tensor<T>> {
        let len = self.arch.input_len();
        let mut data = Vec::with_capacity(maps.len() * len);
        for (i, m) in maps.iter().enumerate() {
            if m.len() != len {
                return Err(Error::ShapeMismatch(format!(
                    "map {i} has {} values, branch expects {len}",
                    m.len()
                )));
            }
            data.extend(m.iter().map(|&v| T::from_f64(v as f64)));
        }
        let mut shape = vec![maps.len()];
        shape.extend(self.arch.input_shape());
        Ok(Tensor::new(shape, data)?)
    }

    fn check_batch(&self, x: &Tensor<T>, z: Option<&Tensor<T>>) -> Result<()> {
        let want = self.arch.input_shape();
        if x.shape().len() != want.len() + 1 || x.shape()[1..] != want[..] || x.shape()[0] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "batch shape {:?}, branch input {:?}",
                x.shape(),
                want
            )));
        }
        if let Some(z) = z {
            if z.shape() != [x.shape()[0], self.arch.latent_dim] {
                return Err(Error::ShapeMismatch(format!(
                    "latent batch {:?} for {} maps of latent {}",
                    z.shape(),
                    x.shape()[0],
                    self.arch.latent_dim
                )));
            }
        }
        Ok(())
    }

    fn p(g: &mut Graph<T>, set: &ParameterSet<T>, name: &str, learn: bool) -> Result<Var> {
        Ok(if learn {
            g.param(set, name)?
        } else {
            g.frozen_param(set, name)?
        })
    }

    fn norm(&self, g: &mut Graph<T>, set: &ParameterSet<T>, x: Var, label: &str, mode: Mode, learn: bool) -> Result<Var> {
        let gamma = Self::p(g, set, &format!("{label}.gamma"), learn)?;
        let beta = Self::p(g, set, &format!("{label}.beta"), learn)?;
        Ok(match mode {
            Mode::Train => g.batch_norm(x, gamma, beta, self.arch.bn_eps, label)?,
            Mode::Eval => {
                let (m, v) = &self.running[label];
                g.frozen_norm(x, gamma, beta, m, v, self.arch.bn_eps)?
            }
        })
    }

    fn encoder(&self, g: &mut Graph<T>, x: Var, mode: Mode, learn: bool) -> Result<Var> {
        let set = &self.en;
        let mut h = x;
        for i in 0..self.arch.stages() {
            let w = Self::p(g, set, &format!("en.conv{i}.w"), learn)?;
            if i == 0 {
                let b = Self::p(g, set, &format!("en.conv{i}.b"), learn)?;
                h = g.conv(h, w, Some(b), CONV)?;
            } else {
                h = g.conv(h, w, None, CONV)?;
                h = self.norm(g, set, h, &format!("en.bn{i}"), mode, learn)?;
            }
            h = g.leaky_relu(h, self.arch.leaky_slope);
        }
        let h = g.flatten(h)?;
        let w = Self::p(g, set, "en.fc.w", learn)?;
        let b = Self::p(g, set, "en.fc.b", learn)?;
        Ok(g.affine(h, w, Some(b))?)
    }

    fn decoder(&self, g: &mut Graph<T>, z: Var, mode: Mode, learn: bool) -> Result<Var> {
        let set = &self.de;
        let a = &self.arch;
        let n = a.stages();
        let batch = g.shape(z)[0];
        let w = Self::p(g, set, "de.fc.w", learn)?;
        let mut h;
        if n == 0 {
            let b = Self::p(g, set, "de.fc.b", learn)?;
            h = g.affine(z, w, Some(b))?;
        } else {
            h = g.affine(z, w, None)?;
            let mut shape = vec![batch, a.channels[n - 1]];
            shape.extend(a.spatial(a.min_size()));
            h = g.reshape(h, &shape)?;
            h = self.norm(g, set, h, "de.bn0", mode, learn)?;
            h = g.leaky_relu(h, a.leaky_slope);
            for i in 0..n {
                let w = Self::p(g, set, &format!("de.deconv{i}.w"), learn)?;
                if i + 1 == n {
                    let b = Self::p(g, set, &format!("de.deconv{i}.b"), learn)?;
                    h = g.conv_transpose(h, w, Some(b), CONV)?;
                } else {
                    h = g.conv_transpose(h, w, None, CONV)?;
                    h = self.norm(g, set, h, &format!("de.bn{}", i + 1), mode, learn)?;
                    h = g.leaky_relu(h, a.leaky_slope);
                }
            }
        }
        let mut shape = vec![batch];
        shape.extend(a.input_shape());
        let h = g.reshape(h, &shape)?;
        Ok(match a.output {
            OutputActivation::Sigmoid => g.sigmoid(h),
            OutputActivation::Identity => h,
        })
    }

    /// `D(x, z)` as `[B, 1]`, clamped to `[ε, 1 − ε]`.
    fn discriminator(&self, g: &mut Graph<T>, x: Var, z: Var, learn: bool) -> Result<Var> {
        let set = &self.d;
        let slope = self.arch.leaky_slope;
        let mut h = x;
        for i in 0..self.arch.stages() {
            let w = Self::p(g, set, &format!("d.conv{i}.w"), learn)?;
            let b = Self::p(g, set, &format!("d.conv{i}.b"), learn)?;
            h = g.conv(h, w, Some(b), CONV)?;
            h = g.leaky_relu(h, slope);
        }
        let hx = g.flatten(h)?;
        let (w, b) = (Self::p(g, set, "d.code.w", learn)?, Self::p(g, set, "d.code.b", learn)?);
        let hz = g.affine(z, w, Some(b))?;
        let hz = g.leaky_relu(hz, slope);
        let j = g.concat(hx, hz)?;
        let (w, b) = (Self::p(g, set, "d.joint.w", learn)?, Self::p(g, set, "d.joint.b", learn)?);
        let j = g.affine(j, w, Some(b))?;
        let j = g.leaky_relu(j, slope);
        let (w, b) = (Self::p(g, set, "d.out.w", learn)?, Self::p(g, set, "d.out.b", learn)?);
        let o = g.affine(j, w, Some(b))?;
        let o = g.sigmoid(o);
        let eps = self.arch.d_eps;
        Ok(g.clamp(o, eps, 1.0 - eps))
    }

    /// `mean(w · log x)` or `mean(w · log(1 − x))` over a `[B, 1]` node.
    fn log_term(g: &mut Graph<T>, d: Var, complement: bool, weights: Option<&[T]>) -> Result<Var> {
        let x = if complement { g.scale_shift(d, -1.0, 1.0) } else { d };
        let l = g.log(x);
        let l = match weights {
            Some(w) => g.mul_const(l, w)?,
            None => l,
        };
        Ok(g.mean(l))
    }

    fn mean_of(g: &Graph<T>, v: Var) -> f64 {
        let d = g.data(v);
        d.iter().map(|x| x.as_f64()).sum::<f64>() / d.len().max(1) as f64
    }

    /// Builds both discriminator evaluations; returns `(d_real, d_fake)`.
    fn joint_pass(
        &self,
        g: &mut Graph<T>,
        x: &Tensor<T>,
        z: &Tensor<T>,
        mode: Mode,
        learn_g: bool,
        learn_d: bool,
    ) -> Result<(Var, Var)> {
        let xv = g.input(x);
        let zv = g.input(z);
        let e = self.encoder(g, xv, mode, learn_g)?;
        let xf = self.decoder(g, zv, mode, learn_g)?;
        let dr = self.discriminator(g, xv, e, learn_d)?;
        let df = self.discriminator(g, xf, zv, learn_d)?;
        Ok((dr, df))
    }

    fn estimate(g: &mut Graph<T>, dr: Var, df: Var) -> Result<(ValueEstimate, Var)> {
        let a = Self::log_term(g, dr, false, None)?;
        let b = Self::log_term(g, df, true, None)?;
        let v = g.add(a, b)?;
        Ok((
            ValueEstimate {
                v: g.data(v)[0].as_f64(),
                d_real_mean: Self::mean_of(g, dr),
                d_fake_mean: Self::mean_of(g, df),
            },
            v,
        ))
    }

    /// Value function estimate on a batch, with normalization in inference mode.
    pub fn bigan_value(&self, x: &Tensor<T>, z: &Tensor<T>) -> Result<ValueEstimate> {
        self.check_batch(x, Some(z))?;
        let mut g = Graph::new();
        let (dr, df) = self.joint_pass(&mut g, x, z, Mode::Eval, false, false)?;
        Ok(Self::estimate(&mut g, dr, df)?.0)
    }

    /// One ascent step of the value function on the discriminator. Returns
    /// the estimate from before the update.
    pub fn discriminator_step(&mut self, x: &Tensor<T>, z: &Tensor<T>, weights: Option<&[T]>) -> Result<ValueEstimate> {
        self.check_batch(x, Some(z))?;
        let mut g = Graph::new();
        let (dr, df) = self.joint_pass(&mut g, x, z, Mode::Train, false, true)?;
        let (est, v) = Self::estimate(&mut g, dr, df)?;
        let loss = match weights {
            None => g.scale_shift(v, -1.0, 0.0),
            Some(w) => {
                let a = Self::log_term(&mut g, dr, false, Some(w))?;
                let b = Self::log_term(&mut g, df, true, Some(w))?;
                let s = g.add(a, b)?;
                g.scale_shift(s, -1.0, 0.0)
            }
        };
        let grads = g.backward(loss)?;
        self.d.zero_grads();
        grads.accumulate_into(&mut self.d);
        fill_missing_grads(&mut self.d);
        self.opt_d.step(&mut [&mut self.d])?;
        Ok(est)
    }

    /// One descent step of the generator loss on encoder and decoder. Also
    /// folds the batch normalization statistics into the running averages.
    pub fn generator_step(&mut self, x: &Tensor<T>, z: &Tensor<T>, weights: Option<&[T]>) -> Result<ValueEstimate> {
        self.check_batch(x, Some(z))?;
        let mut g = Graph::new();
        let (dr, df) = self.joint_pass(&mut g, x, z, Mode::Train, true, false)?;
        let (est, v) = Self::estimate(&mut g, dr, df)?;
        let loss = match self.generator_loss {
            GeneratorLoss::Saturating => match weights {
                None => v,
                Some(w) => {
                    let a = Self::log_term(&mut g, dr, false, Some(w))?;
                    let b = Self::log_term(&mut g, df, true, Some(w))?;
                    g.add(a, b)?
                }
            },
            GeneratorLoss::NonSaturating => {
                let a = Self::log_term(&mut g, dr, true, weights)?;
                let b = Self::log_term(&mut g, df, false, weights)?;
                let s = g.add(a, b)?;
                g.scale_shift(s, -1.0, 0.0)
            }
        };
        let grads = g.backward(loss)?;
        self.en.zero_grads();
        self.de.zero_grads();
        grads.accumulate_into(&mut self.en);
        grads.accumulate_into(&mut self.de);
        fill_missing_grads(&mut self.en);
        fill_missing_grads(&mut self.de);
        self.opt_g.step(&mut [&mut self.en, &mut self.de])?;
        self.update_running(&g);
        Ok(est)
    }

    fn update_running(&mut self, g: &Graph<T>) {
        let m = T::from_f64(self.arch.bn_momentum);
        let keep = T::one() - m;
        for s in g.batch_stats() {
            if let Some((rm, rv)) = self.running.get_mut(&s.label) {
                for (r, b) in rm.iter_mut().zip(&s.mean) {
                    *r = keep * *r + m * *b;
                }
                for (r, b) in rv.iter_mut().zip(&s.var) {
                    *r = keep * *r + m * *b;
                }
            }
        }
    }

    /// Generator-side loss and its gradients with respect to encoder and
    /// decoder parameters, without updating anything.
    pub fn generator_gradients(&self, x: &Tensor<T>, z: &Tensor<T>) -> Result<(f64, BTreeMap<String, Vec<T>>)> {
        self.check_batch(x, Some(z))?;
        let mut g = Graph::new();
        let (dr, df) = self.joint_pass(&mut g, x, z, Mode::Train, true, false)?;
        let a = Self::log_term(&mut g, dr, true, None)?;
        let b = Self::log_term(&mut g, df, false, None)?;
        let s = g.add(a, b)?;
        let loss = g.scale_shift(s, -1.0, 0.0);
        let grads = g.backward(loss)?;
        let mut out = BTreeMap::new();
        for name in grads.param_names() {
            out.insert(name.clone(), grads.param(name).expect("listed").to_vec());
        }
        Ok((g.data(loss)[0].as_f64(), out))
    }

    /// Generator-side loss value (non-saturating form, training-mode
    /// normalization) for finite-difference checks.
    pub fn generator_loss_value(&self, x: &Tensor<T>, z: &Tensor<T>) -> Result<f64> {
        Ok(self.generator_gradients(x, z)?.0)
    }

    /// `D(x, En(x))` per map, inference mode.
    pub fn discriminate_real(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        self.check_batch(x, None)?;
        let mut g = Graph::new();
        let xv = g.input(x);
        let e = self.encoder(&mut g, xv, Mode::Eval, false)?;
        let d = self.discriminator(&mut g, xv, e, false)?;
        Ok(g.data(d).iter().map(|v| v.as_f64()).collect())
    }

    /// Latent codes `[B, latent_dim]`, inference mode.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        self.check_batch(x, None)?;
        let mut g = Graph::new();
        let xv = g.input(x);
        let e = self.encoder(&mut g, xv, Mode::Eval, false)?;
        Ok(g.data(e).chunks_exact(self.arch.latent_dim).map(<[T]>::to_vec).collect())
    }

    /// Decoded maps `[B, input_shape..]`, inference mode.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.shape().len() != 2 || z.shape()[1] != self.arch.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "latent batch {:?}, latent dim {}",
                z.shape(),
                self.arch.latent_dim
            )));
        }
        let mut g = Graph::new();
        let zv = g.input(z);
        let x = self.decoder(&mut g, zv, Mode::Eval, false)?;
        Ok(g.value(x))
    }

    /// Mean squared error of `De(En(x))` against `x`.
    pub fn reconstruction_error(&self, x: &Tensor<T>) -> Result<f64> {
        let codes = self.encode(x)?;
        let flat: Vec<T> = codes.into_iter().flatten().collect();
        let z = Tensor::new(vec![x.shape()[0], self.arch.latent_dim], flat)?;
        let r = self.decode(&z)?;
        let n = x.len().max(1) as f64;
        Ok(r.data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            / n)
    }

    fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = Vec::new();
        for set in [&self.en, &self.de, &self.d] {
            for (k, t) in set.iter() {
                out.push((k.clone(), t.clone()));
            }
        }
        for (k, (m, v)) in &self.running {
            out.push((format!("run/{k}/mean"), Tensor::new(vec![m.len()], m.clone()).expect("len")));
            out.push((format!("run/{k}/var"), Tensor::new(vec![v.len()], v.clone()).expect("len")));
        }
        for (tag, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            let (step, moments) = opt.export();
            // Step counts are stored as two exactly representable halves.
            let halves = vec![T::from_f64((step >> 20) as f64), T::from_f64((step & 0xF_FFFF) as f64)];
            out.push((format!("{tag}/step"), Tensor::new(vec![2], halves).expect("len")));
            for (k, v) in moments {
                out.push((format!("{tag}/{k}"), Tensor::new(vec![v.len()], v).expect("len")));
            }
        }
        out
    }

    /// Writes parameters, running statistics and optimizer state.
    pub fn save_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let named = self.named_tensors();
        let refs: Vec<(String, &Tensor<T>)> = named.iter().map(|(k, t)| (k.clone(), t)).collect();
        write_checkpoint(w, &refs)?;
        Ok(())
    }

    /// Restores a branch written by [`save_checkpoint`](Self::save_checkpoint)
    /// for the same architecture.
    pub fn load_checkpoint<R: Read>(arch: BranchArchitecture, adam: AdamConfig, r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() >= 9 && &bytes[..4] == b"SAFL" {
            let found = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]);
            if found != FORMAT_VERSION {
                return Err(Error::FormatVersionMismatch {
                    found,
                    expected: FORMAT_VERSION,
                });
            }
        }
        let tensors: Vec<(String, Tensor<T>)> = read_checkpoint(&mut bytes.as_slice())?;
        let mut branch = Self::new(arch, 0, adam)?;
        let mut seen = 0usize;
        let mut opt: BTreeMap<&str, (u64, Vec<(String, Vec<T>)>)> = BTreeMap::new();
        for (name, t) in &tensors {
            let mismatch = || Error::ShapeMismatch(format!("checkpoint tensor `{name}` has shape {:?}", t.shape()));
            if let Some(rest) = name.strip_prefix("run/") {
                let (label, which) = rest.rsplit_once('/').ok_or_else(mismatch)?;
                let entry = branch.running.get_mut(label).ok_or_else(mismatch)?;
                let slot = if which == "mean" { &mut entry.0 } else { &mut entry.1 };
                if slot.len() != t.len() {
                    return Err(mismatch());
                }
                slot.copy_from_slice(t.data());
            } else if let Some((tag, rest)) = name.split_once('/').filter(|(t, _)| t.starts_with("opt_")) {
                let key = if tag == "opt_g" { "opt_g" } else { "opt_d" };
                let e = opt.entry(key).or_default();
                if rest == "step" {
                    let d = t.data();
                    e.0 = ((d[0].as_f64() as u64) << 20) + d[1].as_f64() as u64;
                } else {
                    e.1.push((rest.to_string(), t.data().to_vec()));
                }
            } else {
                let set = if name.starts_with("en.") {
                    &mut branch.en
                } else if name.starts_with("de.") {
                    &mut branch.de
                } else {
                    &mut branch.d
                };
                let p = set.get_mut(name).map_err(|_| mismatch())?;
                if p.shape() != t.shape() {
                    return Err(mismatch());
                }
                p.data_mut().copy_from_slice(t.data());
                seen += 1;
            }
        }
        let expected = branch.en.len() + branch.de.len() + branch.d.len();
        if seen != expected {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint holds {seen} of {expected} parameters"
            )));
        }
        for (key, (step, moments)) in opt {
            let target = if key == "opt_g" { &mut branch.opt_g } else { &mut branch.opt_d };
            target.import(step, moments)?;
        }
        Ok(branch)
    }
}

/// Concatenates a 2D code and a 3D code into one mixture feature.
pub fn stitch(code2d: &[f32], code3d: &[f32], dim2d: usize, dim3d: usize) -> Result<Vec<f32>> {
    for (c, want) in [(code2d, dim2d), (code3d, dim3d)] {
        if c.len() != want {
            return Err(Error::DimensionMismatch {
                expected: want,
                got: c.len(),
            });
        }
    }
    let mut out = Vec::with_capacity(dim2d + dim3d);
    out.extend_from_slice(code2d);
    out.extend_from_slice(code3d);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(domain: Domain) -> BranchArchitecture {
        BranchArchitecture {
            domain,
            input_size: 8,
            latent_dim: 6,
            channels: vec![2, 3],
            code_hidden: 5,
            joint_hidden: 7,
            ..BranchArchitecture::default_2d()
        }
    }

    #[test]
    fn decoder_output_matches_input_shape() {
        for dom in [Domain::Map2d, Domain::Map3d] {
            let b = BiGANBranch::<f32>::new(small(dom), 1, AdamConfig::default()).unwrap();
            let z = b.sample_latent(3, &mut ChaCha8Rng::seed_from_u64(0));
            let x = b.decode(&z).unwrap();
            let mut want = vec![3];
            want.extend(b.arch.input_shape());
            assert_eq!(x.shape(), &want[..]);
        }
        let b = BiGANBranch::<f32>::new(BranchArchitecture::default_2d(), 1, AdamConfig::default()).unwrap();
        let x = b.decode(&b.sample_latent(1, &mut ChaCha8Rng::seed_from_u64(0))).unwrap();
        assert_eq!(x.shape(), &[1, 1, 64, 64]);
    }

    #[test]
    fn constant_half_discriminator_value() {
        let mut b = BiGANBranch::<f64>::new(small(Domain::Map2d), 2, AdamConfig::default()).unwrap();
        for (_, t) in b.d.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[4, 1, 8, 8], 1.0, &mut rng);
        let z = b.sample_latent(4, &mut rng);
        let est = b.bigan_value(&x, &z).unwrap();
        assert!((est.v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((est.v + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn perfect_discriminator_limit() {
        let mut b = BiGANBranch::<f64>::new(BranchArchitecture::dense(1, 1, 4), 2, AdamConfig::default()).unwrap();
        // D(x, z) = sigmoid(big · (x − z)); real pairs use En(x) = x − 1, fakes De(z) = z − 1.
        let set = |s: &mut ParameterSet<f64>, n: &str, v: Vec<f64>| s.get_mut(n).unwrap().data_mut().copy_from_slice(&v);
        set(&mut b.en, "en.fc.w", vec![1.0]);
        set(&mut b.en, "en.fc.b", vec![-1.0]);
        set(&mut b.de, "de.fc.w", vec![1.0]);
        set(&mut b.de, "de.fc.b", vec![-1.0]);
        b.arch.leaky_slope = 1.0;
        let hidden = 4;
        let mut code_w = vec![0.0; hidden];
        code_w[0] = 1.0;
        set(&mut b.d, "d.code.w", code_w);
        let mut joint = vec![0.0; hidden * (1 + hidden)];
        joint[0] = 1.0;
        joint[1] = -1.0;
        set(&mut b.d, "d.joint.w", joint);
        let mut out = vec![0.0; hidden];
        out[0] = 1e3;
        set(&mut b.d, "d.out.w", out);
        let x = Tensor::new(vec![3, 1, 1, 1], vec![0.0, 2.0, -1.0]).unwrap();
        let z = Tensor::new(vec![3, 1], vec![0.5, 0.0, 3.0]).unwrap();
        let est = b.bigan_value(&x, &z).unwrap();
        let eps = 1e-6f64;
        assert!((est.v - 2.0 * (1.0 - eps).ln()).abs() < 1e-12);
    }

    #[test]
    fn steps_touch_only_their_side() {
        let mut b = BiGANBranch::<f32>::new(small(Domain::Map3d), 3, AdamConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 1, 8, 8, 8], 1.0, &mut rng);
        let z = b.sample_latent(2, &mut rng);
        let (en, de, d) = (b.en.clone(), b.de.clone(), b.d.clone());
        b.discriminator_step(&x, &z, None).unwrap();
        assert_eq!(format!("{:?}", b.en), format!("{en:?}"));
        assert_eq!(format!("{:?}", b.de), format!("{de:?}"));
        assert_ne!(format!("{:?}", b.d), format!("{d:?}"));
        let d = b.d.clone();
        b.generator_step(&x, &z, None).unwrap();
        assert_eq!(format!("{:?}", b.d), format!("{d:?}"));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let adam = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut b = BiGANBranch::<f32>::new(small(Domain::Map2d), 3, adam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 1, 8, 8], 1.0, &mut rng);
        let z = b.sample_latent(2, &mut rng);
        let before = b.named_tensors();
        let est = b.discriminator_step(&x, &z, None).unwrap();
        b.generator_step(&x, &z, None).unwrap();
        assert!(est.is_finite());
        let after = b.named_tensors();
        for ((k, t0), (_, t1)) in before.iter().zip(&after) {
            if !k.starts_with("opt") && !k.starts_with("run/") {
                assert_eq!(t0.data(), t1.data(), "{k}");
            }
        }
    }

    #[test]
    fn encode_is_batch_invariant_and_sensitive() {
        let b = BiGANBranch::<f32>::new(small(Domain::Map2d), 9, AdamConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn(&[3, 1, 8, 8], 1.0, &mut rng);
        let all = b.encode(&x).unwrap();
        let one = b.encode(&Tensor::new(vec![1, 1, 8, 8], x.data()[64..128].to_vec()).unwrap()).unwrap();
        assert_eq!(all[1], one[0]);
        let zero = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        let c0 = b.encode(&zero).unwrap();
        assert_eq!(c0, b.encode(&zero).unwrap());
        assert!(c0[0].iter().all(|v| v.is_finite()));
        let mut bumped = zero.clone();
        bumped.data_mut()[10] = 1.0;
        assert_ne!(b.encode(&bumped).unwrap(), c0);
        assert!(matches!(
            b.encode(&Tensor::<f32>::zeros(&[1, 1, 4, 4])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut b = BiGANBranch::<f32>::new(small(Domain::Map3d), 4, AdamConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 1, 8, 8, 8], 1.0, &mut rng);
        let z = b.sample_latent(2, &mut rng);
        b.discriminator_step(&x, &z, None).unwrap();
        b.generator_step(&x, &z, None).unwrap();
        let mut buf = Vec::new();
        b.save_checkpoint(&mut buf).unwrap();
        let arch = BranchArchitecture::from_sidecar(&b.arch.to_sidecar()).unwrap();
        let back = BiGANBranch::<f32>::load_checkpoint(arch, AdamConfig::default(), &mut buf.as_slice()).unwrap();
        assert_eq!(back.encode(&x).unwrap(), b.encode(&x).unwrap());
        assert_eq!(back.opt_g.step_count(), 1);
        assert_eq!(back.opt_d.export(), b.opt_d.export());
        assert_eq!(back.running, b.running);
        buf[5] = 9;
        assert!(matches!(
            BiGANBranch::<f32>::load_checkpoint(b.arch.clone(), AdamConfig::default(), &mut buf.as_slice()),
            Err(Error::FormatVersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn stitch_layout() {
        assert_eq!(stitch(&[0.0; 512], &[0.0; 512], 512, 512).unwrap(), vec![0.0; 1024]);
        let mut e = vec![0.0; 512];
        e[0] = 1.0;
        let s = stitch(&e, &e, 512, 512).unwrap();
        let ones: Vec<usize> = s.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![0, 512]);
        assert!(matches!(
            stitch(&[0.0; 3], &[0.0; 512], 512, 512),
            Err(Error::DimensionMismatch { expected: 512, got: 3 })
        ));
    }
}
