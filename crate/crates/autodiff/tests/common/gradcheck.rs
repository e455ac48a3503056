//! Central finite-difference oracle for every layer kind of the tape.
//!
//! Each case builds a tiny random network around one layer, reduces it to a
//! scalar with a random linear functional, and compares the tape gradient of
//! every parameter and input entry against `(f(p+h) - f(p-h)) / 2h`.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safl_autodiff::{ConvSpec, Graph, ParameterSet, Tensor, Var};

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Affine,
    Conv2d,
    Conv3d,
    ConvTranspose2d,
    ConvTranspose3d,
    LeakyRelu,
    Sigmoid,
    BatchNorm,
    FrozenNorm,
    ClampLog,
    Concat,
}

pub const ALL_KINDS: [LayerKind; 11] = [
    LayerKind::Affine,
    LayerKind::Conv2d,
    LayerKind::Conv3d,
    LayerKind::ConvTranspose2d,
    LayerKind::ConvTranspose3d,
    LayerKind::LeakyRelu,
    LayerKind::Sigmoid,
    LayerKind::BatchNorm,
    LayerKind::FrozenNorm,
    LayerKind::ClampLog,
    LayerKind::Concat,
];

/// A randomly drawn instance of one layer kind.
pub struct Case {
    pub kind: LayerKind,
    pub params: ParameterSet<f64>,
    pub input: Tensor<f64>,
    pub second: Tensor<f64>,
    pub probe: Vec<f64>,
    spec: ConvSpec,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values kept away from the kinks of the rectifier and the clamp.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

impl Case {
    pub fn random(kind: LayerKind, seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let batch = rng.random_range(1..4);
        let mut spec = ConvSpec::new(1, 0);
        let mut second = Tensor::zeros(&[1]);
        let input = match kind {
            LayerKind::Affine => {
                let (i, o) = (rng.random_range(1..6), rng.random_range(1..6));
                params.insert("w", rand_tensor(&mut rng, &[o, i], -1.0, 1.0)).unwrap();
                params.insert("b", rand_tensor(&mut rng, &[o], -1.0, 1.0)).unwrap();
                rand_tensor(&mut rng, &[batch, i], -1.0, 1.0)
            }
            LayerKind::Conv2d | LayerKind::ConvTranspose2d => {
                let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
                let k = rng.random_range(1..4);
                spec = ConvSpec::new(rng.random_range(1..3), rng.random_range(0..2));
                let h = rng.random_range(k.max(2)..7);
                let w = rng.random_range(k.max(2)..7);
                if kind == LayerKind::Conv2d {
                    params.insert("w", rand_tensor(&mut rng, &[co, ci, k, k], -1.0, 1.0)).unwrap();
                    params.insert("b", rand_tensor(&mut rng, &[co], -1.0, 1.0)).unwrap();
                    rand_tensor(&mut rng, &[batch, ci, h, w], -1.0, 1.0)
                } else {
                    spec.pad = spec.pad.min(k.saturating_sub(1) / 2);
                    params.insert("w", rand_tensor(&mut rng, &[ci, co, k, k], -1.0, 1.0)).unwrap();
                    params.insert("b", rand_tensor(&mut rng, &[co], -1.0, 1.0)).unwrap();
                    rand_tensor(&mut rng, &[batch, ci, h.min(4), w.min(4)], -1.0, 1.0)
                }
            }
            LayerKind::Conv3d | LayerKind::ConvTranspose3d => {
                let (ci, co) = (rng.random_range(1..3), rng.random_range(1..3));
                let k = rng.random_range(1..3);
                spec = ConvSpec::new(rng.random_range(1..3), rng.random_range(0..2));
                let d = rng.random_range(2..5);
                if kind == LayerKind::Conv3d {
                    params.insert("w", rand_tensor(&mut rng, &[co, ci, k, k, k], -1.0, 1.0)).unwrap();
                    params.insert("b", rand_tensor(&mut rng, &[co], -1.0, 1.0)).unwrap();
                    rand_tensor(&mut rng, &[batch, ci, d, d + 1, d], -1.0, 1.0)
                } else {
                    spec.pad = spec.pad.min(k.saturating_sub(1) / 2);
                    params.insert("w", rand_tensor(&mut rng, &[ci, co, k, k, k], -1.0, 1.0)).unwrap();
                    params.insert("b", rand_tensor(&mut rng, &[co], -1.0, 1.0)).unwrap();
                    rand_tensor(&mut rng, &[batch, ci, d, 2, d], -1.0, 1.0)
                }
            }
            LayerKind::LeakyRelu | LayerKind::Sigmoid => {
                let n = rng.random_range(1..8);
                away_from_zero(&mut rng, &[batch, n])
            }
            LayerKind::BatchNorm | LayerKind::FrozenNorm => {
                let c = rng.random_range(1..4);
                let s = rng.random_range(1..5);
                let b = if kind == LayerKind::BatchNorm { batch + 1 } else { batch };
                params.insert("gamma", rand_tensor(&mut rng, &[c], 0.5, 1.5)).unwrap();
                params.insert("beta", rand_tensor(&mut rng, &[c], -0.5, 0.5)).unwrap();
                second = rand_tensor(&mut rng, &[2, c], 0.2, 1.0);
                rand_tensor(&mut rng, &[b, c, s], -2.0, 2.0)
            }
            LayerKind::ClampLog => {
                let n = rng.random_range(1..8);
                rand_tensor(&mut rng, &[batch, n], 0.1, 0.9)
            }
            LayerKind::Concat => {
                let (a, b) = (rng.random_range(1..5), rng.random_range(1..5));
                second = rand_tensor(&mut rng, &[batch, b], -1.0, 1.0);
                rand_tensor(&mut rng, &[batch, a], -1.0, 1.0)
            }
        };
        let mut case = Case {
            kind,
            params,
            input,
            second,
            probe: Vec::new(),
            spec,
        };
        let n_out = case.raw_output().len();
        case.probe = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        case
    }

    fn build(&self, g: &mut Graph<f64>, params: &ParameterSet<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> (Var, Var, Var) {
        let xv = g.input_with_grad(x);
        let yv = g.input_with_grad(y);
        let p = |g: &mut Graph<f64>, n: &str| g.param(params, n).unwrap();
        let out = match self.kind {
            LayerKind::Affine => {
                let (w, b) = (p(g, "w"), p(g, "b"));
                g.affine(xv, w, Some(b)).unwrap()
            }
            LayerKind::Conv2d | LayerKind::Conv3d => {
                let (w, b) = (p(g, "w"), p(g, "b"));
                g.conv(xv, w, Some(b), self.spec).unwrap()
            }
            LayerKind::ConvTranspose2d | LayerKind::ConvTranspose3d => {
                let (w, b) = (p(g, "w"), p(g, "b"));
                g.conv_transpose(xv, w, Some(b), self.spec).unwrap()
            }
            LayerKind::LeakyRelu => g.leaky_relu(xv, 0.2),
            LayerKind::Sigmoid => g.sigmoid(xv),
            LayerKind::BatchNorm => {
                let (ga, be) = (p(g, "gamma"), p(g, "beta"));
                g.batch_norm(xv, ga, be, 1e-5, "bn").unwrap()
            }
            LayerKind::FrozenNorm => {
                let (ga, be) = (p(g, "gamma"), p(g, "beta"));
                let c = y.shape()[1];
                let (mean, var) = y.data().split_at(c);
                g.frozen_norm(xv, ga, be, mean, var, 1e-5).unwrap()
            }
            LayerKind::ClampLog => {
                let c = g.clamp(xv, 1e-6, 1.0 - 1e-6);
                let l = g.log(c);
                let s = g.scale_shift(xv, -1.0, 1.0);
                let l2 = g.log(s);
                g.add(l, l2).unwrap()
            }
            LayerKind::Concat => g.concat(xv, yv).unwrap(),
        };
        (xv, yv, out)
    }

    fn raw_output(&self) -> Vec<f64> {
        let mut g = Graph::new();
        let (_, _, out) = self.build(&mut g, &self.params, &self.input, &self.second);
        g.data(out).to_vec()
    }

    fn loss(&self, params: &ParameterSet<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
        let mut g = Graph::new();
        let (_, _, out) = self.build(&mut g, params, x, y);
        g.data(out).iter().zip(&self.probe).map(|(a, b)| a * b).sum()
    }

    /// Largest relative error between tape and finite-difference gradients.
    pub fn max_relative_error(&self) -> f64 {
        let mut g = Graph::new();
        let (xv, yv, out) = self.build(&mut g, &self.params, &self.input, &self.second);
        let weighted = g.mul_const(out, &self.probe).unwrap();
        // mean × n turns the mean back into the plain weighted sum
        let n = self.probe.len() as f64;
        let m = g.mean(weighted);
        let loss = g.scale_shift(m, n, 0.0);
        let grads = g.backward(loss).unwrap();

        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let mut worst: f64 = 0.0;
        let names: Vec<String> = self.params.iter().map(|(k, _)| k.clone()).collect();
        for name in names {
            let analytic = grads.param(&name).map(|s| s.to_vec());
            let len = self.params.get(&name).unwrap().len();
            for i in 0..len {
                let mut plus = self.params.clone();
                plus.get_mut(&name).unwrap().data_mut()[i] += STEP;
                let mut minus = self.params.clone();
                minus.get_mut(&name).unwrap().data_mut()[i] -= STEP;
                let fd = (self.loss(&plus, &self.input, &self.second)
                    - self.loss(&minus, &self.input, &self.second))
                    / (2.0 * STEP);
                let a = analytic.as_ref().map_or(0.0, |v| v[i]);
                worst = worst.max(rel(a, fd));
            }
        }
        let check_second = self.kind == LayerKind::Concat;
        for (var, which) in [(xv, 0), (yv, 1)] {
            if which == 1 && !check_second {
                continue;
            }
            let base = if which == 0 { &self.input } else { &self.second };
            let analytic = grads.of(var).map(|s| s.to_vec());
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus.data_mut()[i] += STEP;
                let mut minus = base.clone();
                minus.data_mut()[i] -= STEP;
                let (lp, lm) = if which == 0 {
                    (
                        self.loss(&self.params, &plus, &self.second),
                        self.loss(&self.params, &minus, &self.second),
                    )
                } else {
                    (
                        self.loss(&self.params, &self.input, &plus),
                        self.loss(&self.params, &self.input, &minus),
                    )
                };
                let fd = (lp - lm) / (2.0 * STEP);
                let a = analytic.as_ref().map_or(0.0, |v| v[i]);
                worst = worst.max(rel(a, fd));
            }
        }
        worst
    }
}
