//! Self-normalising building blocks: SELU, alpha-dropout, LeCun-normal
//! initialization, the batch-norm + ReLU pair of the baseline network, and a
//! moment-propagation probe over a deep fully connected chain.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Tape, VarId};
use crate::tensor::{Result, Tensor, TensorError};

/// Scale constant of the SELU activation.
pub const SELU_LAMBDA: f64 = 1.0507;
/// Exponential constant of the SELU activation.
pub const SELU_ALPHA: f64 = 1.6733;
/// Negative saturation value, -lambda * alpha.
pub const SELU_SATURATION: f64 = -SELU_LAMBDA * SELU_ALPHA;

pub fn selu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * (SELU_ALPHA * x.exp() - SELU_ALPHA)
    }
}

/// Derivative of SELU; at x = 0 the lower branch (lambda * alpha) is used.
pub fn selu_deriv_scalar(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

impl Tape {
    pub fn selu(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(selu_scalar);
        self.record(
            value,
            vec![x],
            Box::new(|go, pv, _| {
                let g = pv[0]
                    .data()
                    .iter()
                    .zip(go.data())
                    .map(|(&x, &g)| selu_deriv_scalar(x) * g)
                    .collect();
                vec![Tensor::new(pv[0].shape().to_vec(), g).unwrap()]
            }),
        )
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.record(
            value,
            vec![x],
            Box::new(|go, pv, _| {
                let g = pv[0]
                    .data()
                    .iter()
                    .zip(go.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                vec![Tensor::new(pv[0].shape().to_vec(), g).unwrap()]
            }),
        )
    }

    /// Alpha-dropout in training mode: dropped activations go to the SELU
    /// saturation value, then an affine correction restores zero mean / unit
    /// variance in expectation. Identity when `training` is false or rate 0.
    pub fn alpha_dropout<R: Rng>(
        &mut self,
        x: VarId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<VarId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let sat = SELU_SATURATION;
        // Klambauer et al. closed form for the mean/variance-preserving affine.
        let a = (keep + sat * sat * keep * (1.0 - keep)).powf(-0.5);
        let b = -a * (1.0 - keep) * sat;
        let mask: Vec<bool> = (0..self.value(x).len()).map(|_| rng.gen::<f64>() < keep).collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| a * (if m { v } else { sat }) + b)
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.record(
            value,
            vec![x],
            Box::new(move |go, pv, _| {
                let g = go
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &m)| if m { a * g } else { 0.0 })
                    .collect();
                vec![Tensor::new(pv[0].shape().to_vec(), g).unwrap()]
            }),
        ))
    }

    /// Batch normalization over batch and spatial axes, per channel, with
    /// batch statistics (training mode). Returns the normalized output and
    /// the batch statistics for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<(VarId, BatchStats)> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let n = b * h * w;
        if n == 0 {
            return Err(TensorError::Invalid("batch_norm on empty batch".into()));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("gamma/beta must have {} channels", c),
            });
        }
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let xd = self.value(x).data();
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                s += xd[base..base + plane].iter().sum::<f64>();
            }
            let m = s / n as f64;
            let mut v = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                v += xd[base..base + plane].iter().map(|&x| (x - m) * (x - m)).sum::<f64>();
            }
            mean[ci] = m;
            var[ci] = v / n as f64; // population variance
        }
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(&[b, c, h, w]);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let s = (var[ci] + eps).sqrt();
                for p in 0..plane {
                    out.data_mut()[base + p] = gd[ci] * (xd[base + p] - mean[ci]) / s + bd[ci];
                }
            }
        }
        let stats = BatchStats { mean: mean.clone(), var: var.clone() };
        let id = self.record(
            out,
            vec![x, gamma, beta],
            Box::new(move |go, pv, _| {
                let xd = pv[0].data();
                let gd = pv[1].data();
                let g = go.data();
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                let mut ggamma = Tensor::zeros(&[c]);
                let mut gbeta = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let s = (var[ci] + eps).sqrt();
                    let mut sum_g = 0.0;
                    let mut sum_g_xhat = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for p in 0..plane {
                            let xhat = (xd[base + p] - mean[ci]) / s;
                            sum_g += g[base + p];
                            sum_g_xhat += g[base + p] * xhat;
                        }
                    }
                    ggamma.data_mut()[ci] = sum_g_xhat;
                    gbeta.data_mut()[ci] = sum_g;
                    let mg = sum_g / n as f64;
                    let mgx = sum_g_xhat / n as f64;
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for p in 0..plane {
                            let xhat = (xd[base + p] - mean[ci]) / s;
                            gx.data_mut()[base + p] = gd[ci] / s * (g[base + p] - mg - xhat * mgx);
                        }
                    }
                }
                vec![gx, ggamma, gbeta]
            }),
        );
        Ok((id, stats))
    }

    /// Batch normalization in inference mode: running statistics applied as a
    /// fixed per-channel affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running: &RunningStats,
        eps: f64,
    ) -> Result<VarId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if running.mean.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm_eval",
                detail: format!("running stats have {} channels, input {}", running.mean.len(), c),
            });
        }
        let plane = h * w;
        let mean = running.mean.clone();
        let var = running.var.clone();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(&[b, c, h, w]);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let s = (var[ci] + eps).sqrt();
                for p in 0..plane {
                    out.data_mut()[base + p] = gd[ci] * (xd[base + p] - mean[ci]) / s + bd[ci];
                }
            }
        }
        Ok(self.record(
            out,
            vec![x, gamma, beta],
            Box::new(move |go, pv, _| {
                let xd = pv[0].data();
                let g = go.data();
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                let mut ggamma = Tensor::zeros(&[c]);
                let mut gbeta = Tensor::zeros(&[c]);
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        let s = (var[ci] + eps).sqrt();
                        for p in 0..plane {
                            gx.data_mut()[base + p] = gd[ci] / s * g[base + p];
                            ggamma.data_mut()[ci] += g[base + p] * (xd[base + p] - mean[ci]) / s;
                            gbeta.data_mut()[ci] += g[base + p];
                        }
                    }
                }
                vec![gx, ggamma, gbeta]
            }),
        ))
    }
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Exponential running statistics used by batch norm at inference time.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize, momentum: f64) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels], momentum }
    }

    pub fn update(&mut self, batch: &BatchStats) {
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = self.momentum * *r + (1.0 - self.momentum) * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = self.momentum * *r + (1.0 - self.momentum) * b;
        }
    }
}

/// Batch norm followed by ReLU; the block the SELU activation replaces.
/// Updates `running` in training mode and uses it verbatim in inference.
pub fn batch_norm_relu<RS: std::borrow::BorrowMut<RunningStats>>(
    tape: &mut Tape,
    x: VarId,
    gamma: VarId,
    beta: VarId,
    mut running: RS,
    training: bool,
    eps: f64,
) -> Result<VarId> {
    let normed = if training {
        let (y, stats) = tape.batch_norm_train(x, gamma, beta, eps)?;
        running.borrow_mut().update(&stats);
        y
    } else {
        tape.batch_norm_eval(x, gamma, beta, running.borrow_mut(), eps)?
    };
    Ok(tape.relu(normed))
}

/// I.i.d. zero-mean normal samples with variance 1/fan_in.
pub fn lecun_normal_init<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    assert!(fan_in >= 1, "fan_in must be >= 1");
    let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Activation mean/variance of one layer of the probe chain.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentProbe {
    pub layer: usize,
    pub mean: f64,
    pub variance: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeActivation {
    Selu,
    Relu,
}

/// Propagate standard-normal inputs through a `depth`-layer fully connected
/// chain with LeCun-normal weights, recording per-layer activation moments.
pub fn selfnorm_probe<R: Rng>(
    depth: usize,
    width: usize,
    n_samples: usize,
    activation: ProbeActivation,
    rng: &mut R,
) -> Vec<MomentProbe> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut x: Vec<f64> = (0..n_samples * width).map(|_| normal.sample(rng)).collect();
    let mut probes = Vec::with_capacity(depth);
    let mut y = vec![0.0; n_samples * width];
    for layer in 0..depth {
        let weights = lecun_normal_init(&[width, width], width, rng);
        let wd = weights.data();
        for s in 0..n_samples {
            let row = &x[s * width..(s + 1) * width];
            let out = &mut y[s * width..(s + 1) * width];
            for (o, out_v) in out.iter_mut().enumerate() {
                let wrow = &wd[o * width..(o + 1) * width];
                let mut acc = 0.0;
                for k in 0..width {
                    acc += row[k] * wrow[k];
                }
                *out_v = match activation {
                    ProbeActivation::Selu => selu_scalar(acc),
                    ProbeActivation::Relu => acc.max(0.0),
                };
            }
        }
        std::mem::swap(&mut x, &mut y);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let variance = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        probes.push(MomentProbe { layer, mean, variance, n_samples: x.len() });
    }
    probes
}
