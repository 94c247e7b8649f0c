//! SU-Net / baseline U-Net construction, the smoothed-Dice + L2 loss, the
//! Adam optimizer and the training step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::snn::{batch_norm_relu, lecun_normal_init, RunningStats};
use crate::tape::{Padding, Tape, VarId};
use crate::tensor::{Result, Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Self-normalising variant: a single SELU after each convolution.
    Selu,
    /// Baseline variant: batch normalisation followed by ReLU.
    BatchnormRelu,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Number of pooling stages.
    pub levels: usize,
    /// Channel width, constant across levels.
    pub channels: usize,
    /// Spatial kernel size of the block convolutions.
    pub kernel: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            levels: 3,
            channels: 64,
            kernel: 2,
            activation: Activation::Selu,
            dropout_rate: 0.0,
            classes: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub l2_weight: f64,
    pub dice_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { label_smoothing: 0.1, l2_weight: 1e-5, dice_epsilon: 1e-6 }
    }
}

// ── parameter layout ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConvUnit {
    w: usize,
    b: usize,
    bn: Option<BnUnit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BnUnit {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Block {
    convs: [ConvUnit; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DecStage {
    up_w: usize,
    block: Block,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Structure {
    encoder: Vec<Block>,
    bottleneck: Block,
    /// Deepest stage first.
    decoder: Vec<DecStage>,
    final_extra: ConvUnit,
    classifier: ConvUnit,
}

pub struct Network {
    pub cfg: NetworkConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    structure: Structure,
    bn_stats: Vec<RunningStats>,
}

/// Handles into the tape produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// Per-pixel class probabilities, [B, classes, H, W].
    pub probs: VarId,
    /// Output of the last block activation (the final SELU in the SU-Net).
    pub last_act: VarId,
    /// Tape leaves of the parameters, aligned with `Network::params`.
    pub param_vars: Vec<VarId>,
}

struct Builder<'r, R: Rng> {
    params: Vec<Tensor>,
    names: Vec<String>,
    bn_stats: Vec<RunningStats>,
    with_bn: bool,
    kernel: usize,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, bn: bool) -> ConvUnit {
        let fan_in = c_in * k * k;
        let weight = lecun_normal_init(&[c_out, c_in, k, k], fan_in, self.rng);
        let w = self.push(format!("{name}.w"), weight);
        let b = self.push(format!("{name}.b"), Tensor::zeros(&[c_out]));
        let bn = if bn && self.with_bn {
            let gamma = self.push(format!("{name}.bn.gamma"), Tensor::full(&[c_out], 1.0));
            let beta = self.push(format!("{name}.bn.beta"), Tensor::zeros(&[c_out]));
            self.bn_stats.push(RunningStats::new(c_out, BN_MOMENTUM));
            Some(BnUnit { gamma, beta, stats: self.bn_stats.len() - 1 })
        } else {
            None
        };
        ConvUnit { w, b, bn }
    }

    fn block(&mut self, name: &str, c_in: usize, c_out: usize) -> Block {
        let k = self.kernel;
        Block {
            convs: [
                self.conv(&format!("{name}.conv1"), c_in, c_out, k, true),
                self.conv(&format!("{name}.conv2"), c_out, c_out, k, true),
            ],
        }
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }
}

/// Encoder of `levels` blocks with max pooling, a bottleneck block, a
/// mirrored decoder with transposed-convolution upsampling and skip
/// concatenation, then an extra convolution and a 1x1 classifier with
/// per-pixel softmax.
pub fn build_network<R: Rng>(cfg: NetworkConfig, rng: &mut R) -> Result<Network> {
    if cfg.levels < 1 {
        return Err(TensorError::Invalid("network needs at least one level".into()));
    }
    if cfg.classes < 2 {
        return Err(TensorError::Invalid("network needs at least two classes".into()));
    }
    let nc = cfg.channels;
    let mut b = Builder {
        params: vec![],
        names: vec![],
        bn_stats: vec![],
        with_bn: cfg.activation == Activation::BatchnormRelu,
        kernel: cfg.kernel,
        rng,
    };

    let mut encoder = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let c_in = if level == 0 { 1 } else { nc };
        encoder.push(b.block(&format!("enc{level}"), c_in, nc));
    }
    let bottleneck = b.block("bottleneck", nc, nc);
    let mut decoder = Vec::with_capacity(cfg.levels);
    for level in (0..cfg.levels).rev() {
        let up = lecun_normal_init(&[nc, nc, 2, 2], nc * 4, b.rng);
        let up_w = b.push(format!("dec{level}.up.w"), up);
        let block = b.block(&format!("dec{level}"), 2 * nc, nc);
        decoder.push(DecStage { up_w, block });
    }
    let final_extra = b.conv("final.extra", nc, nc, cfg.kernel, true);
    let classifier = b.conv("final.classifier", nc, cfg.classes, 1, false);

    Ok(Network {
        cfg,
        params: b.params,
        names: b.names,
        structure: Structure { encoder, bottleneck, decoder, final_extra, classifier },
        bn_stats: b.bn_stats,
    })
}

impl Network {
    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    fn conv_unit<R: Rng>(
        &mut self,
        tape: &mut Tape,
        x: VarId,
        unit: &ConvUnit,
        pvars: &[VarId],
        padding: Padding,
        training: bool,
        rng: &mut R,
        with_dropout: bool,
    ) -> Result<VarId> {
        let y = tape.conv2d(x, pvars[unit.w], pvars[unit.b], padding)?;
        let act = match (&unit.bn, self.cfg.activation) {
            (Some(bn), Activation::BatchnormRelu) => batch_norm_relu(
                tape,
                y,
                pvars[bn.gamma],
                pvars[bn.beta],
                &mut self.bn_stats[bn.stats],
                training,
                BN_EPS,
            )?,
            _ => tape.selu(y),
        };
        if with_dropout && self.cfg.dropout_rate > 0.0 && self.cfg.activation == Activation::Selu {
            tape.alpha_dropout(act, self.cfg.dropout_rate, training, rng)
        } else {
            Ok(act)
        }
    }

    fn block<R: Rng>(
        &mut self,
        tape: &mut Tape,
        mut x: VarId,
        block: Block,
        pvars: &[VarId],
        training: bool,
        rng: &mut R,
    ) -> Result<VarId> {
        let pad = self.same_padding();
        for unit in block.convs {
            x = self.conv_unit(tape, x, &unit, pvars, pad, training, rng, true)?;
        }
        Ok(x)
    }

    fn same_padding(&self) -> Padding {
        // pad bottom/right so stride-1 output size equals input size
        let extra = self.cfg.kernel - 1;
        Padding { top: 0, bottom: extra, left: 0, right: extra }
    }

    pub fn forward<R: Rng>(
        &mut self,
        tape: &mut Tape,
        input: VarId,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let pvars: Vec<VarId> =
            self.params.iter().map(|p| tape.leaf(p.clone(), training)).collect();
        let structure = self.structure.clone();

        let mut x = input;
        let mut skips = Vec::with_capacity(self.cfg.levels);
        for (level, block) in structure.encoder.into_iter().enumerate() {
            x = self.block(tape, x, block, &pvars, training, rng)?;
            skips.push(x);
            let (_, _, h, w) = tape.value(x).dims4()?;
            if h < 2 || w < 2 {
                return Err(TensorError::Invalid(format!(
                    "spatial extent {}x{} too small to pool at encoder level {}",
                    h, w, level
                )));
            }
            x = tape.max_pool2(x)?;
        }
        x = self.block(tape, x, structure.bottleneck, &pvars, training, rng)?;

        for (stage, skip) in structure.decoder.into_iter().zip(skips.into_iter().rev()) {
            x = tape.conv2d_transpose(x, pvars[stage.up_w], 2)?;
            let (_, _, hs, ws) = tape.value(skip).dims4()?;
            let (_, _, hx, wx) = tape.value(x).dims4()?;
            if hx < hs || wx < ws {
                x = tape.pad_bottom_right(x, hs - hx, ws - wx)?;
            }
            x = tape.concat_channels(skip, x)?;
            x = self.block(tape, x, stage.block, &pvars, training, rng)?;
        }

        let pad = self.same_padding();
        let last_act =
            self.conv_unit(tape, x, &structure.final_extra, &pvars, pad, training, rng, true)?;
        let logits = tape.conv2d(
            last_act,
            pvars[structure.classifier.w],
            pvars[structure.classifier.b],
            Padding::none(),
        )?;
        let probs = tape.softmax_channels(logits)?;
        Ok(ForwardPass { probs, last_act, param_vars: pvars })
    }

    /// Inference: binarize the foreground probability at 0.5 (argmax over the
    /// two classes). Returns one {0,1} mask per batch element, [B, H, W].
    pub fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.leaf(images.clone(), false);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&mut tape, input, false, &mut rng)?;
        let probs = tape.value(pass.probs);
        let (b, c, h, w) = probs.dims4()?;
        let plane = h * w;
        let mut out = Tensor::zeros(&[b, h, w]);
        for bi in 0..b {
            for p in 0..plane {
                let fg = probs.data()[(bi * c + 1) * plane + p];
                out.data_mut()[bi * plane + p] = if fg >= 0.5 { 1.0 } else { 0.0 };
            }
        }
        Ok(out)
    }
}

use rand::SeedableRng;

// ── loss ────────────────────────────────────────────────────────────

/// Smoothed one-hot encoding of a {0,1} mask batch [B, H, W] into [B, 2, H, W].
pub fn smooth_one_hot(masks: &Tensor, label_smoothing: f64) -> Result<Tensor> {
    let [b, h, w] = masks.shape() else {
        return Err(TensorError::ShapeMismatch {
            op: "smooth_one_hot",
            detail: format!("expected [B, H, W] masks, got {:?}", masks.shape()),
        });
    };
    let (b, h, w) = (*b, *h, *w);
    let plane = h * w;
    let mut out = Tensor::zeros(&[b, 2, h, w]);
    for bi in 0..b {
        for p in 0..plane {
            let y = masks.data()[bi * plane + p];
            out.data_mut()[(bi * 2) * plane + p] = (1.0 - y) * (1.0 - label_smoothing) + label_smoothing / 2.0;
            out.data_mut()[(bi * 2 + 1) * plane + p] = y * (1.0 - label_smoothing) + label_smoothing / 2.0;
        }
    }
    Ok(out)
}

/// Soft-Dice loss with label smoothing plus L2 parameter penalty:
/// (1 - mean Dice over classes and batch) + l2_weight * sum of squared params.
pub fn dice_smooth_loss(
    tape: &mut Tape,
    probs: VarId,
    target_masks: &Tensor,
    cfg: &LossConfig,
    params: &[VarId],
) -> Result<VarId> {
    if !(0.0..1.0).contains(&cfg.label_smoothing) {
        return Err(TensorError::Invalid(format!(
            "label smoothing {} outside [0, 1)",
            cfg.label_smoothing
        )));
    }
    let (b, c, h, w) = tape.value(probs).dims4()?;
    if c != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "dice_smooth_loss",
            detail: format!("expected 2 prediction channels, got {}", c),
        });
    }
    let target = smooth_one_hot(target_masks, cfg.label_smoothing)?;
    if target.shape() != tape.value(probs).shape() {
        return Err(TensorError::ShapeMismatch {
            op: "dice_smooth_loss",
            detail: format!(
                "prediction {:?} vs target {:?}",
                tape.value(probs).shape(),
                target.shape()
            ),
        });
    }
    let eps = cfg.dice_epsilon;
    let plane = h * w;
    let dice_mean = |p: &Tensor| -> f64 {
        let mut total = 0.0;
        for bc in 0..b * c {
            let ps = &p.data()[bc * plane..(bc + 1) * plane];
            let ts = &target.data()[bc * plane..(bc + 1) * plane];
            let mut num = 0.0;
            let mut den = eps;
            for (pv, tv) in ps.iter().zip(ts) {
                num += 2.0 * pv * tv;
                den += pv * pv + tv * tv;
            }
            total += num / den;
        }
        total / (b * c) as f64
    };
    let value = Tensor::scalar(1.0 - dice_mean(tape.value(probs)));
    let target_bw = target.clone();
    let dice_loss = tape.record(
        value,
        vec![probs],
        Box::new(move |go, pv, _| {
            let g = go.data()[0];
            let p = pv[0];
            let mut gp = Tensor::zeros(p.shape());
            let scale = -g / (b * c) as f64;
            for bc in 0..b * c {
                let ps = &p.data()[bc * plane..(bc + 1) * plane];
                let ts = &target_bw.data()[bc * plane..(bc + 1) * plane];
                let mut num = 0.0;
                let mut den = eps;
                for (pv, tv) in ps.iter().zip(ts) {
                    num += 2.0 * pv * tv;
                    den += pv * pv + tv * tv;
                }
                let d = num / den;
                let gs = &mut gp.data_mut()[bc * plane..(bc + 1) * plane];
                for i in 0..plane {
                    gs[i] = scale * (2.0 * ts[i] - d * 2.0 * ps[i]) / den;
                }
            }
            vec![gp]
        }),
    );
    if cfg.l2_weight == 0.0 || params.is_empty() {
        return Ok(dice_loss);
    }
    let mut l2 = None;
    for &p in params {
        let s = tape.sum_squares(p);
        l2 = Some(match l2 {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let l2 = tape.scale(l2.unwrap(), cfg.l2_weight);
    tape.add(dice_loss, l2)
}

// ── Adam ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            cfg,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// Bias-corrected Adam update. Errors on any non-finite gradient, the
/// training-divergence signal.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        if !g.all_finite() {
            return Err(TensorError::NonFinite("adam_step gradient"));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c = &state.cfg;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for ((p, g), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            pd[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

// ── training step ───────────────────────────────────────────────────

/// One forward/backward/update step on a mini-batch. Returns the loss value.
pub fn train_step<R: Rng>(
    net: &mut Network,
    images: &Tensor,
    masks: &Tensor,
    loss_cfg: &LossConfig,
    adam: &mut AdamState,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let input = tape.leaf(images.clone(), false);
    let pass = net.forward(&mut tape, input, true, rng)?;
    let loss = dice_smooth_loss(&mut tape, pass.probs, masks, loss_cfg, &pass.param_vars)?;
    let loss_value = tape.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(TensorError::NonFinite("training loss"));
    }
    tape.backward(loss)?;
    let grads: Vec<Tensor> = pass
        .param_vars
        .iter()
        .zip(net.params())
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    adam_step(net.params_mut(), &grads, adam)?;
    Ok(loss_value)
}

// ── checkpoints ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetworkConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    step: u64,
    structure: Structure,
    bn_stats: Vec<RunningStats>,
}

impl Network {
    /// Flat binary of the parameter buffers preceded by a JSON header line.
    pub fn save_checkpoint(&self, path: &std::path::Path, step: u64) -> std::io::Result<()> {
        use std::io::Write;
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            names: self.names.clone(),
            shapes: self.params.iter().map(|p| p.shape().to_vec()).collect(),
            step,
            structure: self.structure.clone(),
            bn_stats: self.bn_stats.clone(),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, &header)?;
        f.write_all(b"\n")?;
        for p in &self.params {
            for v in p.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> std::io::Result<(Network, u64)> {
        use std::io::{BufRead, Read};
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        f.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(&line)?;
        let mut params = Vec::with_capacity(header.shapes.len());
        let mut buf = [0u8; 8];
        for shape in &header.shapes {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                f.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            params.push(Tensor::new(shape.clone(), data).map_err(std::io::Error::other)?);
        }
        Ok((
            Network {
                cfg: header.config,
                params,
                names: header.names,
                structure: header.structure,
                bn_stats: header.bn_stats,
            },
            header.step,
        ))
    }
}

// ── numerical validation ────────────────────────────────────────────

/// Finite-difference check of every differentiable building block plus a full
/// one-level 8x8 network; returns (name, max relative error) per case.
pub fn grad_check_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use crate::snn::{batch_norm_relu, RunningStats};
    use crate::tape::{grad_check, Padding, Tape};
    use rand::Rng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    fn rand_t<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }
    let mut out = Vec::new();

    let x = rand_t(&mut rng, &[1, 2, 5, 5]);
    let w = rand_t(&mut rng, &[3, 2, 2, 2]);
    let b = rand_t(&mut rng, &[3]);
    let (wc, bc) = (w.clone(), b.clone());
    out.push((
        "conv2d/input",
        grad_check(
            move |t: &mut Tape, xid| {
                let wid = t.leaf(wc.clone(), false);
                let bid = t.leaf(bc.clone(), false);
                let y = t.conv2d(xid, wid, bid, Padding::same_2x2())?;
                Ok(t.sum_squares(y))
            },
            &x,
            1e-5,
        )?,
    ));
    let xc = x.clone();
    let bc = b.clone();
    out.push((
        "conv2d/kernel",
        grad_check(
            move |t: &mut Tape, wid| {
                let xid = t.leaf(xc.clone(), false);
                let bid = t.leaf(bc.clone(), false);
                let y = t.conv2d(xid, wid, bid, Padding::same_2x2())?;
                Ok(t.sum_squares(y))
            },
            &w,
            1e-5,
        )?,
    ));

    let x = rand_t(&mut rng, &[1, 2, 4, 4]);
    let k = rand_t(&mut rng, &[2, 3, 2, 2]);
    let kc = k.clone();
    out.push((
        "conv2d_transpose/input",
        grad_check(
            move |t: &mut Tape, xid| {
                let kid = t.leaf(kc.clone(), false);
                let y = t.conv2d_transpose(xid, kid, 2)?;
                Ok(t.sum_squares(y))
            },
            &x,
            1e-5,
        )?,
    ));

    let x = rand_t(&mut rng, &[1, 2, 6, 6]);
    out.push((
        "max_pool2",
        grad_check(
            |t: &mut Tape, xid| {
                let y = t.max_pool2(xid)?;
                Ok(t.sum_squares(y))
            },
            &x,
            1e-5,
        )?,
    ));

    let x = rand_t(&mut rng, &[1, 2, 4, 4]);
    out.push((
        "selu",
        grad_check(
            |t: &mut Tape, xid| {
                let y = t.selu(xid);
                Ok(t.sum_squares(y))
            },
            &x,
            1e-6,
        )?,
    ));

    let x = rand_t(&mut rng, &[2, 3, 4, 4]);
    let gamma = rand_t(&mut rng, &[3]);
    let beta = rand_t(&mut rng, &[3]);
    let (gc, bc) = (gamma.clone(), beta.clone());
    out.push((
        "batch_norm_relu/input",
        grad_check(
            move |t: &mut Tape, xid| {
                let gid = t.leaf(gc.clone(), false);
                let bid = t.leaf(bc.clone(), false);
                let y = batch_norm_relu(
                    t,
                    xid,
                    gid,
                    bid,
                    RunningStats::new(3, BN_MOMENTUM),
                    true,
                    BN_EPS,
                )?;
                Ok(t.sum_squares(y))
            },
            &x,
            1e-5,
        )?,
    ));

    // dice loss through the softmax, against a random binary mask
    let logits = rand_t(&mut rng, &[1, 2, 4, 4]);
    let mask = {
        let mut m = Tensor::zeros(&[1, 4, 4]);
        for v in m.data_mut() {
            *v = f64::from(rng.gen_bool(0.5));
        }
        m
    };
    let cfg = LossConfig::default();
    let mc = mask.clone();
    out.push((
        "dice_smooth_loss",
        grad_check(
            move |t: &mut Tape, xid| {
                let p = t.softmax_channels(xid)?;
                dice_smooth_loss(t, p, &mc, &cfg, &[])
            },
            &logits,
            1e-6,
        )?,
    ));

    // full one-level SU-Net on an 8x8 input
    let net_cfg = NetworkConfig {
        levels: 1,
        channels: 2,
        ..NetworkConfig::default()
    };
    let net = std::cell::RefCell::new(build_network(net_cfg, &mut rng)?);
    let x = rand_t(&mut rng, &[1, 1, 8, 8]);
    let mask = {
        let mut m = Tensor::zeros(&[1, 8, 8]);
        for v in m.data_mut() {
            *v = f64::from(rng.gen_bool(0.5));
        }
        m
    };
    let cfg = LossConfig::default();
    out.push((
        "sunet_1level/input",
        grad_check(
            move |t: &mut Tape, xid| {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
                let pass = net.borrow_mut().forward(t, xid, false, &mut rng)?;
                dice_smooth_loss(t, pass.probs, &mask, &cfg, &[])
            },
            &x,
            1e-6,
        )?,
    ));

    Ok(out)
}
