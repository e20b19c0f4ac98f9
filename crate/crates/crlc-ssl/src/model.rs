//! Model definition: the per-channel strided convolutional encoder, the
//! message-passing aggregator over the fully connected channel graph,
//! and the small affine heads (projector, linear probe). Parameters are
//! plain arrays; forward passes are recorded on an autodiff tape via
//! bound parameter handles.

use crate::autodiff::{fc, Scalar, Tape, Var};
use crate::data::Window;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};
use rand::Rng;

pub const EMBED_DIM: usize = 64;
pub const PROJ_DIM: usize = 32;
pub const POOL_SEGMENTS: usize = 4;

/// Block widths, kernel sizes (stride always equals kernel width), and
/// group-norm group counts for the six convolutional blocks, plus the
/// embedding width of the final pointwise map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderArch {
    pub widths: [usize; 6],
    pub kernels: [usize; 6],
    pub groups: [usize; 6],
    pub embed: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            widths: [256, 256, 256, 256, 256, 64],
            kernels: [3, 2, 2, 2, 2, 2],
            groups: [16, 16, 16, 16, 16, 8],
            embed: EMBED_DIM,
        }
    }
}

impl EncoderArch {
    /// Output length after the six valid strided convolutions.
    pub fn output_length(&self, t_in: usize) -> Result<usize> {
        let mut t = t_in;
        for &k in &self.kernels {
            t /= k;
        }
        if t == 0 {
            return Err(Error::InputTooShort(format!(
                "input length {t_in} collapses to zero after strided convolutions"
            )));
        }
        Ok(t)
    }
}

/// Output length of the default architecture.
pub fn output_length(t_in: usize) -> Result<usize> {
    EncoderArch::default().output_length(t_in)
}

/// Affine map stored as weight[in, out] plus bias[out].
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    /// Weights from Uniform(-s, s) with s = 1/sqrt(fan_in); zero bias.
    pub fn init(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (inp as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((inp, out), |_| fc::<F>(rng.gen_range(-s..s))),
            bias: Array1::zeros(out),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone().into_dyn()),
            bias: tape.leaf(self.bias.clone().into_dyn()),
        }
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, ArrayViewD<'_, F>)> {
        vec![
            (format!("{prefix}.weight"), self.weight.view().into_dyn()),
            (format!("{prefix}.bias"), self.bias.view().into_dyn()),
        ]
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        vec![
            (
                format!("{prefix}.weight"),
                self.weight.view_mut().into_dyn(),
            ),
            (format!("{prefix}.bias"), self.bias.view_mut().into_dyn()),
        ]
    }
}

/// One conv block: strided conv expressed as a matrix on flattened
/// kernel windows, then dropout, group norm, GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<F> {
    /// weight[kernel * in_ch, out_ch]
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub kernel: usize,
    pub groups: usize,
}

impl<F: Scalar> ConvBlock<F> {
    fn init(kernel: usize, in_ch: usize, out_ch: usize, groups: usize, rng: &mut impl Rng) -> Self {
        let fan_in = kernel * in_ch;
        let s = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((fan_in, out_ch), |_| fc::<F>(rng.gen_range(-s..s))),
            bias: Array1::zeros(out_ch),
            gamma: Array1::from_elem(out_ch, F::one()),
            beta: Array1::zeros(out_ch),
            kernel,
            groups,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub arch: EncoderArch,
    pub blocks: Vec<ConvBlock<F>>,
    pub final_map: Linear<F>,
    /// One message net per round, each 2*embed -> embed.
    pub message: Vec<Linear<F>>,
    pub readout1: Linear<F>,
    pub readout2: Linear<F>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn init(arch: &EncoderArch, rounds: usize, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::with_capacity(6);
        let mut in_ch = 1;
        for i in 0..6 {
            blocks.push(ConvBlock::init(
                arch.kernels[i],
                in_ch,
                arch.widths[i],
                arch.groups[i],
                rng,
            ));
            in_ch = arch.widths[i];
        }
        let e = arch.embed;
        Self {
            arch: arch.clone(),
            blocks,
            final_map: Linear::init(in_ch, e, rng),
            message: (0..rounds).map(|_| Linear::init(2 * e, e, rng)).collect(),
            readout1: Linear::init(e, e, rng),
            readout2: Linear::init(e, e, rng),
        }
    }

    pub fn rounds(&self) -> usize {
        self.message.len()
    }

    /// Named tensors in the fixed visit order shared by the optimizer,
    /// the checkpoint writer, and `bound_from`.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("encoder.block{}", i + 1);
            out.push((format!("{p}.weight"), b.weight.view().into_dyn()));
            out.push((format!("{p}.bias"), b.bias.view().into_dyn()));
            out.push((format!("{p}.gamma"), b.gamma.view().into_dyn()));
            out.push((format!("{p}.beta"), b.beta.view().into_dyn()));
        }
        out.extend(self.final_map.tensors("encoder.final"));
        for (k, m) in self.message.iter().enumerate() {
            out.extend(m.tensors(&format!("mpnn.message{}", k + 1)));
        }
        out.extend(self.readout1.tensors("mpnn.readout1"));
        out.extend(self.readout2.tensors("mpnn.readout2"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("encoder.block{}", i + 1);
            out.push((format!("{p}.weight"), b.weight.view_mut().into_dyn()));
            out.push((format!("{p}.bias"), b.bias.view_mut().into_dyn()));
            out.push((format!("{p}.gamma"), b.gamma.view_mut().into_dyn()));
            out.push((format!("{p}.beta"), b.beta.view_mut().into_dyn()));
        }
        out.extend(self.final_map.tensors_mut("encoder.final"));
        for (k, m) in self.message.iter_mut().enumerate() {
            out.extend(m.tensors_mut(&format!("mpnn.message{}", k + 1)));
        }
        out.extend(self.readout1.tensors_mut("mpnn.readout1"));
        out.extend(self.readout2.tensors_mut("mpnn.readout2"));
        out
    }

    /// Leafs every tensor onto the tape, in visit order.
    pub fn bind(&self, tape: &mut Tape<F>) -> BoundModel {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|(_, v)| tape.leaf(v.to_owned()))
            .collect();
        self.bound_from(&vars)
    }

    /// Assembles bound handles from existing tape variables, one per
    /// tensor in visit order (the finite-difference harness relies on
    /// this to rebuild the model from perturbed leaves).
    pub fn bound_from(&self, vars: &[Var]) -> BoundModel {
        assert_eq!(vars.len(), 4 * self.blocks.len() + 2 * (3 + self.message.len()));
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("var count checked above");
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundConvBlock {
                weight: next(),
                bias: next(),
                gamma: next(),
                beta: next(),
                kernel: b.kernel,
                groups: b.groups,
            })
            .collect();
        let mut bound_linear = || BoundLinear {
            weight: next(),
            bias: next(),
        };
        BoundModel {
            blocks,
            final_map: bound_linear(),
            message: (0..self.message.len()).map(|_| bound_linear()).collect(),
            readout1: bound_linear(),
            readout2: bound_linear(),
            embed: self.arch.embed,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundConvBlock {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
    pub kernel: usize,
    pub groups: usize,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub blocks: Vec<BoundConvBlock>,
    pub final_map: BoundLinear,
    pub message: Vec<BoundLinear>,
    pub readout1: BoundLinear,
    pub readout2: BoundLinear,
    pub embed: usize,
}

impl BoundModel {
    /// Tape variables in visit order, mirroring `ModelParams::tensors`.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([b.weight, b.bias, b.gamma, b.beta]);
        }
        let lin = |l: &BoundLinear, out: &mut Vec<Var>| out.extend([l.weight, l.bias]);
        lin(&self.final_map, &mut out);
        for m in &self.message {
            lin(m, &mut out);
        }
        lin(&self.readout1, &mut out);
        lin(&self.readout2, &mut out);
        out
    }
}

pub fn linear_map<F: Scalar>(tape: &mut Tape<F>, x: Var, lin: &BoundLinear) -> Var {
    tape.affine(x, lin.weight, Some(lin.bias), 1)
}

/// Encodes a stack of single-channel signals [R, T_in, 1] to per-channel
/// embeddings [R, T_out, embed]. Each strided conv is a reshape of
/// kernel windows into rows followed by one matrix product.
pub fn encode_channels<F: Scalar>(
    tape: &mut Tape<F>,
    model: &BoundModel,
    x: Var,
    dropout: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let t_in = shape[1];
    let mut cur = x;
    let mut t = t_in;
    for block in &model.blocks {
        let k = block.kernel;
        let t2 = t / k;
        if t2 == 0 {
            return Err(Error::InputTooShort(format!(
                "input length {t_in} collapses to zero after strided convolutions"
            )));
        }
        if t2 * k != t {
            cur = tape.slice_axis(cur, 1, t2 * k);
        }
        cur = tape.affine(cur, block.weight, Some(block.bias), k);
        if training && dropout > 0.0 {
            cur = tape.dropout(cur, dropout, rng);
        }
        cur = tape.group_norm(cur, block.gamma, block.beta, block.groups);
        cur = tape.gelu(cur);
        t = t2;
    }
    Ok(linear_map(tape, cur, &model.final_map))
}

/// Runs the message rounds and mean readout on per-channel embeddings
/// [N, C, T, embed], returning [N, T, embed]. The 2*embed -> embed
/// message map is evaluated as two half-maps so pairwise inputs never
/// need materializing as concatenations.
pub fn aggregate<F: Scalar>(
    tape: &mut Tape<F>,
    model: &BoundModel,
    h: Var,
    dropout: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let shape = tape.value(h).shape().to_vec();
    let (c, e) = (shape[1], shape[3]);
    if !model.message.is_empty() && c < 2 {
        return Err(Error::invalid(
            "message passing needs at least two channels",
        ));
    }
    let mut h = h;
    for msg in &model.message {
        let w_own = tape.slice_rows(msg.weight, 0, e);
        let w_other = tape.slice_rows(msg.weight, e, e);
        let own = tape.affine(h, w_own, None, 1);
        let other = tape.affine(h, w_other, None, 1);
        let mut pair = tape.pair_sum(own, other);
        pair = tape.add_bias(pair, msg.bias);
        if training && dropout > 0.0 {
            pair = tape.dropout(pair, dropout, rng);
        }
        pair = tape.relu(pair);
        let m = tape.off_diag_mean(pair);
        h = tape.add(h, m);
    }
    let mean = tape.mean_axis(h, 1);
    let mut z = linear_map(tape, mean, &model.readout1);
    if training && dropout > 0.0 {
        z = tape.dropout(z, dropout, rng);
    }
    z = tape.relu(z);
    Ok(linear_map(tape, z, &model.readout2))
}

/// Stacks windows (all sharing C and T) into a [N*C, T, 1] leaf.
pub fn window_batch_input<F: Scalar>(tape: &mut Tape<F>, windows: &[Window]) -> Result<Var> {
    if windows.is_empty() {
        return Err(Error::invalid("empty window batch"));
    }
    let (c, t) = (windows[0].channels(), windows[0].len());
    if windows.iter().any(|w| w.channels() != c || w.len() != t) {
        return Err(Error::invalid("windows in a batch must share C and T"));
    }
    let n = windows.len();
    let mut arr = ArrayD::<F>::zeros(IxDyn(&[n * c, t, 1]));
    for (i, w) in windows.iter().enumerate() {
        for ch in 0..c {
            for j in 0..t {
                arr[[i * c + ch, j, 0]] = fc::<F>(w.values()[[ch, j]] as f64);
            }
        }
    }
    Ok(tape.leaf(arr))
}

/// Full forward: windows -> per-channel encoding -> message rounds ->
/// readout, producing [N, T_out, embed].
pub fn forward_batch<F: Scalar>(
    tape: &mut Tape<F>,
    model: &BoundModel,
    windows: &[Window],
    dropout: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let x = window_batch_input(tape, windows)?;
    forward_from_input(tape, model, x, windows.len(), dropout, training, rng)
}

/// Forward from an already-leafed [N*C, T, 1] input.
pub fn forward_from_input<F: Scalar>(
    tape: &mut Tape<F>,
    model: &BoundModel,
    x: Var,
    n: usize,
    dropout: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let c = shape[0] / n;
    let enc = encode_channels(tape, model, x, dropout, training, rng)?;
    let t_out = tape.value(enc).shape()[1];
    let h = tape.reshape(enc, &[n, c, t_out, model.embed]);
    aggregate(tape, model, h, dropout, training, rng)
}

/// Instance embedding for the projected contrastive loss: mean over
/// time, then the affine projector.
pub fn project<F: Scalar>(tape: &mut Tape<F>, z: Var, proj: &BoundLinear) -> Var {
    let pooled = tape.mean_axis(z, 1);
    linear_map(tape, pooled, proj)
}

/// Segment boundaries for pooling T_out into 4 nearly equal parts:
/// round(j * T_out / 4) for j = 0..=4.
pub fn pool_bounds(t_out: usize) -> Result<Vec<usize>> {
    if t_out < POOL_SEGMENTS {
        return Err(Error::InputTooShort(format!(
            "probe pooling needs at least {POOL_SEGMENTS} output steps, got {t_out}"
        )));
    }
    Ok((0..=POOL_SEGMENTS)
        .map(|j| (j as f64 * t_out as f64 / POOL_SEGMENTS as f64).round() as usize)
        .collect())
}

/// Classifier logits: average-pool [N, T, E] into 4 segments, flatten
/// to 4*E, apply the head.
pub fn head_logits<F: Scalar>(tape: &mut Tape<F>, z: Var, head: &BoundLinear) -> Result<Var> {
    let shape = tape.value(z).shape().to_vec();
    let (n, t, e) = (shape[0], shape[1], shape[2]);
    let bounds = pool_bounds(t)?;
    let pooled = tape.avg_pool_segments(z, &bounds);
    let flat = tape.reshape(pooled, &[n, POOL_SEGMENTS * e]);
    Ok(linear_map(tape, flat, head))
}
