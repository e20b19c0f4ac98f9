//! Reverse-mode automatic differentiation on dynamically shaped arrays.
//!
//! A `Tape` records every operation applied to `Var` handles. `backward`
//! replays the record in reverse, accumulating gradients for every node.
//! The op set is exactly what the encoder, MPNN, losses, and classifier
//! need; each backward rule is checked against finite differences in the
//! test suite.
//!
//! All node values are kept in standard (row-major, contiguous) layout so
//! reshapes are free of surprises.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, IxDyn};
use rand::Rng;

/// Element type for tapes: f32 for training throughput, f64 for
/// finite-difference gradient checks.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + Send
    + Sync
    + std::fmt::Debug
    + 'static
{
    fn erf(self) -> Self;
    /// `exp` tuned for throughput; for f32 an inlineable polynomial
    /// (a few ulp) instead of a libm call per element.
    fn exp_fast(self) -> Self;
}

/// Shorthand for casting an f64 constant into the tape element type.
pub fn fc<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("finite constant")
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn exp_fast(self) -> Self {
        self.exp()
    }
}

impl Scalar for f32 {
    // Abramowitz & Stegun 7.1.26, |error| < 1.5e-7 (plus a few ulp from
    // `exp_fast`). Inlines and vectorizes, unlike a libm call.
    fn erf(self) -> Self {
        let sign = if self < 0.0 { -1.0 } else { 1.0 };
        let x = self.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let y = t
            * (0.254829592
                + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        sign * (1.0 - y * (-x * x).exp_fast())
    }

    // Range reduction onto [-ln2/2, ln2/2] with a two-part ln2, a
    // degree-6 polynomial, then an exponent-bit scale. Relative error a
    // few ulp; out-of-range exponents clamp to 0 / +inf.
    fn exp_fast(self) -> Self {
        const LOG2_E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_359_375;
        const LN2_LO: f32 = -2.121_944_4e-4;
        // Magic-number round-to-nearest (valid since |n| < 2^22 long
        // before exp over/underflows); avoids a libm roundf call.
        const MAGIC: f32 = 12_582_912.0;
        let n = (self * LOG2_E + MAGIC) - MAGIC;
        let r = (self - n * LN2_HI) - n * LN2_LO;
        let mut p = 1.987_569_2e-4f32;
        p = p * r + 1.398_199_9e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 0.166_666_66;
        p = p * r + 0.5;
        let y = p * r * r + r + 1.0;
        // Branchless exponent scale: n = -127 lands on the zero bit
        // pattern, so deep underflow flushes to 0; overflow saturates
        // near f32::MAX instead of inf (fine for the e^{-x} uses here).
        let n = n.max(-127.0).min(127.0) as i32;
        y * f32::from_bits(((n + 127) as u32) << 23)
    }
}

fn gelu_val<F: Scalar>(x: F) -> F {
    let half = fc::<F>(0.5);
    let inv_sqrt2 = fc::<F>(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (F::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = fc::<F>(0.5);
    let inv_sqrt2 = fc::<F>(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = fc::<F>(0.3989422804014327);
    let cdf = half * (F::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-half * x * x).exp_fast();
    cdf + x * pdf
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    /// 2D matrix product a·b.
    Matmul { a: Var, b: Var },
    /// Batched matmul: [B,M,K]·[B,K,N].
    Bmm { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: F },
    /// Broadcast bias over the last axis.
    AddBias { x: Var, b: Var },
    /// Affine map contracting the last axis (with `k` > 1, also `k`
    /// steps of the second-to-last axis) against weight[k*in, out],
    /// plus optional bias. The flattening is view-based, so a strided
    /// conv or a batched linear costs exactly one matrix product.
    Affine { x: Var, w: Var, b: Option<Var> },
    Reshape { x: Var },
    PermuteAxes { x: Var, perm: Vec<usize> },
    /// Keep the first `len` entries of `axis`.
    SliceAxis { x: Var, axis: usize, len: usize },
    /// Rows [start, start+len) of a 2D array.
    SliceRows { x: Var, start: usize, len: usize },
    MeanAxis { x: Var, axis: usize },
    MeanAll { x: Var },
    SumAll { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    /// value = x * mask, mask entries are 0 or 1/(1-rate).
    Dropout { x: Var, mask: ArrayD<F> },
    /// Per-(row, group) normalization over (time, channels-in-group),
    /// then affine by gamma/beta.
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: ArrayD<F>,
        inv_std: ArrayD<F>,
    },
    /// Rows of a 2D array scaled to unit L2 norm.
    RowNormalize { x: Var, norms: Vec<F> },
    /// Shared softmax-style contrastive term; see `contrastive_row_loss`.
    ContrastiveRowLoss { cross: Var, same: Var },
    LogSoftmaxRows { x: Var },
    /// -mean_i logp[i, target_i].
    NllMean { logp: Var, targets: Vec<usize> },
    /// Pairwise kernel-2 stride-2 max over axis 1 of [N,T,F]; odd tail
    /// carried unchanged. `took_left[n, to, f]` marks which side won.
    MaxPoolTime { x: Var, took_left: ArrayD<bool> },
    /// Mean over segments of axis 1 given by `bounds`.
    AvgPoolSegments { x: Var, bounds: Vec<usize> },
    /// out[n,i,j,t,f] = a[n,i,t,f] + b[n,j,t,f].
    PairSum { a: Var, b: Var },
    /// out[n,i,t,f] = 1/(C-1) * sum_{j != i} x[n,i,j,t,f].
    OffDiagMean { x: Var },
}

struct Node<F> {
    value: ArrayD<F>,
    op: Op<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

pub struct Grads<F> {
    g: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<F>> {
        self.g[v.0].as_ref()
    }
}

fn standard<F: Scalar>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> F {
        *self.nodes[v.0].value.first().expect("scalar node")
    }

    fn view2(&self, v: Var) -> ndarray::ArrayView2<'_, F> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2D node")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.view2(a).dot(&self.view2(b));
        self.push(v.into_dyn(), Op::Matmul { a, b })
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3D lhs");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3D rhs");
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch mismatch");
        assert_eq!(av.shape()[2], bv.shape()[1], "bmm inner mismatch");
        let (bsz, m, n) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        let mut out = ndarray::Array3::<F>::zeros((bsz, m, n));
        for i in 0..bsz {
            out.index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
        }
        self.push(out.into_dyn(), Op::Bmm { a, b })
    }

    /// Fused affine map: `y[..., o] = sum_i x_flat[..., i] * w[i, o]
    /// (+ b[o])` where `x_flat` groups `k` consecutive steps of the
    /// second-to-last axis into the last (a strided convolution when
    /// `k` > 1, a batched linear when `k` == 1). Flattening is a view;
    /// the whole op is one matrix product into a bias-prefilled buffer.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>, k: usize) -> Var {
        let wv = self.view2(w);
        let (win, wout) = (wv.shape()[0], wv.shape()[1]);
        let xsh = self.nodes[x.0].value.shape().to_vec();
        let mut osh = xsh.clone();
        *osh.last_mut().expect("affine input must have axes") = wout;
        if k > 1 {
            let d = osh.len() - 2;
            assert_eq!(osh[d] % k, 0, "axis not divisible by kernel");
            osh[d] /= k;
        }
        assert_eq!(k * xsh[xsh.len() - 1], win, "affine contraction mismatch");
        let rows = self.nodes[x.0].value.len() / win;
        let xflat = self.nodes[x.0]
            .value
            .view()
            .into_shape_with_order((rows, win))
            .expect("standard-layout tape value");
        let mut out = ndarray::Array2::<F>::zeros((rows, wout));
        if let Some(b) = b {
            let bv = self.nodes[b.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("1D bias");
            out.assign(&bv.broadcast((rows, wout)).expect("bias length"));
        }
        ndarray::linalg::general_mat_mul(F::one(), &xflat, &wv, F::one(), &mut out);
        let value = out.into_shape_with_order(IxDyn(&osh)).expect("size preserved");
        self.push(value, Op::Affine { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e * c);
        self.push(v, Op::Scale { x, c })
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1D bias");
        let v = &self.nodes[x.0].value + &bv;
        self.push(v, Op::AddBias { x, b })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(v, Op::Reshape { x })
    }

    pub fn permute_axes(&mut self, x: Var, perm: &[usize]) -> Var {
        let v = self.nodes[x.0]
            .value
            .view()
            .permuted_axes(IxDyn(perm))
            .to_owned();
        self.push(
            v,
            Op::PermuteAxes {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, len: usize) -> Var {
        let v = self.nodes[x.0]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(0..len))
            .to_owned();
        self.push(v, Op::SliceAxis { x, axis, len })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[x.0]
            .value
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(v, Op::SliceRows { x, start, len })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let v = self.nodes[x.0].value.mean_axis(Axis(axis)).expect("mean");
        self.push(v, Op::MeanAxis { x, axis })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mean().expect("nonempty");
        self.push(ndarray::arr0(v).into_dyn(), Op::MeanAll { x })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.sum();
        self.push(ndarray::arr0(v).into_dyn(), Op::SumAll { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0]
            .value
            .mapv(|e| if e > F::zero() { e } else { F::zero() });
        self.push(v, Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(gelu_val);
        self.push(v, Op::Gelu { x })
    }

    /// Inverted dropout. `rate` must be in [0, 1); at rate 0 this is a
    /// (recorded) identity.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        let keep_scale = fc::<F>(1.0 / (1.0 - rate));
        // One u32 draw and compare per element; P(drop) = thr / 2^32.
        // Mask and output fill in a single memory-order pass.
        let thr = (rate * 4_294_967_296.0) as u64 as u32;
        let dim = self.nodes[x.0].value.raw_dim();
        let mut mask = ArrayD::zeros(dim.clone());
        let mut v = ArrayD::zeros(dim);
        ndarray::Zip::from(&mut v)
            .and(&mut mask)
            .and(&self.nodes[x.0].value)
            .for_each(|o, m, &e| {
                if rng.next_u32() >= thr {
                    *m = keep_scale;
                    *o = e * keep_scale;
                }
            });
        self.push(v, Op::Dropout { x, mask })
    }

    /// Group normalization of [R, T, C] per (row, group) over T x C/G,
    /// followed by per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3D groupnorm input");
        let (r, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(c % groups, 0, "channels must divide into groups");
        let gc = c / groups;
        let n = fc::<F>((t * gc) as f64);
        let eps = fc::<F>(1e-5);
        let gv = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1D gamma");
        let bv = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1D beta");
        let mut mean = ndarray::Array2::<F>::zeros((r, groups));
        let mut inv_std = ndarray::Array2::<F>::zeros((r, groups));
        let mut value = ndarray::Array3::<F>::zeros((r, t, c));
        // Per-channel scale/shift for one row, folding the group's
        // normalization into the affine so the main pass is a single
        // broadcast multiply-add.
        let mut scale = ndarray::Array1::<F>::zeros(c);
        let mut shift = ndarray::Array1::<F>::zeros(c);
        for ri in 0..r {
            let row = xv.index_axis(Axis(0), ri);
            // Two-pass moments via per-channel partial sums.
            let csum = row.sum_axis(Axis(0));
            for g in 0..groups {
                let m = csum.slice(ndarray::s![g * gc..(g + 1) * gc]).sum() / n;
                let sl = row.slice(ndarray::s![.., g * gc..(g + 1) * gc]);
                let var = sl.fold(F::zero(), |acc, &e| {
                    let d = e - m;
                    acc + d * d
                }) / n;
                let is = (var + eps).sqrt().recip();
                mean[[ri, g]] = m;
                inv_std[[ri, g]] = is;
                for ci in g * gc..(g + 1) * gc {
                    scale[ci] = is * gv[ci];
                    shift[ci] = bv[ci] - m * scale[ci];
                }
            }
            let mut out = value.index_axis_mut(Axis(0), ri);
            ndarray::Zip::from(out.rows_mut())
                .and(row.rows())
                .for_each(|mut o, i| {
                    ndarray::Zip::from(&mut o)
                        .and(&i)
                        .and(&scale)
                        .and(&shift)
                        .for_each(|o, &x, &a, &b| *o = x * a + b);
                });
        }
        self.push(
            value.into_dyn(),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: mean.into_dyn(),
                inv_std: inv_std.into_dyn(),
            },
        )
    }

    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = self.view2(x);
        let n_rows = xv.shape()[0];
        let mut norms = Vec::with_capacity(n_rows);
        let mut out = xv.to_owned();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let mut s = F::zero();
            for &e in xv.row(i).iter() {
                s = s + e * e;
            }
            let norm = s.sqrt();
            assert!(norm > F::zero(), "zero-norm row in row_normalize");
            norms.push(norm);
            row.mapv_inplace(|e| e / norm);
        }
        self.push(out.into_dyn(), Op::RowNormalize { x, norms })
    }

    /// The shared softmax-contrastive building block. For similarity
    /// tensors `cross` and `same`, both [B, n, n], computes
    ///
    ///   -1/(B*n) * sum_{b,i} [ cross[b,i,i]
    ///        - ln( sum_j exp(cross[b,i,j]) + sum_{j!=i} exp(same[b,i,j]) ) ]
    ///
    /// with log-sum-exp stabilization. Instantiates the NT-Xent per-view
    /// term (B = 1) as well as the temporal and instance terms of the
    /// TS2Vec dual loss.
    pub fn contrastive_row_loss(&mut self, cross: Var, same: Var) -> Var {
        let (loss, _, _) = self.contrastive_forward(cross, same);
        self.push(
            ndarray::arr0(loss).into_dyn(),
            Op::ContrastiveRowLoss { cross, same },
        )
    }

    /// Forward pass shared with the backward rule: returns the loss and
    /// per-row softmax weights for both inputs.
    fn contrastive_forward(&self, cross: Var, same: Var) -> (F, ArrayD<F>, ArrayD<F>) {
        let cv = self.nodes[cross.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3D cross");
        let sv = self.nodes[same.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3D same");
        assert_eq!(cv.shape(), sv.shape(), "cross/same shape mismatch");
        let (b, n, n2) = (cv.shape()[0], cv.shape()[1], cv.shape()[2]);
        assert_eq!(n, n2, "similarity blocks must be square");
        let mut w_cross = ndarray::Array3::<F>::zeros((b, n, n));
        let mut w_same = ndarray::Array3::<F>::zeros((b, n, n));
        let mut total = F::zero();
        for bi in 0..b {
            for i in 0..n {
                let mut m = F::neg_infinity();
                for j in 0..n {
                    m = m.max(cv[[bi, i, j]]);
                    if j != i {
                        m = m.max(sv[[bi, i, j]]);
                    }
                }
                let mut denom = F::zero();
                for j in 0..n {
                    denom = denom + (cv[[bi, i, j]] - m).exp();
                    if j != i {
                        denom = denom + (sv[[bi, i, j]] - m).exp();
                    }
                }
                let lse = m + denom.ln();
                total = total + cv[[bi, i, i]] - lse;
                for j in 0..n {
                    w_cross[[bi, i, j]] = (cv[[bi, i, j]] - lse).exp();
                    if j != i {
                        w_same[[bi, i, j]] = (sv[[bi, i, j]] - lse).exp();
                    }
                }
            }
        }
        let scale = fc::<F>(-1.0 / (b * n) as f64);
        (total * scale, w_cross.into_dyn(), w_same.into_dyn())
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.view2(x);
        let mut out = xv.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for &e in row.iter() {
                denom = denom + (e - m).exp();
            }
            let lse = m + denom.ln();
            row.mapv_inplace(|e| e - lse);
        }
        self.push(out.into_dyn(), Op::LogSoftmaxRows { x })
    }

    pub fn nll_mean(&mut self, logp: Var, targets: &[usize]) -> Var {
        let lv = self.view2(logp);
        assert_eq!(lv.shape()[0], targets.len(), "target count mismatch");
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            total = total - lv[[i, t]];
        }
        let v = total / fc::<F>(targets.len() as f64);
        self.push(
            ndarray::arr0(v).into_dyn(),
            Op::NllMean {
                logp,
                targets: targets.to_vec(),
            },
        )
    }

    /// Kernel-2, stride-2 max pooling over axis 1 of [N, T, F]; an odd
    /// final element is carried through unchanged.
    pub fn max_pool_time(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3D maxpool input");
        let (n, t, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(t >= 2, "max_pool_time needs T >= 2");
        let t_out = t / 2 + t % 2;
        let mut out = ndarray::Array3::<F>::zeros((n, t_out, f));
        let mut took_left = ndarray::Array3::<bool>::from_elem((n, t_out, f), true);
        for ni in 0..n {
            for to in 0..t_out {
                for fi in 0..f {
                    let left = xv[[ni, 2 * to, fi]];
                    if 2 * to + 1 < t {
                        let right = xv[[ni, 2 * to + 1, fi]];
                        if right > left {
                            out[[ni, to, fi]] = right;
                            took_left[[ni, to, fi]] = false;
                            continue;
                        }
                    }
                    out[[ni, to, fi]] = left;
                }
            }
        }
        self.push(
            out.into_dyn(),
            Op::MaxPoolTime {
                x,
                took_left: took_left.into_dyn(),
            },
        )
    }

    /// Mean over `bounds.len() - 1` segments of axis 1 of [N, T, F].
    pub fn avg_pool_segments(&mut self, x: Var, bounds: &[usize]) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("3D avgpool input");
        let (n, t, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let s = bounds.len() - 1;
        assert_eq!(bounds[0], 0);
        assert_eq!(*bounds.last().unwrap(), t);
        let mut out = ndarray::Array3::<F>::zeros((n, s, f));
        for si in 0..s {
            let (lo, hi) = (bounds[si], bounds[si + 1]);
            assert!(hi > lo, "empty pooling segment");
            let seg = xv.slice(ndarray::s![.., lo..hi, ..]);
            out.slice_mut(ndarray::s![.., si, ..])
                .assign(&seg.mean_axis(Axis(1)).unwrap());
        }
        self.push(
            out.into_dyn(),
            Op::AvgPoolSegments {
                x,
                bounds: bounds.to_vec(),
            },
        )
    }

    /// out[n,i,j,t,f] = a[n,i,t,f] + b[n,j,t,f], for the pairwise message
    /// inputs of the MPNN.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.view();
        let bv = self.nodes[b.0].value.view();
        assert_eq!(av.shape(), bv.shape());
        let (n, c, t, f) = dims4(&av);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, c, t, f]));
        for ni in 0..n {
            for i in 0..c {
                for j in 0..c {
                    let mut dst = out.slice_mut(ndarray::s![ni, i, j, .., ..].as_ref());
                    dst.assign(&av.slice(ndarray::s![ni, i, .., ..].as_ref()));
                    dst += &bv.slice(ndarray::s![ni, j, .., ..].as_ref());
                }
            }
        }
        self.push(out, Op::PairSum { a, b })
    }

    /// out[n,i,t,f] = 1/(C-1) * sum_{j != i} x[n,i,j,t,f].
    pub fn off_diag_mean(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view();
        let sh = xv.shape();
        let (n, c, t, f) = (sh[0], sh[1], sh[3], sh[4]);
        assert!(c >= 2, "off_diag_mean needs at least two nodes");
        let norm = fc::<F>(1.0 / (c - 1) as f64);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, t, f]));
        for ni in 0..n {
            for i in 0..c {
                let mut acc = out.slice_mut(ndarray::s![ni, i, .., ..].as_ref());
                for j in 0..c {
                    if j != i {
                        acc += &xv.slice(ndarray::s![ni, i, j, .., ..].as_ref());
                    }
                }
                acc.mapv_inplace(|e| e * norm);
            }
        }
        self.push(out, Op::OffDiagMean { x })
    }

    /// Backward pass from `out`, seeded with `seed` (same shape as the
    /// value of `out`; use a 0-d array of 1 for scalar losses).
    pub fn backward(&self, out: Var, seed: ArrayD<F>) -> Grads<F> {
        let mut g: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(
            seed.shape(),
            self.nodes[out.0].value.shape(),
            "seed shape mismatch"
        );
        g[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let grad = match g[idx].take() {
                Some(gr) => gr,
                None => continue,
            };
            self.accumulate(idx, &grad, &mut g);
            // Only leaf gradients are queryable afterwards; freeing the
            // rest keeps the backward pass within a working-set bound.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                g[idx] = Some(grad);
            }
        }
        Grads { g }
    }

    /// Backward from a scalar loss node, seeded with 1.
    pub fn backward_scalar(&self, out: Var) -> Grads<F> {
        self.backward(out, ndarray::arr0(F::one()).into_dyn())
    }

    fn accumulate(&self, idx: usize, grad: &ArrayD<F>, g: &mut Vec<Option<ArrayD<F>>>) {
        let add_to = |g: &mut Vec<Option<ArrayD<F>>>, v: Var, contrib: ArrayD<F>| {
            match &mut g[v.0] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let gv = grad.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.view2(*a);
                let bv = self.view2(*b);
                add_to(g, *a, gv.dot(&bv.t()).into_dyn());
                add_to(g, *b, av.t().dot(&gv).into_dyn());
            }
            Op::Bmm { a, b } => {
                let gv = grad.view().into_dimensionality::<Ix3>().unwrap();
                let av = self.nodes[a.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let bv = self.nodes[b.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let bsz = av.shape()[0];
                let mut da = ndarray::Array3::<F>::zeros(av.raw_dim());
                let mut db = ndarray::Array3::<F>::zeros(bv.raw_dim());
                for i in 0..bsz {
                    let gb = gv.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gb.dot(&bv.index_axis(Axis(0), i).t()));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&av.index_axis(Axis(0), i).t().dot(&gb));
                }
                add_to(g, *a, da.into_dyn());
                add_to(g, *b, db.into_dyn());
            }
            Op::Add { a, b } => {
                add_to(g, *a, grad.clone());
                add_to(g, *b, grad.clone());
            }
            Op::Sub { a, b } => {
                add_to(g, *a, grad.clone());
                add_to(g, *b, grad.mapv(|e| -e));
            }
            Op::Mul { a, b } => {
                add_to(g, *a, grad * &self.nodes[b.0].value);
                add_to(g, *b, grad * &self.nodes[a.0].value);
            }
            Op::Scale { x, c } => {
                add_to(g, *x, grad.mapv(|e| e * *c));
            }
            Op::AddBias { x, b } => {
                add_to(g, *x, grad.clone());
                let last = grad.ndim() - 1;
                let flat = grad
                    .view()
                    .into_shape_with_order((grad.len() / grad.shape()[last], grad.shape()[last]))
                    .unwrap();
                add_to(g, *b, flat.sum_axis(Axis(0)).into_dyn());
            }
            Op::Affine { x, w, b } => {
                let wv = self.view2(*w);
                let (win, wout) = (wv.shape()[0], wv.shape()[1]);
                let xval = &self.nodes[x.0].value;
                let rows = xval.len() / win;
                let gstd = grad.as_standard_layout();
                let gflat = gstd
                    .view()
                    .into_shape_with_order((rows, wout))
                    .expect("standard-layout gradient");
                let xflat = xval
                    .view()
                    .into_shape_with_order((rows, win))
                    .expect("standard-layout tape value");
                let dx = gflat
                    .dot(&wv.t())
                    .into_shape_with_order(xval.raw_dim())
                    .expect("size preserved");
                add_to(g, *x, dx.into_dyn());
                add_to(g, *w, xflat.t().dot(&gflat).into_dyn());
                if let Some(b) = b {
                    add_to(g, *b, gflat.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Reshape { x } => {
                let v = grad
                    .clone()
                    .into_shape_with_order(self.nodes[x.0].value.raw_dim())
                    .unwrap();
                add_to(g, *x, v);
            }
            Op::PermuteAxes { x, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let v = grad.view().permuted_axes(IxDyn(&inv)).to_owned();
                add_to(g, *x, v);
            }
            Op::SliceAxis { x, axis, len } => {
                let mut dx = ArrayD::<F>::zeros(self.nodes[x.0].value.raw_dim());
                dx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(0..*len))
                    .assign(grad);
                add_to(g, *x, dx);
            }
            Op::SliceRows { x, start, len } => {
                let mut dx = ArrayD::<F>::zeros(self.nodes[x.0].value.raw_dim());
                dx.slice_axis_mut(Axis(0), ndarray::Slice::from(*start..*start + *len))
                    .assign(grad);
                add_to(g, *x, dx);
            }
            Op::MeanAxis { x, axis } => {
                let n = self.nodes[x.0].value.shape()[*axis];
                let scale = fc::<F>(1.0 / n as f64);
                let expanded = grad
                    .view()
                    .insert_axis(Axis(*axis))
                    .broadcast(self.nodes[x.0].value.raw_dim())
                    .unwrap()
                    .mapv(|e| e * scale);
                add_to(g, *x, expanded);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0].value.len();
                let s = *grad.first().unwrap() / fc::<F>(n as f64);
                add_to(
                    g,
                    *x,
                    ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), s),
                );
            }
            Op::SumAll { x } => {
                let s = *grad.first().unwrap();
                add_to(
                    g,
                    *x,
                    ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), s),
                );
            }
            Op::Relu { x } => {
                let dx = ndarray::Zip::from(grad)
                    .and(&self.nodes[x.0].value)
                    .map_collect(|&d, &xv| if xv > F::zero() { d } else { F::zero() });
                add_to(g, *x, dx);
            }
            Op::Gelu { x } => {
                let dx = ndarray::Zip::from(grad)
                    .and(&self.nodes[x.0].value)
                    .map_collect(|&d, &xv| d * gelu_grad(xv));
                add_to(g, *x, dx);
            }
            Op::Dropout { x, mask } => {
                add_to(g, *x, grad * mask);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
            } => {
                // With xhat = (x - m) * is, dx collapses to
                // grad * a[c] + x * c2[c] + c1[c] per (row, group), so
                // after per-channel reductions the heavy passes are
                // broadcast multiply-adds.
                let xv = self.nodes[x.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let mv = mean.view().into_dimensionality::<Ix2>().unwrap();
                let is = inv_std.view().into_dimensionality::<Ix2>().unwrap();
                let gv = grad.view().into_dimensionality::<Ix3>().unwrap();
                let gamma_v = self.nodes[gamma.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let (r, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let gc = c / groups;
                let n = fc::<F>((t * gc) as f64);
                let mut dx = ndarray::Array3::<F>::zeros((r, t, c));
                let mut dgamma = ndarray::Array1::<F>::zeros(c);
                let mut dbeta = ndarray::Array1::<F>::zeros(c);
                let mut q = ndarray::Array1::<F>::zeros(c);
                let mut p = ndarray::Array1::<F>::zeros(c);
                let mut ca = ndarray::Array1::<F>::zeros(c);
                let mut c1 = ndarray::Array1::<F>::zeros(c);
                let mut c2 = ndarray::Array1::<F>::zeros(c);
                for ri in 0..r {
                    let xrow = xv.index_axis(Axis(0), ri);
                    let grow = gv.index_axis(Axis(0), ri);
                    q.fill(F::zero());
                    p.fill(F::zero());
                    ndarray::Zip::from(grow.rows()).and(xrow.rows()).for_each(
                        |gr, xr| {
                            ndarray::Zip::from(&mut q)
                                .and(&mut p)
                                .and(&gr)
                                .and(&xr)
                                .for_each(|q, p, &gg, &xx| {
                                    *q = *q + gg;
                                    *p = *p + gg * xx;
                                });
                        },
                    );
                    for gi in 0..*groups {
                        let m = mv[[ri, gi]];
                        let isv = is[[ri, gi]];
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for ci in gi * gc..(gi + 1) * gc {
                            let centered = p[ci] - m * q[ci];
                            s1 = s1 + gamma_v[ci] * q[ci];
                            s2 = s2 + gamma_v[ci] * centered;
                            dgamma[ci] = dgamma[ci] + isv * centered;
                            dbeta[ci] = dbeta[ci] + q[ci];
                        }
                        let s2 = s2 * isv;
                        for ci in gi * gc..(gi + 1) * gc {
                            ca[ci] = isv * gamma_v[ci];
                            c2[ci] = -(isv * isv) * s2 / n;
                            c1[ci] = -isv * s1 / n - m * c2[ci];
                        }
                    }
                    let mut drow = dx.index_axis_mut(Axis(0), ri);
                    ndarray::Zip::from(drow.rows_mut())
                        .and(grow.rows())
                        .and(xrow.rows())
                        .for_each(|mut dr, gr, xr| {
                            ndarray::Zip::from(&mut dr)
                                .and(&gr)
                                .and(&xr)
                                .and(&ca)
                                .and(&c1)
                                .and(&c2)
                                .for_each(|d, &gg, &xx, &a, &b, &cc| {
                                    *d = gg * a + xx * cc + b
                                });
                        });
                }
                add_to(g, *x, dx.into_dyn());
                add_to(g, *gamma, dgamma.into_dyn());
                add_to(g, *beta, dbeta.into_dyn());
            }
            Op::RowNormalize { x, norms } => {
                let gv = grad.view().into_dimensionality::<Ix2>().unwrap();
                let yv = self.nodes[idx]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let mut dx = gv.to_owned();
                for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                    let mut dot = F::zero();
                    for (gd, &yy) in gv.row(i).iter().zip(yv.row(i).iter()) {
                        dot = dot + *gd * yy;
                    }
                    let inv_n = norms[i].recip();
                    for (d, &yy) in row.iter_mut().zip(yv.row(i).iter()) {
                        *d = (*d - yy * dot) * inv_n;
                    }
                }
                add_to(g, *x, dx.into_dyn());
            }
            Op::ContrastiveRowLoss { cross, same } => {
                let (_, w_cross, w_same) = self.contrastive_forward(*cross, *same);
                let shape = self.nodes[cross.0].value.shape().to_vec();
                let (b, n) = (shape[0], shape[1]);
                let scale = *grad.first().unwrap() * fc::<F>(1.0 / (b * n) as f64);
                let mut dcross = w_cross.mapv(|w| w * scale);
                let dc3 = dcross.view_mut().into_dimensionality::<Ix3>().unwrap();
                {
                    let mut dc3 = dc3;
                    for bi in 0..b {
                        for i in 0..n {
                            dc3[[bi, i, i]] = dc3[[bi, i, i]] - scale;
                        }
                    }
                }
                let dsame = w_same.mapv(|w| w * scale);
                add_to(g, *cross, dcross);
                add_to(g, *same, dsame);
            }
            Op::LogSoftmaxRows { x } => {
                let gv = grad.view().into_dimensionality::<Ix2>().unwrap();
                let yv = self.nodes[idx]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let mut dx = gv.to_owned();
                for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                    let gsum = gv.row(i).sum();
                    for (d, &logp) in row.iter_mut().zip(yv.row(i).iter()) {
                        *d = *d - logp.exp() * gsum;
                    }
                }
                add_to(g, *x, dx.into_dyn());
            }
            Op::NllMean { logp, targets } => {
                let s = *grad.first().unwrap() / fc::<F>(targets.len() as f64);
                let mut dx = ndarray::Array2::<F>::zeros(
                    self.view2(*logp).raw_dim(),
                );
                for (i, &t) in targets.iter().enumerate() {
                    dx[[i, t]] = -s;
                }
                add_to(g, *logp, dx.into_dyn());
            }
            Op::MaxPoolTime { x, took_left } => {
                let gv = grad.view().into_dimensionality::<Ix3>().unwrap();
                let tl = took_left.view().into_dimensionality::<Ix3>().unwrap();
                let xsh = self.nodes[x.0].value.shape();
                let (n, t, f) = (xsh[0], xsh[1], xsh[2]);
                let t_out = gv.shape()[1];
                let mut dx = ndarray::Array3::<F>::zeros((n, t, f));
                for ni in 0..n {
                    for to in 0..t_out {
                        for fi in 0..f {
                            let src = if tl[[ni, to, fi]] { 2 * to } else { 2 * to + 1 };
                            dx[[ni, src, fi]] = dx[[ni, src, fi]] + gv[[ni, to, fi]];
                        }
                    }
                }
                add_to(g, *x, dx.into_dyn());
            }
            Op::AvgPoolSegments { x, bounds } => {
                let gv = grad.view().into_dimensionality::<Ix3>().unwrap();
                let xsh = self.nodes[x.0].value.shape();
                let (n, t, f) = (xsh[0], xsh[1], xsh[2]);
                let mut dx = ndarray::Array3::<F>::zeros((n, t, f));
                for si in 0..bounds.len() - 1 {
                    let (lo, hi) = (bounds[si], bounds[si + 1]);
                    let scale = fc::<F>(1.0 / (hi - lo) as f64);
                    for ni in 0..n {
                        for ti in lo..hi {
                            for fi in 0..f {
                                dx[[ni, ti, fi]] = dx[[ni, ti, fi]] + gv[[ni, si, fi]] * scale;
                            }
                        }
                    }
                }
                add_to(g, *x, dx.into_dyn());
            }
            Op::PairSum { a, b } => {
                let sh = self.nodes[a.0].value.shape().to_vec();
                let (n, c) = (sh[0], sh[1]);
                let mut da = ArrayD::<F>::zeros(IxDyn(&sh));
                let mut db = ArrayD::<F>::zeros(IxDyn(&sh));
                for ni in 0..n {
                    for i in 0..c {
                        for j in 0..c {
                            let gsl = grad.slice(ndarray::s![ni, i, j, .., ..].as_ref());
                            let mut das = da.slice_mut(ndarray::s![ni, i, .., ..].as_ref());
                            das += &gsl;
                            let mut dbs = db.slice_mut(ndarray::s![ni, j, .., ..].as_ref());
                            dbs += &gsl;
                        }
                    }
                }
                add_to(g, *a, da);
                add_to(g, *b, db);
            }
            Op::OffDiagMean { x } => {
                let xsh = self.nodes[x.0].value.shape().to_vec();
                let (n, c) = (xsh[0], xsh[1]);
                let norm = fc::<F>(1.0 / (c - 1) as f64);
                let mut dx = ArrayD::<F>::zeros(IxDyn(&xsh));
                for ni in 0..n {
                    for i in 0..c {
                        let gsl = grad
                            .slice(ndarray::s![ni, i, .., ..].as_ref())
                            .mapv(|e| e * norm);
                        for j in 0..c {
                            if j != i {
                                let mut dxs =
                                    dx.slice_mut(ndarray::s![ni, i, j, .., ..].as_ref());
                                dxs += &gsl;
                            }
                        }
                    }
                }
                add_to(g, *x, dx);
            }
        }
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4<F>(v: &ArrayViewD<'_, F>) -> (usize, usize, usize, usize) {
    let sh = v.shape();
    assert_eq!(sh.len(), 4);
    (sh[0], sh[1], sh[2], sh[3])
}

/// Compare the reverse-mode gradient of `f` against central finite
/// differences on every input, returning the worst per-tensor relative
/// error (max absolute deviation over the gradient's max magnitude).
pub fn finite_diff_check<Build>(inputs: &[ArrayD<f64>], eps: f64, build: Build) -> f64
where
    Build: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let run = |arrays: &[ArrayD<f64>]| -> (Tape<f64>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = run(inputs);
    assert_eq!(tape.value(out).len(), 1, "gradient check needs scalar loss");
    let grads = tape.backward_scalar(out);

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        let mut numeric = ArrayD::<f64>::zeros(input.raw_dim());
        let mut perturbed: Vec<ArrayD<f64>> = inputs.to_vec();
        for idx in 0..input.len() {
            let orig = perturbed[k].as_slice().unwrap()[idx];
            perturbed[k].as_slice_mut().unwrap()[idx] = orig + eps;
            let (t_plus, _, o_plus) = run(&perturbed);
            let plus = t_plus.scalar_value(o_plus);
            perturbed[k].as_slice_mut().unwrap()[idx] = orig - eps;
            let (t_minus, _, o_minus) = run(&perturbed);
            let minus = t_minus.scalar_value(o_minus);
            perturbed[k].as_slice_mut().unwrap()[idx] = orig;
            numeric.as_slice_mut().unwrap()[idx] = (plus - minus) / (2.0 * eps);
        }
        let scale = numeric
            .iter()
            .chain(analytic.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
            .max(1e-8);
        let max_abs_diff = analytic
            .iter()
            .zip(numeric.iter())
            .fold(0.0f64, |m, (&a, &n)| m.max((a - n).abs()));
        worst = worst.max(max_abs_diff / scale);
    }
    worst
}
