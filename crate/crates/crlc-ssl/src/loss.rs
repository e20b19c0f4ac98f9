//! Contrastive objectives on the tape: the temperature-scaled cosine
//! loss over projected instance embeddings, and the dual temporal plus
//! instance loss over per-time-step representations with its
//! max-pooling hierarchy.

use crate::autodiff::{fc, Scalar, Tape, Var};
use crate::error::{Error, Result};
use ndarray::Ix2;

fn check_rows_nonzero<F: Scalar>(tape: &Tape<F>, p: Var) -> Result<()> {
    let v = tape
        .value(p)
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::invalid("projected batch must be 2D"))?;
    for (i, row) in v.rows().into_iter().enumerate() {
        let norm: F = row.iter().map(|&e| e * e).fold(F::zero(), |a, b| a + b);
        if !(norm > F::zero()) {
            return Err(Error::invalid(format!(
                "zero-norm row {i}: cosine similarity undefined"
            )));
        }
    }
    Ok(())
}

/// Temperature-scaled cosine contrastive loss over two projected views
/// [N, D], averaged over both view orderings. Negatives for anchor i in
/// view w are every cross-view row plus every other same-view row.
pub fn nt_xent<F: Scalar>(tape: &mut Tape<F>, p1: Var, p2: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let (s1, s2) = (
        tape.value(p1).shape().to_vec(),
        tape.value(p2).shape().to_vec(),
    );
    if s1 != s2 || s1.len() != 2 {
        return Err(Error::invalid("projected views must share an [N, D] shape"));
    }
    if s1[0] < 2 {
        return Err(Error::invalid("need at least two instances for negatives"));
    }
    check_rows_nonzero(tape, p1)?;
    check_rows_nonzero(tape, p2)?;
    let n = s1[0];
    let inv_tau = fc::<F>(1.0 / tau);
    let n1 = tape.row_normalize(p1);
    let n2 = tape.row_normalize(p2);
    let n2t = tape.permute_axes(n2, &[1, 0]);
    let cross_raw = tape.matmul(n1, n2t);
    let cross = tape.scale(cross_raw, inv_tau);
    let l12 = nt_view_term(tape, n1, cross, inv_tau, n);
    let cross_t = tape.permute_axes(cross, &[1, 0]);
    let l21 = nt_view_term(tape, n2, cross_t, inv_tau, n);
    let sum = tape.add(l12, l21);
    Ok(tape.scale(sum, fc::<F>(0.5)))
}

/// One view ordering of the cosine loss: same-view similarities for the
/// anchor view, with the pre-scaled cross-view similarity matrix.
fn nt_view_term<F: Scalar>(tape: &mut Tape<F>, anchor: Var, cross2d: Var, inv_tau: F, n: usize) -> Var {
    let at = tape.permute_axes(anchor, &[1, 0]);
    let same_raw = tape.matmul(anchor, at);
    let same = tape.scale(same_raw, inv_tau);
    let same3 = tape.reshape(same, &[1, n, n]);
    let cross3 = tape.reshape(cross2d, &[1, n, n]);
    tape.contrastive_row_loss(cross3, same3)
}

/// Dual loss for one view ordering on [N, T, D] representations:
/// temporal term (negatives are other time steps of the same instance)
/// plus instance term (negatives are other instances at the same time),
/// each with raw dot-product similarities, averaged with weight 1/2.
pub fn ts2vec_dual<F: Scalar>(tape: &mut Tape<F>, za: Var, zb: Var) -> Result<Var> {
    let (sa, sb) = (
        tape.value(za).shape().to_vec(),
        tape.value(zb).shape().to_vec(),
    );
    if sa != sb || sa.len() != 3 {
        return Err(Error::invalid("views must share an [N, T, D] shape"));
    }
    let lt = dual_term(tape, za, zb);
    let pa = tape.permute_axes(za, &[1, 0, 2]);
    let pb = tape.permute_axes(zb, &[1, 0, 2]);
    let li = dual_term(tape, pa, pb);
    let sum = tape.add(lt, li);
    Ok(tape.scale(sum, fc::<F>(0.5)))
}

/// Softmax-contrastive term over axis-1 items of [B, n, D] inputs.
fn dual_term<F: Scalar>(tape: &mut Tape<F>, x: Var, y: Var) -> Var {
    let yt = tape.permute_axes(y, &[0, 2, 1]);
    let cross = tape.bmm(x, yt);
    let xt = tape.permute_axes(x, &[0, 2, 1]);
    let same = tape.bmm(x, xt);
    tape.contrastive_row_loss(cross, same)
}

/// Dual loss averaged over both view orderings.
pub fn ts2vec_dual_sym<F: Scalar>(tape: &mut Tape<F>, z1: Var, z2: Var) -> Result<Var> {
    let a = ts2vec_dual(tape, z1, z2)?;
    let b = ts2vec_dual(tape, z2, z1)?;
    let sum = tape.add(a, b);
    Ok(tape.scale(sum, fc::<F>(0.5)))
}

/// Number of loss levels in the pooling hierarchy starting from T.
pub fn hierarchy_levels(mut t: usize) -> usize {
    let mut levels = 1;
    while t > 1 {
        t = t / 2 + t % 2;
        levels += 1;
    }
    levels
}

/// Hierarchical loss: the symmetric dual loss at every max-pooling
/// level (kernel 2, stride 2, odd tail carried) down to T = 1, averaged
/// over levels.
pub fn ts2vec_hierarchical<F: Scalar>(tape: &mut Tape<F>, z1: Var, z2: Var) -> Result<Var> {
    let mut levels = vec![ts2vec_dual_sym(tape, z1, z2)?];
    let (mut z1, mut z2) = (z1, z2);
    let mut t = tape.value(z1).shape()[1];
    while t > 1 {
        z1 = tape.max_pool_time(z1);
        z2 = tape.max_pool_time(z2);
        t = tape.value(z1).shape()[1];
        levels.push(ts2vec_dual_sym(tape, z1, z2)?);
    }
    let mut total = levels[0];
    for &l in &levels[1..] {
        total = tape.add(total, l);
    }
    Ok(tape.scale(total, fc::<F>(1.0 / levels.len() as f64)))
}
