//! Adaptive-moment optimizer with decoupled weight decay.

use crate::autodiff::{fc, Scalar};
use ndarray::{ArrayD, ArrayViewMutD};

#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over a fixed-order parameter list. A `None` gradient
    /// is treated as zero: moments stay untouched but the decoupled
    /// decay still shrinks the parameter.
    pub fn step(
        &mut self,
        params: &mut [ArrayViewMutD<'_, F>],
        grads: &[Option<ArrayD<F>>],
    ) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = fc::<F>(self.beta1);
        let b2 = fc::<F>(self.beta2);
        let one = F::one();
        let bc1 = one - fc::<F>(self.beta1).powi(t);
        let bc2 = one - fc::<F>(self.beta2).powi(t);
        let lr = fc::<F>(self.lr);
        let eps = fc::<F>(self.eps);
        let decay = fc::<F>(self.lr * self.weight_decay);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if self.weight_decay != 0.0 {
                p.mapv_inplace(|x| x - decay * x);
            }
            if let Some(g) = g {
                assert_eq!(g.shape(), p.shape(), "gradient shape");
                azip_update(m, g, |m, g| b1 * m + (one - b1) * g);
                azip_update(v, g, |v, g| b2 * v + (one - b2) * g * g);
                ndarray::Zip::from(&mut *p)
                    .and(&*m)
                    .and(&*v)
                    .for_each(|p, &m, &v| {
                        let mh = m / bc1;
                        let vh = v / bc2;
                        *p = *p - lr * mh / (vh.sqrt() + eps);
                    });
            }
        }
    }
}

fn azip_update<F: Scalar>(dst: &mut ArrayD<F>, src: &ArrayD<F>, f: impl Fn(F, F) -> F) {
    ndarray::Zip::from(dst).and(src).for_each(|d, &s| *d = f(*d, s));
}
