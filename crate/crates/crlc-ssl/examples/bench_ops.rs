//! Per-op timing on the shapes dominating one pretraining chunk.

use crlc_ssl::autodiff::Tape;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn timeit(label: &str, mut f: impl FnMut()) {
    let reps = 5;
    let t0 = Instant::now();
    for _ in 0..reps {
        f();
    }
    println!("{label}: {:?}", t0.elapsed() / reps);
}

fn main() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let big = ArrayD::from_shape_fn(IxDyn(&[40, 1000, 256]), |_| r.gen_range(-1.0f32..1.0));
    let w = ArrayD::from_shape_fn(IxDyn(&[512, 256]), |_| r.gen_range(-0.1f32..0.1));
    let flat = ArrayD::from_shape_fn(IxDyn(&[20000, 512]), |_| r.gen_range(-1.0f32..1.0));

    timeit("gelu fwd [40,1000,256]", || {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(big.clone());
        let g = t.gelu(x);
        std::hint::black_box(t.value(g)[[0, 0, 0]]);
    });
    timeit("gelu fwd+bwd", || {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(big.clone());
        let g = t.gelu(x);
        let s = t.sum_all(g);
        let gr = t.backward_scalar(s);
        std::hint::black_box(gr.wrt(x).map(|a| a[[0, 0, 0]]));
    });
    timeit("group_norm fwd [40,1000,256] g16", || {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(big.clone());
        let gamma = t.leaf(ArrayD::from_elem(IxDyn(&[256]), 1.0f32));
        let beta = t.leaf(ArrayD::zeros(IxDyn(&[256])));
        let g = t.group_norm(x, gamma, beta, 16);
        std::hint::black_box(t.value(g)[[0, 0, 0]]);
    });
    timeit("group_norm fwd+bwd", || {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(big.clone());
        let gamma = t.leaf(ArrayD::from_elem(IxDyn(&[256]), 1.0f32));
        let beta = t.leaf(ArrayD::zeros(IxDyn(&[256])));
        let g = t.group_norm(x, gamma, beta, 16);
        let s = t.sum_all(g);
        let gr = t.backward_scalar(s);
        std::hint::black_box(gr.wrt(x).map(|a| a[[0, 0, 0]]));
    });
    timeit("dropout fwd [40,1000,256]", || {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(big.clone());
        let d = t.dropout(x, 0.1, &mut r);
        std::hint::black_box(t.value(d)[[0, 0, 0]]);
    });
    timeit("matmul [20000,512]x[512,256] fwd", || {
        let mut t = Tape::<f32>::new();
        let a = t.leaf(flat.clone());
        let b = t.leaf(w.clone());
        let m = t.matmul(a, b);
        std::hint::black_box(t.value(m)[[0, 0]]);
    });
    timeit("matmul fwd+bwd", || {
        let mut t = Tape::<f32>::new();
        let a = t.leaf(flat.clone());
        let b = t.leaf(w.clone());
        let m = t.matmul(a, b);
        let s = t.sum_all(m);
        let gr = t.backward_scalar(s);
        std::hint::black_box(gr.wrt(a).map(|x| x[[0, 0]]));
    });
    timeit("reshape+clone cost [40,1000,256]", || {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(big.clone());
        let rsh = t.reshape(x, &[40000, 256]);
        std::hint::black_box(t.value(rsh)[[0, 0]]);
    });
}
