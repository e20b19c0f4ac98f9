//! Timing breakdown of one pretraining step at benchmark scale,
//! used to project full-experiment runtimes.

use crlc_ssl::autodiff::Tape;
use crlc_ssl::data::Window;
use crlc_ssl::model::{forward_batch, EncoderArch, ModelParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (c, t, chunk) = (10usize, 3000usize, 4usize);
    let windows: Vec<Window> = (0..chunk)
        .map(|_| {
            Window::new(Array2::from_shape_fn((c, t), |_| r.gen_range(-1.0f32..1.0))).unwrap()
        })
        .collect();
    let params = ModelParams::<f32>::init(&EncoderArch::default(), 3, &mut r);

    // Inference forward.
    let t0 = Instant::now();
    let reps = 3;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let model = params.bind(&mut tape);
        let z = forward_batch(&mut tape, &model, &windows, 0.0, false, &mut r).unwrap();
        std::hint::black_box(tape.value(z).sum());
    }
    println!("inference forward, chunk of {chunk}: {:?}", t0.elapsed() / reps);

    // Training forward.
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let model = params.bind(&mut tape);
        let z = forward_batch(&mut tape, &model, &windows, 0.1, true, &mut r).unwrap();
        std::hint::black_box(tape.value(z).sum());
    }
    println!("training forward, chunk of {chunk}: {:?}", t0.elapsed() / reps);

    // Training forward + backward via the sum proxy.
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let model = params.bind(&mut tape);
        let z = forward_batch(&mut tape, &model, &windows, 0.1, true, &mut r).unwrap();
        let s = tape.sum_all(z);
        let g = tape.backward_scalar(s);
        std::hint::black_box(g.wrt(model.blocks[0].weight).map(|a| a.sum()));
    }
    println!("training forward+backward, chunk of {chunk}: {:?}", t0.elapsed() / reps);
}
