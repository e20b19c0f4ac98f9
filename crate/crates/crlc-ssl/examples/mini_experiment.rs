//! Scaled-down version of the synthetic matched-vs-mismatched
//! experiment: two pretraining designs (frequency drift with full
//! mixing, stationarity with block-diagonal mixing), two pair
//! strategies, linear probe on a block-diagonal fine-tuning set.
//!
//! Run with: cargo run --release --example mini_experiment

use crlc_ssl::data::sample_balanced_indices;
use crlc_ssl::pairing::Strategy;
use crlc_ssl::sim::{
    generate_finetune, generate_pretrain, FinetuneSpec, FrequencyRegime, MixingStructure,
    SimSpec, CLASS_FREQS,
};
use crlc_ssl::train::{
    balanced_accuracy, compute_features, predict_features, pretrain, train_head_on_features,
    FinetuneConfig, RunConfig,
};
use ndarray::Axis;
use std::time::Instant;

fn main() {
    let (c, m, t, sigma) = (10, 10, 3000, 0.5);
    let ft = generate_finetune(&FinetuneSpec {
        base: SimSpec {
            c,
            m,
            t,
            sigma,
            mixing: MixingStructure::BlockDiagonal,
            regime: FrequencyRegime::Stationary,
            n_windows: 800,
            seed: 203,
        },
        class_freqs: CLASS_FREQS,
        class_source_index: 0,
        class_prior: 0.5,
    })
    .unwrap();
    let labels = ft.labels.clone().unwrap();
    let pool_n = ft.len() - 200;
    for (regime, mixing, reg_name, pre_seed, strategies) in [
        (
            FrequencyRegime::Drift,
            MixingStructure::Full,
            "drift",
            201u64,
            &[(Strategy::Crlc, "crlc"), (Strategy::Csc, "csc")][..],
        ),
        (
            FrequencyRegime::Stationary,
            MixingStructure::BlockDiagonal,
            "stationary",
            202,
            &[(Strategy::Crlc, "crlc")][..],
        ),
    ] {
        let t0 = Instant::now();
        let pre = generate_pretrain(&SimSpec {
            c,
            m,
            t,
            sigma,
            mixing,
            regime,
            n_windows: 400,
            seed: pre_seed,
        })
        .unwrap();
        println!("generated {reg_name} pretraining data in {:?}", t0.elapsed());
        for &(strategy, strat_name) in strategies {
            let t0 = Instant::now();
            let cfg = RunConfig {
                strategy,
                epochs: 8,
                seed: 7,
                ..RunConfig::default()
            };
            let out = pretrain(&cfg, &pre, None).unwrap();
            let pre_time = t0.elapsed();
            let t0 = Instant::now();
            let feats = compute_features(&out.params, &ft).unwrap();
            let feat_time = t0.elapsed();
            let seed = 1u64;
            let pool_labels = &labels[..pool_n];
            let (tr, rest) = sample_balanced_indices(pool_labels, 2, 200, seed).unwrap();
            let rest_labels: Vec<u32> = rest.iter().map(|&i| labels[i]).collect();
            let (val_rel, _) =
                sample_balanced_indices(&rest_labels, 2, 50, seed ^ 0x9E37_79B9_7F4A_7C15)
                    .unwrap();
            let val: Vec<usize> = val_rel.iter().map(|&j| rest[j]).collect();
            let ytr: Vec<u32> = tr.iter().map(|&i| labels[i]).collect();
            let yval: Vec<u32> = val.iter().map(|&i| labels[i]).collect();
            let (head, mtr) = train_head_on_features(
                &FinetuneConfig {
                    lr: 1e-3,
                    seed,
                    ..FinetuneConfig::default()
                },
                &feats.select(Axis(0), &tr),
                &ytr,
                &feats.select(Axis(0), &val),
                &yval,
                2,
            )
            .unwrap();
            let test_idx: Vec<usize> = (pool_n..ft.len()).collect();
            let (acc, _) = balanced_accuracy(
                &predict_features(&head, &feats.select(Axis(0), &test_idx)),
                &labels[pool_n..],
                2,
            );
            println!(
                "{strat_name} on {reg_name}: test balanced accuracy {acc:.4} \
                 (val {:.4}, pretrain {pre_time:?}, features {feat_time:?})",
                mtr.balanced_accuracy
            );
        }
    }
}
