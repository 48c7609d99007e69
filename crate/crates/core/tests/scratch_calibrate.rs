//! Scratch calibration runs (removed before release).

use coeffdyn::dynamics::{
    Dims, DynamicsSpec, EvolutionRule, NormalizationRule, ReadoutMap, ScalingRule,
};
use coeffdyn::tasks::{chance_level, generate, TaskKind, TaskSpec};
use coeffdyn::train::{train_loop, ModelConfig, TrainConfig};

fn desk_noisy(seed: u64) -> TaskSpec {
    TaskSpec {
        kind: TaskKind::NoisyRecall,
        vocab_size: 8,
        seq_len: 32,
        frac_noise: 0.2,
        noise_vocab_size: 4,
        multi_query: true,
        num_train_examples: 512,
        num_eval_examples: 128,
        seed,
        ..TaskSpec::default()
    }
}

fn softmax_like(dims: Dims, decay: Option<f64>) -> DynamicsSpec {
    DynamicsSpec {
        readout: ReadoutMap::Exponential,
        evolution: match decay {
            None => EvolutionRule::identity(),
            Some(l) => EvolutionRule::constant_scalar(l).unwrap(),
        },
        scaling: ScalingRule::InverseSqrtN,
        normalization: NormalizationRule::CoefficientSum,
        dims,
        normalize_keys: false,
    }
}

#[test]
#[ignore]
fn calibrate_principle3() {
    let dims = Dims::new(32, 32, 32, 4).unwrap();
    let data = generate(&desk_noisy(1)).unwrap();
    println!("chance = {}", chance_level(&data.spec));

    for (name, decay, pe) in [
        ("A=0.95I noPE", Some(0.95), false),
        ("A=I exp noPE", None, false),
        ("A=I exp PE", None, true),
    ] {
        for seed in [0u64, 1, 2] {
            let spec = softmax_like(dims, decay);
            let mut config = ModelConfig::desk(spec, data.spec.token_space(), 32);
            config.positional_embedding = pe;
            let t0 = std::time::Instant::now();
            let cfg = TrainConfig {
                epochs: 60,
                batch_size: 64,
                learning_rate: 3e-3,
                seed,
                ..TrainConfig::default()
            };
            let result = train_loop(&config, &cfg, &data).unwrap();
            println!(
                "{name} seed {seed}: best {:.3} final-epoch {:.3} diverged={:?} in {:.1}s",
                result.best_eval_accuracy,
                result.metrics.last().unwrap().eval_acc,
                result.diverged,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
