use msis_core::dataset::{Batch, Example};
use msis_core::loss::{check_gradients, total_loss, LossConfig};
use msis_core::model::{Architecture, MlpConfig, MsisConfig};
use msis_core::numerics::{Graph, Reduction};
use msis_core::sim::{generate, SimConfig};
use msis_core::trainer::PreparedData;
use msis_core::{Stage, Target};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn pool() -> &'static [Example] {
    static POOL: OnceLock<Vec<Example>> = OnceLock::new();
    POOL.get_or_init(|| {
        let pop = generate(&SimConfig {
            n: 3000,
            ..SimConfig::default()
        })
        .unwrap();
        PreparedData::from_population(&pop, 0).unwrap().split.train
    })
}

fn architectures() -> Vec<Architecture> {
    let base = MsisConfig::default();
    vec![
        base.clone().into(),
        MsisConfig {
            corridor_dim: 2,
            ..base.clone()
        }
        .into(),
        base.without_stage(Stage::Ws).into(),
        base.without_corridor().into(),
        base.single_intra_target(Target::Mob1).into(),
        MlpConfig::default().into(),
    ]
}

fn batch(start: usize, len: usize) -> Batch<f64> {
    let pool = pool();
    Batch::from_examples((0..len).map(|i| &pool[(start + 7 * i) % pool.len()]))
}

#[test]
fn replay_matches_rebuild_bit_for_bit() {
    let arch: Architecture = MsisConfig::default().into();
    let mut params = arch.init_params::<f64>(3).unwrap();
    let b = batch(0, 32);
    let loss = LossConfig::default();

    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let x = g.constant(b.features.clone());
    let out = arch.forward_graph(&mut g, &binding, x).unwrap();
    let root = total_loss(&mut g, &out, &b, &loss).unwrap().total;

    for (name, i) in [("shared.layer0.weight", 5), ("ar.credit.head.bias", 0), ("gb.corridor.mob3.g1_own.weight", 11)] {
        let leaf = binding.var(name);
        g.leaf_value_mut(leaf).unwrap().data_mut()[i] += 0.25;
        g.reevaluate(&g.dependents(leaf));
        params.get_mut(name).unwrap().data_mut()[i] += 0.25;

        let mut fresh = Graph::new();
        let fb = params.bind(&mut fresh);
        let fx = fresh.constant(b.features.clone());
        let fo = arch.forward_graph(&mut fresh, &fb, fx).unwrap();
        let froot = total_loss(&mut fresh, &fo, &b, &loss).unwrap().total;
        assert_eq!(g.value(root).item().to_bits(), fresh.value(froot).item().to_bits(), "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 20, ..ProptestConfig::default() })]

    #[test]
    fn adjoints_match_central_differences(
        seed in 0u64..1_000_000,
        arch_index in 0usize..6,
        start in 0usize..1000,
        sum_mode in any::<bool>(),
    ) {
        let arch = &architectures()[arch_index];
        let mut params = arch.init_params::<f64>(seed).unwrap();
        // Zero biases meeting all-zero activations sit exactly on a ReLU
        // kink, where central differences see half the slope.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
        }
        let b = batch(start, 16);
        let mut loss = LossConfig::default().with_gamma(0.05);
        if sum_mode {
            loss.reduction = Reduction::Sum;
        }
        let report = check_gradients(arch, &params, &b, &loss, 1e-6, 1e-4).unwrap();
        prop_assert!(report.passed(), "{report:?}");
        prop_assert_eq!(report.checked, params.scalar_count());
    }
}
