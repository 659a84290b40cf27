mod common;

use chanprune_core::profiles::{materialize, random_profile, MaterializeMode};
use chanprune_core::pruning::{rebuild, InitStrategy};
use common::fixtures::{cnet_small, perturbed_net, random_batch, resnet20_4};
use common::oracles::masked_forward;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn rebuilt_forward_equals_hadamard_masked_forward() {
    for (i, spec) in [cnet_small(4), resnet20_4(4)].into_iter().enumerate() {
        let net = perturbed_net(spec, 100 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_batch(&mut rng, 3, net.spec().input());
        for s in 0..50 {
            let p = random_profile("t", net.spec().flag_count(), 0.1, 1.0, &mut rng, s).unwrap();
            let mode = if s % 2 == 0 { MaterializeMode::ExactCount } else { MaterializeMode::Bernoulli };
            let masks = materialize(&p, net.spec().flag_lengths(), &mut rng, mode).unwrap();
            let small = rebuild(&net, &masks, InitStrategy::Pretrained, &mut rng).unwrap();
            for (pi, t) in small.params().iter().enumerate() {
                assert_eq!(t.shape(), small.spec().param_shape(pi).as_slice());
            }
            let diff = small.logits(&x).unwrap().max_abs_diff(&masked_forward(&net, &masks, &x));
            assert!(diff <= 1e-5, "{} mask {s}: {diff}", net.spec().arch_name());
        }
    }
}

#[test]
fn rebuild_twice_with_ones_is_identity() {
    let net = perturbed_net(resnet20_4(3), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_profile("t", 13, 0.2, 0.8, &mut rng, 0).unwrap();
    let m = materialize(&p, net.spec().flag_lengths(), &mut rng, MaterializeMode::ExactCount).unwrap();
    let once = rebuild(&net, &m, InitStrategy::Pretrained, &mut rng).unwrap();
    let ones = chanprune_core::MaskSet::all_ones(once.spec().flag_lengths());
    let twice = rebuild(&once, &ones, InitStrategy::Pretrained, &mut rng).unwrap();
    assert_eq!(once, twice);
}
