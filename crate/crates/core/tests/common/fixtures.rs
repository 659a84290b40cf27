use chanprune_core::data::{synthetic, Split, SyntheticSpec};
use chanprune_core::model::{Mode, TrainedNet};
use chanprune_core::netzoo::{build_cnet, build_resnet20, InputShape, NetworkSpec};
use chanprune_core::train::{fine_tune, TrainConfig};
use chanprune_tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SMALL_IN: InputShape = InputShape {
    height: 8,
    width: 8,
    channels: 3,
};

pub fn cnet_small(classes: usize) -> NetworkSpec {
    build_cnet(8, classes, SMALL_IN).unwrap()
}

pub fn resnet20_4(classes: usize) -> NetworkSpec {
    build_resnet20(4, classes, SMALL_IN).unwrap()
}

pub fn split(classes: usize, samples: usize, seed: u64) -> Split {
    synthetic(&SyntheticSpec::new(classes, samples, seed)).unwrap().split(0.25, seed).unwrap()
}

pub fn trained<S: Scalar>(spec: NetworkSpec, data: &Split, epochs: usize, seed: u64) -> TrainedNet<S> {
    let mut net = TrainedNet::init(spec, &mut ChaCha8Rng::seed_from_u64(seed));
    fine_tune(&mut net, data, &TrainConfig::new(0.02, epochs, seed), 0).unwrap();
    net
}

/// Random-weight net whose batchnorm statistics and affine parameters are
/// far from their defaults.
pub fn perturbed_net(spec: NetworkSpec, seed: u64) -> TrainedNet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = TrainedNet::<f64>::init(spec, &mut rng);
    for _ in 0..3 {
        let x = random_batch(&mut rng, 6, net.spec().input());
        let pass = net.forward(&x, None, Mode::Train).unwrap();
        net.update_running_stats(&pass);
    }
    let roles: Vec<_> = net.spec().params().iter().map(|p| p.role).collect();
    for (t, role) in net.params_mut().iter_mut().zip(roles) {
        if role.is_batchnorm() {
            for v in t.data_mut() {
                *v *= rng.random_range(0.5..1.5);
                if matches!(role, chanprune_core::netzoo::ParamRole::BnBeta) {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
        }
    }
    net
}

pub fn random_batch(rng: &mut impl Rng, n: usize, input: InputShape) -> Tensor<f64> {
    let len = n * input.height * input.width * input.channels;
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[n, input.height, input.width, input.channels], data).unwrap()
}
