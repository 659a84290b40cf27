use chanprune_core::metrics::{spearman, taylor_scores};
use chanprune_core::model::TrainedNet;
use chanprune_core::netzoo::{build_cnet_with_depth, NetworkSpec};
use chanprune_core::MaskSet;

use super::fixtures::{split, trained, SMALL_IN};
use super::oracles::per_sample_losses;

pub const MIN_SPEARMAN: f64 = 0.8;

/// Spearman correlation per flag between Taylor scores and the measured
/// mean per-sample |loss change| from zeroing each channel alone, on a
/// trained two-conv network.
pub fn taylor_loo_correlations() -> Vec<f64> {
    let data = split(4, 1024, 31);
    let spec: NetworkSpec = build_cnet_with_depth(24, 2, 4, SMALL_IN).unwrap();
    let net: TrainedNet<f64> = trained(spec, &data, 10, 31);
    let val = &data.val;
    let idx: Vec<usize> = (0..val.len()).collect();
    let (x, y) = val.batch::<f64>(&idx).unwrap();
    let lengths = net.spec().flag_lengths().to_vec();
    let ones = MaskSet::all_ones(&lengths);
    let base = per_sample_losses(&net, &ones, &x, &y);
    let taylor = taylor_scores(&net, val, 64).unwrap();
    (0..lengths.len())
        .map(|f| {
            let measured: Vec<f64> = (0..lengths[f])
                .map(|j| {
                    let mut m = ones.clone();
                    let mut v = vec![true; lengths[f]];
                    v[j] = false;
                    m.set_mask(f, v).unwrap();
                    let l = per_sample_losses(&net, &m, &x, &y);
                    l.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f64>() / l.len() as f64
                })
                .collect();
            spearman(&taylor.scores[f], &measured)
        })
        .collect()
}
