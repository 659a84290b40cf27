mod common;

use common::taylor::{taylor_loo_correlations, MIN_SPEARMAN};

#[test]
fn taylor_tracks_leave_one_out() {
    let rho = taylor_loo_correlations();
    println!("{rho:?}");
    for (f, r) in rho.iter().enumerate() {
        assert!(*r >= MIN_SPEARMAN, "flag {f}: spearman {r}");
    }
}
