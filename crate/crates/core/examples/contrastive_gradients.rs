//! The forward (target pixels vs source prototypes) and backward (source
//! pixels vs target prototypes) contrastive terms, with a central-difference
//! check of the feature gradient.

use pixproto::contrastive::{bcl, fcl};
use pixproto::maps::{FeatureMap, LabelMap};
use pixproto::prototypes::masked_average_pool;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pixproto::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w, d, c) = (4, 4, 3, 3);
    let mut feats = || FeatureMap::from_fn(h, w, d, |_, _| rng.gen_range(-1.0..1.0));
    let (fs, ft) = (feats(), feats());
    let ys = LabelMap::from_fn(h, w, c, |p| Some(p % c));
    let yt = LabelMap::from_fn(h, w, c, |p| (p % 5 != 0).then_some((p / 2) % c));
    let tau = 0.1;

    let rho_s = masked_average_pool(&fs, &ys)?;
    let rho_t = masked_average_pool(&ft, &yt)?;
    let forward = fcl(&ft, &yt, &rho_s, tau)?;
    let backward = bcl(&fs, &ys, &rho_t, tau)?;
    println!("L_FC = {:.6} over {} pixels", forward.loss, forward.contributing);
    println!("L_BC = {:.6} over {} pixels", backward.loss, backward.contributing);

    // prototypes held fixed: perturb one target feature
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..ft.data().len() {
        let mut plus = ft.clone();
        plus.data_mut()[k] += step;
        let mut minus = ft.clone();
        minus.data_mut()[k] -= step;
        let fd = (fcl(&plus, &yt, &rho_s, tau)?.loss - fcl(&minus, &yt, &rho_s, tau)?.loss) / (2.0 * step);
        let an = forward.grad_features[0].data()[k];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8));
    }
    println!("worst relative error of dL_FC/df: {worst:.2e}");
    Ok(())
}
