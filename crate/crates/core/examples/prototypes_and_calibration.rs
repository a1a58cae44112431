//! Masked average pooling, EMA prototype banks, the domain bias between
//! them, and bias calibration of source prototypes.

use pixproto::maps::{FeatureMap, LabelMap};
use pixproto::prototypes::{calibrate, domain_bias, masked_average_pool, PrototypeBank};

fn main() -> pixproto::Result<()> {
    // 2x2 image, 2-dim features, classes 0 and 1 (one pixel unlabelled)
    let f = FeatureMap::from_vec(2, 2, 2, vec![1.0, 0.0, 3.0, 0.0, 0.0, 2.0, 9.0, 9.0])?;
    let y = LabelMap::from_fn(2, 2, 2, |p| [Some(0), Some(0), Some(1), None][p]);
    let source = masked_average_pool(&f, &y)?;
    for (c, p) in source.iter() {
        println!("source class {c}: {:?} from {} pixels", p.vector, p.pixel_count);
    }

    // a "target" batch whose features are shifted by +0.5
    let shifted = FeatureMap::from_fn(2, 2, 2, |p, d| f.pixel(p)[d] + 0.5);
    let target = masked_average_pool(&shifted, &y)?;

    let mut bank_s = PrototypeBank::new(2, 2, 0.9)?;
    let mut bank_t = PrototypeBank::new(2, 2, 0.9)?;
    for _ in 0..5 {
        bank_s.update(&source)?;
        bank_t.update(&target)?;
    }
    let xi = domain_bias(&bank_s, &bank_t)?;
    println!("bias class 0: {:?}", xi.get(0));

    let calibrated = calibrate(&source, &xi)?;
    for (c, p) in calibrated.iter() {
        println!("calibrated class {c}: {:?} (target {:?})", p.vector, target.get(c).unwrap().vector);
    }

    // calibrating with the negated bias undoes the shift
    let back = calibrate(&calibrated, &xi.negated())?;
    for (c, p) in back.iter() {
        let err: f64 = p.vector.iter().zip(&source.get(c).unwrap().vector).map(|(a, b)| (a - b).abs()).sum();
        println!("round trip class {c}: error {err:.1e}");
    }
    Ok(())
}
