mod common;

use common::*;

#[test]
fn rasterizer_gradients_match_finite_differences() {
    let mut rng = rng(11);
    for class in PARAM_CLASSES {
        let mut errs = Vec::new();
        let mut attempts = 0;
        while errs.len() < 30 && attempts < 1000 {
            attempts += 1;
            if let Some(e) = raster_gradient_instance(&mut rng, class) {
                errs.push(e);
            }
        }
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        println!("{class:?}: {} instances, worst rel err {worst:e}", errs.len());
        assert!(errs.len() == 30);
        assert!(worst < 1e-3, "{class:?} worst {worst}");
    }
}
