#![allow(dead_code)]

use mcs_core::grid::ImageGrid;
use mcs_core::linops::LinearOperator;
use mcs_core::rng::SeededRng;
use nalgebra::DMatrix;

pub fn random_dense(rng: &mut SeededRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Operators exercised by the algebra checks, with a short name for messages.
pub fn operator_catalogue(seed: u64) -> Vec<(String, LinearOperator)> {
    let mut rng = SeededRng::new(seed);
    let mut ops = Vec::new();
    for s in [2, 4, 8] {
        ops.push((format!("avgpool s={s}"), LinearOperator::avgpool(16, 16, s).unwrap()));
    }
    ops.push(("blur sigma=1.5".into(), LinearOperator::gaussian_blur(8, 8, 1.5, 5).unwrap()));
    ops.push((
        "blur+pool".into(),
        LinearOperator::parse("compose:[blur:sigma=1.2;avgpool:s=4]", (16, 16)).unwrap(),
    ));
    ops.push((
        "dense 6x12".into(),
        LinearOperator::dense(random_dense(&mut rng, 6, 12), (3, 4), (2, 3)).unwrap(),
    ));
    ops.push((
        "dense rank-deficient 8x6".into(),
        LinearOperator::dense(
            random_dense(&mut rng, 8, 3) * random_dense(&mut rng, 3, 6),
            (2, 3),
            (2, 4),
        )
        .unwrap(),
    ));
    ops
}

/// Largest absolute entry of `a - b`, relative to the largest entry of `b` (at least 1).
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(x: &ImageGrid, h: f64, f: impl Fn(&ImageGrid) -> f64) -> ImageGrid {
    let mut g = ImageGrid::zeros(x.height(), x.width());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let v = x.values()[i];
        xp.values_mut()[i] = v + h;
        let fp = f(&xp);
        xp.values_mut()[i] = v - h;
        let fm = f(&xp);
        xp.values_mut()[i] = v;
        g.values_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

pub fn rel_err(a: &ImageGrid, b: &ImageGrid) -> f64 {
    a.sub(b).norm() / b.norm().max(1e-12)
}
