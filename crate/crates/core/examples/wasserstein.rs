//! Exact 1D and sliced multi-dimensional W2 between particle clouds.

use meanfield::measures::{sliced_w2_with_error, wasserstein2_1d, ParticleCloud};
use meanfield::model::Vector;

fn main() {
    let a = ParticleCloud::from_values(&[0.0, 1.0, 2.0, 3.0]).unwrap();
    let b = a.shifted(&Vector::from_element(1, 0.5));
    println!("1D shift by 0.5: W2 = {:.6}", wasserstein2_1d(&a, &b).unwrap());

    let c = ParticleCloud::new(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let d = c.scaled(2.0);
    for n_proj in [16, 64, 256, 1024] {
        let s = sliced_w2_with_error(&c, &d, n_proj, 1).unwrap();
        println!("sliced, {n_proj:>4} directions: W2² = {:.4} ± {:.4}", s.squared, s.squared_std_error);
    }
}
