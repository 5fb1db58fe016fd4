use geoflow::metamorphosis::{morph_register, MorphProblem};
use geoflow::{Grid, ScalarField, SobolevKernel, TimePath, VectorField};

fn blob(g: &Grid<f64>, cx: f64, cy: f64, s: f64) -> ScalarField<f64> {
    ScalarField::from_fn(g, |[x, y]| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
}

fn path_l2(u: &TimePath<VectorField<f64>>) -> f64 {
    let w = geoflow::fields::trapezoid_weights::<f64>(u.steps());
    u.iter().zip(&w).map(|(v, &wk)| wk * v.norm_sq()).sum::<f64>().sqrt()
}

#[test]
fn large_sigma_leaves_disjoint_blobs_to_the_source() {
    let g = Grid::unit_square(64).unwrap();
    let h = 1.0 / 64.0;
    let k = SobolevKernel::new(&g, 2.0 * h, 1).unwrap();
    let a = blob(&g, 0.3, 0.5, 3.0 * h);
    let b = blob(&g, 0.7, 0.5, 3.0 * h);
    let run = |s2: f64| {
        let p = MorphProblem::new(a.clone(), b.clone(), 1.0, s2, k.clone(), 16).unwrap().with_max_iters(400);
        morph_register(&p).unwrap()
    };
    let small = run(1e-6);
    let big = run(1e3);
    let ratio = path_l2(&big.u_path) / path_l2(&small.u_path);
    assert!(ratio < 1e-3, "velocity ratio {ratio:.3e}");
}

#[test]
fn source_penalty_does_not_grow_with_sigma() {
    let n = 32;
    let g = Grid::unit_square(n).unwrap();
    let h = 1.0 / n as f64;
    let k = SobolevKernel::new(&g, 2.0 * h, 1).unwrap();
    let base = blob(&g, 0.5, 0.5, 3.0 * h);
    let fixtures = [
        (blob(&g, 0.3, 0.5, 2.0 * h), blob(&g, 0.7, 0.5, 2.0 * h)),
        (base.clone(), base.scale(1.5)),
        (base.clone(), base.map(|v| v + 0.5)),
    ];
    for (i, (x, y)) in fixtures.iter().enumerate() {
        let mut prev = f64::INFINITY;
        for s2 in [5.0, 10.0, 20.0, 40.0] {
            let m = morph_register(&MorphProblem::new(x.clone(), y.clone(), 1.0, s2, k.clone(), 8).unwrap()).unwrap();
            let pen = m.energy_trace.last().unwrap().source;
            assert!(pen <= prev * (1.0 + 1e-9), "fixture {i}: sigma2 {s2} penalty {pen:.6e} > {prev:.6e}");
            prev = pen;
        }
    }
}
