//! Quick invariant checks on tiny inputs.

use std::path::Path;

use geoflow::lddmm::{self, RegistrationProblem};
use geoflow::metamorphosis::{morph_energy, zero_source_path, MorphProblem};
use geoflow::netgeo::{self, LabeledDataset, Loss, NetSpec};
use geoflow::shooting::shoot_forward;
use geoflow::{DeformationMap, Grid, ScalarField, SobolevKernel};
use nalgebra::DVector;

use crate::Failure;

type Check = fn() -> geoflow::Result<bool>;

fn image(g: &Grid<f64>) -> ScalarField<f64> {
    ScalarField::from_fn(g, |[x, y]| (-((x - 0.5).powi(2) + (y - 0.5).powi(2)) / 0.02).exp())
}

fn sample_at_nodes() -> geoflow::Result<bool> {
    let g = Grid::unit_square(8)?;
    let f = image(&g);
    for idx in [0, 9, 27, 63] {
        let [x, y] = g.node(idx);
        if f.sample(&[x, y])? != f.values()[idx] {
            return Ok(false);
        }
    }
    Ok(true)
}

fn gradient_of_constant() -> geoflow::Result<bool> {
    let g = Grid::unit_square(8)?;
    Ok(ScalarField::constant(&g, 3.5).grad().max_abs() == 0.0)
}

fn kernel_inverts_operator() -> geoflow::Result<bool> {
    let g = Grid::unit_square(16)?;
    let k = SobolevKernel::new(&g, 2.0 / 16.0, 1)?;
    let f = image(&g);
    let back = k.apply_k_scalar(&k.apply_l_scalar(&f)?)?;
    Ok(back.sub(&f)?.max_abs() < 1e-10)
}

fn identity_map() -> geoflow::Result<bool> {
    let g = Grid::unit_square(8)?;
    let id = DeformationMap::identity(&g);
    let t = DeformationMap::translation(&g, &[0.1, -0.05])?;
    let c = t.compose(&id)?;
    let det_ok = id.jacobian_det().values().iter().all(|&d| d == 1.0);
    Ok(det_ok && c.displacement().sub(t.displacement())?.max_abs() < 1e-12)
}

fn self_registration_is_free() -> geoflow::Result<bool> {
    let g = Grid::unit_square(8)?;
    let f = image(&g);
    let k = SobolevKernel::with_default_alpha(&g)?;
    let p = RegistrationProblem::new(f.clone(), f, 1.0, k, 4)?;
    let u = p.zero_path()?;
    Ok(lddmm::energy(&p, &u)? == 0.0)
}

fn zero_momentum_stays_put() -> geoflow::Result<bool> {
    let g = Grid::unit_square(8)?;
    let f = image(&g);
    let k = SobolevKernel::with_default_alpha(&g)?;
    let states = shoot_forward(&f, &ScalarField::zeros(&g), &k, 4)?;
    Ok(states.last().j.sub(&f)?.max_abs() < 1e-12)
}

fn zero_source_is_lddmm() -> geoflow::Result<bool> {
    let g = Grid::unit_square(8)?;
    let f = image(&g);
    let t = f.map(|v| 0.5 * v);
    let k = SobolevKernel::with_default_alpha(&g)?;
    let p = RegistrationProblem::new(f.clone(), t.clone(), 1.0, k.clone(), 4)?;
    let m = MorphProblem::new(f, t, 1.0, 0.5, k, 4)?;
    let u = p.zero_path()?;
    Ok(morph_energy(&m, &u, &zero_source_path(&m)?)? == lddmm::energy(&p, &u)?)
}

fn logistic_at_zero_costs_ln2() -> geoflow::Result<bool> {
    let spec = NetSpec::new(vec![2, 1], Loss::CrossEntropy)?;
    let l = spec.net_loss(&DVector::zeros(3), &[0.4, -2.0], 1.0)?;
    Ok((l - 2f64.ln()).abs() < 1e-15)
}

fn fisher_is_psd() -> geoflow::Result<bool> {
    let spec = NetSpec::new(vec![2, 3, 1], Loss::CrossEntropy)?;
    let data = LabeledDataset::new(vec![vec![0.1, 0.2], vec![1.0, -1.0], vec![-0.4, 0.9]], vec![1.0, 0.0, 1.0])?;
    let f = netgeo::fisher_metric(&spec, &data, &spec.init(0))?;
    Ok(f == f.transpose() && f.symmetric_eigenvalues().min() >= -1e-10)
}

fn quadratic_influence() -> geoflow::Result<bool> {
    let spec = NetSpec::new(vec![1, 1], Loss::Squared)?.without_bias();
    let data = LabeledDataset::new(vec![vec![1.0]; 5], vec![1.0, 2.0, 3.0, 4.0, 5.0])?;
    let theta = DVector::from_vec(vec![3.0]);
    let il = netgeo::influence_loss(&spec, &data, &theta, (&[1.0], 5.0), (&[1.0], 4.0), Some(0.0))?;
    Ok((il + 2.0).abs() < 1e-8)
}

const CHECKS: &[(&str, Check)] = &[
    ("sample_at_nodes", sample_at_nodes),
    ("gradient_of_constant", gradient_of_constant),
    ("kernel_inverts_operator", kernel_inverts_operator),
    ("identity_map", identity_map),
    ("self_registration_is_free", self_registration_is_free),
    ("zero_momentum_stays_put", zero_momentum_stays_put),
    ("zero_source_is_lddmm", zero_source_is_lddmm),
    ("logistic_at_zero_costs_ln2", logistic_at_zero_costs_ln2),
    ("fisher_is_psd", fisher_is_psd),
    ("quadratic_influence", quadratic_influence),
];

pub fn run(out: Option<&Path>) -> Result<(), Failure> {
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (name, check) in CHECKS {
        let ok = matches!(check(), Ok(true));
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(*name);
        }
        rows.push(format!("{name},{ok}"));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("selftest.csv"), format!("check,passed\n{}\n", rows.join("\n")))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numerical {
            out: out.map(Path::to_path_buf),
            kind: "selftest",
            message: format!("failed checks: {}", failed.join(" ")),
        })
    }
}
