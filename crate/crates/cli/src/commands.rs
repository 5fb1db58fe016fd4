use std::fmt::Display;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use geoflow::io::{load_dataset, load_image, write_map_raw, write_scalar_raw, write_vector_raw};
use geoflow::lddmm::{register, RegistrationProblem};
use geoflow::metamorphosis::{morph_register, MorphProblem};
use geoflow::netgeo::{self, LabeledDataset, Loss, NetSpec, ParamVector, TrainOptions, TrainResult};
use geoflow::shooting::{conservation_profile, register_shooting};
use geoflow::transport::integrate_flow;
use geoflow::{ScalarField, SobolevKernel};

use crate::{Cli, Command, Failure, ImageArgs, NetArgs};

type Res<T = ()> = Result<T, Failure>;

pub fn run(cli: &Cli) -> Res {
    match &cli.command {
        Command::Register(a) => cmd_register(&a.image),
        Command::Shoot(a) => cmd_shoot(a),
        Command::Morph(a) => cmd_morph(&a.image, a.sigma2, a.alternate),
        Command::NetTrain(a) => cmd_net_train(a, cli.seed),
        Command::NetInfluence(a) => cmd_net_influence(a, cli.seed),
        Command::NetReweight(a) => cmd_net_reweight(a, cli.seed),
        Command::NetComplexity(a) => cmd_net_complexity(a, cli.seed),
        Command::NetIsometry(a) => cmd_net_isometry(a, cli.seed),
        Command::Selftest(a) => crate::selftest::run(a.out.as_deref()),
    }
}

fn create(dir: &Path, name: &str) -> Res<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Header plus rows, every value printed in shortest round-trip form.
fn write_csv<V: Display>(dir: &Path, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<V>>) -> Res {
    let mut w = csv::Writer::from_writer(create(dir, name)?);
    let err = |e: csv::Error| Failure::Usage(e.to_string());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

fn not_converged(out: &Path, what: &str, iterations: usize) -> Failure {
    Failure::Numerical {
        out: Some(out.to_path_buf()),
        kind: "not_converged",
        message: format!("{what} did not converge within {iterations} iterations"),
    }
}

fn load_pair(a: &ImageArgs) -> Res<(ScalarField<f64>, ScalarField<f64>, SobolevKernel<f64>)> {
    let i0 = load_image::<f64>(&a.source)?;
    let i1 = load_image::<f64>(&a.target)?;
    if i0.grid() != i1.grid() {
        return Err(Failure::Usage("source and target grids differ".into()));
    }
    let h = i0.grid().spacing()[0];
    let kernel = SobolevKernel::new(i0.grid(), a.alpha * h, a.kernel_power)?;
    Ok((i0, i1, kernel))
}

fn write_series<F>(out: &Path, prefix: &str, n: usize, mut write: F) -> Res
where
    F: FnMut(usize, BufWriter<File>) -> geoflow::Result<()>,
{
    for k in 0..n {
        write(k, create(out, &format!("{prefix}_{k:03}.f32"))?)?;
    }
    Ok(())
}

fn cmd_register(a: &ImageArgs) -> Res {
    let (i0, i1, kernel) = load_pair(a)?;
    let problem = RegistrationProblem::new(i0, i1, a.beta, kernel, a.steps)?.with_max_iters(a.max_iters).with_tol(a.tol);
    let r = register(&problem)?;
    let out = &a.out;
    write_series(out, "u", r.u_path.samples().len(), |k, w| write_vector_raw(&r.u_path.samples()[k], w))?;
    write_series(out, "phi", r.phi_path.samples().len(), |k, w| write_map_raw(&r.phi_path.samples()[k], w))?;
    write_csv(out, "energy.csv", &["iter", "E_kin", "E_match", "E_total"], r.energy_trace.iter().enumerate().map(|(i, e)| vec![i as f64, e.kinetic, e.matching, e.total]))?;
    write_csv(out, "report.csv", &["ep_residual", "converged", "iterations"], [vec![r.ep_residual.to_string(), r.converged.to_string(), r.iterations.to_string()]])?;
    if !r.converged {
        return Err(not_converged(out, "registration", r.iterations));
    }
    Ok(())
}

fn cmd_shoot(a: &ImageArgs) -> Res {
    let (i0, i1, kernel) = load_pair(a)?;
    let r = register_shooting(&i0, &i1, a.beta, &kernel, a.steps, a.max_iters, a.tol)?;
    let out = &a.out;
    write_scalar_raw(&r.p0, create(out, "p0.f32")?)?;
    write_csv(out, "energy.csv", &["iter", "E_kin", "E_match", "E_total"], r.energy_trace.iter().enumerate().map(|(i, e)| vec![i as f64, e.kinetic, e.matching, e.total]))?;
    let profile = conservation_profile(&r.states, &kernel)?;
    write_csv(out, "conservation.csv", &["t", "kinetic", "mass"], profile.iter().enumerate().map(|(k, (kin, mass))| vec![r.states.time(k), *kin, *mass]))?;
    write_csv(out, "report.csv", &["converged", "iterations"], [vec![r.converged.to_string(), r.iterations.to_string()]])?;
    if !r.converged {
        return Err(not_converged(out, "shooting", r.iterations));
    }
    Ok(())
}

fn cmd_morph(a: &ImageArgs, sigma2: f64, alternate: bool) -> Res {
    let (i0, i1, kernel) = load_pair(a)?;
    let problem = MorphProblem::new(i0, i1, a.beta, sigma2, kernel, a.steps)?
        .with_max_iters(a.max_iters)
        .with_tol(a.tol)
        .alternating(alternate);
    let r = morph_register(&problem)?;
    let out = &a.out;
    let phi = integrate_flow(&r.u_path)?.forward;
    write_series(out, "u", r.u_path.samples().len(), |k, w| write_vector_raw(&r.u_path.samples()[k], w))?;
    write_series(out, "phi", phi.samples().len(), |k, w| write_map_raw(&phi.samples()[k], w))?;
    write_series(out, "z", r.z_path.samples().len(), |k, w| write_scalar_raw(&r.z_path.samples()[k], w))?;
    write_scalar_raw(r.j_path.last(), create(out, "j_final.f32")?)?;
    write_csv(
        out,
        "energy.csv",
        &["iter", "E_kin", "E_source", "E_match", "E_total"],
        r.energy_trace.iter().enumerate().map(|(i, e)| vec![i as f64, e.kinetic, e.source, e.matching, e.total]),
    )?;
    write_csv(out, "report.csv", &["converged", "iterations"], [vec![r.converged.to_string(), r.iterations.to_string()]])?;
    if !r.converged {
        return Err(not_converged(out, "metamorphosis", r.iterations));
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Res<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Failure::Usage(format!("bad {what} entry {t:?}"))))
        .collect()
}

fn loss_of(name: &str) -> Loss {
    if name == "squared" {
        Loss::Squared
    } else {
        Loss::CrossEntropy
    }
}

fn finish_spec(spec: NetSpec, a: &NetArgs) -> Res<NetSpec> {
    let spec = if a.no_bias { spec.without_bias() } else { spec };
    let spec = spec.with_l2(a.l2);
    spec.validate()?;
    Ok(spec)
}

fn dense_spec(a: &NetArgs, data: &LabeledDataset) -> Res<NetSpec> {
    let mut widths = vec![data.dim()];
    widths.extend(parse_list::<usize>(&a.hidden, "hidden width")?);
    widths.push(1);
    finish_spec(NetSpec::new(widths, loss_of(&a.loss))?, a)
}

fn train_opts(a: &NetArgs, seed: u64) -> TrainOptions {
    TrainOptions {
        lr: a.lr,
        max_iters: a.max_iters,
        tol: a.tol,
        seed,
    }
}

fn write_theta(out: &Path, theta: &ParamVector) -> Res {
    write_csv(out, "theta.csv", &["index", "value"], theta.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]))
}

fn write_train_report(out: &Path, r: &TrainResult) -> Res {
    write_csv(
        out,
        "train.csv",
        &["loss", "grad_norm", "iterations", "converged"],
        [vec![r.loss.to_string(), r.grad_norm.to_string(), r.iterations.to_string(), r.converged.to_string()]],
    )
}

/// Trains and records θ̂; a run that misses the tolerance is a failure.
fn fit(spec: &NetSpec, data: &LabeledDataset, a: &NetArgs, seed: u64) -> Res<TrainResult> {
    let r = netgeo::train(spec, data, &train_opts(a, seed))?;
    write_theta(&a.out, &r.theta)?;
    write_train_report(&a.out, &r)?;
    if !r.converged {
        return Err(not_converged(&a.out, "training", r.iterations));
    }
    Ok(r)
}

fn cmd_net_train(a: &NetArgs, seed: u64) -> Res {
    let data = load_dataset(&a.train)?;
    let spec = dense_spec(a, &data)?;
    fit(&spec, &data, a, seed).map(|_| ())
}

fn cmd_net_influence(a: &crate::InfluenceArgs, seed: u64) -> Res {
    let data = load_dataset(&a.net.train)?;
    let test = load_dataset(&a.test)?;
    let spec = dense_spec(&a.net, &data)?;
    let r = fit(&spec, &data, &a.net, seed)?;
    let rep = netgeo::influence_report(&spec, &data, &r.theta, &test, a.damping).map_err(|e| with_out(e, &a.net.out))?;
    let mut header = vec!["index".to_string(), "self_influence".to_string()];
    header.extend((0..test.len()).map(|j| format!("I_up_loss_{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        &a.net.out,
        "influence.csv",
        &header,
        (0..data.len()).map(|i| {
            let mut row = vec![i.to_string(), rep.self_influence[i].to_string()];
            row.extend((0..test.len()).map(|j| rep.loss[(i, j)].to_string()));
            row
        }),
    )?;
    let mut pheader = vec!["index".to_string()];
    pheader.extend((0..spec.param_count()).map(|k| format!("I_up_params_{k}")));
    let pheader: Vec<&str> = pheader.iter().map(String::as_str).collect();
    write_csv(
        &a.net.out,
        "influence_params.csv",
        &pheader,
        (0..data.len()).map(|i| {
            let mut row = vec![i.to_string()];
            row.extend(rep.params.column(i).iter().map(|v| v.to_string()));
            row
        }),
    )?;
    write_csv(&a.net.out, "report.csv", &["damping"], [vec![rep.delta]])
}

fn with_out(e: geoflow::GeoError, out: &Path) -> Failure {
    match Failure::from(e) {
        Failure::Numerical { kind, message, .. } => Failure::Numerical { out: Some(out.to_path_buf()), kind, message },
        f => f,
    }
}

fn cmd_net_reweight(a: &crate::ReweightArgs, seed: u64) -> Res {
    let data = load_dataset(&a.net.train)?;
    let valid = load_dataset(&a.valid)?;
    let spec = dense_spec(&a.net, &data)?;
    let opts = netgeo::ReweightOptions {
        outer_iters: a.outer_iters,
        inner_lr: a.inner_lr,
        seed,
    };
    let r = netgeo::reweight_train(&spec, &data, &valid, &opts)?;
    let out = &a.net.out;
    write_theta(out, &r.theta)?;
    write_csv(out, "weights.csv", &["index", "label", "weight"], r.weights.iter().enumerate().map(|(i, w)| vec![i.to_string(), data.labels[i].to_string(), w.to_string()]))?;
    write_csv(out, "valid_loss.csv", &["iter", "valid_loss"], r.valid_loss.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]))
}

fn cmd_net_complexity(a: &crate::ComplexityArgs, seed: u64) -> Res {
    let data = load_dataset(&a.net.train)?;
    let spec = finish_spec(NetSpec::residual(data.dim(), a.blocks, loss_of(&a.net.loss))?, &a.net)?;
    let r = netgeo::train(&spec, &data, &train_opts(&a.net, seed))?;
    let out = &a.net.out;
    write_theta(out, &r.theta)?;
    write_train_report(out, &r)?;
    let frn = netgeo::fisher_rao_norm(&spec, &data, &r.theta)?;
    let cc = netgeo::curve_complexity(&spec, &data, &r.theta)?;
    write_csv(out, "complexity.csv", &["blocks", "fisher_rao_norm", "curve_complexity"], [vec![a.blocks.to_string(), frn.to_string(), cc.to_string()]])?;
    if !r.converged {
        return Err(not_converged(out, "training", r.iterations));
    }
    Ok(())
}

fn cmd_net_isometry(a: &crate::IsometryArgs, seed: u64) -> Res {
    let widths = parse_list::<usize>(&a.widths, "width")?;
    let spec = if a.residual {
        if widths.is_empty() || widths.iter().any(|&w| w != widths[0]) {
            return Err(Failure::Usage("residual networks need equal widths".into()));
        }
        NetSpec::residual(widths[0], widths.len() - 1, Loss::Squared)?
    } else {
        NetSpec::new(widths, Loss::Squared)?
    };
    let probe = match &a.probe {
        Some(p) => parse_list::<f64>(p, "probe")?,
        None => vec![0.0; spec.input_dim()],
    };
    let theta = spec.init(seed);
    let sv = netgeo::dynamic_isometry(&spec, &theta, &probe)?;
    write_csv(&a.out, "spectrum.csv", &["index", "singular_value"], sv.iter().enumerate().map(|(i, s)| vec![i.to_string(), s.to_string()]))?;
    write_csv(&a.out, "report.csv", &["condition_number"], [vec![netgeo::condition_number(&sv)]])
}
