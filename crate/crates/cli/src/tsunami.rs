//! `tsunami-twin` and `tsunami-invert`.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde_json::json;

use goursat::tsunami::{
    build_characteristic_map, inverse_solve, lambda_sweep, quadrant_decompose, sweep_csv, synth_observations, InverseResult, ObservationSet,
};

use crate::config::{Command, ObservationsConfig, RunConfig};
use crate::output::{num, Output};
use crate::CliError;

fn read_points(path: &Path, oc: &ObservationsConfig) -> Result<Vec<[f64; 3]>, CliError> {
    let where_ = |row: usize, what: String| CliError::Config(format!("tsunami.observations ({}, row {row}): {what}", path.display()));
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(oc.has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("tsunami.observations.path: {}: {e}", path.display())))?;
    let mut pts = Vec::new();
    for (row, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| where_(row + 1, e.to_string()))?;
        let mut p = [0.0; 3];
        for (k, &col) in oc.columns.iter().enumerate() {
            let cell = rec.get(col).ok_or_else(|| where_(row + 1, format!("no column {col}")))?;
            p[k] = cell.parse().map_err(|_| where_(row + 1, format!("column {col} is not a number: `{cell}`")))?;
        }
        pts.push(p);
    }
    if pts.is_empty() {
        return Err(CliError::Config(format!("tsunami.observations: {} has no rows", path.display())));
    }
    Ok(pts)
}

pub fn run(cfg: &RunConfig, command: Command, out: &mut Output) -> Result<(bool, serde_json::Value), CliError> {
    let tc = cfg.tsunami.as_ref().expect("validated");
    let mut model = tc.model.clone();
    if tc.auto_t2 {
        model.t_range[1] = model.compatible_t2()?;
    }
    model.validate()?;
    let map = Arc::new(build_characteristic_map(&model)?);
    let quads = quadrant_decompose(&map, tc.h_max)?;
    let truth = tc.truth.as_ref().map(|b| {
        quads.sample(|s, tp| {
            let [r, t] = map.from_char(s, tp);
            b.eval(r, t)
        })
    });

    let obs = match command {
        Command::TsunamiTwin => synth_observations(&map, &quads, truth.as_ref().expect("validated"), tc.noise, cfg.seed)?,
        _ => {
            let oc = tc.observations.as_ref().expect("validated");
            let path = cfg.resolve(&oc.path);
            let pts = read_points(&path, oc)?;
            ObservationSet::from_points(&map, &quads, &pts, oc.coords)?
        }
    };
    out.text_csv("observations.csv", &obs.v_obs.to_csv(&map, "v_obs"))?;
    if let Some(u) = &truth {
        out.text_csv("truth.csv", &quads.to_lattice(u).to_csv(&map, "u_true"))?;
    }

    let (rows, results): (Option<Vec<_>>, Vec<InverseResult>) = match &truth {
        Some(u) => {
            let (rows, res) = lambda_sweep(&map, &quads, &obs, u, &tc.lambdas, &tc.solver)?;
            (Some(rows), res)
        }
        None => (None, tc.lambdas.par_iter().map(|&l| inverse_solve(&map, &quads, &obs, l, &tc.solver)).collect::<Result<_, _>>()?),
    };
    match &rows {
        Some(rows) => out.text_csv("sweep.csv", &sweep_csv(rows))?,
        None => {
            let header = ["lambda", "misfit", "regularization", "iterations", "converged"].map(String::from);
            let body = results.iter().map(|r| {
                vec![num(r.lambda), num(r.misfit), num(r.regularization), (r.trace.iterates.len() - 1).to_string(), r.trace.converged.to_string()]
            });
            out.csv_rows("sweep.csv", &header, body)?;
        }
    }
    for (k, r) in results.iter().enumerate() {
        out.text_csv(&format!("estimate_{k}.csv"), &quads.to_lattice(&r.u).to_csv(&map, "u"))?;
        out.text_csv(&format!("trace_{k}.csv"), &r.trace.to_csv())?;
    }

    let mut checks = serde_json::Map::new();
    let mut pass = true;
    if let Some(rows) = &rows {
        let mut by_lambda: Vec<_> = rows.iter().collect();
        by_lambda.sort_by(|a, b| b.lambda.total_cmp(&a.lambda));
        if tc.expect_monotone {
            let ok = by_lambda.windows(2).all(|w| w[1].rel_error < w[0].rel_error);
            checks.insert("monotone_in_lambda".into(), json!(ok));
            pass &= ok;
        }
        if let Some(th) = tc.threshold {
            let last = by_lambda.last().expect("nonempty").rel_error;
            let ok = last < th;
            checks.insert("threshold".into(), json!({ "value": th, "error": last, "pass": ok }));
            pass &= ok;
        }
    }
    let report = json!({
        "model": model,
        "half_width": map.a,
        "quadrant_cells_per_side": quads.half,
        "h": quads.h(),
        "noise_level": obs.noise_level,
        "noise_sigma": obs.noise_sigma,
        "sweep": rows,
        "results": results,
        "checks": checks,
    });
    Ok((pass, report))
}
