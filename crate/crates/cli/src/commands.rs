//! The five subcommands. Each writes its artifacts under `output.dir` and
//! returns a summary for callers that want to inspect results directly.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use wonham_mv::filter::Belief;
use wonham_mv::kernel::{check_local_consistency, LocalTerms};
use wonham_mv::oracle::{
    marginal_check, simulate_chain_paths, simulate_sde_paths, FieldPolicy, MarginalReport,
    SdeConfig,
};
use wonham_mv::solver::{occupancy, propagation_residual, spike_check, Occupancy, SolveReport};
use wonham_mv::{solve, ControlPoint, McSummary, RegimeModel, SolutionFields};

use crate::config::{LoadedConfig, RunConfig};
use crate::output::{ensure_dir, num, slice_table, stencil_table, tag, write_csv, write_json};
use crate::run::{prepare, prepare_with, GridSummary, Prepared};
use crate::CliError;

/// Solves and logs the wall time to standard error only, so artifacts stay reproducible.
pub fn solve_prepared(p: &Prepared) -> Result<SolutionFields, CliError> {
    let start = Instant::now();
    let fields = solve(&p.model, &p.lattice, &p.grid)?;
    eprintln!(
        "solved {} nodes x {} slices x {} controls in {:.2?}",
        p.lattice.len(),
        p.lattice.spec().n_steps,
        p.grid.len(),
        start.elapsed()
    );
    Ok(fields)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalPoint {
    pub t: f64,
    pub slice: usize,
    pub node: usize,
    pub x: f64,
    pub phi: Vec<f64>,
    pub value: f64,
    pub g: f64,
    /// Policy at this slice; absent at the terminal slice.
    pub control: Option<ControlPoint>,
}

pub fn eval_point(p: &Prepared, fields: &SolutionFields, slice: usize, node: usize) -> EvalPoint {
    let (x, b) = p.lattice.state(node);
    EvalPoint {
        t: p.lattice.spec().time(slice),
        slice,
        node,
        x,
        phi: b.phi().to_vec(),
        value: fields.value[slice][node],
        g: fields.g[slice][node],
        control: (slice < fields.n_steps()).then(|| fields.control(&p.grid, slice, node).clone()),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveManifest {
    pub command: &'static str,
    pub config: RunConfig,
    pub model: RegimeModel,
    pub grid: GridSummary,
    pub report: SolveReport,
    /// Smallest stay probability under the chosen controls; 0 is the CFL limit.
    pub cfl_margin: f64,
    pub evaluation: EvalPoint,
    /// Law of the chain from the evaluation point.
    pub occupancy: Occupancy,
    pub files: Vec<String>,
}

pub struct SolveRun {
    pub prepared: Prepared,
    pub fields: SolutionFields,
    pub manifest: SolveManifest,
}

fn slice_list(config: &RunConfig, p: &Prepared) -> Result<Vec<usize>, CliError> {
    let mut out: Vec<usize> = Vec::new();
    for &t in &config.output.slice_times {
        let n = p.slice_of(t)?;
        if !out.contains(&n) {
            out.push(n);
        }
    }
    Ok(out)
}

/// Rows of the evaluation slice restricted to the evaluation belief, one per wealth level.
fn eval_table(p: &Prepared, fields: &SolutionFields) -> (Vec<String>, Vec<Vec<String>>) {
    let (header, rows) = slice_table(p, fields, p.eval_slice);
    let ns = p.lattice.simplex_len();
    let s = p.lattice.simplex_rank_of(p.eval_node);
    let rows = rows
        .into_iter()
        .enumerate()
        .filter(|(i, _)| i % ns == s)
        .map(|(_, r)| r)
        .collect();
    (header, rows)
}

pub fn cmd_solve(loaded: &LoadedConfig) -> Result<SolveRun, CliError> {
    let config = &loaded.config;
    let p = prepare(loaded)?;
    let slices = slice_list(config, &p)?;
    let fields = solve_prepared(&p)?;
    let dir = &config.output.dir;
    ensure_dir(dir)?;

    let mut files = Vec::new();
    for &n in &slices {
        let name = format!("slice_t{}.csv", tag(p.lattice.spec().time(n)));
        let (h, rows) = slice_table(&p, &fields, n);
        write_csv(&dir.join(&name), &h, &rows)?;
        files.push(name);
        if config.output.debug_stencils && n < fields.n_steps() {
            let name = format!("stencils_t{}.csv", tag(p.lattice.spec().time(n)));
            let (h, rows) = stencil_table(&p, &fields, n)?;
            write_csv(&dir.join(&name), &h, &rows)?;
            files.push(name);
        }
    }
    let (h, rows) = eval_table(&p, &fields);
    write_csv(&dir.join("eval_slice.csv"), &h, &rows)?;
    files.push("eval_slice.csv".into());
    files.push("manifest.json".into());

    let manifest = SolveManifest {
        command: "solve",
        config: config.clone(),
        model: p.model.clone(),
        grid: p.summary(),
        report: fields.report.clone(),
        cfl_margin: fields.report.min_p_stay,
        evaluation: eval_point(&p, &fields, p.eval_slice, p.eval_node),
        occupancy: occupancy(
            &p.model,
            &p.lattice,
            &p.grid,
            &fields,
            p.eval_slice,
            p.eval_node,
        )?,
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(SolveRun {
        prepared: p,
        fields,
        manifest,
    })
}

/// Chain and diffusion simulated from the same start under the same policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Agreement {
    pub h1: f64,
    pub h2: f64,
    pub g0: f64,
    pub value0: f64,
    pub chain: McSummary,
    pub sde: McSummary,
    pub sde_step: f64,
    /// `|mean_sde - mean_chain|`
    pub gap: f64,
    /// `3 (se_sde + se_chain)`
    pub noise: f64,
    /// Smallest `C` with `gap <= noise + C (h1 + h2)`.
    pub c_fit: f64,
    /// `|mean_chain - g0| <= 3 se_chain`
    pub g_consistent: bool,
}

/// Simulates from slice 0 at the evaluation wealth and belief.
pub fn weak_agreement(
    p: &Prepared,
    fields: &SolutionFields,
    config: &RunConfig,
) -> Result<(Agreement, Vec<f64>, Vec<f64>), CliError> {
    let o = &config.oracle;
    let spec = *p.lattice.spec();
    let node = p.eval_node;
    let (chain_paths, chain_hits) = simulate_chain_paths(
        &p.model, &p.lattice, &p.grid, fields, 0, node, o.n_paths, o.seed,
    )?;
    let chain = McSummary::from_samples(
        &chain_paths,
        chain_hits,
        p.model.risk_aversion,
        p.model.objective_convention,
    );
    let step = o.sde_step.unwrap_or(spec.h2);
    let (x0, b0) = p.lattice.state(node);
    let policy = FieldPolicy {
        lattice: &p.lattice,
        grid: &p.grid,
        fields,
    };
    let sde_cfg = SdeConfig {
        n_paths: o.sde_paths,
        seed: o.seed,
        step,
        x_min: spec.x_min,
        x_max: spec.x_max,
    };
    let (sde_paths, sde_hits) = simulate_sde_paths(&p.model, &policy, 0.0, x0, &b0, &sde_cfg)?;
    let sde = McSummary::from_samples(
        &sde_paths,
        sde_hits,
        p.model.risk_aversion,
        p.model.objective_convention,
    );
    let g0 = fields.g[0][node];
    let gap = (sde.mean_xt - chain.mean_xt).abs();
    let noise = 3.0 * (sde.se_mean + chain.se_mean);
    let agreement = Agreement {
        h1: spec.h1,
        h2: spec.h2,
        g0,
        value0: fields.value[0][node],
        g_consistent: (chain.mean_xt - g0).abs() <= 3.0 * chain.se_mean + 1e-12,
        chain,
        sde,
        sde_step: step,
        gap,
        noise,
        c_fit: (gap - noise).max(0.0) / (spec.h1 + spec.h2),
    };
    Ok((agreement, chain_paths, sde_paths))
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateManifest {
    pub command: &'static str,
    pub config: RunConfig,
    pub model: RegimeModel,
    pub grid: GridSummary,
    pub agreement: Agreement,
    pub files: Vec<String>,
}

pub fn cmd_simulate(loaded: &LoadedConfig) -> Result<SimulateManifest, CliError> {
    let config = &loaded.config;
    let p = prepare(loaded)?;
    let fields = solve_prepared(&p)?;
    let (agreement, chain_paths, sde_paths) = weak_agreement(&p, &fields, config)?;
    let dir = &config.output.dir;
    ensure_dir(dir)?;
    let mut files = Vec::new();
    if config.oracle.path_csv {
        for (name, samples) in [
            ("terminal_wealth_chain.csv", &chain_paths),
            ("terminal_wealth_sde.csv", &sde_paths),
        ] {
            let rows: Vec<Vec<String>> = samples
                .iter()
                .enumerate()
                .map(|(i, x)| vec![i.to_string(), num(*x)])
                .collect();
            write_csv(&dir.join(name), &["path".into(), "x_T".into()], &rows)?;
            files.push(name.to_string());
        }
    }
    files.push("simulate.json".into());
    let manifest = SimulateManifest {
        command: "simulate",
        config: config.clone(),
        model: p.model.clone(),
        grid: p.summary(),
        agreement,
        files,
    };
    write_json(&dir.join("simulate.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub k: f64,
    pub evaluation: EvalPoint,
    /// Smallest spike margin over nodes at the evaluation slice.
    pub min_spike_margin: f64,
    pub cfl_margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepManifest {
    pub command: &'static str,
    pub config: RunConfig,
    pub model: RegimeModel,
    pub grid: GridSummary,
    pub entries: Vec<SweepEntry>,
    pub files: Vec<String>,
}

/// Value, investment ratio and attention over wealth at the evaluation time
/// and belief for each cost coefficient, plus one `(phi, x)` surface per `k`.
pub fn cmd_sweep_k(loaded: &LoadedConfig) -> Result<SweepManifest, CliError> {
    let config = &loaded.config;
    if config.sweep.k.is_empty() {
        return Err(CliError::Config("sweep.k is empty".into()));
    }
    let base = loaded.model()?;
    let dir = &config.output.dir;
    ensure_dir(dir)?;

    let mut header = vec!["x".to_string()];
    let mut columns: Vec<Vec<String>> = Vec::new();
    let mut x_col: Vec<String> = Vec::new();
    let mut entries = Vec::new();
    let mut files = Vec::new();
    let mut summary = None;
    for &k in &config.sweep.k {
        let model = base.with_cost_coeff(k);
        let violations = wonham_mv::market::validate_model(&model);
        if !violations.is_empty() {
            return Err(wonham_mv::Error::InvalidModel(violations).into());
        }
        let p = prepare_with(config, model, config.grid.h1, config.grid.h2)?;
        let fields = solve_prepared(&p)?;
        let (h, rows) = eval_table(&p, &fields);
        let col = |name: &str| h.iter().position(|c| c == name).expect("column exists");
        if x_col.is_empty() {
            x_col = rows.iter().map(|r| r[col("x")].clone()).collect();
        }
        let d = p.model.assets;
        let mut wanted = vec![("V".to_string(), format!("V_k{}", tag(k)))];
        for j in 1..=d {
            wanted.push((format!("w{j}"), format!("w{j}_k{}", tag(k))));
        }
        wanted.push(("pi".into(), format!("pi_k{}", tag(k))));
        for (src, dst) in wanted {
            header.push(dst);
            let c = col(&src);
            columns.push(rows.iter().map(|r| r[c].clone()).collect());
        }

        let (sh, srows) = slice_table(&p, &fields, p.eval_slice);
        let name = format!("surface_k{}.csv", tag(k));
        write_csv(&dir.join(&name), &sh, &srows)?;
        files.push(name);

        let min_spike_margin = if p.eval_slice < fields.n_steps() {
            (0..p.lattice.len())
                .map(|node| spike_check(&p.model, &p.lattice, &p.grid, &fields, p.eval_slice, node))
                .fold(f64::INFINITY, f64::min)
        } else {
            0.0
        };
        entries.push(SweepEntry {
            k,
            evaluation: eval_point(&p, &fields, p.eval_slice, p.eval_node),
            min_spike_margin,
            cfl_margin: fields.report.min_p_stay,
        });
        summary.get_or_insert_with(|| p.summary());
    }
    let rows: Vec<Vec<String>> = x_col
        .iter()
        .enumerate()
        .map(|(i, x)| {
            std::iter::once(x.clone())
                .chain(columns.iter().map(|c| c[i].clone()))
                .collect()
        })
        .collect();
    write_csv(&dir.join("sweep_k.csv"), &header, &rows)?;
    files.insert(0, "sweep_k.csv".into());
    files.push("sweep.json".into());
    let manifest = SweepManifest {
        command: "sweep-k",
        config: config.clone(),
        model: base,
        grid: summary.expect("at least one k"),
        entries,
        files,
    };
    write_json(&dir.join("sweep.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Property {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub command: &'static str,
    pub config: RunConfig,
    pub passed: bool,
    pub properties: Vec<Property>,
    pub marginal: Option<MarginalReport>,
    pub g_consistency: Option<McSummary>,
}

impl CheckReport {
    pub fn failed(&self) -> Vec<&'static str> {
        self.properties
            .iter()
            .filter(|p| !p.passed)
            .map(|p| p.name)
            .collect()
    }

    pub fn into_result(self) -> Result<Self, CliError> {
        if self.passed {
            Ok(self)
        } else {
            Err(CliError::Check(self.failed().join(", ")))
        }
    }
}

/// Every node/control stencil at every coefficient piece.
pub fn stencil_validity(p: &Prepared) -> Property {
    let spec = p.lattice.spec();
    let mut invalid = 0usize;
    let mut first = None;
    let mut mass_err: f64 = 0.0;
    let mut checked = 0usize;
    for piece in &p.model.coefficients {
        for node in 0..p.lattice.len() {
            let (x, b) = p.lattice.state(node);
            let terms = LocalTerms::new(&p.model, piece, x, &b);
            for c in p.grid.controls() {
                checked += 1;
                match terms.stencil(spec.h1, spec.h2, c) {
                    Ok(st) => mass_err = mass_err.max((st.total_mass() - 1.0).abs()),
                    Err(e) => {
                        invalid += 1;
                        first.get_or_insert_with(|| e.at(None, node, c).to_string());
                    }
                }
            }
        }
    }
    Property {
        name: "stencil_validity",
        passed: invalid == 0 && mass_err <= 1e-10,
        detail: format!(
            "{checked} stencils, {invalid} invalid, max |mass - 1| = {mass_err:e}{}",
            first.map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    }
}

/// One-step moments against the diffusion at every node and control.
pub fn local_consistency(p: &Prepared) -> Result<Property, CliError> {
    let spec = p.lattice.spec();
    let (mut mean_err, mut cov_err): (f64, f64) = (0.0, 0.0);
    let mut clamped = 0usize;
    for piece in &p.model.coefficients {
        for node in 0..p.lattice.len() {
            for c in p.grid.controls() {
                let r = check_local_consistency(&p.model, &p.lattice, piece.start, node, c)?;
                mean_err = mean_err.max(r.mean_error);
                cov_err = cov_err.max(r.covariance_error);
                clamped += r.clamped as usize;
            }
        }
    }
    let bound = 5.0 * spec.h1 * spec.h2;
    Ok(Property {
        name: "local_consistency",
        passed: mean_err <= 1e-12 && cov_err <= bound,
        detail: format!(
            "max mean error {mean_err:e} (<= 1e-12), max covariance error {cov_err:e} (<= {bound:e}), \
             C = {:.4}; {clamped} node/control pairs have moves projected at the boundary",
            cov_err / (spec.h1 * spec.h2)
        ),
    })
}

pub fn terminal_identity(p: &Prepared, fields: &SolutionFields) -> Property {
    let n = fields.n_steps();
    let bad = (0..p.lattice.len())
        .filter(|&i| fields.value[n][i] != p.lattice.x_of(i) || fields.g[n][i] != p.lattice.x_of(i))
        .count();
    Property {
        name: "terminal_identity",
        passed: bad == 0,
        detail: format!("{bad} nodes with V_N or g_N != x"),
    }
}

pub fn propagation(p: &Prepared, fields: &SolutionFields) -> Result<Property, CliError> {
    let r = propagation_residual(&p.model, &p.lattice, &p.grid, fields)?;
    Ok(Property {
        name: "g_propagation",
        passed: r <= 1e-12,
        detail: format!("max residual {r:e} (<= 1e-12)"),
    })
}

/// Smallest spike margin over all slices and nodes, with its location.
pub fn spike_sweep(p: &Prepared, fields: &SolutionFields) -> (f64, usize, usize) {
    let mut worst = (f64::INFINITY, 0, 0);
    for n in 0..fields.n_steps() {
        for node in 0..p.lattice.len() {
            let m = spike_check(&p.model, &p.lattice, &p.grid, fields, n, node);
            if m < worst.0 {
                worst = (m, n, node);
            }
        }
    }
    worst
}

/// Reads `slice,node,u1..ud,pi` rows and writes them into the policy.
pub fn apply_policy_file(
    path: &Path,
    p: &Prepared,
    fields: &mut SolutionFields,
) -> Result<usize, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| {
        CliError::Config(format!("cannot read policy file {}: {e}", path.display()))
    })?;
    let d = p.model.assets;
    let mut count = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let bad =
            |what: &str| CliError::Config(format!("{} row {}: {what}", path.display(), line + 1));
        if rec.len() != d + 3 {
            return Err(bad("expected slice,node,u..,pi"));
        }
        let field = |i: usize| {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| bad("not a number"))
        };
        let n = field(0)? as usize;
        let node = field(1)? as usize;
        let u: Vec<f64> = (0..d).map(|j| field(2 + j)).collect::<Result<_, _>>()?;
        let c = ControlPoint::new(u, field(2 + d)?);
        let idx = p
            .grid
            .position(&c)
            .ok_or_else(|| bad("control is not in the control grid"))?;
        if n >= fields.n_steps() || node >= p.lattice.len() {
            return Err(bad("slice or node out of range"));
        }
        fields.policy[n][node] = idx as u32;
        count += 1;
    }
    Ok(count)
}

/// Runs the property suite. A model that fails validation is reported as a
/// failed property rather than an error.
pub fn cmd_check(loaded: &LoadedConfig) -> Result<CheckReport, CliError> {
    let config = &loaded.config;
    let dir = &config.output.dir;
    ensure_dir(dir)?;
    let mut report = CheckReport {
        command: "check",
        config: config.clone(),
        passed: false,
        properties: Vec::new(),
        marginal: None,
        g_consistency: None,
    };
    let p = match prepare(loaded) {
        Ok(p) => p,
        Err(CliError::Core(wonham_mv::Error::InvalidModel(v))) => {
            let detail = v
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            report.properties.push(Property {
                name: "model_valid",
                passed: false,
                detail,
            });
            write_json(&dir.join("check.json"), &report)?;
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    report.properties.push(Property {
        name: "model_valid",
        passed: true,
        detail: "ok".into(),
    });
    report.properties.push(stencil_validity(&p));
    report.properties.push(local_consistency(&p)?);

    let fields = solve_prepared(&p)?;
    report.properties.push(terminal_identity(&p, &fields));
    report.properties.push(propagation(&p, &fields)?);

    let (margin, n, node) = match loaded.policy_file() {
        Some(path) => {
            let mut corrupted = fields.clone();
            let k = apply_policy_file(&path, &p, &mut corrupted)?;
            log::info!("replaced {k} policy entries from {}", path.display());
            spike_sweep(&p, &corrupted)
        }
        None => spike_sweep(&p, &fields),
    };
    report.properties.push(Property {
        name: "spike",
        passed: margin >= -1e-12,
        detail: format!("min margin {margin:e} at slice {n}, node {node} (>= -1e-12)"),
    });

    let o = &config.oracle;
    let (chain_paths, hits) = simulate_chain_paths(
        &p.model,
        &p.lattice,
        &p.grid,
        &fields,
        0,
        p.eval_node,
        o.n_paths,
        o.seed,
    )?;
    let chain = McSummary::from_samples(
        &chain_paths,
        hits,
        p.model.risk_aversion,
        p.model.objective_convention,
    );
    let g0 = fields.g[0][p.eval_node];
    let gap = (chain.mean_xt - g0).abs();
    report.properties.push(Property {
        name: "g_consistency",
        passed: gap <= 3.0 * chain.se_mean + 1e-12,
        detail: format!("|mean - g0| = {gap:e}, 3 se = {:e}", 3.0 * chain.se_mean),
    });
    report.g_consistency = Some(chain);

    let spec = p.lattice.spec();
    let t = spec.time(p.slice_of(0.5).unwrap_or(spec.n_steps).min(spec.n_steps));
    let marginal = marginal_check(
        &p.model,
        &Belief::vertex(p.model.regimes, 0),
        p.model.attention_max,
        t,
        o.n_paths,
        o.seed,
        spec.h2,
    )?;
    report.properties.push(Property {
        name: "filter_marginal",
        passed: marginal.passed(),
        detail: format!(
            "max deviation {:e}, ratio to 3 se {:.3} at t = {}",
            marginal.max_deviation, marginal.ratio, marginal.t
        ),
    });
    report.marginal = Some(marginal);

    report.passed = report.properties.iter().all(|p| p.passed);
    write_json(&dir.join("check.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rung {
    pub h1: f64,
    pub h2: f64,
    /// Error message if the rung could not be solved.
    pub error: Option<String>,
    pub exit_code: Option<i32>,
    pub value: Option<f64>,
    pub g: Option<f64>,
    pub nodes: Option<usize>,
    pub cfl_margin: Option<f64>,
    pub boundary_mass: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefineReport {
    pub command: &'static str,
    pub config: RunConfig,
    pub rungs: Vec<Rung>,
    /// `|V(rung i+1) - V(rung i)|`, absent if either rung failed.
    pub differences: Vec<Option<f64>>,
    pub monotone: bool,
    pub last_difference: Option<f64>,
    pub tolerance: f64,
    pub cauchy: bool,
}

/// Solves every rung of the ladder. A failing rung is recorded and the rest
/// still run; the first failure is returned alongside the report.
pub fn refine_ladder(loaded: &LoadedConfig) -> Result<(RefineReport, Option<CliError>), CliError> {
    let config = &loaded.config;
    let model = loaded.model()?;
    let mut rungs = Vec::new();
    let mut first_error = None;
    for &[h1, h2] in &config.refine.ladder {
        let attempt = prepare_with(config, model.clone(), h1, h2).and_then(|p| {
            let fields = solve_prepared(&p)?;
            let occ = occupancy(
                &p.model,
                &p.lattice,
                &p.grid,
                &fields,
                p.eval_slice,
                p.eval_node,
            )?;
            Ok((p, fields, occ))
        });
        rungs.push(match attempt {
            Ok((p, fields, occ)) => Rung {
                h1,
                h2,
                error: None,
                exit_code: None,
                value: Some(fields.value[p.eval_slice][p.eval_node]),
                g: Some(fields.g[p.eval_slice][p.eval_node]),
                nodes: Some(p.lattice.len()),
                cfl_margin: Some(fields.report.min_p_stay),
                boundary_mass: Some(occ.peak_boundary_mass),
            },
            Err(e) => {
                log::warn!("rung ({h1}, {h2}) failed: {e}");
                let rung = Rung {
                    h1,
                    h2,
                    error: Some(e.to_string()),
                    exit_code: Some(e.exit_code()),
                    value: None,
                    g: None,
                    nodes: None,
                    cfl_margin: None,
                    boundary_mass: None,
                };
                first_error.get_or_insert(e);
                rung
            }
        });
    }
    let differences: Vec<Option<f64>> = rungs
        .windows(2)
        .map(|w| Some((w[1].value? - w[0].value?).abs()))
        .collect();
    let monotone = differences.iter().all(Option::is_some)
        && differences
            .windows(2)
            .all(|w| w[1].expect("checked") < w[0].expect("checked"));
    let last_difference = differences.last().copied().flatten();
    let tolerance = config.refine.tolerance;
    let report = RefineReport {
        command: "refine",
        config: config.clone(),
        cauchy: last_difference.is_some_and(|d| d < tolerance),
        rungs,
        differences,
        monotone,
        last_difference,
        tolerance,
    };
    Ok((report, first_error))
}

/// Writes the refinement table; fails with the first rung's error if any rung failed.
pub fn cmd_refine(loaded: &LoadedConfig) -> Result<RefineReport, CliError> {
    let (report, first_error) = refine_ladder(loaded)?;
    let dir = &loaded.config.output.dir;
    ensure_dir(dir)?;
    let header = [
        "h1",
        "h2",
        "V",
        "g",
        "abs_diff",
        "nodes",
        "cfl_margin",
        "boundary_mass",
        "error",
    ]
    .map(String::from)
    .to_vec();
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    let rows: Vec<Vec<String>> = report
        .rungs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let diff = if i == 0 {
                None
            } else {
                report.differences[i - 1]
            };
            vec![
                num(r.h1),
                num(r.h2),
                opt(r.value),
                opt(r.g),
                opt(diff),
                r.nodes.map(|n| n.to_string()).unwrap_or_default(),
                opt(r.cfl_margin),
                opt(r.boundary_mass),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(&dir.join("refine.csv"), &header, &rows)?;
    write_json(&dir.join("refine.json"), &report)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
