//! CSV and JSON writers. Rows follow lattice enumeration order.

use std::path::{Path, PathBuf};

use serde::Serialize;
use wonham_mv::kernel::LocalTerms;
use wonham_mv::SolutionFields;

use crate::run::Prepared;
use crate::CliError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.display().to_string(),
        source: e.into(),
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest types serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

/// File-name friendly rendering of a time or parameter value.
pub fn tag(v: f64) -> String {
    num(v)
}

fn coord_names(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

/// `node, ix, x, phi.., V, g, u.., pi, w..` for slice `n`; control columns are
/// empty at the terminal slice, `w` is empty where `x = 0`.
pub fn slice_table(
    p: &Prepared,
    fields: &SolutionFields,
    n: usize,
) -> (Vec<String>, Vec<Vec<String>>) {
    let m = p.model.regimes;
    let d = p.model.assets;
    let mut header: Vec<String> = vec!["node".into(), "ix".into(), "x".into()];
    header.extend(coord_names("phi", m - 1));
    header.extend(["V".to_string(), "g".to_string()]);
    header.extend(coord_names("u", d));
    header.push("pi".into());
    header.extend(coord_names("w", d));

    let rows = (0..p.lattice.len())
        .map(|node| {
            let (x, b) = p.lattice.state(node);
            let mut row = vec![node.to_string(), p.lattice.ix_of(node).to_string(), num(x)];
            row.extend(b.phi().iter().map(|v| num(*v)));
            row.push(num(fields.value[n][node]));
            row.push(num(fields.g[n][node]));
            if n < fields.n_steps() {
                let c = fields.control(&p.grid, n, node);
                row.extend(c.u.iter().map(|v| num(*v)));
                row.push(num(c.pi));
                row.extend(
                    c.u.iter()
                        .map(|u| if x != 0.0 { num(u / x) } else { String::new() }),
                );
            } else {
                row.extend(std::iter::repeat_n(String::new(), 2 * d + 1));
            }
            row
        })
        .collect();
    (header, rows)
}

/// Stencil entries under the stored policy at slice `n`.
pub fn stencil_table(
    p: &Prepared,
    fields: &SolutionFields,
    n: usize,
) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let spec = p.lattice.spec();
    let piece = p.model.piece_at(spec.time(n));
    let header = ["node", "entry", "target", "probability"]
        .map(String::from)
        .to_vec();
    let mut rows = Vec::new();
    for node in 0..p.lattice.len() {
        let (x, b) = p.lattice.state(node);
        let c = fields.control(&p.grid, n, node);
        let st = LocalTerms::new(&p.model, piece, x, &b)
            .stencil(spec.h1, spec.h2, c)
            .map_err(|e| CliError::Core(e.at(Some(n), node, c).into()))?;
        rows.push(vec![
            node.to_string(),
            "stay".into(),
            node.to_string(),
            num(st.p_stay),
        ]);
        for (j, (off, prob)) in st.entries().into_iter().enumerate() {
            rows.push(vec![
                node.to_string(),
                off.label(),
                p.lattice.neighbor(node, j).to_string(),
                num(prob),
            ]);
        }
    }
    Ok((header, rows))
}

pub fn path_in(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
