use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use periodic_lmpc::model::Polyhedron;
use periodic_lmpc::scenarios::load_scenario;
use periodic_lmpc::ScenarioConfig64;

use crate::run::{SCENARIO_COPY, TRAJECTORY};

pub const SLICE_DIR: &str = "figures";

pub fn cmd_export_figures_data(run: &Path) -> u8 {
    match export(run) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn bound(v: Option<f64>) -> String {
    v.map(|b| format!("{b}")).unwrap_or_default()
}

fn bounds(poly: &Polyhedron<f64>, i: usize) -> [String; 2] {
    let (lo, hi) = poly.axis_bounds(i);
    [bound(lo), bound(hi)]
}

/// Writes `state.csv`, `input.csv` and `lmpc_cost.csv` under `<run>/figures`.
/// State and input slices carry the per-tick axis bounds next to each
/// column; the cost slice leaves seed ticks empty.
fn export(run: &Path) -> anyhow::Result<()> {
    let traj_path = run.join(TRAJECTORY);
    let text = fs::read_to_string(&traj_path)
        .with_context(|| format!("reading {}", traj_path.display()))?;
    let cfg: ScenarioConfig64 = load_scenario(&run.join(SCENARIO_COPY))
        .with_context(|| format!("reading {}", run.join(SCENARIO_COPY).display()))?;
    let spec = &cfg.spec;
    let (n, d) = (spec.state_dim, spec.input_dim);

    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .context("empty trajectory")?
        .split(',')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .with_context(|| format!("missing column `{name}`"))
    };
    let t_col = col("t")?;
    let x_cols = (0..n)
        .map(|i| col(&format!("x{i}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let u_cols = (0..d)
        .map(|i| col(&format!("u{i}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let j_col = col("lmpc_cost")?;

    let mut state = String::from("t");
    for i in 0..n {
        write!(state, ",x{i},x{i}_lo,x{i}_hi")?;
    }
    let mut input = String::from("t");
    for i in 0..d {
        write!(input, ",u{i},u{i}_lo,u{i}_hi")?;
    }
    let mut cost = String::from("t,lmpc_cost");
    state.push('\n');
    input.push('\n');
    cost.push('\n');

    for (k, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            bail!(
                "{}: line {} has {} cells, expected {}",
                traj_path.display(),
                k + 2,
                cells.len(),
                header.len()
            );
        }
        let t_str = cells[t_col];
        let t: usize = t_str
            .parse()
            .with_context(|| format!("line {}: bad tick `{t_str}`", k + 2))?;
        let tau = spec.tau(t);
        state.push_str(t_str);
        for (i, &c) in x_cols.iter().enumerate() {
            let [lo, hi] = bounds(&spec.constraints.state[tau], i);
            write!(state, ",{},{lo},{hi}", cells[c])?;
        }
        state.push('\n');
        input.push_str(t_str);
        for (i, &c) in u_cols.iter().enumerate() {
            let [lo, hi] = bounds(&spec.constraints.input[tau], i);
            write!(input, ",{},{lo},{hi}", cells[c])?;
        }
        input.push('\n');
        writeln!(cost, "{t_str},{}", cells[j_col])?;
    }

    let out = run.join(SLICE_DIR);
    fs::create_dir_all(&out)?;
    fs::write(out.join("state.csv"), state)?;
    fs::write(out.join("input.csv"), input)?;
    fs::write(out.join("lmpc_cost.csv"), cost)?;
    Ok(())
}
