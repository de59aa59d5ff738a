use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use softimit_core::coherent::{run_bandit_experiment, BanditArtifact, BanditSummary};
use softimit_core::mdp::{occupancy_measure, policy_values, GridSpec};
use softimit_core::study::{env_name, run_table1_study, AgentKind, StudyResult};

use crate::config::RunConfig;
use crate::error::{CliError, Exit, Result};
use crate::manifest::{
    compare, verify_on_disk, write_artifacts, Artifact, ExperimentManifest, Mismatch, MANIFEST_FILE,
};
use crate::svg::{Curve, Heatmap};
use crate::verify::{run_suite, Suite};

pub const OUT_ENV: &str = "SOFTIMIT_OUT";

/// Options shared by every command.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Explicit output directory; otherwise `$SOFTIMIT_OUT/<command>`.
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub strict: bool,
    pub check: bool,
}

impl RunOptions {
    pub fn out_dir(&self, command: &str) -> PathBuf {
        match &self.out {
            Some(p) => p.clone(),
            None => {
                let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("softimit-out"), PathBuf::from);
                root.join(command)
            }
        }
    }
}

/// Writes the artifacts and their manifest, or with `check` compares them
/// against the manifest already in `out_dir` without writing anything.
pub fn emit(
    command: &str,
    opts: &RunOptions,
    master_seed: u64,
    out_dir: &Path,
    manifest_name: &str,
    artifacts: &[Artifact],
    started: Instant,
) -> Result<Exit> {
    if opts.check {
        let stored = read_manifest(out_dir, manifest_name)?;
        let mut mismatches = compare(&stored, artifacts);
        for m in verify_on_disk(out_dir, &stored) {
            if !mismatches.iter().any(|x| x.path == m.path) {
                mismatches.push(m);
            }
        }
        report_mismatches(&mismatches);
        return Ok(if mismatches.is_empty() {
            println!(
                "check passed: {} artifacts match {}",
                stored.artifacts.len(),
                manifest_name
            );
            Exit::Success
        } else {
            Exit::PropertyFailure
        });
    }
    write_artifacts(out_dir, artifacts)?;
    let manifest = ExperimentManifest {
        command: command.to_string(),
        config_path: opts.config.as_ref().map(|p| p.display().to_string()),
        master_seed,
        out_dir: out_dir.display().to_string(),
        version: crate::manifest::version_stamp(),
        duration_secs: started.elapsed().as_secs_f64(),
        artifacts: ExperimentManifest::entries(artifacts),
    };
    let path = out_dir.join(manifest_name);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(Exit::Success)
}

fn read_manifest(out_dir: &Path, name: &str) -> Result<ExperimentManifest> {
    if name == MANIFEST_FILE {
        return ExperimentManifest::read(out_dir);
    }
    let path = out_dir.join(name);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn report_mismatches(mismatches: &[Mismatch]) {
    for m in mismatches {
        eprintln!(
            "hash mismatch {}: expected {}, got {}",
            m.path,
            m.expected.as_deref().unwrap_or("<absent>"),
            m.actual.as_deref().unwrap_or("<absent>")
        );
    }
}

/// Row-major grid CSV: header `row,0,1,..`, one line per grid row.
pub fn grid_matrix_csv(spec: &GridSpec, per_state: &[f64]) -> String {
    let mut out = String::from("row");
    for x in 0..spec.width {
        let _ = write!(out, ",{x}");
    }
    out.push('\n');
    for y in 0..spec.height {
        let _ = write!(out, "{y}");
        for x in 0..spec.width {
            let _ = write!(out, ",{}", per_state[y * spec.width + x]);
        }
        out.push('\n');
    }
    out
}

fn grid_heatmap(title: String, spec: &GridSpec, per_state: &[f64]) -> Heatmap {
    Heatmap {
        title,
        values: (0..spec.height)
            .map(|y| per_state[y * spec.width..(y + 1) * spec.width].to_vec())
            .collect(),
        x_label: "x".into(),
        y_label: "y".into(),
        x_ticks: (0..spec.width).map(|x| x.to_string()).collect(),
        y_ticks: (0..spec.height).map(|y| y.to_string()).collect(),
        markers: Vec::new(),
    }
}

#[derive(Serialize)]
struct MedianRow {
    env: &'static str,
    agent: AgentKind,
    nominal_median: Option<f64>,
    windy_median: Option<f64>,
    successful_seeds: usize,
}

#[derive(Serialize)]
struct CellFailure {
    env: &'static str,
    agent: AgentKind,
    seed: usize,
    error: String,
}

fn failures(result: &StudyResult) -> Vec<CellFailure> {
    result
        .failures()
        .map(|(row, e)| CellFailure {
            env: env_name(row.env),
            agent: row.agent,
            seed: row.seed,
            error: e.to_string(),
        })
        .collect()
}

/// Every file `softimit tabular` writes, built from a finished study.
pub fn tabular_artifacts(config: &RunConfig, result: &StudyResult) -> Result<Vec<Artifact>> {
    let study = &config.tabular;
    let mut artifacts = vec![Artifact::new("table1.csv", result.to_csv())];
    for &agent in &study.agents {
        artifacts.push(Artifact::new(
            format!("diagnostics/{agent}.csv"),
            result.diagnostics_csv(agent),
        ));
    }
    for env in &result.envs {
        let name = env_name(env.kind);
        for &agent in &study.agents {
            // Panels show the lowest successful seed of each agent.
            let Some(outcome) = result
                .rows
                .iter()
                .filter(|r| r.env == env.kind && r.agent == agent)
                .find_map(|r| r.outcome.as_ref().ok())
            else {
                continue;
            };
            let values = policy_values(&env.nominal, &outcome.policy)?.to_vec();
            let occupancy = occupancy_measure(&env.nominal, &outcome.policy)?
                .state_marginal()
                .to_vec();
            for (kind, per_state) in [("value", &values), ("occupancy", &occupancy)] {
                let stem = format!("{name}_{agent}_{kind}");
                artifacts.push(Artifact::new(
                    format!("grids/{stem}.csv"),
                    grid_matrix_csv(&env.spec, per_state),
                ));
                let title = format!("{name} / {agent}: {kind}");
                artifacts.push(Artifact::new(
                    format!("heatmaps/{stem}.svg"),
                    grid_heatmap(title, &env.spec, per_state).to_svg(),
                ));
            }
        }
    }
    let medians: Vec<MedianRow> = result
        .envs
        .iter()
        .flat_map(|env| {
            study.agents.iter().map(move |&agent| {
                let m = result.median(env.kind, agent);
                MedianRow {
                    env: env_name(env.kind),
                    agent,
                    nominal_median: m.map(|x| x.0),
                    windy_median: m.map(|x| x.1),
                    successful_seeds: result.returns(env.kind, agent).len(),
                }
            })
        })
        .collect();
    let summary = json!({
        "medians": medians,
        "failures": failures(result),
        "config": study,
    });
    artifacts.push(Artifact::new(
        "summary.json",
        serde_json::to_string_pretty(&summary)? + "\n",
    ));
    Ok(artifacts)
}

pub fn cmd_tabular(opts: &RunOptions, agents: Option<Vec<AgentKind>>) -> Result<Exit> {
    let started = Instant::now();
    let mut config = RunConfig::load(opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        config.tabular.master_seed = seed;
    }
    if let Some(jobs) = opts.jobs {
        config.tabular.jobs = jobs;
    }
    if let Some(agents) = agents {
        config.tabular.agents = agents;
    }
    let result = run_table1_study(&config.tabular)?;
    let mut artifacts = tabular_artifacts(&config, &result)?;
    let failed = failures(&result);
    if opts.strict && !failed.is_empty() {
        let report = serde_json::to_string_pretty(&json!({ "error": "cell failures", "failures": failed }))?;
        eprintln!("{report}");
        artifacts.push(Artifact::new("errors.json", report + "\n"));
    }
    let out_dir = opts.out_dir("tabular");
    let exit = emit(
        "tabular",
        opts,
        config.tabular.master_seed,
        &out_dir,
        MANIFEST_FILE,
        &artifacts,
        started,
    )?;
    for env in &result.envs {
        for &agent in &config.tabular.agents {
            if let Some((n, w)) = result.median(env.kind, agent) {
                println!(
                    "{:<7} {:<11} nominal {n:>9.4}  windy {w:>9.4}",
                    env_name(env.kind),
                    agent.name()
                );
            }
        }
    }
    if opts.strict && !failed.is_empty() {
        return Ok(Exit::Runtime);
    }
    Ok(exit)
}

fn bandit_heatmap(artifact: &BanditArtifact, title: &str, values: &ndarray::Array1<f64>) -> Heatmap {
    let (ss, aa) = (&artifact.grid_states, &artifact.grid_actions);
    let (ns, na) = (ss.len(), aa.len());
    // Rows run from the largest action at the top to the smallest.
    let rows = (0..na)
        .rev()
        .map(|j| (0..ns).map(|i| values[i * na + j]).collect())
        .collect();
    let step = |v: &[f64]| {
        if v.len() > 1 {
            (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64
        } else {
            1.0
        }
    };
    let (ds, da) = (step(ss), step(aa));
    let markers = artifact
        .demos
        .states()
        .column(0)
        .iter()
        .zip(artifact.demos.actions().column(0))
        .map(|(&s, &a)| ((s - ss[0]) / ds + 0.5, (aa[na - 1] - a) / da + 0.5))
        .collect();
    Heatmap {
        title: title.to_string(),
        values: rows,
        x_label: "state s".into(),
        y_label: "action a".into(),
        x_ticks: ss.iter().map(|s| format!("{s:.1}")).collect(),
        y_ticks: aa.iter().rev().map(|a| format!("{a:.2}")).collect(),
        markers,
    }
}

#[derive(Serialize)]
struct BanditReport<'a> {
    sign_pattern: SignPattern<'a>,
    summary: &'a BanditSummary,
    refinement: Option<BTreeMap<&'static str, f64>>,
    config: &'a softimit_core::BanditConfig,
}

#[derive(Serialize)]
struct SignPattern<'a> {
    pre: &'a softimit_core::coherent::SignStats,
    post: &'a softimit_core::coherent::SignStats,
}

/// Every file `softimit bandit` writes, built from a finished experiment.
pub fn bandit_artifacts(artifact: &BanditArtifact) -> Result<Vec<Artifact>> {
    let mut demos = Vec::new();
    artifact.demos.write_csv(&mut demos)?;
    let refinement = artifact.refine_report.as_ref().map(|r| {
        let mut m = BTreeMap::new();
        m.insert("iterations", r.objectives.len() as f64);
        m.insert("objective_first", r.objectives.first().copied().unwrap_or(f64::NAN));
        m.insert("objective_last", r.objectives.last().copied().unwrap_or(f64::NAN));
        m.insert(
            "demo_term_min",
            r.demo_terms.iter().copied().fold(f64::INFINITY, f64::min),
        );
        m.insert(
            "mean_update_norm",
            r.update_norms.iter().sum::<f64>() / r.update_norms.len().max(1) as f64,
        );
        m
    });
    let report = BanditReport {
        sign_pattern: SignPattern {
            pre: &artifact.summary.pre,
            post: &artifact.summary.post,
        },
        summary: &artifact.summary,
        refinement,
        config: &artifact.config,
    };
    let moments = artifact.moments_csv()?;
    let curve = moments_curve(&moments)?;
    Ok(vec![
        Artifact::new("bandit_grid.csv", artifact.grid_csv()),
        Artifact::new("bandit_moments.csv", moments),
        Artifact::new("demos.csv", demos),
        Artifact::new("fitted_policy.json", artifact.fitted.to_json()?),
        Artifact::new("refined_policy.json", artifact.refined.to_json()?),
        Artifact::new("summary.json", serde_json::to_string_pretty(&report)? + "\n"),
        Artifact::new(
            "reward_pre.svg",
            bandit_heatmap(artifact, "coherent reward after fitting", &artifact.reward_pre).to_svg(),
        ),
        Artifact::new(
            "reward_post.svg",
            bandit_heatmap(artifact, "coherent reward after refinement", &artifact.reward_post).to_svg(),
        ),
        Artifact::new("moments.svg", curve.to_svg()),
    ])
}

fn moments_curve(csv_text: &str) -> Result<Curve> {
    let (header, columns) = read_columns(csv_text.as_bytes(), Path::new("bandit_moments.csv"))?;
    Ok(Curve {
        title: "pre-tanh predictive moments".into(),
        x_label: header[0].clone(),
        x: columns[0].clone(),
        series: header[1..].iter().cloned().zip(columns[1..].iter().cloned()).collect(),
    })
}

pub fn cmd_bandit(opts: &RunOptions, no_refine: bool) -> Result<Exit> {
    let started = Instant::now();
    let mut config = RunConfig::load(opts.config.as_deref())?.bandit;
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    if no_refine {
        config.refine = None;
    }
    let artifact = run_bandit_experiment(&config)?;
    let artifacts = bandit_artifacts(&artifact)?;
    let out_dir = opts.out_dir("bandit");
    let exit = emit(
        "bandit",
        opts,
        config.seed,
        &out_dir,
        MANIFEST_FILE,
        &artifacts,
        started,
    )?;
    let s = &artifact.summary;
    println!(
        "demo cells positive {:.3}, off-demo negative {:.3}, OOD ratio {:.3} -> {:.3}, uniform |r| {:.3} -> {:.3}",
        s.pre.demo_positive,
        s.pre.off_demo_negative,
        s.pre.ood_ratio,
        s.post.ood_ratio,
        s.uniform_mean_abs_pre,
        s.uniform_mean_abs_post
    );
    Ok(exit)
}

pub fn cmd_verify(opts: &RunOptions, suite: Suite) -> Result<Exit> {
    let started = Instant::now();
    let seed = opts.seed.unwrap_or(0);
    let checks = run_suite(suite, seed)?;
    for c in &checks {
        println!("{c}");
    }
    let passed = checks.iter().all(|c| c.passed);
    let report = json!({ "suite": suite, "seed": seed, "passed": passed, "checks": checks });
    let artifacts = [Artifact::new(
        format!("verify_{suite}.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )];
    let out_dir = opts.out_dir("verify");
    let manifest = format!("verify_{suite}.manifest.json");
    let exit = emit("verify", opts, seed, &out_dir, &manifest, &artifacts, started)?;
    Ok(if passed { exit } else { Exit::PropertyFailure })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Heatmap,
    Curve,
}

/// Header and numeric columns of a CSV file.
pub fn read_columns<R: std::io::Read>(input: R, origin: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let bad = |message: String| CliError::Csv {
        path: origin.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(bad("missing header".into()));
    }
    let mut columns = vec![Vec::new(); header.len()];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        for (j, field) in record.iter().enumerate() {
            let v = field
                .parse::<f64>()
                .map_err(|_| bad(format!("data row {}: `{field}` is not a number", line + 1)))?;
            columns[j].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(bad("no data rows".into()));
    }
    Ok((header, columns))
}

/// Builds a heatmap from either a grid CSV (`row,0,1,..`) or a long CSV
/// whose first two columns are the x and y coordinates. `value` picks the
/// long-form column; the third column is used by default.
pub fn heatmap_from_csv(
    header: &[String],
    columns: &[Vec<f64>],
    value: Option<&str>,
    title: String,
) -> Result<Heatmap> {
    let bad = |m: &str| CliError::Usage(m.to_string());
    if header[0] == "row" {
        let n_rows = columns[0].len();
        let values = (0..n_rows)
            .map(|i| columns[1..].iter().map(|c| c[i]).collect())
            .collect();
        return Ok(Heatmap {
            title,
            values,
            x_label: "x".into(),
            y_label: "y".into(),
            x_ticks: header[1..].to_vec(),
            y_ticks: columns[0].iter().map(|v| v.to_string()).collect(),
            markers: Vec::new(),
        });
    }
    if header.len() < 3 {
        return Err(bad("a long-form heatmap CSV needs x, y and a value column"));
    }
    let k = match value {
        Some(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("no column named `{name}`")))?,
        None => 2,
    };
    let uniq = |c: &[f64]| {
        let mut v = c.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let xs = uniq(&columns[0]);
    let ys = uniq(&columns[1]);
    let mut values = vec![vec![f64::NAN; xs.len()]; ys.len()];
    for ((x, y), v) in columns[0].iter().zip(&columns[1]).zip(&columns[k]) {
        let i = ys.len() - 1 - ys.partition_point(|t| t < y);
        let j = xs.partition_point(|t| t < x);
        values[i][j] = *v;
    }
    Ok(Heatmap {
        title,
        values,
        x_label: header[0].clone(),
        y_label: header[1].clone(),
        x_ticks: xs.iter().map(|v| format!("{v:.2}")).collect(),
        y_ticks: ys.iter().rev().map(|v| format!("{v:.2}")).collect(),
        markers: Vec::new(),
    })
}

pub fn cmd_plot(opts: &RunOptions, kind: PlotKind, input: &Path, out_svg: &Path, value: Option<&str>) -> Result<Exit> {
    let started = Instant::now();
    let file = std::fs::File::open(input).map_err(|e| CliError::io(input, e))?;
    let (header, columns) = read_columns(file, input)?;
    let title = input
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let svg = match kind {
        PlotKind::Heatmap => heatmap_from_csv(&header, &columns, value, title)?.to_svg(),
        PlotKind::Curve => Curve {
            title,
            x_label: header[0].clone(),
            x: columns[0].clone(),
            series: header[1..].iter().cloned().zip(columns[1..].iter().cloned()).collect(),
        }
        .to_svg(),
    };
    let file_name = out_svg
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", out_svg.display())))?
        .to_string_lossy()
        .into_owned();
    let out_dir = match out_svg.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let manifest = format!("{file_name}.manifest.json");
    emit(
        "plot",
        opts,
        opts.seed.unwrap_or(0),
        &out_dir,
        &manifest,
        &[Artifact::new(file_name, svg)],
        started,
    )
}
