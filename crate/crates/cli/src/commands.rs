//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use dpm_core::baselines::{
    fa_fit, fa_reconstruct, mape, patient_level_rows, pca_fit, pca_reconstruct, reconstruction_cells,
    trajectory_baselines, visit_level_rows, CellPrediction, TrajectoryMethod,
};
use dpm_core::biaslab::{
    bias_report, build_variant, high_risk_profile, mlrp_bias_oracle, scenario_grid, visit_severities, BiasReport,
    ModelVariant, Theorem,
};
use dpm_core::inference::{
    cluster_bootstrap, disparity_summary, fa_seeded_priors, fit as fit_model, latent_means, posterior_means,
    recovery_report, InitStrategy, TrialEstimate,
};
use dpm_core::io::{read_dataset_csv, read_draws_csv, read_toml, read_truth_json, write_dataset_csv, write_draws_csv, write_json, write_truth_json};
use dpm_core::model::{Dataset, LatentParameterization, PatientLatents, PriorSpec};
use dpm_core::sampler::{MetricKind, PosteriorDraws, SamplerConfig};
use dpm_core::simulate::{simulate as simulate_cohort, SimConfig, Truth};
use dpm_core::stats::mean;

use crate::manifest::{sha256_file, Manifest, MANIFEST_FILE};
use crate::svg::{scatter, Series};
use crate::{EvaluateArgs, FitArgs, Global, InitChoice, MetricChoice, Mode, ParamChoice, PriorChoice, ReportArgs, SimulateArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Convergence(String),
    Oracle(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Convergence(_) => 3,
            CliError::Oracle(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Convergence(m) | CliError::Oracle(m) => f.write_str(m),
        }
    }
}

impl From<dpm_core::Error> for CliError {
    fn from(e: dpm_core::Error) -> Self {
        use dpm_core::Error as E;
        let m = e.to_string();
        match e {
            E::Config(_) | E::InvalidParameter { .. } | E::Toml(_) => CliError::Usage(m),
            E::Sampler(_) | E::Diagnostic(_) => CliError::Convergence(m),
            E::Precision { .. } => CliError::Oracle(m),
            _ => CliError::Data(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

const DATASET_FILE: &str = "dataset.csv";
const TRUTH_FILE: &str = "truth.json";
const DRAWS_FILE: &str = "draws.csv";
const DIAGNOSTICS_FILE: &str = "diagnostics.json";
const SUMMARY_FILE: &str = "summary.json";

/// Global R̂ above which a fit counts as not converged.
const RHAT_LIMIT: f64 = 1.1;

fn out_dir(g: &Global) -> Result<PathBuf> {
    let dir = g.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text).map_err(|e| CliError::Data(format!("cannot write {name}: {e}")))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "NA".into())
}

pub fn simulate(g: &Global, a: &SimulateArgs) -> Result<()> {
    let text = fs::read(&a.config).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", a.config.display())))?;
    let mut cfg: SimConfig = read_toml(&a.config)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let dir = out_dir(g)?;
    let (data, truth) = simulate_cohort(&cfg)?;
    write_dataset_csv(&data, &dir.join(DATASET_FILE))?;
    write_truth_json(&truth, &dir.join(TRUTH_FILE))?;
    let mut m = Manifest::new(
        "simulate",
        Some(cfg.seed),
        json!({ "config": cfg, "n_groups": data.n_groups, "delta": data.delta, "rows": data.patients.iter().map(|p| p.horizon()).sum::<usize>() }),
    );
    m.config_sha256 = Some(crate::manifest::sha256_hex(&text));
    m.add_input(&a.config)?;
    m.finish(&dir, &[DATASET_FILE, TRUTH_FILE])?;
    println!("simulated {} patients into {}", data.patients.len(), dir.display());
    Ok(())
}

fn priors_for(choice: PriorChoice, data: &Dataset) -> Result<PriorSpec> {
    Ok(match choice {
        PriorChoice::Synthetic => PriorSpec::synthetic_fit(),
        PriorChoice::Simulation => PriorSpec::simulation(),
        PriorChoice::WeaklyInformative => PriorSpec::weakly_informative(),
        PriorChoice::FaSeeded => fa_seeded_priors(data)?,
    })
}

#[derive(Serialize)]
struct Diagnostics {
    max_global_rhat: f64,
    converged: bool,
    n_draws: usize,
    n_divergent: usize,
    step_sizes: Vec<f64>,
    mean_tree_depth: f64,
    warnings: Vec<String>,
    parameters: Vec<dpm_core::sampler::ParameterDiagnostics>,
}

pub fn fit(g: &Global, a: &FitArgs) -> Result<()> {
    let variant: ModelVariant = a.variant.parse()?;
    let mut cfg: SamplerConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => SamplerConfig::default(),
    };
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = a.$field {
                cfg.$field = v;
            }
        };
    }
    set!(chains);
    set!(warmup);
    set!(draws);
    set!(target_accept);
    set!(max_leapfrog);
    if let Some(m) = a.metric {
        cfg.metric = match m {
            MetricChoice::Diagonal => MetricKind::Diagonal,
            MetricChoice::Dense => MetricKind::Dense,
            MetricChoice::LowRank => MetricKind::LowRank,
        };
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dir = out_dir(g)?;

    let mut data = read_dataset_csv(&a.data, a.delta, None)?;
    if let Some(bins) = a.truncate {
        if bins == 0 {
            return Err(CliError::Usage("--truncate must be positive".into()));
        }
        data = data.truncated(bins);
    }
    let priors = priors_for(a.priors, &data)?;
    let parameterization = match a.parameterization {
        ParamChoice::Centered => LatentParameterization::Centered,
        ParamChoice::NonCentered => LatentParameterization::NonCentered,
        ParamChoice::CenteredInitial => LatentParameterization::CenteredInitial,
    };
    let structure = build_variant(variant, data.n_groups, data.d).with_parameterization(parameterization);
    let init = match a.init {
        InitChoice::DataDriven => InitStrategy::DataDriven,
        InitChoice::Prior => InitStrategy::Prior,
    };
    let f = fit_model(&data, &structure, &priors, &cfg, init)?;
    let max_rhat = f.max_global_rhat()?;
    let converged = max_rhat <= RHAT_LIMIT;
    write_draws_csv(&f.draws, &dir.join(DRAWS_FILE))?;
    let globals: std::collections::HashSet<&str> = f.global_names().iter().map(String::as_str).collect();
    let diag = Diagnostics {
        max_global_rhat: max_rhat,
        converged,
        n_draws: f.draws.len(),
        n_divergent: f.draws.n_divergent(),
        step_sizes: f.draws.step_sizes.clone(),
        mean_tree_depth: mean(&f.draws.tree_depths.iter().map(|&d| d as f64).collect::<Vec<_>>()),
        warnings: f.draws.warnings.clone(),
        parameters: f.draws.summarize(|n| globals.contains(n)),
    };
    write_json(&diag, &dir.join(DIAGNOSTICS_FILE))?;
    let mut m = Manifest::new(
        "fit",
        Some(cfg.seed),
        json!({
            "dataset": a.data.display().to_string(),
            "variant": variant.label(),
            "sampler": cfg,
            "priors": priors,
            "structure": structure,
            "init": format!("{init:?}"),
            "delta": data.delta,
            "n_groups": data.n_groups,
            "truncate": a.truncate,
        }),
    );
    if let Some(p) = &a.config {
        m.config_sha256 = Some(sha256_file(p)?);
        m.add_input(p)?;
    }
    m.add_input(&a.data)?;
    m.finish(&dir, &[DRAWS_FILE, DIAGNOSTICS_FILE])?;
    println!(
        "fit {} ({} draws, {} divergent), max global R-hat {:.3}",
        variant,
        f.draws.len(),
        f.draws.n_divergent(),
        max_rhat
    );
    for w in &f.draws.warnings {
        eprintln!("warning: {w}");
    }
    if !converged && !a.allow_nonconverged {
        return Err(CliError::Convergence(format!(
            "max global R-hat {max_rhat:.3} exceeds {RHAT_LIMIT}; rerun with more iterations or --allow-nonconverged"
        )));
    }
    Ok(())
}

/// A fit directory loaded back from disk.
struct LoadedFit {
    draws: PosteriorDraws,
    manifest: Manifest,
}

impl LoadedFit {
    fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
        if manifest.command != "fit" {
            return Err(CliError::Data(format!("{} is not a fit directory", dir.display())));
        }
        let draws = read_draws_csv(&dir.join(DRAWS_FILE))?;
        Ok(LoadedFit { draws, manifest })
    }

    fn setting(&self, key: &str) -> Option<&serde_json::Value> {
        self.manifest.settings.get(key)
    }

    fn variant(&self) -> Result<ModelVariant> {
        let v = self.setting("variant").and_then(|v| v.as_str()).ok_or_else(|| CliError::Data("fit manifest lacks a variant".into()))?;
        Ok(v.parse()?)
    }

    fn dataset(&self, override_path: Option<&Path>) -> Result<Dataset> {
        let path = match override_path {
            Some(p) => p.to_path_buf(),
            None => PathBuf::from(
                self.setting("dataset")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| CliError::Data("fit manifest lacks a dataset path".into()))?,
            ),
        };
        let delta = self.setting("delta").and_then(|v| v.as_f64());
        let n_groups = self.setting("n_groups").and_then(|v| v.as_u64()).map(|v| v as usize);
        let data = read_dataset_csv(&path, delta, n_groups)?;
        Ok(match self.setting("truncate").and_then(|v| v.as_u64()) {
            Some(b) => data.truncated(b as usize),
            None => data,
        })
    }

    fn latents(&self, data: &Dataset) -> Result<Vec<PatientLatents>> {
        data.patients
            .iter()
            .map(|p| latent_means(&self.draws, &p.patient_id).map_err(CliError::from))
            .collect()
    }

    fn global_means(&self) -> BTreeMap<String, f64> {
        posterior_means(&self.draws)
            .into_iter()
            .filter(|(k, _)| !k.starts_with("z0[") && !k.starts_with("r["))
            .collect()
    }
}

pub fn evaluate(g: &Global, a: &EvaluateArgs) -> Result<()> {
    let dir = out_dir(g)?;
    let (files, summary) = match a.mode {
        Mode::Recovery => eval_recovery(&dir, a)?,
        Mode::Bias => eval_bias(&dir, a)?,
        Mode::Baselines => eval_baselines(&dir, a)?,
        Mode::Oracles => eval_oracles(&dir)?,
        Mode::Disparity => eval_disparity(&dir, a, g.seed.unwrap_or(0))?,
    };
    write_json(&summary, &dir.join(SUMMARY_FILE))?;
    let mut names: Vec<&str> = files.iter().map(String::as_str).collect();
    names.push(SUMMARY_FILE);
    let mut m = Manifest::new("evaluate", g.seed, json!({ "mode": format!("{:?}", a.mode).to_lowercase() }));
    for f in &a.fits {
        let p = f.join(DRAWS_FILE);
        m.add_input(&p)?;
    }
    for t in &a.truths {
        m.add_input(t)?;
    }
    if let Some(d) = &a.data {
        m.add_input(d)?;
    }
    m.finish(&dir, &names)?;
    if a.mode == Mode::Oracles && summary.get("all_pass").and_then(|v| v.as_bool()) != Some(true) {
        return Err(CliError::Oracle("one or more oracle scenarios failed; see oracle_log.csv".into()));
    }
    println!("evaluation written to {}", dir.display());
    Ok(())
}

fn group_severity(data: &Dataset, truth: &Truth, est: &[PatientLatents]) -> Vec<(usize, f64, f64)> {
    let rows = visit_severities(data, &truth.params.latents, est);
    (0..data.n_groups)
        .filter_map(|gi| {
            let (t, e): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.0 == gi).map(|r| (r.1, r.2)).unzip();
            (!t.is_empty()).then(|| (gi, mean(&t), mean(&e)))
        })
        .collect()
}

fn eval_recovery(dir: &Path, a: &EvaluateArgs) -> Result<(Vec<String>, serde_json::Value)> {
    if a.truths.len() != a.fits.len() || a.fits.len() < 2 {
        return Err(CliError::Usage("recovery needs at least two --fit directories and one --truth per fit".into()));
    }
    let mut trials = Vec::new();
    for (f, t) in a.fits.iter().zip(&a.truths) {
        let fit = LoadedFit::load(f)?;
        let truth = read_truth_json(t)?;
        let data = fit.dataset(None)?;
        let est = fit.latents(&data)?;
        trials.push(TrialEstimate {
            truth: truth.named_values(),
            estimate: fit.global_means(),
            group_severity: group_severity(&data, &truth, &est),
        });
    }
    let rep = recovery_report(&trials)?;
    let mut csv = String::from("parameter,n_trials,pearson_r,slope\n");
    for p in &rep.parameters {
        csv += &format!("{},{},{},{}\n", p.name, p.n_trials, fmt_opt(p.pearson_r), fmt_opt(p.slope));
    }
    write_text(dir, "recovery.csv", &csv)?;
    let mut by_group: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for t in &trials {
        for &(gi, x, y) in &t.group_severity {
            by_group.entry(gi).or_default().push((x, y));
        }
    }
    let labels: Vec<String> = by_group.keys().map(|gi| format!("group {gi}")).collect();
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let series: Vec<Series> = by_group
        .values()
        .enumerate()
        .map(|(k, pts)| Series {
            label: &labels[k],
            color: colors[k % colors.len()],
            points: pts,
        })
        .collect();
    write_text(dir, "severity_scatter.svg", &scatter("Mean severity per group and trial", "true", "estimated", &series))?;
    let param_points: Vec<(f64, f64)> = trials
        .iter()
        .flat_map(|t| t.estimate.iter().filter_map(|(k, e)| t.truth.get(k).map(|x| (*x, *e))))
        .collect();
    write_text(
        dir,
        "parameter_scatter.svg",
        &scatter("Global parameters", "true", "posterior mean", &[Series { label: "parameters", color: "#1f77b4", points: &param_points }]),
    )?;
    Ok((
        vec!["recovery.csv".into(), "severity_scatter.svg".into(), "parameter_scatter.svg".into()],
        serde_json::to_value(&rep).map_err(|e| CliError::Data(e.to_string()))?,
    ))
}

fn eval_bias(dir: &Path, a: &EvaluateArgs) -> Result<(Vec<String>, serde_json::Value)> {
    if a.fits.is_empty() || a.truths.len() != 1 {
        return Err(CliError::Usage("bias mode needs one or more --fit directories and exactly one --truth".into()));
    }
    let truth = read_truth_json(&a.truths[0])?;
    let mut reports: Vec<BiasReport> = Vec::new();
    let mut files = Vec::new();
    let mut data_ref: Option<Dataset> = None;
    let mut risk = String::from("variant,group,n_visits,n_flagged,flagged_fraction\n");
    for f in &a.fits {
        let fit = LoadedFit::load(f)?;
        let variant = fit.variant()?;
        let data = fit.dataset(a.data.as_deref())?;
        if data.patients.len() != truth.patient_ids.len() {
            return Err(CliError::Data("truth and dataset describe different cohorts".into()));
        }
        let est = fit.latents(&data)?;
        let rhat = {
            let n_global = fit.draws.names.iter().take_while(|n| !n.starts_with("z0[")).count();
            let mut worst = 1.0f64;
            for k in 0..n_global {
                if let Ok(r) = dpm_core::sampler::rhat(&fit.draws.chains_at(k)) {
                    worst = worst.max(r);
                }
            }
            Some(worst)
        };
        let rep = bias_report(variant, &data, &truth, &est, rhat)?;
        let rows = visit_severities(&data, &truth.params.latents, &est);
        let prof = high_risk_profile(&rows.iter().map(|r| (r.0, r.2)).collect::<Vec<_>>(), a.q)?;
        for gr in &prof.groups {
            risk += &format!("{},{},{},{},{}\n", variant, gr.group, gr.n_visits, gr.n_flagged, gr.flagged_fraction);
        }
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
        let pts: Vec<Vec<(f64, f64)>> = (0..data.n_groups)
            .map(|gi| rows.iter().filter(|r| r.0 == gi).map(|r| (r.1, r.2)).collect())
            .collect();
        let labels: Vec<String> = (0..data.n_groups)
            .map(|gi| if gi == rep.underserved { format!("group {gi} (underserved)") } else { format!("group {gi}") })
            .collect();
        let series: Vec<Series> = pts
            .iter()
            .enumerate()
            .map(|(k, p)| Series { label: &labels[k], color: colors[k % colors.len()], points: p })
            .collect();
        let name = format!("severity_{}.svg", variant);
        write_text(dir, &name, &scatter(&format!("Severity at visits: {variant}"), "true", "estimated", &series))?;
        files.push(name);
        reports.push(rep);
        data_ref.get_or_insert(data);
    }
    let n_groups = data_ref.as_ref().map_or(0, |d| d.n_groups);
    let mut table = String::from("metric,group");
    for r in &reports {
        table += &format!(",{}", r.variant);
    }
    table.push('\n');
    for metric in ["bias", "correlation"] {
        for slot in 0..n_groups {
            let role = if n_groups == 2 { ["underserved", "other"][slot].to_string() } else { format!("group {slot}") };
            table += &format!("{metric},{role}");
            for r in &reports {
                let gi = if n_groups == 2 { if slot == 0 { r.underserved } else { 1 - r.underserved } } else { slot };
                let v = r.group(gi).and_then(|b| if metric == "bias" { Some(b.mean_error) } else { b.correlation });
                table += &format!(",{}", fmt_opt(v));
            }
            table.push('\n');
        }
    }
    write_text(dir, "bias_table.csv", &table)?;
    write_text(dir, "high_risk.csv", &risk)?;
    files.push("bias_table.csv".into());
    files.push("high_risk.csv".into());
    Ok((files, json!({ "reports": reports, "q": a.q })))
}

fn model_cells(fit: &LoadedFit, data: &Dataset, cells: &[(usize, usize, usize, f64)]) -> Result<Vec<CellPrediction>> {
    let means = fit.global_means();
    let get = |k: &str| means.get(k).copied().ok_or_else(|| CliError::Data(format!("fit lacks {k}")));
    let f: Vec<f64> = (0..data.d).map(|j| get(&format!("F[{j}]"))).collect::<Result<_>>()?;
    let b: Vec<f64> = (0..data.d).map(|j| get(&format!("b[{j}]"))).collect::<Result<_>>()?;
    let mut lat_cache: BTreeMap<usize, PatientLatents> = BTreeMap::new();
    let mut out = Vec::with_capacity(cells.len());
    for &(i, t, j, actual) in cells {
        let lat = match lat_cache.get(&i) {
            Some(l) => *l,
            None => {
                let l = latent_means(&fit.draws, &data.patients[i].patient_id)?;
                lat_cache.insert(i, l);
                l
            }
        };
        out.push(CellPrediction {
            patient: i,
            t,
            feature: j,
            predicted: f[j] * lat.severity(t as f64 * data.delta) + b[j],
            actual,
        });
    }
    Ok(out)
}

fn eval_baselines(dir: &Path, a: &EvaluateArgs) -> Result<(Vec<String>, serde_json::Value)> {
    let fit = a.fits.first().map(|f| LoadedFit::load(f)).transpose()?;
    let data = match (&a.data, &fit) {
        (Some(p), _) => read_dataset_csv(p, None, None)?,
        (None, Some(f)) => f.dataset(None)?,
        (None, None) => return Err(CliError::Usage("baselines mode needs --data or --fit".into())),
    };
    if a.informative.is_empty() {
        return Err(CliError::Usage("baselines mode needs --informative with the informative feature indices".into()));
    }
    if let Some(&j) = a.informative.iter().find(|&&j| j >= data.d) {
        return Err(CliError::Usage(format!("feature {j} outside 0..{}", data.d)));
    }
    let informative = a.informative.as_slice();
    let mut rows: Vec<(String, String, Vec<CellPrediction>)> = Vec::new();

    // Reconstruction on the first three visits of patients with at least three.
    let (vrows, vowner) = visit_level_rows(&data, 3);
    let (prows, _) = patient_level_rows(&data, 3);
    if vrows.len() >= 2 {
        let pca = pca_fit(&vrows, 1)?;
        rows.push(("reconstruction".into(), "pca_visit".into(), reconstruction_cells(&vrows, &pca_reconstruct(&pca, &vrows)?)));
        let fa = fa_fit(&vrows, 1)?;
        rows.push(("reconstruction".into(), "fa_visit".into(), reconstruction_cells(&vrows, &fa_reconstruct(&fa, &vrows)?)));
    }
    if prows.len() >= 2 {
        let remap = |cells: Vec<CellPrediction>| -> Vec<CellPrediction> {
            cells.into_iter().map(|c| CellPrediction { feature: c.feature % data.d, ..c }).collect()
        };
        let pca = pca_fit(&prows, 2)?;
        rows.push(("reconstruction".into(), "pca_patient".into(), remap(reconstruction_cells(&prows, &pca_reconstruct(&pca, &prows)?))));
        let fa = fa_fit(&prows, 2)?;
        rows.push(("reconstruction".into(), "fa_patient".into(), remap(reconstruction_cells(&prows, &fa_reconstruct(&fa, &prows)?))));
    }
    if let Some(f) = &fit {
        let mut cells = Vec::new();
        let mut seen = 0usize;
        for (k, row) in vrows.iter().enumerate() {
            let i = vowner[k];
            if k > 0 && vowner[k - 1] != i {
                seen = 0;
            }
            let t = data.patients[i].visit_bins().nth(seen).expect("row comes from a visit");
            seen += 1;
            for (j, v) in row.iter().enumerate() {
                if let Some(x) = v {
                    cells.push((i, t, j, *x));
                }
            }
        }
        rows.push(("reconstruction".into(), "model".into(), model_cells(f, &data, &cells)?));
    }

    // Prediction of visits after the training window.
    let window = a.train_window.unwrap_or(data.max_horizon() / 2).max(1);
    for m in TrajectoryMethod::ALL {
        rows.push(("prediction".into(), m.label().into(), trajectory_baselines(&data, window, m)?));
    }
    if let Some(f) = &fit {
        let held: Vec<(usize, usize, usize, f64)> = trajectory_baselines(&data, window, TrajectoryMethod::Latest)?
            .into_iter()
            .map(|c| (c.patient, c.t, c.feature, c.actual))
            .collect();
        rows.push(("prediction".into(), "model".into(), model_cells(f, &data, &held)?));
    }

    let mut csv = String::from("task,method,mape_informative,mape_all,cells_informative,cells_all\n");
    let mut summary = Vec::new();
    for (task, method, cells) in &rows {
        let inf = mape(cells, Some(informative));
        let all = mape(cells, None);
        csv += &format!("{task},{method},{},{},{},{}\n", fmt_opt(inf.percent), fmt_opt(all.percent), inf.scored, all.scored);
        summary.push(json!({ "task": task, "method": method, "mape_informative": inf, "mape_all": all }));
    }
    write_text(dir, "baselines.csv", &csv)?;
    Ok((vec!["baselines.csv".into()], json!({ "train_window": window, "informative": informative, "rows": summary })))
}

fn eval_oracles(dir: &Path) -> Result<(Vec<String>, serde_json::Value)> {
    let mut log = String::from("theorem,scenario,condition,e_pop,e_group,predicted_sign,holds\n");
    let mut counts = BTreeMap::new();
    let mut all_pass = true;
    for th in [Theorem::InitialSeverity, Theorem::Rate, Theorem::VisitFrequency] {
        let (mut pass, mut total) = (0usize, 0usize);
        for (k, sc) in scenario_grid(th).iter().enumerate() {
            total += 1;
            match mlrp_bias_oracle(th, sc) {
                Ok(o) => {
                    for c in &o.comparisons {
                        log += &format!("{},{k},{},{},{},{},{}\n", th.label(), c.condition, c.e_pop, c.e_group, c.predicted, c.holds);
                    }
                    if o.holds {
                        pass += 1;
                    }
                }
                Err(e) => {
                    log += &format!("{},{k},error: {},NA,NA,NA,false\n", th.label(), e.to_string().replace(',', ";"));
                }
            }
        }
        all_pass &= pass == total;
        counts.insert(th.label(), json!({ "passed": pass, "total": total }));
    }
    write_text(dir, "oracle_log.csv", &log)?;
    Ok((
        vec!["oracle_log.csv".into()],
        json!({ "all_pass": all_pass, "theorems": counts, "visit_shift": "constant alpha; the visit curve is P(E=1|z) = 1 - exp(-exp(beta0 + betaZ (z - alpha)))" }),
    ))
}

fn eval_disparity(dir: &Path, a: &EvaluateArgs, seed: u64) -> Result<(Vec<String>, serde_json::Value)> {
    let [f] = a.fits.as_slice() else {
        return Err(CliError::Usage("disparity mode needs exactly one --fit".into()));
    };
    let years = a
        .years_per_unit
        .ok_or_else(|| CliError::Usage("disparity mode needs --years-per-unit".into()))?;
    let fit = LoadedFit::load(f)?;
    let data = fit.dataset(a.data.as_deref())?;
    let summary = disparity_summary(&fit.draws, data.n_groups, years)?;
    let est = fit.latents(&data)?;
    let mut csv = String::from("group,delta_mu_z0,delta_lower,delta_upper,care_delay_units,care_delay_years,rate_ratio,ratio_lower,ratio_upper,initial_gap_boot_lower,initial_gap_boot_upper\n");
    let mut boots = Vec::new();
    for gd in &summary.groups {
        // Patient-level bootstrap of the gap in mean estimated initial severity.
        let gi = gd.group;
        let stat = |idx: &[usize]| {
            let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
            for &i in idx {
                match data.patients[i].group.index {
                    x if x == gi => {
                        s1 += est[i].z0;
                        n1 += 1;
                    }
                    0 => {
                        s0 += est[i].z0;
                        n0 += 1;
                    }
                    _ => {}
                }
            }
            (n1 > 0 && n0 > 0).then(|| s1 / n1 as f64 - s0 / n0 as f64)
        };
        let b = cluster_bootstrap(stat, data.patients.len(), a.n_boot, seed)?;
        let dm = gd.delta_mu_z0;
        let rr = gd.rate_ratio;
        csv += &format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            gi,
            fmt_opt(dm.map(|i| i.mean)),
            fmt_opt(dm.map(|i| i.lower)),
            fmt_opt(dm.map(|i| i.upper)),
            fmt_opt(gd.care_delay_units),
            fmt_opt(gd.care_delay_years),
            fmt_opt(rr.map(|i| i.mean)),
            fmt_opt(rr.map(|i| i.lower)),
            fmt_opt(rr.map(|i| i.upper)),
            b.lower,
            b.upper
        );
        boots.push(json!({ "group": gi, "bootstrap": b }));
    }
    write_text(dir, "disparity.csv", &csv)?;
    Ok((vec!["disparity.csv".into()], json!({ "summary": summary, "initial_gap_bootstrap": boots })))
}

pub fn report(g: &Global, a: &ReportArgs) -> Result<()> {
    let m = Manifest::load(&a.dir).map_err(|e| CliError::Data(format!("{}: {e}", a.dir.join(MANIFEST_FILE).display())))?;
    let mut md = format!("# {} run\n\n", m.command);
    md += &format!("- tool: {} {}\n", m.tool, m.version);
    if let Some(s) = m.seed {
        md += &format!("- seed: {s}\n");
    }
    if let Some(h) = &m.config_sha256 {
        md += &format!("- config sha256: `{h}`\n");
    }
    md += &format!("- arguments: `{}`\n\n## Outputs\n\n", m.args.join(" "));
    for (f, h) in &m.outputs {
        md += &format!("- `{f}` (sha256 `{}`)\n", &h[..16.min(h.len())]);
    }
    let diag_path = a.dir.join(DIAGNOSTICS_FILE);
    if diag_path.exists() {
        let d: serde_json::Value = dpm_core::io::read_json(&diag_path)?;
        md += "\n## Sampler diagnostics\n\n";
        for key in ["max_global_rhat", "converged", "n_draws", "n_divergent", "mean_tree_depth"] {
            if let Some(v) = d.get(key) {
                md += &format!("- {key}: {v}\n");
            }
        }
        if let Some(ps) = d.get("parameters").and_then(|v| v.as_array()) {
            md += "\n| parameter | mean | sd | R-hat | ESS |\n|---|---|---|---|---|\n";
            for p in ps {
                let f = |k: &str| p.get(k).and_then(|v| v.as_f64()).map_or("NA".to_string(), |v| format!("{v:.3}"));
                md += &format!("| {} | {} | {} | {} | {} |\n", p.get("name").and_then(|v| v.as_str()).unwrap_or("?"), f("mean"), f("sd"), f("rhat"), f("ess"));
            }
        }
    }
    for table in ["bias_table.csv", "baselines.csv", "recovery.csv", "disparity.csv"] {
        let p = a.dir.join(table);
        if p.exists() {
            md += &format!("\n## {table}\n\n```\n{}```\n", fs::read_to_string(&p)?);
        }
    }
    let summary_path = a.dir.join(SUMMARY_FILE);
    if summary_path.exists() {
        let s: serde_json::Value = dpm_core::io::read_json(&summary_path)?;
        if let Some(v) = s.get("all_pass") {
            md += &format!("\n## Oracles\n\n- all scenarios pass: {v}\n");
        }
    }
    let out = g.out.clone().unwrap_or_else(|| a.dir.clone());
    fs::create_dir_all(&out)?;
    write_text(&out, "report.md", &md)?;
    println!("report written to {}", out.join("report.md").display());
    Ok(())
}
