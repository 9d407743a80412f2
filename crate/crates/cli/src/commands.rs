use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use multijm::dataset::{build_dataset, load_event, load_longitudinal, Dataset, HierarchyMode};
use multijm::diagnostics::{diagnostics, summarize_fit, write_summary_csv, SummaryRow};
use multijm::inference::{nuts_sample, ChainConfig, PosteriorDraws};
use multijm::model::{JointModel, ModelBases};
use multijm::params::ParameterLayout;
use multijm::prediction::{conditional_survival, outcomes, time_dependent_auc, AucResult, LandmarkQuery, PredictionOptions};
use multijm::simulation::{simulate_dataset, SimulationDesign};
use multijm::spec::{AssociationTerm, Functional, ModelSpec, Summary};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{AucArgs, ChainArgs, FitArgs, ModelArgs, PredictArgs, QueryArgs, SimulateArgs, SummarizeArgs};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Everything `predict` and `summarize` need to rebuild a fitted model.
#[derive(Debug, Serialize, Deserialize)]
struct FitRecord {
    spec: ModelSpec,
    bases: ModelBases,
    layout: ParameterLayout,
    chains: ChainConfig,
    long: PathBuf,
    event: PathBuf,
}

/// A model specification file, optionally carrying chain settings.
#[derive(Debug, Deserialize)]
struct SpecFile {
    #[serde(flatten)]
    model: ModelSpec,
    #[serde(default)]
    chains: Option<ChainConfig>,
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| CliError::Output(out.to_path_buf(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Output(path.to_path_buf(), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(path.to_path_buf(), e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Output(path.to_path_buf(), e))
}

fn write_manifest(out: &Path, command: &str, seed: u64, started: Instant, outputs: &[&str]) -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": command,
            "arguments": args,
            "seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
            "wall_seconds": started.elapsed().as_secs_f64(),
            "outputs": outputs,
        }),
    )
}

fn load_data(long: &Path, event: &Path, spec: &ModelSpec) -> Result<Dataset> {
    let l = load_longitudinal(long, &spec.columns.longitudinal)?;
    let e = load_event(event, &spec.columns.event)?;
    Ok(build_dataset(&l, &e, spec.mode, spec.window_policy)?)
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let started = Instant::now();
    let design: SimulationDesign = read_json(&a.design)?;
    let (data, truth) = simulate_dataset(&design, a.seed)?;
    create_dir(&a.out)?;
    let cols = &design.model.columns;
    data.export_csv(
        a.out.join("long.csv"),
        a.out.join("event.csv"),
        &cols.longitudinal,
        &cols.event,
    )?;
    write_json(&a.out.join("truth.json"), &truth)?;
    write_manifest(&a.out, "simulate", a.seed, started, &["long.csv", "event.csv", "truth.json"])?;
    let c = data.counts();
    println!(
        "patients {}  clusters {}  observations {}  event fraction {:.3}",
        c.patients,
        c.clusters,
        c.observations,
        data.event_fraction()
    );
    Ok(())
}

/// Apply command-line overrides to a specification.
fn apply_model_args(spec: &mut ModelSpec, m: &ModelArgs) -> Result<()> {
    if let Some(mode) = m.mode {
        spec.mode = mode;
    }
    if m.frailty {
        spec.frailty = true;
    }
    if m.shared_re {
        spec.shared_re_association = true;
    }
    let summary = m.summary.as_deref().map(Summary::parse).transpose()?;
    if let Some(list) = &m.assoc {
        let mut terms = Vec::new();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if name.eq_ignore_ascii_case("none") {
                continue;
            }
            let functional = Functional::parse(name)?;
            if functional == Functional::Auc {
                return Err(CliError::Usage(
                    "only the value and slope associations are available from the command line".into(),
                ));
            }
            terms.push(AssociationTerm { functional, summary });
        }
        spec.association = terms;
    } else if let Some(s) = summary {
        for t in &mut spec.association {
            t.summary = Some(s);
        }
    }
    // Associations above the patient are patient-level; a summary given
    // explicitly is left for validation to reject.
    if spec.mode == HierarchyMode::ClusterAbovePatient && summary.is_none() {
        for t in &mut spec.association {
            t.summary = None;
        }
    }
    Ok(())
}

fn apply_chain_args(mut c: ChainConfig, a: &ChainArgs) -> ChainConfig {
    if let Some(v) = a.chains {
        c.chains = v;
    }
    if let Some(v) = a.warmup {
        c.warmup = v;
    }
    if let Some(v) = a.samples {
        c.samples = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    c
}

fn print_summary(rows: &[SummaryRow]) {
    println!(
        "{:<32} {:>12} {:>12} {:>12} {:>10} {:>10} {:>10}",
        "parameter", "estimate", "lower", "upper", "HR", "HR lower", "HR upper"
    );
    for r in rows {
        let hr = r
            .hazard_ratio
            .map_or(String::new(), |(a, b, c)| format!("{a:>10.4} {b:>10.4} {c:>10.4}"));
        println!("{:<32} {:>12.4} {:>12.4} {:>12.4} {hr}", r.parameter, r.mean, r.lower, r.upper);
    }
}

pub fn fit(a: FitArgs) -> Result<()> {
    let started = Instant::now();
    let file: SpecFile = read_json(&a.spec)?;
    let mut spec = file.model;
    apply_model_args(&mut spec, &a.model)?;
    let config = apply_chain_args(file.chains.unwrap_or_default(), &a.chain);
    config.validate()?;
    let data = load_data(&a.long, &a.event, &spec)?;
    let model = JointModel::compile(data, spec)?;
    let draws = nuts_sample(&model, &config)?;
    let diag = diagnostics(&draws, config.max_depth);
    let rows = summarize_fit(&draws, &model)?;

    create_dir(&a.out)?;
    let absolute = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let record = FitRecord {
        spec: model.spec().clone(),
        bases: model.bases().clone(),
        layout: model.layout().clone(),
        chains: config,
        long: absolute(&a.long),
        event: absolute(&a.event),
    };
    write_json(&a.out.join("fit.json"), &record)?;
    draws.write_csv(create(&a.out.join("draws.csv"))?)?;
    write_json(&a.out.join("diagnostics.json"), &diag)?;
    write_summary_csv(&rows, create(&a.out.join("summary.csv"))?)?;
    write_manifest(
        &a.out,
        "fit",
        config.seed,
        started,
        &["fit.json", "draws.csv", "diagnostics.json", "summary.csv"],
    )?;
    print_summary(&rows);
    for w in &diag.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

struct Fitted {
    model: JointModel,
    draws: PosteriorDraws,
    record: FitRecord,
}

fn load_fit(dir: &Path, long: Option<&Path>, event: Option<&Path>) -> Result<Fitted> {
    let record: FitRecord = read_json(&dir.join("fit.json"))?;
    let draws_path = dir.join("draws.csv");
    let draws = PosteriorDraws::read_csv(File::open(&draws_path).map_err(|e| CliError::Input(draws_path, e))?)?;
    let long = long.unwrap_or(&record.long);
    let event = event.unwrap_or(&record.event);
    let data = load_data(long, event, &record.spec)?;
    let model = JointModel::compile_with(data, record.spec.clone(), record.bases.clone())?;
    Ok(Fitted { model, draws, record })
}

fn query_of(q: &QueryArgs) -> LandmarkQuery {
    LandmarkQuery::new(q.landmark, q.horizon)
}

fn options_of(q: &QueryArgs) -> PredictionOptions {
    PredictionOptions {
        max_draws: Some(q.draws),
        seed: q.seed,
    }
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let started = Instant::now();
    let q = &a.query;
    let fitted = load_fit(&a.fit, q.long.as_deref(), q.event.as_deref())?;
    let result = conditional_survival(&fitted.model, &query_of(q), &fitted.draws, &options_of(q))?;
    create_dir(&q.out)?;
    result.write_csv(create(&q.out.join("predictions.csv"))?)?;
    write_manifest(&q.out, "predict", q.seed, started, &["predictions.csv"])?;
    println!("{} patients at risk at t = {}", result.patients.len(), q.landmark);
    Ok(())
}

fn model_label(spec: &ModelSpec) -> String {
    if spec.association.is_empty() {
        return "none".into();
    }
    spec.association.iter().map(|t| t.label()).collect::<Vec<_>>().join("+")
}

pub fn auc(a: AucArgs) -> Result<()> {
    let started = Instant::now();
    let q = &a.query;
    if !a.label.is_empty() && a.label.len() != a.fit.len() {
        return Err(CliError::Usage(format!(
            "{} labels given for {} fits",
            a.label.len(),
            a.fit.len()
        )));
    }
    let query = query_of(q);
    create_dir(&q.out)?;
    let mut results: Vec<(String, AucResult)> = Vec::new();
    let mut outputs = Vec::new();
    for (k, dir) in a.fit.iter().enumerate() {
        let fitted = load_fit(dir, q.long.as_deref(), q.event.as_deref())?;
        let pred = conditional_survival(&fitted.model, &query, &fitted.draws, &options_of(q))?;
        let auc = time_dependent_auc(&pred, &outcomes(&fitted.model), &query)?;
        let label = a.label.get(k).cloned().unwrap_or_else(|| model_label(&fitted.record.spec));
        let (pred_name, auc_name) = if a.fit.len() == 1 {
            ("predictions.csv".to_string(), "auc.json".to_string())
        } else {
            (format!("predictions-{}.csv", k + 1), format!("auc-{}.json", k + 1))
        };
        pred.write_csv(create(&q.out.join(&pred_name))?)?;
        write_json(&q.out.join(&auc_name), &json!({ "model": label, "result": auc }))?;
        println!(
            "{label}: AUC {:.4} ({} cases, {} controls, {} excluded)",
            auc.auc, auc.cases, auc.controls, auc.excluded
        );
        outputs.push(pred_name);
        outputs.push(auc_name);
        results.push((label, auc));
    }
    if a.fit.len() > 1 {
        let path = q.out.join("comparison.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        w.write_record(["model", "auc", "cases", "controls", "excluded"])?;
        for (label, r) in &results {
            w.write_record([
                label.clone(),
                format!("{:?}", r.auc),
                r.cases.to_string(),
                r.controls.to_string(),
                r.excluded.to_string(),
            ])?;
        }
        w.flush().map_err(|e| CliError::Output(path, e))?;
        outputs.push("comparison.csv".into());
    }
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    write_manifest(&q.out, "auc", q.seed, started, &names)?;
    Ok(())
}

pub fn summarize(a: SummarizeArgs) -> Result<()> {
    let fitted = load_fit(&a.fit, None, None)?;
    let rows = summarize_fit(&fitted.draws, &fitted.model)?;
    print_summary(&rows);
    let diag = diagnostics(&fitted.draws, fitted.record.chains.max_depth);
    println!(
        "\n{} chains x {} draws, {} divergences",
        diag.chains, diag.draws, diag.divergences
    );
    for p in diag.parameters.iter().filter(|p| !is_effect(&p.name)) {
        let rhat = p.rhat.map_or("-".to_string(), |r| format!("{r:.3}"));
        let ess = p.ess.map_or("-".to_string(), |e| format!("{e:.0}"));
        println!("{:<32} rhat {rhat:>7} ess {ess:>7}", p.name);
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_summary_csv(&rows, create(&out.join("summary.csv"))?)?;
    }
    Ok(())
}

fn is_effect(name: &str) -> bool {
    ["b[", "u[", "c[", "delta["].iter().any(|p| name.starts_with(p))
}
