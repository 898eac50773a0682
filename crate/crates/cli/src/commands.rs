use std::fmt;
use std::fs;
use std::path::Path;

use owis_core::experiment::{run_incompleteness_sweep, run_semi_comparison};
use owis_core::synth::{generate_dataset, load_dataset, save_dataset};
use owis_core::trainer::{checkpoint_from_str, checkpoint_to_string, train_fully, train_semi};
use owis_core::{evaluate, evaluate_oracle, Dataset, Error, Sample};

use crate::config::RunConfig;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Check(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Check(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) => Failure::Config(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Creates the output directory and records the resolved configuration.
fn prepare(cfg: &RunConfig) -> CmdResult {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Failure::Config(e.to_string()))?;
    write(&cfg.output_dir.join("resolved_config.json"), text + "\n")
}

fn load(path: &Path) -> Result<Dataset, Failure> {
    load_dataset(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

/// The configured dataset file, or a freshly generated one saved next to the outputs.
fn training_dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    match &cfg.dataset_path {
        Some(path) => load(path),
        None => {
            let ds = generate_dataset(&cfg.dataset)?;
            save_dataset(&ds, &cfg.output_dir.join("dataset.ndjson"))?;
            Ok(ds)
        }
    }
}

pub fn generate(cfg: &RunConfig) -> CmdResult {
    prepare(cfg)?;
    let ds = generate_dataset(&cfg.dataset)?;
    let path = cfg.output_dir.join("dataset.ndjson");
    save_dataset(&ds, &path)?;
    let labeled = ds.samples.iter().filter(|s| s.labeled).count();
    let instances: usize = ds.samples.iter().map(|s| s.instances.len()).sum();
    let visible: usize = ds.samples.iter().map(|s| s.visible.len()).sum();
    println!(
        "wrote {} samples ({labeled} labeled, {visible}/{instances} instances annotated) to {}",
        ds.samples.len(),
        path.display()
    );
    Ok(())
}

fn finish_training(cfg: &RunConfig, outcome: &owis_core::TrainOutcome) -> CmdResult {
    write(&cfg.output_dir.join("model.json"), checkpoint_to_string(&outcome.model)? + "\n")?;
    write(&cfg.output_dir.join("metrics.csv"), outcome.history.to_csv())?;
    if let Some(last) = outcome.history.rows.last() {
        println!("iteration {}: total loss {:.6}", last.iteration, last.terms.total);
    }
    println!("wrote {}", cfg.output_dir.join("model.json").display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> CmdResult {
    prepare(cfg)?;
    let ds = training_dataset(cfg)?;
    let labeled: Vec<Sample> = ds.samples.into_iter().filter(|s| s.labeled).collect();
    if labeled.is_empty() {
        return Err(Failure::Data("dataset has no labeled samples".into()));
    }
    let outcome = train_fully(&labeled, ds.manifest.sparse_annotations, &cfg.train)?;
    finish_training(cfg, &outcome)
}

pub fn train_semi_cmd(cfg: &RunConfig) -> CmdResult {
    prepare(cfg)?;
    let ds = training_dataset(cfg)?;
    let (labeled, unlabeled): (Vec<Sample>, Vec<Sample>) = ds.samples.into_iter().partition(|s| s.labeled);
    if labeled.is_empty() {
        return Err(Failure::Data("dataset has no labeled samples".into()));
    }
    if unlabeled.is_empty() {
        return Err(Failure::Data(
            "semi-supervised training needs unlabeled samples; set dataset.labeled_fraction below 1".into(),
        ));
    }
    let outcome = train_semi(&labeled, &unlabeled, ds.manifest.sparse_annotations, &cfg.train)?;
    finish_training(cfg, &outcome)
}

pub fn eval(cfg: &RunConfig, oracle: bool) -> CmdResult {
    let ckpt = cfg.checkpoint_path();
    let model = if oracle {
        None
    } else {
        let text = fs::read_to_string(&ckpt).map_err(|e| io_err(&ckpt, e))?;
        Some(checkpoint_from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", ckpt.display())))?)
    };
    prepare(cfg)?;
    let ds = match &cfg.eval_dataset_path {
        Some(path) => load(path)?,
        None => generate_dataset(&cfg.eval_manifest())?,
    };
    let report = match &model {
        Some(m) => evaluate(m, &ds.samples, &cfg.eval)?,
        None => evaluate_oracle(&ds.samples, &cfg.eval)?,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Data(e.to_string()))?;
    write(&cfg.output_dir.join("report.json"), text + "\n")?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> CmdResult {
    prepare(cfg)?;
    let results = cfg.gradcheck.run()?;
    let mut csv = String::from("case,labeled,draw,instances,parameters,max_error,worst_index,analytic,numeric,passed\n");
    for r in &results {
        let p = &r.report;
        csv += &format!(
            "{},{},{},{},{},{:e},{},{:e},{:e},{}\n",
            r.case, r.labeled, r.draw, r.instances, p.parameters, p.max_error, p.worst_index, p.analytic, p.numeric, p.passed
        );
    }
    write(&cfg.output_dir.join("gradcheck.csv"), csv)?;
    let failed: Vec<_> = results.iter().filter(|r| !r.report.passed).collect();
    let worst = results.iter().map(|r| r.report.max_error).fold(0.0, f64::max);
    println!(
        "{} checks, {} failed, worst relative error {worst:.3e}",
        results.len(),
        failed.len()
    );
    match failed.first() {
        None => Ok(()),
        Some(r) => Err(Failure::Check(format!(
            "{} gradient checks exceed tolerance; first: case {} (labeled {}) draw {} parameter {}: analytic {:e} numeric {:e}",
            failed.len(),
            r.case,
            r.labeled,
            r.draw,
            r.report.worst_index,
            r.report.analytic,
            r.report.numeric
        ))),
    }
}

pub fn incompleteness(cfg: &RunConfig) -> CmdResult {
    prepare(cfg)?;
    let out = run_incompleteness_sweep(&cfg.incompleteness)?;
    write(&cfg.output_dir.join("incompleteness.csv"), out.table.to_csv())?;
    let verdict = out.verdict();
    write(&cfg.output_dir.join("incompleteness_verdict.txt"), &verdict)?;
    print!("{verdict}");
    if out.passed() {
        Ok(())
    } else {
        Err(Failure::Check("incompleteness trend not held".into()))
    }
}

pub fn semi(cfg: &RunConfig) -> CmdResult {
    prepare(cfg)?;
    let out = run_semi_comparison(&cfg.semi)?;
    write(&cfg.output_dir.join("semi.csv"), out.table.to_csv())?;
    let verdict = out.verdict();
    write(&cfg.output_dir.join("semi_verdict.txt"), &verdict)?;
    print!("{verdict}");
    if out.passed() {
        Ok(())
    } else {
        Err(Failure::Check("semi-supervised trend not held".into()))
    }
}
