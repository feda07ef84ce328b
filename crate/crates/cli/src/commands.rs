use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use recall_core::data::{
    generate_synthetic, make_manifest, read_feature_file, split_by_instance, write_feature_file, FeatureDataset,
    SequenceLayout, SequenceManifest, SyntheticSpec,
};
use recall_core::metrics::{evaluate, logit_variance, MetricsReport, REPORT_JSON};
use recall_core::model::MultiHeadModel;
use recall_core::trainer::{run_curriculum, CurriculumResult, TrainConfig};

use crate::config::{
    activation_name, arch_name, parse_activation, parse_arch, resolve, RunArgs, ACTIVATIONS, ARCHS, MODES,
};
use crate::error::{CliError, CliResult, Context};

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Io(format!("csv encoding failed: {e}"));
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Io(format!("csv encoding failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| CliError::Io(e.to_string()))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10)]
    pub categories: usize,
    /// Instances per category
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Samples per instance
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().category_spread)]
    pub category_spread: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().instance_spread)]
    pub instance_spread: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().noise_spread)]
    pub noise_spread: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// equal:<k>, hows or hows-long
    #[arg(long, default_value = "equal:2")]
    pub layout: String,
    /// Fraction of instances per category held out for validation
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value = "fcl", value_parser = ["fcl", "csv"])]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen(args: &GenArgs) -> CliResult<()> {
    let layout: SequenceLayout = args.layout.parse().context("--layout")?;
    let spec = SyntheticSpec {
        categories: args.categories,
        instances_per_category: args.instances,
        samples_per_instance: args.samples,
        feature_dim: args.dim,
        category_spread: args.category_spread,
        instance_spread: args.instance_spread,
        noise_spread: args.noise_spread,
        seed: args.seed,
    };
    let ds = generate_synthetic(&spec)?;
    let (train, val) = split_by_instance(&ds, args.val_fraction, args.seed)?;
    let train_name = PathBuf::from(format!("train.{}", args.format));
    let val_name = PathBuf::from(format!("val.{}", args.format));
    let mut manifest = make_manifest(
        &ds.categories(),
        layout,
        args.seed,
        train_name.clone(),
        val_name.clone(),
    )?;
    manifest.notes = format!(
        "synthetic: {} categories x {} instances x {} samples, dim {}, spreads {}/{}/{}, seed {}, layout {}",
        spec.categories,
        spec.instances_per_category,
        spec.samples_per_instance,
        spec.feature_dim,
        spec.category_spread,
        spec.instance_spread,
        spec.noise_spread,
        spec.seed,
        layout
    );

    create_dir(&args.out)?;
    write_feature_file(&train, &args.out.join(&train_name))?;
    write_feature_file(&val, &args.out.join(&val_name))?;
    manifest.save(&args.out.join("manifest.toml"))?;
    println!(
        "wrote {} training and {} validation examples in {} sequences to {}",
        train.len(),
        val.len(),
        manifest.sequences.len(),
        args.out.display()
    );
    Ok(())
}

fn load_inputs(manifest_path: &Path) -> CliResult<(SequenceManifest, FeatureDataset, FeatureDataset)> {
    let manifest = SequenceManifest::load(manifest_path)?;
    manifest.validate()?;
    let train = read_feature_file(&manifest.resolve(manifest_path, &manifest.train))?;
    let val = read_feature_file(&manifest.resolve(manifest_path, &manifest.val))?;
    Ok((manifest, train, val))
}

fn loss_trace_csv(result: &CurriculumResult) -> CliResult<String> {
    let rows = result.loss_traces.iter().enumerate().flat_map(|(s, trace)| {
        trace.iter().enumerate().map(move |(epoch, l)| {
            vec![
                s.to_string(),
                epoch.to_string(),
                l.l_old.to_string(),
                l.l_new.to_string(),
                l.l_all.to_string(),
                l.total.to_string(),
            ]
        })
    });
    csv_text(&["sequence", "epoch", "l_old", "l_new", "l_all", "total"], rows)
}

fn audit_csv(result: &CurriculumResult) -> CliResult<String> {
    let rows = result.audits.iter().map(|a| {
        vec![
            a.sequence.to_string(),
            a.distinct_examples_read.to_string(),
            a.total_reads.to_string(),
            a.violations.len().to_string(),
        ]
    });
    csv_text(
        &["sequence", "distinct_examples_read", "total_reads", "violations"],
        rows,
    )
}

/// Runs one curriculum and writes its report, checkpoints and traces to `dir`.
fn run_into(
    dir: &Path,
    manifest: &SequenceManifest,
    train: &FeatureDataset,
    val: &FeatureDataset,
    config: &TrainConfig,
) -> CliResult<MetricsReport> {
    let checkpoints = dir.join("checkpoints");
    create_dir(&checkpoints)?;
    let result = run_curriculum(manifest, train, val, config, |s, model| {
        model.save(&checkpoints.join(format!("seq-{s}.rck")))
    })?;
    if let Some(a) = result.audits.iter().find(|a| !a.violations.is_empty()) {
        return Err(CliError::Validation(format!(
            "sequence {} read {} examples of other sequences",
            a.sequence,
            a.violations.len()
        )));
    }
    result.report.write_dir(dir)?;
    write_file(&dir.join("loss_trace.csv"), loss_trace_csv(&result)?)?;
    write_file(&dir.join("access_audit.csv"), audit_csv(&result)?)?;
    Ok(result.report)
}

fn write_echo(out: &Path, echo: &RunArgs) -> CliResult<()> {
    let text = toml::to_string(echo).map_err(|e| CliError::Io(format!("cannot encode config: {e}")))?;
    write_file(&out.join("config.toml"), text)
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let r = resolve(&args.run)?;
    let manifest_path = r
        .manifest
        .clone()
        .ok_or_else(|| CliError::Usage("a manifest is required (--manifest, RECALL_MANIFEST or config file)".into()))?;
    let (manifest, train, val) = load_inputs(&manifest_path)?;
    create_dir(&args.out)?;
    write_echo(&args.out, &r.echo)?;
    for &seed in &r.seeds {
        let dir = if r.seeds.len() == 1 {
            args.out.clone()
        } else {
            seed_dir(&args.out, seed)
        };
        let report = run_into(&dir, &manifest, &train, &val, &r.config.clone().with_seed(seed))?;
        let forgetting = report.forgetting()?;
        println!(
            "seed {seed}: final accuracy {:.4}, mean forgetting {:.4}",
            report.final_accuracy().unwrap_or(f64::NAN),
            mean_std(&forgetting).0
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Feature file to evaluate on instead of the manifest's validation set
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub shard_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    sequence: usize,
    examples: usize,
    overall_accuracy: f64,
    per_sequence_accuracy: Vec<f64>,
    per_sequence_examples: Vec<usize>,
    logit_variance: f64,
}

/// Index of the last sequence a model with this category order was trained on.
fn trained_through(manifest: &SequenceManifest, order: &[u32]) -> Option<usize> {
    let mut at = 0;
    for (s, cats) in manifest.sequences.iter().enumerate() {
        let end = at + cats.len();
        if end > order.len() || order[at..end] != cats[..] {
            return None;
        }
        if end == order.len() {
            return Some(s);
        }
        at = end;
    }
    None
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    if args.shard_size == 0 {
        return Err(CliError::Validation("--shard-size must be positive".into()));
    }
    let model = MultiHeadModel::load(&args.checkpoint)?;
    let manifest = SequenceManifest::load(&args.manifest)?;
    manifest.validate()?;
    let s = trained_through(&manifest, &model.category_order()).ok_or_else(|| {
        CliError::Validation("checkpoint categories do not match a prefix of the manifest sequences".into())
    })?;
    let data_path = match &args.data {
        Some(p) => p.clone(),
        None => manifest.resolve(&args.manifest, &manifest.val),
    };
    let data = read_feature_file(&data_path)?;
    if data.feature_dim() != model.feature_dim() {
        return Err(CliError::Validation(format!(
            "data has dimension {}, checkpoint expects {}",
            data.feature_dim(),
            model.feature_dim()
        )));
    }
    let seen: BTreeSet<u32> = manifest.sequences[..=s].iter().flatten().copied().collect();
    let data = data.restrict_to(&seen);
    let e = evaluate(&model, &data, &manifest, s, args.shard_size)?;
    let report = EvalReport {
        sequence: s,
        examples: data.len(),
        overall_accuracy: e.overall(),
        per_sequence_accuracy: e.per_origin(),
        per_sequence_examples: e.counts.clone(),
        logit_variance: logit_variance(&model, &data, args.shard_size)?,
    };

    create_dir(&args.out)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    write_file(&args.out.join("eval.json"), json + "\n")?;
    let rows = (0..=s).map(|k| {
        vec![
            k.to_string(),
            report.per_sequence_examples[k].to_string(),
            report.per_sequence_accuracy[k].to_string(),
        ]
    });
    write_file(
        &args.out.join("eval.csv"),
        csv_text(&["sequence", "examples", "accuracy"], rows)?,
    )?;
    println!(
        "after sequence {s}: overall accuracy {:.4} on {} examples, logit variance {:.4}",
        report.overall_accuracy, report.examples, report.logit_variance
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Output directories of `train` runs
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Reports of a run directory: the directory itself or its `seed-*` children.
fn load_group(dir: &Path) -> CliResult<Vec<MetricsReport>> {
    if dir.join(REPORT_JSON).is_file() {
        return Ok(vec![MetricsReport::load_dir(dir)?]);
    }
    let entries = fs::read_dir(dir).map_err(|e| CliError::Io(format!("cannot read {}: {e}", dir.display())))?;
    let mut seeds: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Io(format!("cannot read {}: {e}", dir.display())))?;
        let name = entry.file_name();
        if let Some(seed) = name
            .to_str()
            .and_then(|n| n.strip_prefix("seed-"))
            .and_then(|n| n.parse().ok())
        {
            if entry.path().join(REPORT_JSON).is_file() {
                seeds.push((seed, entry.path()));
            }
        }
    }
    if seeds.is_empty() {
        return Err(CliError::Io(format!("no completed run found in {}", dir.display())));
    }
    seeds.sort();
    seeds.iter().map(|(_, p)| Ok(MetricsReport::load_dir(p)?)).collect()
}

pub fn compare(args: &CompareArgs) -> CliResult<()> {
    let groups: Vec<Vec<MetricsReport>> = args.runs.iter().map(|d| load_group(d)).collect::<CliResult<_>>()?;
    let reference = &groups[0][0].sequences;
    for (run, group) in args.runs.iter().zip(&groups) {
        if group.iter().any(|r| &r.sequences != reference) {
            return Err(CliError::Validation(format!(
                "{} used a different sequence manifest than {}",
                run.display(),
                args.runs[0].display()
            )));
        }
    }
    let n_seq = reference.len();
    let means: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            (0..n_seq)
                .map(|s| mean_std(&g.iter().map(|r| r.overall_accuracy[s]).collect::<Vec<_>>()).0)
                .collect()
        })
        .collect();
    let labels: Vec<String> = (1..=groups.len()).map(|i| format!("run{i}")).collect();

    let mut header = vec!["sequence".to_string()];
    header.extend(labels.iter().cloned());
    header.extend(labels[1..].iter().map(|l| format!("{l}_minus_run1")));
    let rows = (0..n_seq).map(|s| {
        let mut row = vec![s.to_string()];
        row.extend(means.iter().map(|m| format!("{:.4}", m[s])));
        row.extend(means[1..].iter().map(|m| format!("{:.4}", m[s] - means[0][s])));
        row
    });
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let comparison = csv_text(&header_refs, rows)?;

    let summary_rows: Vec<Vec<String>> = groups
        .iter()
        .zip(&args.runs)
        .zip(&labels)
        .map(|((g, path), label)| {
            let finals: Vec<f64> = g.iter().filter_map(MetricsReport::final_accuracy).collect();
            let (mean, std) = mean_std(&finals);
            vec![
                label.clone(),
                path.display().to_string(),
                g.len().to_string(),
                format!("{mean:.4}"),
                format!("{std:.4}"),
            ]
        })
        .collect();
    let summary = csv_text(
        &["run", "path", "seeds", "final_accuracy_mean", "final_accuracy_std"],
        summary_rows.clone(),
    )?;

    create_dir(&args.out)?;
    write_file(&args.out.join("comparison.csv"), &comparison)?;
    write_file(&args.out.join("summary.csv"), &summary)?;

    let mut text = String::new();
    let _ = write!(text, "{:>8}", "sequence");
    for l in &labels {
        let _ = write!(text, "{l:>10}");
    }
    text.push('\n');
    for s in 0..n_seq {
        let _ = write!(text, "{s:>8}");
        for m in &means {
            let _ = write!(text, "{:>10.4}", m[s]);
        }
        text.push('\n');
    }
    text.push('\n');
    for row in &summary_rows {
        let _ = writeln!(
            text,
            "{}  {} ± {}  ({} seeds)  {}",
            row[0], row[3], row[4], row[2], row[1]
        );
    }
    print!("{text}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Loss modes to sweep [default: all]
    #[arg(long, value_delimiter = ',', value_parser = MODES)]
    pub modes: Vec<String>,
    /// Architectures to sweep [default: both]
    #[arg(long, value_delimiter = ',', value_parser = ARCHS)]
    pub archs: Vec<String>,
    /// Activations to sweep [default: the resolved activation]
    #[arg(long, value_delimiter = ',', value_parser = ACTIVATIONS)]
    pub activations: Vec<String>,
    /// Explicit seed list, overriding --seed and --repeats
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn or_default(chosen: &[String], default: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = if chosen.is_empty() {
        default.iter().map(|s| s.to_string()).collect()
    } else {
        chosen.to_vec()
    };
    let mut seen = BTreeSet::new();
    v.retain(|x| seen.insert(x.clone()));
    v
}

pub fn ablate(args: &AblateArgs) -> CliResult<()> {
    let r = resolve(&args.run)?;
    let manifest_path = r
        .manifest
        .clone()
        .ok_or_else(|| CliError::Usage("a manifest is required (--manifest, RECALL_MANIFEST or config file)".into()))?;
    let (manifest, train, val) = load_inputs(&manifest_path)?;
    let seeds = if args.seeds.is_empty() {
        r.seeds.clone()
    } else {
        args.seeds.clone()
    };
    let modes = or_default(&args.modes, &MODES);
    let archs = or_default(&args.archs, &ARCHS);
    let activations = or_default(&args.activations, &[activation_name(r.config.activation.kind)]);

    create_dir(&args.out)?;
    write_echo(&args.out, &r.echo)?;
    let mut runs = Vec::new();
    let mut cells = Vec::new();
    for arch in &archs {
        for act in &activations {
            for mode in &modes {
                let mut config = r.config.clone();
                config.arch_mode = parse_arch(arch)?;
                config.activation.kind = parse_activation(act)?;
                config.mode = mode.parse()?;
                let cell = format!("{}_{}_{}", arch_name(config.arch_mode), act, config.mode.name());
                let mut finals = Vec::new();
                for &seed in &seeds {
                    let dir = seed_dir(&args.out.join(&cell), seed);
                    let report = run_into(&dir, &manifest, &train, &val, &config.clone().with_seed(seed))?;
                    let f = report.final_accuracy().unwrap_or(f64::NAN);
                    finals.push(f);
                    runs.push(vec![
                        arch.clone(),
                        act.clone(),
                        mode.clone(),
                        seed.to_string(),
                        f.to_string(),
                    ]);
                }
                let (mean, std) = mean_std(&finals);
                println!("{arch:<13} {act:<6} {mode:<15} {mean:.4} ± {std:.4}");
                cells.push(vec![
                    arch.clone(),
                    act.clone(),
                    mode.clone(),
                    finals.len().to_string(),
                    format!("{mean:.4}"),
                    format!("{std:.4}"),
                ]);
            }
        }
    }
    write_file(
        &args.out.join("ablation_runs.csv"),
        csv_text(&["strategy", "activation", "mode", "seed", "final_accuracy"], runs)?,
    )?;
    write_file(
        &args.out.join("ablation.csv"),
        csv_text(
            &[
                "strategy",
                "activation",
                "mode",
                "runs",
                "final_accuracy_mean",
                "final_accuracy_std",
            ],
            cells,
        )?,
    )?;
    Ok(())
}
