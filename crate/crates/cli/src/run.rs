use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};

use s3c::backbone::FeatureExtractor;
use s3c::config::KeyValues;
use s3c::data::protocol::build_sessions;
use s3c::data::{load_dataset, ProtocolConfig};
use s3c::evaluation::{evaluate_session, render_comparison, render_comparison_csv, MetricsReport};
use s3c::head::StochasticHead;
use s3c::trainer::{loss_csv, run_plan, SessionState, TrainConfig};

use crate::manifest::*;
use crate::{Cli, EvalArgs, Failure, ReportArgs, RunArgs, EXIT_IO, EXIT_NO_METRICS, EXIT_USAGE};

fn io(context: String) -> impl FnOnce(std::io::Error) -> Failure {
    move |e| Failure::new(EXIT_IO, anyhow::Error::new(e).context(context))
}

fn usage(msg: String) -> Failure {
    Failure::new(EXIT_USAGE, anyhow!(msg))
}

/// Defaults, then the config file, then flags.
fn resolve(cli: &Cli, args: &RunArgs) -> Result<(ProtocolConfig, TrainConfig, KeyValues), Failure> {
    let mut kv = KeyValues::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(io(format!("reading {}", path.display())))?;
        kv.merge(&KeyValues::parse(&text)?);
    }
    for item in &args.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(v) = args.variant {
        kv.set("variant", v);
    }
    if let Some(a) = args.ablation {
        kv.set("ablation", a);
    }
    if let Some(s) = cli.seed {
        kv.set("seed", s);
    }
    if let Some(unknown) = kv
        .keys()
        .find(|k| !ProtocolConfig::KEYS.contains(k) && !TrainConfig::KEYS.contains(k))
    {
        return Err(usage(format!("unknown setting {unknown:?}")));
    }
    let mut train = TrainConfig::from_kv(&kv)?;
    if let Some(a) = args.ablation {
        train = train.with_ablation(a);
    }
    let mut protocol = ProtocolConfig::from_kv(&kv)?;
    protocol.rotations = train.rotations;
    protocol.seed = train.seed;
    let mut resolved = protocol.to_kv();
    resolved.merge(&train.to_kv());
    Ok((protocol, train, resolved))
}

fn write_session(dir: &Path, state: &SessionState) -> s3c::Result<()> {
    fs::write(dir.join(METRICS_FILE), state.metrics.to_csv())?;
    fs::write(dir.join(LOSS_FILE), loss_csv(&state.losses))?;
    state.extractor.save(dir.join(BACKBONE_FILE))?;
    state.head.save(dir.join(HEAD_FILE))?;
    state.store.save(dir.join(PROTOTYPES_FILE))?;
    Ok(())
}

pub fn run(cli: &Cli, args: &RunArgs, dir: &Path) -> Result<(), Failure> {
    let (protocol, train, resolved) = resolve(cli, args)?;
    let dataset_bytes =
        fs::read(&args.data).map_err(io(format!("reading {}", args.data.display())))?;
    let dataset = s3c::data::decode_dataset(&dataset_bytes)?;
    let plan = build_sessions(&protocol, dataset.class_count)?;

    fs::create_dir_all(dir).map_err(io(format!("creating {}", dir.display())))?;
    let config_text = resolved.render();
    fs::write(dir.join(CONFIG_FILE), &config_text).map_err(io("writing config".into()))?;
    let mut manifest = RunManifest {
        command: std::env::args().collect::<Vec<_>>().join(" "),
        seed: train.seed,
        config_hash: sha256_hex(config_text.as_bytes()),
        dataset: args.data.clone(),
        dataset_hash: sha256_hex(&dataset_bytes),
        sessions_planned: plan.session_count(),
        sessions_completed: 0,
        status: Status::Running,
        error: None,
    };
    manifest.write(dir).map_err(io("writing manifest".into()))?;

    let mut completed = 0;
    let outcome = run_plan(&plan, &dataset, &train, |state| {
        write_session(dir, state)?;
        completed = state.completed;
        Ok(())
    });
    manifest.sessions_completed = completed;
    match outcome {
        Ok(state) => {
            manifest.status = Status::Complete;
            manifest.write(dir).map_err(io("writing manifest".into()))?;
            let name = dir
                .file_name()
                .map_or("run".into(), |n| n.to_string_lossy().into_owned());
            print!("{}", render_comparison(&[(name, state.metrics)]));
            Ok(())
        }
        Err(e) => {
            let failure = Failure::from(e);
            manifest.status = Status::Failed;
            manifest.error = Some(format!("{:#}", failure.error));
            manifest.write(dir).map_err(io("writing manifest".into()))?;
            Err(failure)
        }
    }
}

pub fn eval(args: &EvalArgs, out: Option<&Path>) -> Result<(), Failure> {
    let dir = &args.run;
    let read_kv = |name: &str| -> Result<KeyValues, Failure> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(io(format!("reading {}", path.display())))?;
        Ok(KeyValues::parse(&text)?)
    };
    let config = read_kv(CONFIG_FILE)?;
    let data_path = match &args.data {
        Some(p) => p.clone(),
        None => read_kv(MANIFEST_FILE)?
            .get("dataset")
            .ok_or_else(|| usage("manifest records no dataset; pass --data".into()))?
            .into(),
    };
    let protocol = ProtocolConfig::from_kv(&config)?;
    let dataset = load_dataset(&data_path)?;
    let plan = build_sessions(&protocol, dataset.class_count)?;
    let extractor = FeatureExtractor::load(dir.join(BACKBONE_FILE))?;
    let head = StochasticHead::load(dir.join(HEAD_FILE))?;
    let last = head
        .task_count()
        .checked_sub(1)
        .ok_or_else(|| usage("empty classifier".into()))?;
    if last >= plan.session_count() {
        return Err(usage(format!(
            "checkpoint has {} tasks, plan only {}",
            last + 1,
            plan.session_count()
        )));
    }
    let tests: Vec<_> = (0..=last).map(|t| plan.test_data(&dataset, t)).collect();
    let row = evaluate_session(&head, &extractor, last, &tests)?;
    println!("session {last}: top-1 {:.2}%", 100.0 * row.top1);
    for a in &row.per_task {
        println!(
            "  task {}: {:.2}% of {}",
            a.task,
            100.0 * a.accuracy(),
            a.total
        );
    }
    if let Some(hm) = row.hm {
        println!("  harmonic mean {:.2}%", 100.0 * hm);
    }
    if let Some(out) = out {
        let csv = MetricsReport {
            sessions: vec![row],
        }
        .to_csv();
        let body: String = csv
            .lines()
            .filter(|l| !l.contains(",pd,"))
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(out, body).map_err(io(format!("writing {}", out.display())))?;
    }
    Ok(())
}

pub fn report(args: &ReportArgs, out: Option<&Path>) -> Result<(), Failure> {
    let mut runs = Vec::with_capacity(args.runs.len());
    for dir in &args.runs {
        let path = dir.join(METRICS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            Failure::new(
                EXIT_NO_METRICS,
                anyhow::Error::new(e).context(format!("no metrics in {}", dir.display())),
            )
        })?;
        let report = MetricsReport::from_csv(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .map_err(|e| Failure::new(EXIT_NO_METRICS, e))?;
        let name = dir
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| dir.display().to_string());
        runs.push((name, report));
    }
    let rendered = if args.csv {
        render_comparison_csv(&runs)
    } else {
        render_comparison(&runs)
    };
    match out {
        Some(path) => {
            fs::write(path, rendered).map_err(io(format!("writing {}", path.display())))?
        }
        None => print!("{rendered}"),
    }
    Ok(())
}
