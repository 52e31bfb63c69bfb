//! `spillway` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use spillway_client::{BaseConfig, Client, HttpGateway, PipelineSpec, PipelineStatus};
use spillway_core::metastore::MetaStore;
use spillway_core::runtime::Deployment;
use spillway_core::settings::{MetastoreBackend, Settings};
use spillway_core::storage::ObjectPath;
use spillway_core::udf::{Catalog, FunctionRef};
use spillway_testkit::oracle::{count_diff, parse_counts};
use spillway_testkit::{generate_corpus, oracle_wordcount};

#[derive(Parser)]
#[command(name = "spillway", version, about = "Serverless-style MapReduce over object storage")]
struct Cli {
    /// Deployment settings (YAML). Without it, everything runs in memory.
    #[arg(long, short, global = true)]
    settings: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the coordinator and workers until interrupted.
    Serve,
    /// Submit the pipelines in a JSON file and wait for them.
    Submit { pipeline_file: PathBuf },
    /// Print a job's state.
    Status { job_id: String },
    /// Download a completed job's results.
    Fetch {
        job_id: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Delete a finished job's intermediate objects and metadata.
    Gc { job_id: String },
    /// Generate a corpus, count its words end to end and check the result.
    DemoWordcount {
        #[arg(long, default_value_t = 4 << 20)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        mappers: u32,
        #[arg(long, default_value_t = 2)]
        reducers: u32,
        #[arg(long, default_value_t = 50_000)]
        vocabulary: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        locality: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load_settings(path: Option<&Path>) -> Result<Settings, String> {
    match path {
        Some(p) => Settings::load(p).map_err(|e| e.to_string()),
        None => Ok(Settings::in_memory()),
    }
}

/// The client plus, when the metastore lives in this process, the
/// deployment that owns it.
fn connect(settings: &Settings) -> Result<(Client, Option<Arc<Deployment>>), String> {
    let poll = Duration::from_millis(settings.client.poll_interval_ms);
    let deadline = Duration::from_millis(settings.client.deadline_ms);
    if settings.metastore.backend == MetastoreBackend::Memory {
        // Nothing outside this process can see an in-memory metastore, so
        // run the whole system here.
        let d = Arc::new(Deployment::from_settings(settings, Catalog::builtin(), false).map_err(|e| e.to_string())?);
        let client = Client::new(d.clone(), d.metastore().clone(), d.store().clone(), d.bucket()).with_polling(poll, deadline);
        return Ok((client, Some(d)));
    }
    let meta: MetaStore = settings.build_metastore().map_err(|e| e.to_string())?;
    let store = settings.build_store().map_err(|e| e.to_string())?;
    let gateway = Arc::new(HttpGateway::new(settings.coordinator_url()));
    let client = Client::new(gateway, meta, store, settings.storage.bucket.clone()).with_polling(poll, deadline);
    Ok((client, None))
}

fn run(cli: Cli) -> Result<bool, String> {
    let settings = load_settings(cli.settings.as_deref())?;
    match cli.command {
        Command::Serve => {
            let d = Deployment::from_settings(&settings, Catalog::builtin(), true).map_err(|e| e.to_string())?;
            println!(
                "coordinator listening on http://{}",
                d.coordinator_addr().expect("serving over HTTP")
            );
            loop {
                std::thread::park();
            }
        }
        Command::Submit { pipeline_file } => {
            let raw = std::fs::read_to_string(&pipeline_file)
                .map_err(|e| format!("reading {}: {e}", pipeline_file.display()))?;
            let specs = PipelineSpec::parse_many(&raw).map_err(|e| e.to_string())?;
            let (client, _local) = connect(&settings)?;
            let mut all_ok = true;
            for (i, result) in client.submit_and_monitor(&specs).into_iter().enumerate() {
                let label = specs[i].name.clone().unwrap_or_else(|| format!("pipeline {i}"));
                match result {
                    Ok(r) => {
                        all_ok &= r.status == PipelineStatus::Completed;
                        let status = serde_json::to_value(r.status).expect("status serializes");
                        print!("{label}: {} jobs={}", status.as_str().unwrap_or_default(), r.job_ids.join(","));
                        match r.failure_reason {
                            Some(reason) => println!(" reason={reason}"),
                            None => println!(),
                        }
                    }
                    Err(e) => {
                        all_ok = false;
                        println!("{label}: ERROR {e}");
                    }
                }
            }
            Ok(all_ok)
        }
        Command::Status { job_id } => {
            let (client, _local) = connect(&settings)?;
            let state = client.status(&job_id).map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&state).expect("state serializes"));
            Ok(true)
        }
        Command::Fetch { job_id, out } => {
            let (client, _local) = connect(&settings)?;
            for p in client.fetch_results(&job_id, &out).map_err(|e| e.to_string())? {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::Gc { job_id } => {
            let (client, _local) = connect(&settings)?;
            let r = client.gc(&job_id).map_err(|e| e.to_string())?;
            println!("removed {} objects and {} metadata keys", r.objects, r.keys);
            Ok(true)
        }
        Command::DemoWordcount {
            size,
            mappers,
            reducers,
            vocabulary,
            seed,
            locality,
            out,
        } => {
            let (client, local) = connect(&settings)?;
            let store = match &local {
                Some(d) => d.store().clone(),
                None => settings.build_store().map_err(|e| e.to_string())?,
            };
            let corpus = generate_corpus(size, vocabulary, locality, seed);
            let input = format!("demo-{seed}/input/corpus.txt");
            store
                .put_object(&ObjectPath::new(settings.storage.bucket.clone(), input).map_err(|e| e.to_string())?, &corpus)
                .map_err(|e| e.to_string())?;
            let mut base = BaseConfig::new(vec![format!("demo-{seed}/input/")], format!("demo-{seed}/output"), mappers, reducers);
            base.run_finalizer = reducers > 0;
            base.input_buffer_bytes = 1 << 20;
            base.output_buffer_bytes = 1 << 20;
            base.multipart_part_bytes = 128 << 10;
            let spec = PipelineSpec::new(vec![FunctionRef::new("wordcount_map")], Some(FunctionRef::new("sum_reduce")), base);
            let started = Instant::now();
            let result = client.run_pipeline(&spec).map_err(|e| e.to_string())?;
            let elapsed = started.elapsed();
            let job_id = result.job_ids.last().cloned().unwrap_or_default();
            if result.status != PipelineStatus::Completed {
                println!("job {job_id} did not complete: {:?}", result.failure_reason);
                return Ok(false);
            }
            let mut got = Vec::new();
            for path in client.fetch_results(&job_id, &out).map_err(|e| e.to_string())? {
                println!("{}", path.display());
                got.extend(parse_counts(&std::fs::read(&path).map_err(|e| e.to_string())?));
            }
            let want = oracle_wordcount(&corpus);
            match count_diff(&got, &want) {
                None => {
                    println!(
                        "job {job_id}: {} bytes, {} distinct words, matches the oracle ({:.2}s)",
                        corpus.len(),
                        want.len(),
                        elapsed.as_secs_f64()
                    );
                    Ok(true)
                }
                Some(diff) => {
                    println!("job {job_id}: output differs from the oracle: {diff}");
                    Ok(false)
                }
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

