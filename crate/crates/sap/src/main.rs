use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sap::config::{Overrides, PipelineConfig};
use sap::mock_server::{self, MockMode};
use sap::rankers::MockSpec;
use sap::service::{self, ServiceState};
use sap::loading;
use sap_core::coarse::TextQuery;
use sap_core::embedding::load_embeddings;
use sap_core::eval::{
    compare_prompt_variants, estimate_cost, evaluate, sweep_candidate_size, CostMode, CostModel, GroundTruth,
};
use sap_core::gallery::{apply_filter, dedup, save_detections};
use sap_core::ranker::mock::IdentityRanker;
use sap_core::ranker::wire::RankRequest;
use sap_core::ranker::build_description_prompt;
use sap_core::synthetic::{self, record_responses, SyntheticConfig};
use sap_core::{run_benchmark, BBox, PromptVariant, RankedResult};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "sap", version, about = "Two-stage scene-aware text-to-person retrieval")]
struct Cli {
    /// TOML config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct GalleryArgs {
    /// Image manifest (JSON lines).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Detection records (JSON lines).
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Log and skip invalid records instead of failing.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args, Default)]
struct EmbeddingArgs {
    #[arg(long = "crop-emb")]
    crop_emb: Option<PathBuf>,
    #[arg(long = "text-emb")]
    text_emb: Option<PathBuf>,
}

#[derive(Args, Default)]
struct RetrievalArgs {
    /// Candidates passed to the re-ranker.
    #[arg(short = 'k', long = "k")]
    k: Option<usize>,
    /// Prompt variant: np, bop or bep.
    #[arg(long)]
    variant: Option<PromptVariant>,
    /// IoU needed for a crop to match the ground truth.
    #[arg(long)]
    iou: Option<f64>,
}

#[derive(Args, Default)]
struct RankerArgs {
    /// Ranker URL (overrides SAP_ENDPOINT).
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the ranker (overrides SAP_MODEL).
    #[arg(long)]
    model: Option<String>,
    /// In-process ranker: identity, reverse, oracle, noisy:<p>[:<seed>],
    /// scripted:<path> or fail.
    #[arg(long)]
    mock: Option<String>,
    /// Maximum concurrent ranker calls.
    #[arg(long = "max-in-flight")]
    max_in_flight: Option<usize>,
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long = "timeout-secs")]
    timeout_secs: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a manifest and detections file.
    Ingest {
        #[command(flatten)]
        gallery: GalleryArgs,
    },
    /// Keep only detections with a visible head and shoulder.
    Filter {
        #[command(flatten)]
        gallery: GalleryArgs,
        /// Where to write the filtered detections.
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop near-duplicate crops.
    Dedup {
        #[command(flatten)]
        gallery: GalleryArgs,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long = "crop-emb")]
        crop_emb: Option<PathBuf>,
        #[arg(long = "scene-emb")]
        scene_emb: Option<PathBuf>,
        /// Where to write the kept detections.
        #[arg(long)]
        out: PathBuf,
    },
    /// Embedding file utilities.
    Emb {
        #[command(subcommand)]
        command: EmbCommand,
    },
    /// Coarse retrieval only: print (rank, crop_id, score).
    Query {
        #[command(flatten)]
        gallery: GalleryArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[arg(long)]
        text: String,
        #[arg(long = "appearance-text")]
        appearance_text: Option<String>,
        /// Text-embedding key; defaults to the appearance text or the text.
        #[arg(long)]
        key: Option<String>,
        #[arg(short = 'k', long = "k")]
        k: Option<usize>,
    },
    /// Both stages; writes one RankedResult per line.
    Rerank {
        #[command(flatten)]
        gallery: GalleryArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[command(flatten)]
        ranker: RankerArgs,
        /// A single description (otherwise every query in --queries).
        #[arg(long, conflicts_with = "queries")]
        text: Option<String>,
        #[arg(long, requires = "text")]
        key: Option<String>,
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Output file (default stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a results file against ground truth.
    Eval {
        #[command(flatten)]
        gallery: GalleryArgs,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        iou: Option<f64>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Candidate-size sweep or prompt-variant comparison.
    Ablate {
        #[command(flatten)]
        gallery: GalleryArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[command(flatten)]
        ranker: RankerArgs,
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Comma-separated candidate sizes, e.g. 1,2,3,5,7,10,15,20.
        #[arg(long = "sweep-k", value_delimiter = ',', conflicts_with = "variants")]
        sweep_k: Vec<usize>,
        /// Comma-separated prompt variants, e.g. np,bop,bep.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<PromptVariant>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the description-generation request for one crop.
    Describe {
        #[command(flatten)]
        gallery: GalleryArgs,
        #[arg(long = "crop-id", conflicts_with_all = ["image_id", "bbox"])]
        crop_id: Option<String>,
        #[arg(long = "image-id", requires = "bbox")]
        image_id: Option<String>,
        /// x,y,w,h in pixels.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        bbox: Vec<u32>,
        #[arg(long)]
        model: Option<String>,
    },
    /// Run the HTTP query service.
    Serve {
        #[command(flatten)]
        gallery: GalleryArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[command(flatten)]
        ranker: RankerArgs,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Coarse vs. re-ranked evaluation over a queries file.
    RunBenchmark {
        #[command(flatten)]
        gallery: GalleryArgs,
        #[command(flatten)]
        emb: EmbeddingArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[command(flatten)]
        ranker: RankerArgs,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Evaluate the per-query time model.
    Cost {
        #[arg(long)]
        n: u64,
        #[arg(short = 'k', long = "k", default_value_t = 10)]
        k: u64,
        #[arg(long = "mu-s")]
        mu_s: f64,
        #[arg(long = "mu-m")]
        mu_m: f64,
        /// Gallery-wide candidate set size (batched mode).
        #[arg(long, default_value_t = 0)]
        m: u64,
        /// Only this mode (default: all).
        #[arg(long)]
        mode: Option<CostMode>,
    },
    /// Write a seeded synthetic gallery, embeddings, queries and config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// benchmark (25 queries) or sweep.
        #[arg(long, default_value = "benchmark")]
        preset: String,
        /// Query count for the sweep preset.
        #[arg(long, default_value_t = 200)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Record this mock's replies as scripted responses.
        #[arg(long)]
        script: Option<String>,
    },
    /// Run the loopback mock ranker server.
    MockRanker {
        #[arg(long, default_value = "127.0.0.1:8089")]
        bind: SocketAddr,
        /// identity, reverse, garbage, status:<code> or scripted:<path>.
        #[arg(long, default_value = "identity")]
        mode: String,
        #[arg(long = "delay-ms", default_value_t = 0)]
        delay_ms: u64,
    },
}

#[derive(Subcommand)]
enum EmbCommand {
    /// Validate an embedding file and print its shape.
    Check { path: PathBuf },
}

impl GalleryArgs {
    fn apply(&self, o: &mut Overrides) {
        o.manifest = self.manifest.clone();
        o.detections = self.detections.clone();
        o.lenient = self.lenient.then_some(true);
    }
}

impl EmbeddingArgs {
    fn apply(&self, o: &mut Overrides) {
        o.crop_embeddings = self.crop_emb.clone();
        o.text_embeddings = self.text_emb.clone();
    }
}

impl RetrievalArgs {
    fn apply(&self, o: &mut Overrides) {
        o.k = self.k;
        o.variant = self.variant;
        o.iou_threshold = self.iou;
    }
}

impl RankerArgs {
    fn apply(&self, o: &mut Overrides) {
        o.endpoint = self.endpoint.clone();
        o.model = self.model.clone();
        o.mock = self.mock.clone();
        o.max_in_flight = self.max_in_flight;
        o.retries = self.retries;
        o.timeout_secs = self.timeout_secs;
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Human table on stdout, then the JSON document on stdout or in `json`.
fn emit_report(table: &dyn std::fmt::Display, report: &impl Serialize, json: Option<&Path>) -> Result<()> {
    let doc = serde_json::to_string_pretty(report)?;
    let mut out = io::stdout().lock();
    writeln!(out, "{table}")?;
    match json {
        Some(path) => fs::write(path, doc + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => writeln!(out, "\n{doc}")?,
    }
    Ok(())
}

fn load_results(path: &Path) -> Result<Vec<RankedResult>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! outln {
    ($($arg:tt)*) => {
        writeln!(io::stdout().lock(), $($arg)*)?
    };
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        // e.g. `sap query ... | head`
        Err(e) if e.chain().any(|c| c.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let config_path = cli.config.as_deref();
    let resolve = |o: Overrides| PipelineConfig::load(config_path, o).context("resolving configuration");

    match cli.command {
        Command::Ingest { gallery } => {
            let mut o = Overrides::default();
            gallery.apply(&mut o);
            let g = loading::gallery(&resolve(o)?)?;
            outln!("images: {}\ncrops: {}", g.images().len(), g.crops().len());
        }
        Command::Filter { gallery, out } => {
            let mut o = Overrides::default();
            gallery.apply(&mut o);
            let cfg = resolve(o)?;
            let g = loading::gallery(&cfg)?;
            let kept = apply_filter(&g);
            save_detections(&kept, &out)?;
            outln!("kept {} of {} crops", kept.crops().len(), g.crops().len());
        }
        Command::Dedup {
            gallery,
            threshold,
            crop_emb,
            scene_emb,
            out,
        } => {
            let mut o = Overrides::default();
            gallery.apply(&mut o);
            o.dedup_threshold = threshold;
            o.crop_embeddings = crop_emb;
            o.scene_embeddings = scene_emb;
            let cfg = resolve(o)?;
            let g = loading::gallery(&cfg)?;
            let kept = dedup(
                &g,
                &loading::crop_embeddings(&cfg)?,
                &loading::scene_embeddings(&cfg)?,
                cfg.dedup_threshold,
            )?;
            save_detections(&kept, &out)?;
            outln!("kept {} of {} crops", kept.crops().len(), g.crops().len());
        }
        Command::Emb {
            command: EmbCommand::Check { path },
        } => {
            let m = load_embeddings(&path).with_context(|| format!("checking {}", path.display()))?;
            outln!(
                "dim: {}\ncount: {}\nunit_norm: {}",
                m.dim(),
                m.len(),
                m.is_normalized()
            );
        }
        Command::Query {
            gallery,
            emb,
            text,
            appearance_text,
            key,
            k,
        } => {
            let mut o = Overrides::default();
            gallery.apply(&mut o);
            emb.apply(&mut o);
            o.k = k;
            let cfg = resolve(o)?;
            let p = loading::pipeline_with(&cfg, loading::gallery(&cfg)?, Arc::new(IdentityRanker))?;
            let key = key.or_else(|| appearance_text.clone()).unwrap_or_else(|| text.clone());
            let q = TextQuery::new("cli", text)?
                .with_appearance_text(appearance_text)
                .with_embedding_key(key);
            let stage = p.coarse(&q)?;
            let mut out = output(None)?;
            writeln!(out, "rank\tcrop_id\tscore")?;
            for (i, c) in stage.ranking.iter().take(cfg.k).enumerate() {
                writeln!(out, "{}\t{}\t{:.6}", i + 1, c.crop_id, c.score)?;
            }
        }
        Command::Rerank {
            gallery,
            emb,
            retrieval,
            ranker,
            text,
            key,
            queries,
            out,
        } => {
            let mut o = Overrides::default();
            gallery.apply(&mut o);
            emb.apply(&mut o);
            retrieval.apply(&mut o);
            ranker.apply(&mut o);
            o.queries = queries;
            let cfg = resolve(o)?;
            let mut sink = output(out.as_deref())?;
            if let Some(text) = text {
                let p = loading::pipeline(&cfg, None)?;
                let key = key.unwrap_or_else(|| text.clone());
                let q = TextQuery::new("cli", text)?.with_embedding_key(key);
                let outcome = p.run_query(&q)?;
                if let Some(reason) = &outcome.trace.fallback_reason {
                    log::warn!("re-ranking skipped: {reason}");
                }
                writeln!(sink, "{}", serde_json::to_string(&outcome.result)?)?;
            } else {
                let records = loading::queries(&cfg)?;
                let p = loading::pipeline(&cfg, Some(&records))?;
                let coarse = p.coarse_all(&records)?;
                let mut applied = 0;
                for (result, _) in p.rerank_all(&coarse, cfg.variant, cfg.k)? {
                    applied += usize::from(result.rerank_applied);
                    writeln!(sink, "{}", serde_json::to_string(&result)?)?;
                }
                log::info!("re-ranked {applied} of {} queries", records.len());
            }
            sink.flush()?;
        }
        Command::Eval {
            gallery,
            results,
            queries,
            iou,
            json,
        } => {
            let mut o = Overrides::default();
            gallery.apply(&mut o);
            o.queries = queries;
            o.iou_threshold = iou;
            let cfg = resolve(o)?;
            let g = loading::gallery(&cfg)?;
            let gt = GroundTruth::from_records(&loading::queries(&cfg)?);
            gt.validate(&g)?;
            let report = evaluate(&load_results(&results)?, &gt, &g, cfg.iou_threshold)?;
            emit_report(&report, &report, json.as_deref())?;
        }
        Command::Ablate {
            gallery,
            emb,
            retrieval,
            ranker,
            queries,
            sweep_k,
            variants,
            json,
        } => {
            let mut o = Overrides::default();
            gallery.apply(&mut o);
            emb.apply(&mut o);
            retrieval.apply(&mut o);
            ranker.apply(&mut o);
            o.queries = queries;
            let cfg = resolve(o)?;
            let records = loading::queries(&cfg)?;
            let p = loading::pipeline(&cfg, Some(&records))?;
            if !sweep_k.is_empty() {
                let table = sweep_candidate_size(&p, &records, &sweep_k)?;
                emit_report(&table, &table, json.as_deref())?;
            } else if !variants.is_empty() {
                let table = compare_prompt_variants(&p, &records, &variants)?;
                emit_report(&table, &table, json.as_deref())?;
            } else {
                bail!("pass --sweep-k or --variants");
            }
        }
        Command::Describe {
            gallery,
            crop_id,
            image_id,
            bbox,
            model,
        } => {
            let mut o = Overrides::default();
            gallery.apply(&mut o);
            o.model = model;
            let cfg = resolve(o)?;
            let g = loading::gallery(&cfg)?;
            let (image, bbox) = match (crop_id, image_id) {
                (Some(id), _) => {
                    let crop = g.crop(&id).with_context(|| format!("unknown crop {id}"))?;
                    (g.source_of(&id).expect("crop has a source image"), crop.bbox)
                }
                (None, Some(id)) => {
                    let image = g.image(&id).with_context(|| format!("unknown image {id}"))?;
                    (image, BBox::new(bbox[0], bbox[1], bbox[2], bbox[3]))
                }
                (None, None) => bail!("pass --crop-id or --image-id with --bbox"),
            };
            let bundle = build_description_prompt(image, bbox)?;
            let request = RankRequest::from_bundle(&bundle, &cfg.model, cfg.max_tokens);
            outln!("{}", serde_json::to_string_pretty(&request)?);
        }
        Command::Serve {
            gallery,
            emb,
            retrieval,
            ranker,
            queries,
            bind,
        } => {
            let mut o = Overrides::default();
            gallery.apply(&mut o);
            emb.apply(&mut o);
            retrieval.apply(&mut o);
            ranker.apply(&mut o);
            o.queries = queries;
            serve(resolve(o)?, bind)?;
        }
        Command::RunBenchmark {
            gallery,
            emb,
            retrieval,
            ranker,
            queries,
            json,
        } => {
            let mut o = Overrides::default();
            gallery.apply(&mut o);
            emb.apply(&mut o);
            retrieval.apply(&mut o);
            ranker.apply(&mut o);
            o.queries = queries;
            let cfg = resolve(o)?;
            let records = loading::queries(&cfg)?;
            let p = loading::pipeline(&cfg, Some(&records))?;
            let report = run_benchmark(&p, &records)?;
            emit_report(&report, &report, json.as_deref())?;
        }
        Command::Cost {
            n,
            k,
            mu_s,
            mu_m,
            m,
            mode,
        } => {
            let cm = CostModel::new(mu_s, mu_m, n, k, m)?;
            let modes = mode.map_or_else(|| CostMode::ALL.to_vec(), |m| vec![m]);
            for mode in modes {
                outln!("{mode}\t{}", estimate_cost(&cm, mode));
            }
        }
        Command::Synth {
            out,
            preset,
            queries,
            seed,
            script,
        } => synth(&out, &preset, queries, seed, script.as_deref())?,
        Command::MockRanker { bind, mode, delay_ms } => {
            let mode: MockMode = mode.parse().map_err(anyhow::Error::msg)?;
            tokio::runtime::Runtime::new()?.block_on(mock_server::serve_forever(
                bind,
                mode,
                Duration::from_millis(delay_ms),
            ))?;
        }
    }
    Ok(())
}

fn serve(cfg: PipelineConfig, bind: SocketAddr) -> Result<()> {
    let state = ServiceState::new(cfg.max_in_flight);
    let runtime = tokio::runtime::Runtime::new()?;
    let loader_state = state.clone();
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        outln!("listening on http://{}", listener.local_addr()?);
        tokio::task::spawn_blocking(move || {
            let loaded = cfg
                .queries
                .as_ref()
                .map(|_| loading::queries(&cfg))
                .transpose()
                .and_then(|q| loading::pipeline(&cfg, q.as_deref()));
            match loaded {
                Ok(p) => {
                    log::info!("gallery loaded");
                    loader_state.set_pipeline(Arc::new(p));
                }
                Err(e) => {
                    eprintln!("error: loading pipeline: {e:#}");
                    std::process::exit(1);
                }
            }
        });
        axum::serve(listener, service::router(state)).await?;
        anyhow::Ok(())
    })
}

fn synth(out: &Path, preset: &str, queries: usize, seed: u64, script: Option<&str>) -> Result<()> {
    let config = match preset {
        "benchmark" => SyntheticConfig::benchmark(seed),
        "sweep" => SyntheticConfig::sweep(queries, seed),
        other => bail!("unknown preset {other:?} (expected benchmark or sweep)"),
    };
    let fixture = synthetic::generate(&config)?;
    let paths = fixture.write(out)?;
    let name = |p: &Path| p.file_name().expect("fixture file").to_string_lossy().into_owned();
    let mut toml = format!(
        "[gallery]\nmanifest = \"{}\"\ndetections = \"{}\"\n\n[embeddings]\ncrops = \"{}\"\ntexts = \"{}\"\nscenes = \"{}\"\n\n[retrieval]\nqueries = \"{}\"\n",
        name(&paths.manifest),
        name(&paths.detections),
        name(&paths.crop_embeddings),
        name(&paths.text_embeddings),
        name(&paths.scene_embeddings),
        name(&paths.queries),
    );
    if let Some(spec) = script {
        let mock: MockSpec = spec.parse()?;
        let ranker = mock.build(Some(&fixture.queries), &fixture.gallery, 0.5)?;
        let p = sap_core::Pipeline::new(
            fixture.gallery.clone(),
            &fixture.crop_embeddings,
            &fixture.text_embeddings,
            ranker.clone(),
            Default::default(),
        )?;
        let entries = record_responses(&p, &fixture.queries, ranker.as_ref())?;
        let lines: String = entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entries serialize") + "\n")
            .collect();
        fs::write(out.join("responses.jsonl"), lines)?;
        toml.push_str("\n[ranker]\nmock = \"scripted:responses.jsonl\"\n");
    }
    fs::write(out.join("sap.toml"), toml)?;
    outln!(
        "wrote {} images, {} crops, {} queries to {}",
        fixture.gallery.images().len(),
        fixture.gallery.crops().len(),
        fixture.queries.len(),
        out.display()
    );
    Ok(())
}
