use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use ordepth_client::Client;
use ordepth_core::annotation::{binary_insertion_bound, check_transitivity, Answer};
use ordepth_core::api::{AnswerRequest, ItemRegistry};
use ordepth_core::geometry::Pose3D;
use ordepth_core::io::write_jsonl;
use ordepth_core::supervision::{relations_from_depths, Relation, RelationSet, DEFAULT_TIE_THRESHOLD_MM};
use ordepth_core::synth::{annotate, annotation_cost_study, CostStudy, PoseDistribution, SimulatedAnnotator};
use ordepth_service::{ServeConfig, Server, SessionStore};
use serde::{Deserialize, Serialize};

use crate::{default_data_dir, write_output, CmdResult, Failure};

/// Mean questions per pose reported for human annotators on 14 joints.
const REFERENCE_MEAN_QUESTIONS: f64 = 17.0;

#[derive(Debug, Args)]
pub struct AnnotatorArgs {
    /// Probability of swapping a strict answer.
    #[arg(long, default_value_t = 0.0)]
    error_rate: f64,
    /// Probability of answering "ambiguous".
    #[arg(long, default_value_t = 0.0)]
    ambiguous_rate: f64,
    /// Depth difference (mm) below which the annotator answers "same".
    #[arg(long, default_value_t = DEFAULT_TIE_THRESHOLD_MM)]
    tie_threshold: f64,
}

impl AnnotatorArgs {
    fn annotator(&self) -> Result<SimulatedAnnotator, Failure> {
        let a = SimulatedAnnotator {
            tie_threshold_mm: self.tie_threshold,
            error_rate: self.error_rate,
            ambiguous_rate: self.ambiguous_rate,
        };
        a.validate()?;
        Ok(a)
    }
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Item registry written by gen-data; defaults to $ORDEPTH_DATA_DIR/registry.json.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Base URL of a running server; an embedded server is started otherwise.
    #[arg(long, conflicts_with = "in_process")]
    server: Option<String>,
    /// Drive sessions in process without HTTP.
    #[arg(long)]
    in_process: bool,
    /// Annotate only the first N items.
    #[arg(long)]
    items: Option<usize>,
    #[command(flatten)]
    annotator: AnnotatorArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes one JSON record per session.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-read the output and check every exported relation set.
    #[arg(long)]
    validate: bool,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long, default_value_t = 10_000)]
    poses: usize,
    /// Annotate the first N joints of the skeleton.
    #[arg(long, default_value_t = 14)]
    joints: usize,
    #[command(flatten)]
    annotator: AnnotatorArgs,
    /// Insert joints in a seeded random order instead of root outward.
    #[arg(long)]
    shuffled: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes one CSV row per pose.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Writes the full study as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Fails when the mean question count exceeds this.
    #[arg(long)]
    max_mean: Option<f64>,
    /// Fails when pooled accuracy on strict pairs falls below this.
    #[arg(long)]
    min_accuracy: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, env = "ORDEPTH_PORT", default_value_t = 8080)]
    port: u16,
    /// Session logs go to DIR/sessions.
    #[arg(long, env = "ORDEPTH_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Defaults to DATA_DIR/registry.json.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Static UI bundle served at /.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Keep sessions in memory only.
    #[arg(long)]
    ephemeral: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    session: String,
    /// Defaults to http://127.0.0.1:$ORDEPTH_PORT.
    #[arg(long)]
    server: Option<String>,
    #[arg(long, env = "ORDEPTH_PORT", default_value_t = 8080)]
    port: u16,
    /// Writes the relation set as JSON; printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One simulated session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub item_id: String,
    pub session_id: String,
    pub questions: usize,
    pub ordering: Vec<Vec<usize>>,
    pub relations: RelationSet,
    pub transitive: bool,
    pub strict_pairs: usize,
    pub correct: usize,
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn truth_of(reg: &ItemRegistry, item_id: &str) -> Result<Pose3D, Failure> {
    reg.get(item_id)
        .and_then(|i| i.pose_3d.clone())
        .ok_or_else(|| Failure::Usage(anyhow::anyhow!("item {item_id} has no 3D ground truth in the registry")))
}

fn score(
    item_id: String,
    session_id: String,
    questions: usize,
    ordering: Vec<Vec<usize>>,
    relations: RelationSet,
    truth: &RelationSet,
) -> SimRecord {
    let (mut strict, mut correct) = (0, 0);
    for p in truth.pairs() {
        if p.r != Relation::Same {
            strict += 1;
            if relations.get(p.i, p.j) == Some(p.r) {
                correct += 1;
            }
        }
    }
    SimRecord {
        item_id,
        session_id,
        questions,
        ordering,
        transitive: check_transitivity(&relations).is_ok(),
        relations,
        strict_pairs: strict,
        correct,
    }
}

async fn sim_http(client: &Client, reg: &ItemRegistry, ids: &[String], ann: &SimulatedAnnotator, seed: u64) -> Result<Vec<SimRecord>, Failure> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let pose = truth_of(reg, id)?;
        let session = client.create_session(id).await?.session_id;
        let done = loop {
            let q = client.question(&session).await?;
            let Some(p) = q.question else { break q };
            let answer: Answer = annotate(ann, &pose, p.i, p.j, seed)?;
            let req = AnswerRequest { seq: Some(q.question_count), ..AnswerRequest::new(answer) };
            client.answer_raw(&session, &req).await?;
        };
        let relations = client.relations(&session).await?;
        let truth = relations_from_depths(&pose.depths(), ann.tie_threshold_mm)?;
        out.push(score(id.clone(), session, done.question_count, done.ordering.unwrap_or_default(), relations, &truth));
    }
    Ok(out)
}

fn sim_in_process(store: &SessionStore, ids: &[String], ann: &SimulatedAnnotator, seed: u64) -> Result<Vec<SimRecord>, Failure> {
    let reg = store.registry();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let pose = truth_of(reg, id)?;
        let session = store.create(id)?.session_id;
        while let Some((i, j)) = store.snapshot(&session)?.next_question() {
            store.answer(&session, annotate(ann, &pose, i, j, seed)?, None)?;
        }
        let s = store.snapshot(&session)?;
        let relations = store.relations(&session)?;
        let truth = relations_from_depths(&pose.depths(), ann.tie_threshold_mm)?;
        out.push(score(id.clone(), session, s.question_count, s.final_ordering()?, relations, &truth));
    }
    Ok(out)
}

pub fn simulate(a: SimArgs) -> CmdResult {
    println!("seed: {}", a.seed);
    let ann = a.annotator.annotator()?;
    let path = a.registry.clone().unwrap_or_else(|| default_data_dir().join("registry.json"));
    let reg = load_registry(&path)?;
    let n = a.items.unwrap_or(reg.items.len()).min(reg.items.len());
    let ids: Vec<String> = reg.items[..n].iter().map(|i| i.item_id.clone()).collect();

    let records = if a.in_process {
        sim_in_process(&SessionStore::in_memory(reg.clone()), &ids, &ann, a.seed)?
    } else {
        let rt = runtime()?;
        rt.block_on(async {
            match &a.server {
                Some(url) => sim_http(&Client::new(url.clone()), &reg, &ids, &ann, a.seed).await,
                None => {
                    let server = Server::bind(ServeConfig {
                        addr: SocketAddr::from(([127, 0, 0, 1], 0)),
                        registry: reg.clone(),
                        data_dir: None,
                        ui_dir: None,
                    })
                    .await?;
                    let client = Client::new(format!("http://{}", server.local_addr()));
                    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
                    let handle = tokio::spawn(server.run_until(async {
                        let _ = stopped.await;
                    }));
                    let result = sim_http(&client, &reg, &ids, &ann, a.seed).await;
                    let _ = stop.send(());
                    let _ = handle.await;
                    result
                }
            }
        })?
    };

    let questions: usize = records.iter().map(|r| r.questions).sum();
    let strict: usize = records.iter().map(|r| r.strict_pairs).sum();
    let correct: usize = records.iter().map(|r| r.correct).sum();
    let intransitive = records.iter().filter(|r| !r.transitive).count();
    println!("sessions: {}", records.len());
    println!("mean questions: {:.2}", questions as f64 / records.len().max(1) as f64);
    println!(
        "accuracy on strict pairs: {:.4}",
        if strict == 0 { 1.0 } else { correct as f64 / strict as f64 }
    );
    println!("non-transitive exports: {intransitive}");
    if let Some(out) = &a.out {
        write_jsonl(out, &records)?;
        println!("wrote: {}", out.display());
        if a.validate {
            let back: Vec<SimRecord> = ordepth_core::io::read_jsonl(out)?;
            if back != records {
                return Err(Failure::Check("session records do not round-trip".into()));
            }
        }
    }
    if a.validate {
        for r in &records {
            r.relations
                .check_indices(reg.skeleton.joint_count())
                .map_err(|e| Failure::Check(format!("{}: {e}", r.session_id)))?;
        }
    }
    if intransitive > 0 {
        return Err(Failure::Check(format!("{intransitive} sessions exported non-transitive relations")));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CostRow {
    pose: usize,
    questions: usize,
    strict_pairs: usize,
    correct: usize,
    inverted: usize,
    exact: bool,
    transitive_truth: bool,
    exported_transitive: bool,
}

pub fn cost(a: CostArgs) -> CmdResult {
    println!("seed: {}", a.seed);
    let ann = a.annotator.annotator()?;
    let study: CostStudy =
        annotation_cost_study(&PoseDistribution::default(), &ann, a.joints, a.poses, a.seed, a.shuffled)?;
    let exhaustive = a.joints * a.joints.saturating_sub(1) / 2;
    let truth_ok: Vec<_> = study.records.iter().filter(|r| r.transitive_truth).collect();
    let exact = truth_ok.iter().filter(|r| r.exact).count();
    let exported = study.records.iter().filter(|r| r.exported_transitive).count();
    println!("poses: {}  joints: {}  order: {}", a.poses, a.joints, if a.shuffled { "shuffled" } else { "root-outward" });
    println!("mean questions: {:.2}", study.mean_questions());
    println!("median questions: {}", study.median_questions());
    println!("max questions: {}", study.max_questions());
    println!("exhaustive pairs: {exhaustive}");
    println!("binary insertion bound: {}", binary_insertion_bound(a.joints));
    println!("reference mean (human annotators, 14 joints): {REFERENCE_MEAN_QUESTIONS}");
    println!("accuracy on strict pairs: {:.4}", study.accuracy());
    println!("exact on transitive ground truth: {exact}/{}", truth_ok.len());
    println!("transitive exports: {exported}/{}", study.records.len());

    if let Some(path) = &a.csv {
        let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Runtime(e.into()))?;
        for r in &study.records {
            w.serialize(CostRow {
                pose: r.pose,
                questions: r.questions,
                strict_pairs: r.strict_pairs,
                correct: r.correct,
                inverted: r.inverted,
                exact: r.exact,
                transitive_truth: r.transitive_truth,
                exported_transitive: r.exported_transitive,
            })
            .map_err(|e| Failure::Runtime(e.into()))?;
        }
        w.flush().map_err(|e| Failure::Runtime(e.into()))?;
        println!("wrote: {}", path.display());
    }
    if let Some(path) = &a.json {
        write_output(path, &serde_json::to_string(&study).map_err(|e| Failure::Runtime(e.into()))?)?;
        println!("wrote: {}", path.display());
    }

    if exported != study.records.len() {
        return Err(Failure::Check(format!("{} non-transitive exports", study.records.len() - exported)));
    }
    if let Some(m) = a.max_mean.filter(|m| study.mean_questions() > *m) {
        return Err(Failure::Check(format!("mean questions {:.2} above {m}", study.mean_questions())));
    }
    if let Some(m) = a.min_accuracy.filter(|m| study.accuracy() < *m) {
        return Err(Failure::Check(format!("accuracy {:.4} below {m}", study.accuracy())));
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> CmdResult {
    let path = a.registry.clone().unwrap_or_else(|| a.data_dir.join("registry.json"));
    let registry = load_registry(&path)?;
    println!("seed: {}", registry.seed);
    let cfg = ServeConfig {
        addr: SocketAddr::new(a.host, a.port),
        registry,
        data_dir: (!a.ephemeral).then(|| a.data_dir.clone()),
        ui_dir: a.ui_dir.clone(),
    };
    let rt = runtime()?;
    rt.block_on(async {
        let server = Server::bind(cfg).await?;
        let store: Arc<SessionStore> = server.store();
        println!("listening on http://{}", server.local_addr());
        println!("items: {}  sessions: {}", store.registry().items.len(), store.session_count());
        server
            .run_until(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Failure::Runtime(e.into()))
    })
}

pub fn export(a: ExportArgs) -> CmdResult {
    let url = a.server.clone().unwrap_or_else(|| format!("http://127.0.0.1:{}", a.port));
    let rt = runtime()?;
    let relations = rt.block_on(Client::new(url).relations(&a.session))?;
    let json = serde_json::to_string_pretty(&relations).map_err(|e| Failure::Runtime(e.into()))?;
    match &a.out {
        Some(path) => {
            write_output(path, &json)?;
            println!("pairs: {}", relations.len());
            println!("wrote: {}", path.display());
        }
        None => println!("{json}"),
    }
    check_transitivity(&relations).map_err(|e| Failure::Check(format!("exported relations are not transitive: {e:?}")))
}

fn load_registry(path: &std::path::Path) -> Result<ItemRegistry, Failure> {
    ItemRegistry::load(path).map_err(|e| Failure::Usage(anyhow::anyhow!("{}: {e}", path.display())))
}
