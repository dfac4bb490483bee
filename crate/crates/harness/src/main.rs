use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use cjt_core::error::Error;
use cjt_core::jointree::{JoinGraph, QuerySpec};
use cjt_core::manager::{GraphEntry, ManagerConfig};
use cjt_core::olap::build_cube;
use cjt_core::sqlgen::Naming;
use cjt_core::synth::{gen_chain, ChainParams};
use cjt_core::Result;
use cjt_harness::bench::{bench_augment, bench_budget, bench_chain, bench_cube, budget_queries};
use cjt_harness::plot::step_chart;
use cjt_harness::report::{write_graph, write_report};
use cjt_harness::sql_scripts;
use cjt_harness::workload::{run_workload, Workload};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "cjt", version, about = "Factorized dashboard query engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load a graph document and print its hypertree.
    Load { graph: PathBuf },
    /// Write a synthetic chain graph as CSV files plus graph.json.
    Gen {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Relative CSV paths in posted graphs resolve against this.
        #[arg(long, default_value = ".")]
        data_root: PathBuf,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    #[command(subcommand)]
    Bench(Bench),
    /// Write SQL scripts for a query.
    Sqlgen {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// Previous query whose calibrated tables the plan may reuse.
        #[arg(long)]
        prev: Option<PathBuf>,
        #[arg(long, default_value = cjt_core::sqlgen::DEFAULT_PREFIX)]
        prefix: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a report as an SVG step chart.
    Plot {
        report: PathBuf,
        #[arg(long, default_value = "budget")]
        x: String,
        #[arg(long, default_value = "computed")]
        y: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Copy)]
struct ChainArgs {
    #[arg(long, default_value_t = 4)]
    r: usize,
    #[arg(long, default_value_t = 2)]
    f: usize,
    #[arg(long, default_value_t = 3)]
    d: usize,
}

#[derive(Subcommand)]
enum Bench {
    /// Factorized vs naive row counts on chains of growing length.
    Chain {
        #[arg(long, default_value_t = 2)]
        r_min: usize,
        #[arg(long, default_value_t = 8)]
        r: usize,
        #[arg(long, default_value_t = 10)]
        f: usize,
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest full join the brute-force run may materialize.
        #[arg(long, default_value_t = 2_000_000)]
        oracle_cap: usize,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Replay a workload file in every mode it lists.
    Workload {
        file: PathBuf,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Cuboids answered from pivots of growing arity.
    Cube {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long, default_value_t = 2)]
        h: usize,
        #[arg(long, default_value_t = 2)]
        k_max: usize,
        #[arg(long, default_value_t = 1 << 24)]
        row_budget: usize,
        #[arg(long)]
        no_check: bool,
        /// Also write every cuboid of arity ≤ h as CSV here.
        #[arg(long)]
        export: Option<PathBuf>,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Rank seeded augmentation candidates.
    Augment {
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        rows: usize,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Next-query cost against think-time budget.
    Budget {
        #[command(flatten)]
        chain: ChainArgs,
        /// Query files overriding the built-in dashboard/first/next queries.
        #[arg(long)]
        dashboard: Option<PathBuf>,
        #[arg(long)]
        first: Option<PathBuf>,
        #[arg(long)]
        next: Option<PathBuf>,
        #[arg(long, default_value_t = 1 << 24)]
        oracle_budget: usize,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(serde_json::from_str(&text)?)
}

fn written(json: PathBuf, csv: PathBuf, records: usize, extra: Value) -> Value {
    let mut v = json!({ "json": json, "csv": csv, "records": records });
    if let (Some(o), Value::Object(e)) = (v.as_object_mut(), extra) {
        o.extend(e);
    }
    v
}

fn chain_graph(c: ChainArgs, seed: u64) -> Result<JoinGraph> {
    gen_chain(ChainParams::new(c.r, c.f, c.d), seed)
}

fn run(cmd: Cmd) -> Result<Value> {
    match cmd {
        Cmd::Load { graph } => {
            let g = JoinGraph::load(&graph)?;
            let e = GraphEntry::new(g)?;
            let relations: Vec<Value> = e
                .graph
                .relations()
                .map(|r| json!({ "name": r.name, "rows": r.versions[&r.default_version].rows.len(), "versions": r.versions.keys().collect::<Vec<_>>() }))
                .collect();
            let bags: Vec<Value> =
                e.jt.bags().iter().map(|b| json!({ "id": b.id, "attrs": b.attrs.iter().map(|a| a.to_string()).collect::<Vec<_>>(), "relations": b.relations })).collect();
            Ok(json!({ "graph_id": e.id, "relations": relations, "bags": bags, "edges": e.jt.edges() }))
        }
        Cmd::Gen { chain, seed, out } => {
            let g = chain_graph(chain, seed.unwrap_or(0))?;
            let path = write_graph(&g, &out)?;
            Ok(json!({ "graph": path, "relations": g.relation_names() }))
        }
        Cmd::Serve { host, port, data_root, static_dir } => serve(&host, port, data_root, static_dir),
        Cmd::Bench(b) => bench(b),
        Cmd::Sqlgen { graph, query, prev, prefix, out } => {
            let entry = Arc::new(GraphEntry::new(JoinGraph::load(&graph)?)?);
            let q: QuerySpec = read_json(&query)?;
            let p: Option<QuerySpec> = prev.as_deref().map(read_json).transpose()?;
            let naming = Naming::new(&entry.id).with_prefix(&prefix);
            std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
            let mut files = Vec::new();
            for (name, text) in sql_scripts(&entry, &q, p.as_ref(), &naming)? {
                let path = out.join(name);
                std::fs::write(&path, text).map_err(|source| Error::Io { path: path.clone(), source })?;
                files.push(path);
            }
            Ok(json!({ "files": files }))
        }
        Cmd::Plot { report, x, y, out } => {
            let doc: Value = read_json(&report)?;
            let records = doc["records"].as_array().ok_or_else(|| Error::InvalidParameter(format!("{} has no records", report.display())))?;
            let mut points = Vec::with_capacity(records.len());
            for r in records {
                let get = |k: &str| {
                    r[k].as_f64().ok_or_else(|| Error::InvalidParameter(format!("record field `{k}` is missing or not numeric")))
                };
                points.push((get(&x)?, get(&y)?));
            }
            let title = doc["suite"].as_str().unwrap_or("report").to_string();
            std::fs::write(&out, step_chart(&points, &title, &x, &y)).map_err(|source| Error::Io { path: out.clone(), source })?;
            Ok(json!({ "svg": out, "points": points.len() }))
        }
    }
}

fn bench(b: Bench) -> Result<Value> {
    match b {
        Bench::Chain { r_min, r, f, d, seed, oracle_cap, out } => {
            let recs = bench_chain(r_min, r, f, d, seed, oracle_cap)?;
            let params = json!({ "r_min": r_min, "r": r, "f": f, "d": d, "seed": seed, "oracle_cap": oracle_cap });
            let (j, c) = write_report(&out, "chain", &params, &recs)?;
            let ratio = recs.last().map(|x| x.ratio);
            Ok(written(j, c, recs.len(), json!({ "ratio_at_max_r": ratio })))
        }
        Bench::Workload { file, out } => {
            let (w, g) = Workload::load(&file)?;
            let rep = run_workload(&g, &w)?;
            let params = json!({ "workload": file, "graph_id": rep.graph_id, "bags": rep.bags, "modes": rep.modes, "answers_agree": rep.answers_agree, "mismatches": rep.mismatches });
            let (j, c) = write_report(&out, "workload", &params, &rep.records)?;
            if !rep.answers_agree {
                return Err(Error::InvalidQuery(format!("modes disagree: {}", rep.mismatches.join("; "))));
            }
            Ok(written(j, c, rep.records.len(), json!({ "answers_agree": true })))
        }
        Bench::Cube { chain, h, k_max, row_budget, no_check, export, out } => {
            let entry = Arc::new(GraphEntry::new(chain_graph(chain, 0)?)?);
            let recs = bench_cube(&entry, h, k_max, row_budget, !no_check)?;
            let params = json!({ "r": chain.r, "f": chain.f, "d": chain.d, "h": h, "k_max": k_max });
            let (j, c) = write_report(&out, "cube", &params, &recs)?;
            let mut exported = 0;
            if let Some(dir) = export {
                std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
                let cube = build_cube(&entry, &QuerySpec::count(), h, None, row_budget)?;
                for (attrs, rel) in &cube.cuboids {
                    let name = if attrs.is_empty() { "all".to_string() } else { attrs.join("_") };
                    let path = dir.join(format!("cuboid_{name}.csv"));
                    let f = std::fs::File::create(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
                    rel.write_csv(f)?;
                    exported += 1;
                }
            }
            Ok(written(j, c, recs.len(), json!({ "exported": exported })))
        }
        Bench::Augment { n, seed, rows, out } => {
            let recs = bench_augment(n, seed, rows)?;
            let (j, c) = write_report(&out, "augment", &json!({ "n": n, "seed": seed, "rows": rows }), &recs)?;
            Ok(written(j, c, recs.len(), json!({ "best": recs.first().map(|r| &r.candidate) })))
        }
        Bench::Budget { chain, dashboard, first, next, oracle_budget, out } => {
            let g = chain_graph(chain, 0)?;
            let (mut dash, mut q1, mut q2) = budget_queries(chain.r);
            for (path, q) in [(dashboard, &mut dash), (first, &mut q1), (next, &mut q2)] {
                if let Some(p) = path {
                    *q = read_json(&p)?;
                }
            }
            let recs = bench_budget(&g, &dash, &q1, &q2, oracle_budget)?;
            let params = json!({ "r": chain.r, "f": chain.f, "d": chain.d, "dashboard": dash, "first": q1, "next": q2 });
            let (j, c) = write_report(&out, "budget", &params, &recs)?;
            Ok(written(j, c, recs.len(), json!({})))
        }
    }
}

fn serve(host: &str, port: u16, data_root: PathBuf, static_dir: Option<PathBuf>) -> Result<Value> {
    let rt = tokio::runtime::Runtime::new().map_err(|source| Error::Io { path: "<runtime>".into(), source })?;
    rt.block_on(async {
        let addr = format!("{host}:{port}");
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|source| Error::Io { path: addr.clone().into(), source })?;
        let local = listener.local_addr().map_err(|source| Error::Io { path: addr.clone().into(), source })?;
        println!("{}", json!({ "listening": local.to_string(), "port": local.port() }));
        let config = cjt_server::ServerConfig { manager: ManagerConfig::from_env()?, data_root, static_dir };
        cjt_server::serve(listener, config).await.map_err(|source| Error::Io { path: addr.into(), source })?;
        Ok(Value::Null)
    })
}

fn fail(code: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": { "code": code, "message": message } }));
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim()),
    };
    match run(cli.cmd) {
        Ok(Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.code(), &e.to_string()),
    }
}
