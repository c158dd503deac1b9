use std::fs;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::rngs::OsRng;
use rand::RngCore;

use slq_core::bench::{self, BenchConfig, BenchReport, Distribution};
use slq_core::index::{
    build_index, load_delta, load_index, serialize_delta, serialize_index, BuildConfig, OwnerIndex,
    RanksFile, UpdateOutcome,
};
use slq_core::paillier::{
    keygen, public_key_from_bytes, public_key_to_bytes, secret_key_from_bytes, secret_key_to_bytes,
    PublicKey, DEFAULT_KEY_BITS,
};
use slq_core::protocol::{merge_results, ranks_to_coords, trapdoor};
use slq_core::service::{DapEndpoint, DspClient, DspServer, QueryRequest};
use slq_core::transport::tcp::{connect_dap, run_dap_server};
use slq_core::transport::{collect_share, DapConfig, DapService, DEFAULT_MAX_FRAME};

const PUBLIC_KEY_FILE: &str = "public.slqk";
const SECRET_KEY_FILE: &str = "secret.slqk";

#[derive(Parser)]
#[command(name = "slq", version, about = "Secure learned spatial index over Paillier ciphertexts")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a Paillier key pair.
    Keygen {
        #[arg(long, default_value_t = DEFAULT_KEY_BITS)]
        bits: u32,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a synthetic dataset (CSV, or binary for a .bin path).
    GenData {
        #[arg(long, default_value = "uni")]
        dist: Distribution,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and encrypt an index (writes .slq, .owner and .ranks).
    Build(BuildArgs),
    /// Run the key-holding assistant server.
    ServeDap {
        /// Key directory from `keygen`, or the secret key file itself.
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        listen: String,
        /// Serve connections one after another instead of one thread each.
        #[arg(long)]
        sequential: bool,
        /// Stop after this many connections.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the index-holding server that answers client queries.
    ServeDsp {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        pk: PathBuf,
        #[arg(long)]
        dap: String,
        #[arg(long)]
        listen: String,
        /// Update deltas to apply, in order, before serving.
        #[arg(long)]
        delta: Vec<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run one range query as a client.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        dsp: String,
        #[arg(long)]
        dap: String,
        /// Rectangle as "lo_1,..,lo_d,hi_1,..,hi_d".
        #[arg(long, allow_hyphen_values = true)]
        range: String,
        /// Published ranks file; defaults to the index path with a .ranks extension.
        #[arg(long)]
        ranks: Option<PathBuf>,
        #[arg(long)]
        record_transcript: Option<PathBuf>,
    },
    /// Insert or delete one point (owner side); writes a delta for the DSP.
    Update {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, allow_hyphen_values = true, conflicts_with = "delete")]
        insert: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        delete: Option<String>,
        /// Delta output; defaults to the index path with a .delta extension.
        #[arg(long)]
        delta_out: Option<PathBuf>,
    },
    /// Run a benchmark workload and write CSV reports.
    Bench {
        /// key = value settings file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra settings, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Run once per value, e.g. "b=4,8,16,32".
        #[arg(long)]
        sweep: Option<String>,
        /// Points file instead of a generated dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Summary CSV (one row per run).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-query CSV of the last run.
        #[arg(long)]
        rows: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pk: PathBuf,
    #[arg(long, default_value_t = 8)]
    b: usize,
    #[arg(long, default_value_t = 300)]
    m: usize,
    #[arg(long, default_value_t = 0.1)]
    dummy_ratio: f64,
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Store leaf predictors in plain order behind their router.
    #[arg(long)]
    no_fuzzy: bool,
    #[arg(long)]
    out: PathBuf,
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn read_pk(path: &Path) -> Result<PublicKey> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(public_key_from_bytes(&bytes)?)
}

fn read_ranks(path: &Path) -> Result<RanksFile> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| anyhow!("{v:?}: {e}")))
        .collect()
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| anyhow!("{addr} does not resolve"))
}

fn random_seed() -> [u8; 32] {
    let mut s = [0u8; 32];
    OsRng.fill_bytes(&mut s);
    s
}

fn write_owner_files(index: &Path, owner: &OwnerIndex, pk: &PublicKey) -> Result<()> {
    fs::write(sibling(index, "owner"), owner.to_json()?)?;
    fs::write(sibling(index, "ranks"), serde_json::to_vec(&RanksFile::of(owner, pk))?)?;
    Ok(())
}

fn cmd_build(a: BuildArgs) -> Result<()> {
    let pk = read_pk(&a.pk)?;
    let points = bench::load_points(&a.data)?;
    let cfg = BuildConfig {
        b: a.b,
        m: a.m,
        dummy_ratio: a.dummy_ratio,
        epochs: a.epochs,
        seed: a.seed,
        fuzzy: !a.no_fuzzy,
        ..BuildConfig::default()
    };
    let built = build_index(&pk, &points, &cfg, &mut OsRng)?;
    fs::write(&a.out, serialize_index(&built.dsp))?;
    write_owner_files(&a.out, &built.owner, &pk)?;
    println!(
        "indexed {} points into {} buckets ({} nodes); wrote {}",
        points.len(),
        built.dsp.buckets.len(),
        built.dsp.nodes.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_query(
    index: &Path,
    dsp: &str,
    dap: &str,
    range: &str,
    ranks: Option<PathBuf>,
    record: Option<PathBuf>,
) -> Result<()> {
    let ranks = read_ranks(&ranks.unwrap_or_else(|| sibling(index, "ranks")))?;
    let pk = ranks.public_key()?;
    let d = ranks.ranks.d();
    let v = parse_floats(range)?;
    if v.len() != 2 * d {
        bail!("range needs {} numbers for a {d}-dimensional index", 2 * d);
    }
    let (lo, hi) = v.split_at(d);
    let q = trapdoor(&pk, &ranks.ranks, lo, hi, &mut OsRng)?;
    let mut client = DspClient::connect(dsp, &pk)?;
    let reply = client.query(&QueryRequest {
        query: q,
        want_transcript: record.is_some(),
    })?;
    client.close()?;
    let masked = collect_share(connect_dap(dap, &pk, DEFAULT_MAX_FRAME)?, &pk, reply.token)?;
    let points = ranks_to_coords(&ranks.ranks, &merge_results(&masked, &reply.masks, d)?)?;
    if let (Some(path), Some(t)) = (record, &reply.transcript) {
        fs::write(path, t.to_text())?;
    }
    for p in &points {
        let row: Vec<String> = p.iter().map(|x| x.to_string()).collect();
        println!("{}", row.join(","));
    }
    info!("{} results", points.len());
    Ok(())
}

fn cmd_update(index: &Path, insert: Option<String>, delete: Option<String>, delta_out: Option<PathBuf>) -> Result<()> {
    let owner_path = sibling(index, "owner");
    let mut owner = OwnerIndex::from_json(&fs::read(&owner_path).with_context(|| format!("reading {}", owner_path.display()))?)?;
    let pk = read_ranks(&sibling(index, "ranks"))?.public_key()?;
    let mut dsp = load_index(&pk, &fs::read(index)?)?;
    let delta = match (insert, delete) {
        (Some(p), None) => owner.insert(&mut dsp, &parse_floats(&p)?, &mut OsRng)?,
        (None, Some(p)) => match owner.delete(&mut dsp, &parse_floats(&p)?, &mut OsRng)? {
            UpdateOutcome::Applied(d) => d,
            UpdateOutcome::NotFound => bail!("no live point at {p}"),
        },
        _ => bail!("give exactly one of --insert or --delete"),
    };
    fs::write(index, serialize_index(&dsp))?;
    write_owner_files(index, &owner, &pk)?;
    let out = delta_out.unwrap_or_else(|| sibling(index, "delta"));
    fs::write(&out, serialize_delta(&pk, &delta))?;
    println!("{} ops written to {}", delta.ops.len(), out.display());
    if owner.should_rebuild() {
        println!("update volume passed the rebuild threshold; rebuild recommended");
    }
    Ok(())
}

fn cmd_bench(
    config: Option<PathBuf>,
    set: Vec<String>,
    sweep: Option<String>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    rows: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = match &config {
        Some(p) => BenchConfig::from_kv(BufReader::new(fs::File::open(p)?))?,
        None => BenchConfig::default(),
    };
    for kv in &set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set wants KEY=VALUE, got {kv}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let runs: Vec<BenchConfig> = match &sweep {
        None => vec![cfg.clone()],
        Some(s) => {
            let (k, vs) = s.split_once('=').ok_or_else(|| anyhow!("--sweep wants KEY=V1,V2,.."))?;
            vs.split(',')
                .map(|v| {
                    let mut c = cfg.clone();
                    c.set(k.trim(), v.trim())?;
                    Ok(c)
                })
                .collect::<Result<_>>()?
        }
    };
    let points = data.as_deref().map(bench::load_points).transpose()?;
    let mut reports = Vec::new();
    for c in &runs {
        let rep = match &points {
            Some(p) => {
                let kp = keygen(c.key_bits, &mut OsRng)?;
                bench::run_bench_with(c, &kp, p)?
            }
            None => bench::run_bench(c)?,
        };
        print!("{}", rep.summary_text());
        reports.push(rep);
    }
    match out {
        Some(p) => BenchReport::write_summary_csv(&reports, fs::File::create(p)?)?,
        None => BenchReport::write_summary_csv(&reports, std::io::stdout())?,
    }
    if let (Some(p), Some(last)) = (rows, reports.last()) {
        last.write_rows_csv(fs::File::create(p)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Keygen { bits, out_dir } => {
            let kp = keygen(bits, &mut OsRng)?;
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join(PUBLIC_KEY_FILE), public_key_to_bytes(&kp.pk))?;
            fs::write(out_dir.join(SECRET_KEY_FILE), secret_key_to_bytes(&kp))?;
            println!("{bits}-bit key {} written to {}", slq_core::paillier::hex(kp.pk.key_id()), out_dir.display());
        }
        Cmd::GenData { dist, n, d, seed, out } => {
            let pts = bench::gen_dataset(dist, n, d, seed);
            if out.extension().is_some_and(|e| e == "bin") {
                fs::write(&out, bench::points_to_binary(&pts))?;
            } else {
                bench::write_points_csv(std::io::BufWriter::new(fs::File::create(&out)?), &pts)?;
            }
        }
        Cmd::Build(a) => cmd_build(a)?,
        Cmd::ServeDap {
            keys,
            listen,
            sequential,
            limit,
        } => {
            let path = if keys.is_dir() { keys.join(SECRET_KEY_FILE) } else { keys };
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let kp = secret_key_from_bytes(&bytes)?;
            let mut cfg = DapConfig::with_seed(random_seed());
            cfg.threaded = !sequential;
            let listener = TcpListener::bind(&listen)?;
            println!("DAP listening on {}", listener.local_addr()?);
            run_dap_server(DapService::new(kp, cfg), listener, limit)?;
        }
        Cmd::ServeDsp {
            index,
            pk,
            dap,
            listen,
            delta,
            limit,
        } => {
            let pk = read_pk(&pk)?;
            let mut idx = load_index(&pk, &fs::read(&index)?)?;
            for p in &delta {
                let dl = load_delta(&pk, &idx.meta, &fs::read(p)?)?;
                slq_core::index::apply_delta(&mut idx, &dl)?;
            }
            let server = DspServer::new(idx, DapEndpoint::Tcp(resolve(&dap)?), random_seed());
            let listener = TcpListener::bind(&listen)?;
            println!("DSP listening on {}", listener.local_addr()?);
            server.run(listener, limit)?;
        }
        Cmd::Query {
            index,
            dsp,
            dap,
            range,
            ranks,
            record_transcript,
        } => cmd_query(&index, &dsp, &dap, &range, ranks, record_transcript)?,
        Cmd::Update {
            index,
            insert,
            delete,
            delta_out,
        } => cmd_update(&index, insert, delete, delta_out)?,
        Cmd::Bench {
            config,
            set,
            sweep,
            data,
            out,
            rows,
        } => cmd_bench(config, set, sweep, data, out, rows)?,
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
