//! Operator entry point: build stores from CSV, run query/insert workloads
//! at a fixed batch rate, and emit analysis artifacts as CSV.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use veilstore::backend::{serve, FileBackend, KvBackend, MemoryBackend, TcpBackend};
use veilstore::crypto::{sealed_len, BucketLabel};
use veilstore::domerge::{compute_bin_capacity, theoretical_bin_capacity};
use veilstore::dynamize::{DynConfig, DynamicStore, QueryOutcome};
use veilstore::leakage::{
    classify_reads, latency_in_batches, matrix_to_csv, ror_crda_distinguish, rsd, sample_index,
    transition_matrix, uniformity_test, AccessTrace, MarkovModel, TraceOp, TraceSink,
    zipf_weights,
};
use veilstore::pool::WeightPolicy;
use veilstore::proxy::{ReleaseStrategy, SmoothedStore};
use veilstore::rangestore::Record;
use veilstore::rng;

#[derive(Parser)]
#[command(name = "veilstore", about = "Frequency-smoothed encrypted data store")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run parameters; every flag overrides the same key in `--config` when both
/// are given. Defaults: eps=1.0, lambda=512, theta=5, alpha=2, Z=512, k=8.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Line-oriented `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Key domain upper bound N (keys live in [1, N]).
    #[arg(long)]
    domain: Option<u64>,
    /// Fixed value length L in bytes.
    #[arg(long)]
    value_len: Option<usize>,
    /// Records per bucket Z.
    #[arg(long)]
    bucket_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    theta: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// Server slots accessed per batch (default ceil(3*n*sigma/Z), sigma=0.5%).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Batches per second; 0 means as fast as possible.
    #[arg(long)]
    rate: Option<f64>,
    /// Pool weight policy: constant | linear | exponential.
    #[arg(long)]
    weight_policy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Backend: memory | a file path | tcp:host:port.
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Debug, Clone)]
struct RunConfig {
    domain: u64,
    value_len: usize,
    z: usize,
    alpha: f64,
    theta: usize,
    eps: f64,
    lambda: f64,
    k: usize,
    batch_size: Option<usize>,
    rate: f64,
    policy: WeightPolicy,
    seed: u64,
    backend: String,
}

impl RunConfig {
    fn resolve(args: &ConfigArgs) -> Result<Self, String> {
        let mut file: HashMap<String, String> = HashMap::new();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path).map_err(|e| format!("config: {e}"))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| format!("config line {}: expected key = value", lineno + 1))?;
                file.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        fn pick<T: std::str::FromStr>(
            flag: &Option<T>,
            file: &HashMap<String, String>,
            key: &str,
            default: T,
        ) -> Result<T, String>
        where
            T: Clone,
        {
            if let Some(v) = flag {
                return Ok(v.clone());
            }
            match file.get(key) {
                Some(raw) => raw
                    .parse()
                    .map_err(|_| format!("config key {key}: cannot parse {raw:?}")),
                None => Ok(default),
            }
        }
        let policy_name = pick(&args.weight_policy, &file, "weightPolicy", "constant".into())?;
        let policy = match policy_name.as_str() {
            "constant" => WeightPolicy::Constant,
            "linear" => WeightPolicy::Linear { rate: 1.0 },
            "exponential" => WeightPolicy::Exponential { rate: 2.0 },
            other => return Err(format!("unknown weight policy {other:?}")),
        };
        Ok(RunConfig {
            domain: pick(&args.domain, &file, "N", 100_000)?,
            value_len: pick(&args.value_len, &file, "L", 32)?,
            z: pick(&args.bucket_size, &file, "Z", 512)?,
            alpha: pick(&args.alpha, &file, "alpha", 2.0)?,
            theta: pick(&args.theta, &file, "theta", 5)?,
            eps: pick(&args.eps, &file, "eps", 1.0)?,
            lambda: pick(&args.lambda, &file, "lambda", 512.0)?,
            k: pick(&args.k, &file, "k", 8)?,
            batch_size: match args.batch_size {
                Some(b) => Some(b),
                None => file
                    .get("batchSize")
                    .map(|raw| raw.parse().map_err(|_| "bad batchSize".to_string()))
                    .transpose()?,
            },
            rate: pick(&args.rate, &file, "batchesPerSecond", 0.0)?,
            policy,
            seed: pick(&args.seed, &file, "rngSeed", 7)?,
            backend: pick(&args.backend, &file, "backend", "memory".into())?,
        })
    }

    /// Default batch size from configured selectivity sigma = 0.5%.
    fn batch_size_for(&self, n: usize) -> usize {
        self.batch_size
            .unwrap_or_else(|| ((3.0 * n as f64 * 0.005 / self.z as f64).ceil() as usize).max(1))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute the merge bin capacity and its theoretical bound.
    Capacity {
        #[arg(long)]
        z: u64,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ingest a `key,value_hex` CSV, build the store, and report storage stats.
    Setup {
        #[arg(long)]
        csv: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Range query `l:r` over a store built from --csv.
    Query {
        #[arg(long)]
        range: String,
        #[arg(long)]
        csv: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Point lookup.
    Get {
        #[arg(long)]
        key: u64,
        #[arg(long)]
        csv: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Point write (readback verifies the value).
    Put {
        #[arg(long)]
        key: u64,
        /// Value in hex; padded or truncated to the configured length.
        #[arg(long)]
        value: String,
        #[arg(long)]
        csv: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Insert an additional CSV into a store built from --csv.
    Insert {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a key-value workload and report per-op latency in batches.
    Bench {
        /// markov | uniform:<n> | zipf:<n>:<s>
        #[arg(long)]
        workload: String,
        #[arg(long, default_value_t = 10_000)]
        ops: usize,
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the server access trace here (CSV slot,label_hex,op).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analyze an access trace: frequencies, RSD, uniformity, ROR-CRDA.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        /// Write the first-order transition matrix here.
        #[arg(long)]
        matrix_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a persistent store file over TCP.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        addr: String,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(msg) = run(cli.command) {
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}

fn emit(out: Option<PathBuf>, text: &str) -> Result<(), String> {
    match out {
        Some(path) => fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display())),
        None => {
            print!("{text}");
            std::io::stdout().flush().map_err(|e| e.to_string())
        }
    }
}

fn read_dataset(path: &PathBuf, value_len: usize) -> Result<Vec<(u64, Vec<u8>)>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("key") {
            continue;
        }
        let (key, hex) = line
            .split_once(',')
            .ok_or_else(|| format!("line {}: expected key,value_hex", lineno + 1))?;
        let key: u64 = key
            .trim()
            .parse()
            .map_err(|_| format!("line {}: bad key", lineno + 1))?;
        rows.push((key, decode_value(hex.trim(), value_len)?));
    }
    Ok(rows)
}

fn decode_value(hex: &str, value_len: usize) -> Result<Vec<u8>, String> {
    let mut bytes = Vec::with_capacity(value_len);
    let digits: Vec<u8> = hex.bytes().collect();
    for pair in digits.chunks(2) {
        let hi = (pair[0] as char).to_digit(16).ok_or("bad hex value")? as u8;
        let lo = if pair.len() == 2 {
            (pair[1] as char).to_digit(16).ok_or("bad hex value")? as u8
        } else {
            0
        };
        bytes.push(hi << 4 | lo);
    }
    bytes.resize(value_len, 0);
    bytes.truncate(value_len);
    Ok(bytes)
}

fn encode_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

enum AnyBackend {
    Memory(MemoryBackend),
    File(FileBackend),
    Tcp(TcpBackend),
}

impl KvBackend for AnyBackend {
    fn get_batch(&self, labels: &[BucketLabel]) -> veilstore::Result<Vec<Vec<u8>>> {
        match self {
            AnyBackend::Memory(b) => b.get_batch(labels),
            AnyBackend::File(b) => b.get_batch(labels),
            AnyBackend::Tcp(b) => b.get_batch(labels),
        }
    }
    fn put_batch(&self, entries: Vec<veilstore::backend::StoreEntry>) -> veilstore::Result<()> {
        match self {
            AnyBackend::Memory(b) => b.put_batch(entries),
            AnyBackend::File(b) => b.put_batch(entries),
            AnyBackend::Tcp(b) => b.put_batch(entries),
        }
    }
    fn remove_batch(&self, labels: &[BucketLabel]) -> veilstore::Result<()> {
        match self {
            AnyBackend::Memory(b) => b.remove_batch(labels),
            AnyBackend::File(b) => b.remove_batch(labels),
            AnyBackend::Tcp(b) => b.remove_batch(labels),
        }
    }
    fn entry_count(&self) -> usize {
        match self {
            AnyBackend::Memory(b) => b.entry_count(),
            AnyBackend::File(b) => b.entry_count(),
            AnyBackend::Tcp(b) => b.entry_count(),
        }
    }
}

fn open_backend(cfg: &RunConfig) -> Result<AnyBackend, String> {
    let bucket_bytes = cfg.z * Record::wire_len(cfg.value_len);
    match cfg.backend.as_str() {
        "memory" => Ok(AnyBackend::Memory(MemoryBackend::new(TraceSink::new()))),
        tcp if tcp.starts_with("tcp:") => {
            let addr = &tcp[4..];
            TcpBackend::connect(addr, sealed_len(bucket_bytes))
                .map(AnyBackend::Tcp)
                .map_err(|e| format!("tcp backend: {e}"))
        }
        path => FileBackend::open(PathBuf::from(path), TraceSink::new())
            .map(AnyBackend::File)
            .map_err(|e| format!("file backend: {e}")),
    }
}

fn build_store(
    cfg: &RunConfig,
    rows: Vec<(u64, Vec<u8>)>,
) -> Result<DynamicStore<AnyBackend>, String> {
    let backend = open_backend(cfg)?;
    let n = rows.len();
    let mut store = DynamicStore::new(
        backend,
        DynConfig {
            z: cfg.z,
            value_len: cfg.value_len,
            domain: cfg.domain,
            alpha: cfg.alpha,
            theta: cfg.theta,
            policy: cfg.policy,
            k: cfg.k,
            eps: cfg.eps,
            lambda: cfg.lambda,
            batch_size: cfg.batch_size_for(n),
            seed: cfg.seed,
        },
    )
    .map_err(|e| e.to_string())?;
    store.bulk_load(rows).map_err(|e| e.to_string())?;
    Ok(store)
}

/// Drives batches at the configured rate until the query completes.
fn run_query(
    store: &mut DynamicStore<AnyBackend>,
    rate: f64,
    l: u64,
    r: u64,
) -> Result<Vec<Record>, String> {
    let outcome = store.range_query(l, r).map_err(|e| e.to_string())?;
    let id = match outcome {
        QueryOutcome::Done(res) => return Ok(res.records),
        QueryOutcome::Pending(id) => id,
    };
    let tick = if rate > 0.0 {
        Some(Duration::from_secs_f64(1.0 / rate))
    } else {
        None
    };
    loop {
        let started = Instant::now();
        for done in store.run_batch().map_err(|e| e.to_string())? {
            if done.id == id {
                return Ok(done.records);
            }
        }
        if let Some(tick) = tick {
            std::thread::sleep(tick.saturating_sub(started.elapsed()));
        }
    }
}

fn records_csv(records: &[Record]) -> String {
    let mut out = String::from("key,value_hex\n");
    for rec in records {
        out.push_str(&format!("{},{}\n", rec.key, encode_hex(&rec.value)));
    }
    out
}

fn parse_range(range: &str) -> Result<(u64, u64), String> {
    let (l, r) = range
        .split_once(':')
        .ok_or_else(|| format!("range {range:?}: expected l:r"))?;
    Ok((
        l.parse().map_err(|_| "bad range lower bound")?,
        r.parse().map_err(|_| "bad range upper bound")?,
    ))
}

fn run(cmd: Command) -> Result<(), String> {
    match cmd {
        Command::Capacity { z, eps, lambda, out } => {
            let result = compute_bin_capacity(z, eps, lambda).map_err(|e| e.to_string())?;
            let xi_t = theoretical_bin_capacity(eps, lambda);
            let text = format!(
                "xi_c,xi_t,failure_prob,within_theoretical_bound\n{},{},{:.6e},{}\n",
                result.xi,
                xi_t,
                result.failure_prob,
                result.xi <= xi_t
            );
            emit(out, &text)
        }
        Command::Setup { csv, config, out } => {
            let cfg = RunConfig::resolve(&config)?;
            let rows = read_dataset(&csv, cfg.value_len)?;
            let n = rows.len();
            let store = build_store(&cfg, rows)?;
            let text = format!(
                "metric,value\nrecords,{}\nlive_buckets,{}\nserver_entries,{}\nproxy_state_bytes,{}\nbin_capacity,{}\n",
                n,
                store.live_buckets(),
                store.backend().entry_count(),
                store.proxy_state_bytes(),
                store.bin_capacity(),
            );
            emit(out, &text)
        }
        Command::Query { range, csv, config, out } => {
            let cfg = RunConfig::resolve(&config)?;
            let (l, r) = parse_range(&range)?;
            let rows = read_dataset(&csv, cfg.value_len)?;
            let mut store = build_store(&cfg, rows)?;
            let records = run_query(&mut store, cfg.rate, l, r)?;
            emit(out, &records_csv(&records))
        }
        Command::Get { key, csv, config, out } => {
            let cfg = RunConfig::resolve(&config)?;
            let rows = read_dataset(&csv, cfg.value_len)?;
            let mut store = build_store(&cfg, rows)?;
            let records = run_query(&mut store, cfg.rate, key, key)?;
            emit(out, &records_csv(&records))
        }
        Command::Put { key, value, csv, config, out } => {
            let cfg = RunConfig::resolve(&config)?;
            let rows = read_dataset(&csv, cfg.value_len)?;
            let mut store = build_store(&cfg, rows)?;
            let value = decode_value(&value, cfg.value_len)?;
            store.insert(key, value).map_err(|e| e.to_string())?;
            let records = run_query(&mut store, cfg.rate, key, key)?;
            emit(out, &records_csv(&records))
        }
        Command::Insert { csv, base, config, out } => {
            let cfg = RunConfig::resolve(&config)?;
            let rows = read_dataset(&base, cfg.value_len)?;
            let extra = read_dataset(&csv, cfg.value_len)?;
            let n = rows.len() + extra.len();
            let mut store = build_store(&cfg, rows)?;
            let mut rebuilds = 0usize;
            for (key, value) in extra {
                if store.insert(key, value).map_err(|e| e.to_string())?.is_some() {
                    rebuilds += 1;
                }
            }
            let text = format!(
                "metric,value\nrecords,{}\nrebuilds,{}\nlive_buckets,{}\neps_spent,{:.3}\n",
                n,
                rebuilds,
                store.live_buckets(),
                store.eps_spent(),
            );
            emit(out, &text)
        }
        Command::Bench { workload, ops, config, trace, out } => {
            let cfg = RunConfig::resolve(&config)?;
            bench(&workload, ops, &cfg, trace, out)
        }
        Command::Analyze { trace, matrix_out, seed, out } => {
            analyze(&trace, matrix_out, seed.unwrap_or(7), out)
        }
        Command::Serve { store, addr } => {
            let backend = FileBackend::open(store, TraceSink::new())
                .map_err(|e| format!("store: {e}"))?;
            let listener = TcpListener::bind(&addr).map_err(|e| format!("bind {addr}: {e}"))?;
            eprintln!("serving on {addr}");
            serve(listener, &backend).map_err(|e| e.to_string())
        }
    }
}

/// Per-op key sources for the bench workloads.
enum Workload {
    Markov(MarkovModel, usize),
    Weighted(Vec<f64>),
}

impl Workload {
    fn parse(spec: &str) -> Result<(Self, Vec<f64>), String> {
        if spec == "markov" {
            // Three-key chain whose stationary distribution is skewed; the
            // store is provisioned from that stationary estimate.
            let rows = vec![
                vec![0.30, 0.65, 0.05],
                vec![0.90, 0.00, 0.10],
                vec![0.70, 0.30, 0.00],
            ];
            let model = MarkovModel::new(vec![1, 2, 3], rows).map_err(|e| e.to_string())?;
            let pi = model.stationary();
            return Ok((Workload::Markov(model, 0), pi));
        }
        let parts: Vec<&str> = spec.split(':').collect();
        match parts.as_slice() {
            ["uniform", n] => {
                let n: usize = n.parse().map_err(|_| "bad workload size")?;
                let pi = vec![1.0 / n as f64; n];
                Ok((Workload::Weighted(pi.clone()), pi))
            }
            ["zipf", n, s] => {
                let n: usize = n.parse().map_err(|_| "bad workload size")?;
                let s: f64 = s.parse().map_err(|_| "bad zipf exponent")?;
                let pi = zipf_weights(n, s);
                Ok((Workload::Weighted(pi.clone()), pi))
            }
            _ => Err(format!("unknown workload {spec:?}")),
        }
    }

    fn next(&mut self, rng: &mut impl Rng) -> usize {
        match self {
            Workload::Markov(model, state) => {
                *state = model.next(*state, rng);
                *state
            }
            Workload::Weighted(pi) => sample_index(pi, rng),
        }
    }
}

fn bench(
    spec: &str,
    ops: usize,
    cfg: &RunConfig,
    trace_out: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), String> {
    let (mut workload, pi) = Workload::parse(spec)?;
    let n = pi.len();
    let sink = TraceSink::new();
    let backend = MemoryBackend::new(sink.clone());
    let values: Vec<Vec<u8>> = (0..n).map(|i| vec![i as u8; cfg.value_len]).collect();
    let mut store = SmoothedStore::setup(
        backend,
        values,
        &pi,
        cfg.alpha,
        cfg.theta,
        cfg.policy,
        ReleaseStrategy::Pool,
        cfg.batch_size_for(n).max(1),
        cfg.seed,
    )
    .map_err(|e| e.to_string())?;
    let mut rng = rng::fork(cfg.seed, "bench-workload");
    let tick = if cfg.rate > 0.0 {
        Some(Duration::from_secs_f64(1.0 / cfg.rate))
    } else {
        None
    };
    let mut latencies = Vec::with_capacity(ops);
    let mut issued = 0usize;
    while latencies.len() < ops {
        let started = Instant::now();
        if issued < ops {
            store.read(workload.next(&mut rng) as u64);
            issued += 1;
        }
        for done in store.run_batch().map_err(|e| e.to_string())? {
            latencies.push(done.completed_batch - done.issued_batch);
        }
        if let Some(tick) = tick {
            std::thread::sleep(tick.saturating_sub(started.elapsed()));
        }
    }
    if let Some(path) = trace_out {
        fs::write(&path, sink.snapshot().to_csv())
            .map_err(|e| format!("{}: {e}", path.display()))?;
    }
    let summary = latency_in_batches(&latencies);
    let text = format!(
        "metric,value\nops,{}\nbatches,{}\nmean_latency_batches,{:.4}\np50,{}\np95,{}\np99,{}\nmax,{}\n",
        latencies.len(),
        store.batches_run(),
        summary.mean,
        summary.p50,
        summary.p95,
        summary.p99,
        summary.max,
    );
    emit(out, &text)
}

fn parse_trace(path: &PathBuf) -> Result<AccessTrace, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut events = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            continue;
        }
        let slot: u64 = fields[0].parse().map_err(|_| "bad slot")?;
        let label = BucketLabel::from_hex(fields[1]).ok_or("bad label hex")?;
        let op = match fields[2] {
            "read" => TraceOp::Read,
            "write" => TraceOp::Write,
            other => return Err(format!("bad op {other:?}")),
        };
        events.push(veilstore::leakage::TraceEvent { slot, label, op });
    }
    Ok(AccessTrace { events })
}

fn analyze(
    path: &PathBuf,
    matrix_out: Option<PathBuf>,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), String> {
    let trace = parse_trace(path)?;
    let reads = trace.read_labels();
    if reads.is_empty() {
        return Err("trace holds no read events".into());
    }
    let mut index: HashMap<BucketLabel, usize> = HashMap::new();
    for label in &reads {
        let next = index.len();
        index.entry(*label).or_insert(next);
    }
    let classes = classify_reads(&trace, &index);
    let class_count = index.len();
    let mut counts = vec![0u64; class_count];
    for &c in &classes {
        counts[c] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let (max_dev, uniform_p) = uniformity_test(&counts, class_count);
    // ROR-CRDA against a freshly sampled uniform ideal trace of equal length.
    let mut rng = rng::fork(seed, "analyze-ideal");
    let ideal: Vec<usize> = (0..classes.len())
        .map(|_| rng.gen_range(0..class_count))
        .collect();
    let dist = ror_crda_distinguish(&classes, &ideal, class_count);
    let text = format!(
        "metric,value\nreads,{}\nclasses,{}\nrsd,{:.6}\nmax_rel_deviation,{:.6}\nuniformity_p,{:.6}\nror_crda_label_p,{:.6}\nror_crda_pair_p,{:.6}\nindistinguishable,{}\n",
        reads.len(),
        class_count,
        rsd(&freqs),
        max_dev,
        uniform_p,
        dist.label_p,
        dist.pair_p,
        dist.indistinguishable(),
    );
    if let Some(path) = matrix_out {
        let matrix = transition_matrix(&classes, class_count);
        fs::write(&path, matrix_to_csv(&matrix, class_count))
            .map_err(|e| format!("{}: {e}", path.display()))?;
    }
    emit(out, &text)
}
