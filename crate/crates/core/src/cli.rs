//! Command-line front end.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::centerpoint::{find_separator, mix, Acceptance, SamplerParams};
use crate::divider::{
    divide, divide_strict, validate_division, DivItem, Division, DivisionParams, ValidationCaps, ValidationMode,
};
use crate::error::{Error, Result};
use crate::extmem::{ExtContext, MemConfig, Stream, MAGIC_LEN};
use crate::flow::{compare_acc, flow_division, flow_sweep, AccRecord, FlowAccumulation, RainDistribution};
use crate::geom::{Disk, Item};
use crate::terrain::{
    check_division_matches, compute_flow_directions, divide_tin, gen_packing, gen_tin, TinClassifier, TinDivision,
    TinMode, TinTriangle, PACKING_MAGIC, TIN_MAGIC,
};

pub const ENV_SEED: &str = "GEOSEP_SEED";

#[derive(Debug, Parser)]
#[command(name = "geosep", version, about = "Geometric separators, r-way divisions and flow accumulation on terrains")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Base seed for every random choice.
    #[arg(long, global = true, env = ENV_SEED, default_value_t = 0)]
    pub seed: u64,
    /// Internal memory M, in records. Defaults to GEOSEP_MEM_ITEMS or 65536.
    #[arg(long, global = true)]
    pub mem_items: Option<usize>,
    /// Block size B, in records. Defaults to GEOSEP_BLOCK_ITEMS or 256.
    #[arg(long, global = true)]
    pub block_items: Option<usize>,
    /// Worker cap. Every command currently runs on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Also write the run report to this file.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    GridJitter,
    Delaunay,
}

impl From<ModeArg> for TinMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::GridJitter => TinMode::GridJitter,
            ModeArg::Delaunay => TinMode::Delaunay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassifierArg {
    Triangles,
    Circumcircles,
}

impl From<ClassifierArg> for TinClassifier {
    fn from(c: ClassifierArg) -> Self {
        match c {
            ClassifierArg::Triangles => TinClassifier::Triangles,
            ClassifierArg::Circumcircles => TinClassifier::Circumcircles,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RainArgs {
    /// Uniform rain per vertex.
    #[arg(long, default_value_t = 1.0)]
    pub rain_uniform: f64,
    /// Text file of `id amount` lines; overrides --rain-uniform.
    #[arg(long)]
    pub rain_table: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a disjoint disk packing (PKG1).
    GenPacking {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic TIN without flow directions (TIN1).
    GenTin {
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value = "grid-jitter")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Annotate a TIN with flow directions.
    Flowdirs {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute an r-way division of a packing or TIN.
    Divide {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        r: usize,
        #[arg(long)]
        strict: bool,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, value_enum, default_value = "triangles")]
        classifier: ClassifierArg,
        #[arg(long)]
        out_manifest: PathBuf,
    },
    /// Flow accumulation by the external sweep.
    FlowSweep {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        rain: RainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flow accumulation over a precomputed division.
    FlowDiv {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        rain: RainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a division against its input.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        bruteforce: bool,
        /// Check region count <= 8r and region size <= 12 n / r.
        #[arg(long)]
        r: Option<usize>,
    },
    /// Histogram of intersected counts over accepted quarter-split separators.
    SepStats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 250)]
        samples: usize,
        /// Histogram bucket width; 0 picks ceil(sqrt(n) / 8).
        #[arg(long, default_value_t = 0)]
        bucket_width: usize,
        #[arg(long, default_value_t = 64)]
        max_retries: usize,
        #[arg(long)]
        out_hist: PathBuf,
    },
    /// Compare two accumulation files.
    AccCompare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        rel_tol: f64,
    },
}

/// Key=value lines describing one run.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub lines: Vec<(String, String)>,
}

impl RunReport {
    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.lines.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

impl std::fmt::Display for RunReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.lines {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Packing,
    Tin,
}

/// Identifies a record file by its magic.
pub fn input_kind(path: &Path) -> Result<InputKind> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; MAGIC_LEN];
    f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    match magic {
        PACKING_MAGIC => Ok(InputKind::Packing),
        TIN_MAGIC => Ok(InputKind::Tin),
        m => Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected PKG1 or TIN1, found {:?}", String::from_utf8_lossy(&m)),
        }),
    }
}

pub fn read_rain_table(path: &Path) -> Result<HashMap<u64, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut t = HashMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parsed = match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) => a.parse::<u64>().ok().zip(b.parse::<f64>().ok()),
            _ => None,
        };
        let (id, amount) = parsed.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: expected `id amount`", no + 1),
        })?;
        t.insert(id, amount);
    }
    Ok(t)
}

impl RainArgs {
    fn load(&self, cfg: MemConfig) -> Result<RainDistribution> {
        let rain = match &self.rain_table {
            Some(p) => {
                let t = read_rain_table(p)?;
                if t.len() > cfg.mem_items {
                    return Err(Error::InvalidParams(format!(
                        "rain table holds {} entries, memory holds {}",
                        t.len(),
                        cfg.mem_items
                    )));
                }
                RainDistribution::Table(t)
            }
            None => RainDistribution::Uniform(self.rain_uniform),
        };
        rain.validate()?;
        Ok(rain)
    }

    fn echo(&self, rep: &mut RunReport) {
        match &self.rain_table {
            Some(p) => rep.push("rain_table", p.display()),
            None => rep.push("rain_uniform", self.rain_uniform),
        };
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

impl GlobalOpts {
    pub fn mem_config(&self) -> Result<MemConfig> {
        let env = MemConfig::from_env(MemConfig::default())?;
        MemConfig::new(
            self.mem_items.unwrap_or(env.mem_items),
            self.block_items.unwrap_or(env.block_items),
        )
    }

    /// Scratch space next to `out`, so results can be renamed into place.
    fn context_near(&self, out: &Path) -> Result<ExtContext> {
        let dir = parent_dir(out);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        ExtContext::new_in(self.mem_config()?, &dir)
    }
}

fn io_report(rep: &mut RunReport, prefix: &str, ctx: &ExtContext, since: crate::extmem::IoStats) {
    let d = ctx.stats().since(since);
    rep.push(&format!("{prefix}reads"), d.reads);
    rep.push(&format!("{prefix}writes"), d.writes);
}

fn flow_report(rep: &mut RunReport, acc: &FlowAccumulation) {
    rep.push("vertices", acc.acc.len());
    rep.push("total_rain", acc.summary.total_rain);
    rep.push("total_sink", acc.summary.total_sink);
    rep.push("max_acc", acc.summary.max_acc);
}

fn division_report<T: DivItem>(rep: &mut RunReport, ctx: &ExtContext, div: &Division<T>) -> Result<()> {
    rep.push("regions", div.n_regions());
    rep.push("items", div.total_items);
    rep.push("boundary_multiplicity", div.boundary_multiplicity());
    rep.push("distinct_boundary", div.distinct_boundary(ctx)?);
    rep.push("max_region_items", div.max_region_items());
    rep.push("max_region_boundary", div.max_region_boundary());
    Ok(())
}

fn divide_items<T: DivItem>(ctx: &ExtContext, input: &Stream<T>, params: &DivisionParams, strict: bool) -> Result<Division<T>> {
    if strict {
        divide_strict(ctx, input, params)
    } else {
        divide(ctx, input, params)
    }
}

fn validate_items<T: DivItem>(
    ctx: &ExtContext,
    input: &Path,
    manifest: &Path,
    mode: ValidationMode,
    r: Option<usize>,
    rep: &mut RunReport,
) -> Result<bool> {
    let s = Stream::<T>::open(input)?;
    let div = Division::<T>::open(manifest)?;
    let n = s.len() as f64;
    let caps = ValidationCaps {
        max_regions: r.map(|r| 8 * r),
        max_region_items: r.map(|r| 12.0 * n / r as f64),
        max_region_boundary: None,
    };
    let v = validate_division(ctx, &s, &div, mode, caps)?;
    rep.push("regions", v.regions);
    rep.push("items", v.items);
    rep.push("boundary_multiplicity", v.boundary_multiplicity);
    rep.push("distinct_boundary", v.distinct_boundary);
    rep.push("violations", v.violations.len());
    for (i, msg) in v.violations.iter().enumerate().take(20) {
        rep.push(&format!("violation.{i}"), msg);
    }
    Ok(v.is_ok())
}

/// Intersected counts of `samples` accepted quarter-split separators.
pub fn separator_counts<I: Item>(items: &[I], samples: usize, seed: u64, max_retries: usize) -> Result<Vec<usize>> {
    let accept = Acceptance::quarter_split();
    (0..samples)
        .map(|i| {
            let params = SamplerParams::with_seed(mix(seed, i as u64));
            find_separator(items, |c| accept.accepts(c), max_retries, &params).map(|c| c.n_intersect)
        })
        .collect()
}

/// Two-column histogram text plus the mean over sqrt(n).
pub fn histogram_text(counts: &[usize], n: usize, bucket_width: usize) -> (String, f64) {
    let w = if bucket_width == 0 {
        ((n as f64).sqrt() / 8.0).ceil().max(1.0) as usize
    } else {
        bucket_width
    };
    let mean = if counts.is_empty() || n == 0 {
        0.0
    } else {
        counts.iter().sum::<usize>() as f64 / counts.len() as f64 / (n as f64).sqrt()
    };
    let mut text = format!("# mean_over_sqrt_n={mean}\n# bucket_upper count\n");
    if let Some(&max) = counts.iter().max() {
        let buckets = max / w + 1;
        let mut h = vec![0usize; buckets];
        for &c in counts {
            h[c / w] += 1;
        }
        for (i, c) in h.iter().enumerate() {
            writeln!(text, "{} {}", (i + 1) * w, c).unwrap();
        }
    }
    (text, mean)
}

/// Runs one parsed command and returns its report; `Err` carries the exit
/// code's cause. `Ok((report, false))` means the command ran but found a
/// validation failure.
pub fn run(cli: &Cli) -> Result<(RunReport, bool)> {
    let g = &cli.global;
    if g.threads == 0 {
        return Err(Error::InvalidParams("--threads must be >= 1".into()));
    }
    let start = Instant::now();
    let mut rep = RunReport::default();
    let cfg = g.mem_config()?;
    let mut ok = true;
    let echo_mem = |rep: &mut RunReport| {
        rep.push("mem_items", cfg.mem_items);
        rep.push("block_items", cfg.block_items);
    };
    match &cli.command {
        Command::GenPacking { n, out } => {
            rep.push("command", "gen-packing").push("n", n).push("seed", g.seed).push("out", out.display());
            let ctx = g.context_near(out)?;
            let disks = gen_packing(*n, g.seed)?;
            let mut w = ctx.writer_at::<Disk>(out)?;
            for d in &disks {
                w.push(d)?;
            }
            let s = w.finish()?;
            rep.push("records", s.len());
        }
        Command::GenTin { n, mode, out } => {
            rep.push("command", "gen-tin")
                .push("n", n)
                .push("seed", g.seed)
                .push("mode", mode.to_possible_value().unwrap().get_name())
                .push("out", out.display());
            let ctx = g.context_near(out)?;
            let s = gen_tin(&ctx, *n, g.seed, (*mode).into(), Some(out))?;
            rep.push("triangles", s.len());
        }
        Command::Flowdirs { input, out } => {
            rep.push("command", "flowdirs").push("in", input.display()).push("out", out.display());
            echo_mem(&mut rep);
            let ctx = g.context_near(out)?;
            let tin = Stream::<TinTriangle>::open(input)?;
            let before = ctx.stats();
            let s = compute_flow_directions(&ctx, &tin)?.persist(out)?;
            rep.push("triangles", s.len());
            io_report(&mut rep, "", &ctx, before);
        }
        Command::Divide {
            input,
            r,
            strict,
            k,
            classifier,
            out_manifest,
        } => {
            rep.push("command", "divide")
                .push("in", input.display())
                .push("r", r)
                .push("seed", g.seed);
            echo_mem(&mut rep);
            rep.push("strict", strict).push("k", k);
            rep.push("classifier", classifier.to_possible_value().unwrap().get_name());
            rep.push("out_manifest", out_manifest.display());
            std::fs::create_dir_all(out_manifest).map_err(|e| Error::io(out_manifest, e))?;
            let ctx = ExtContext::new_in(cfg, out_manifest)?;
            let params = DivisionParams {
                k: *k,
                ..DivisionParams::new(*r, g.seed)
            };
            let before = ctx.stats();
            match input_kind(input)? {
                InputKind::Packing => {
                    let s = Stream::<Disk>::open(input)?;
                    let div = divide_items(&ctx, &s, &params, *strict)?;
                    io_report(&mut rep, "", &ctx, before);
                    let div = div.persist(out_manifest)?;
                    division_report(&mut rep, &ctx, &div)?;
                }
                InputKind::Tin => {
                    let s = Stream::<TinTriangle>::open(input)?;
                    let td = divide_tin(&ctx, &s, &params, (*classifier).into(), *strict)?;
                    io_report(&mut rep, "", &ctx, before);
                    let boundary_vertices = td.boundary_vertex_multiplicity();
                    let div = td.division.persist(out_manifest)?;
                    division_report(&mut rep, &ctx, &div)?;
                    rep.push("boundary_vertices", boundary_vertices);
                }
            }
        }
        Command::FlowSweep { input, rain, out } => {
            rep.push("command", "flow-sweep").push("in", input.display());
            rain.echo(&mut rep);
            echo_mem(&mut rep);
            rep.push("out", out.display());
            let ctx = g.context_near(out)?;
            let tin = Stream::<TinTriangle>::open(input)?;
            let rain = rain.load(cfg)?;
            let before = ctx.stats();
            let acc = flow_sweep(&ctx, &tin, &rain)?;
            io_report(&mut rep, "", &ctx, before);
            flow_report(&mut rep, &acc);
            acc.acc.persist(out)?;
        }
        Command::FlowDiv {
            input,
            manifest,
            rain,
            out,
        } => {
            rep.push("command", "flow-div")
                .push("in", input.display())
                .push("manifest", manifest.display());
            rain.echo(&mut rep);
            echo_mem(&mut rep);
            rep.push("out", out.display());
            let ctx = g.context_near(out)?;
            let tin = Stream::<TinTriangle>::open(input)?;
            let div = Division::<TinTriangle>::open(manifest)?;
            let rain = rain.load(cfg)?;
            let before = ctx.stats();
            check_division_matches(&ctx, &tin, &div)?;
            io_report(&mut rep, "verify_", &ctx, before);
            let before = ctx.stats();
            let acc = flow_division(&ctx, &div, &rain)?;
            io_report(&mut rep, "", &ctx, before);
            let td = TinDivision::from_division(&ctx, div)?;
            rep.push("regions", td.division.n_regions());
            rep.push("boundary_vertices", td.boundary_vertex_multiplicity());
            flow_report(&mut rep, &acc);
            acc.acc.persist(out)?;
        }
        Command::Validate {
            input,
            manifest,
            bruteforce,
            r,
        } => {
            rep.push("command", "validate")
                .push("in", input.display())
                .push("manifest", manifest.display())
                .push("bruteforce", bruteforce);
            if let Some(r) = r {
                rep.push("r", r);
            }
            let ctx = ExtContext::new(cfg)?;
            let mode = if *bruteforce {
                ValidationMode::BruteForce
            } else {
                ValidationMode::Fast
            };
            ok = match input_kind(input)? {
                InputKind::Packing => validate_items::<Disk>(&ctx, input, manifest, mode, *r, &mut rep)?,
                InputKind::Tin => validate_items::<TinTriangle>(&ctx, input, manifest, mode, *r, &mut rep)?,
            };
        }
        Command::SepStats {
            input,
            samples,
            bucket_width,
            max_retries,
            out_hist,
        } => {
            rep.push("command", "sep-stats")
                .push("in", input.display())
                .push("samples", samples)
                .push("seed", g.seed)
                .push("bucket_width", bucket_width)
                .push("max_retries", max_retries)
                .push("out_hist", out_hist.display());
            let ctx = ExtContext::new(cfg)?;
            let (counts, n) = match input_kind(input)? {
                InputKind::Packing => {
                    let items = ctx.read_all(&Stream::<Disk>::open(input)?)?;
                    (separator_counts(&items, *samples, g.seed, *max_retries)?, items.len())
                }
                InputKind::Tin => {
                    let items = ctx.read_all(&Stream::<TinTriangle>::open(input)?)?;
                    (separator_counts(&items, *samples, g.seed, *max_retries)?, items.len())
                }
            };
            let (text, mean) = histogram_text(&counts, n, *bucket_width);
            std::fs::write(out_hist, text).map_err(|e| Error::io(out_hist, e))?;
            rep.push("items", n);
            rep.push("mean_over_sqrt_n", mean);
        }
        Command::AccCompare { a, b, rel_tol } => {
            rep.push("command", "acc-compare")
                .push("a", a.display())
                .push("b", b.display())
                .push("rel_tol", rel_tol);
            let ctx = ExtContext::new(cfg)?;
            let c = compare_acc(
                &ctx,
                &Stream::<AccRecord>::open(a)?,
                &Stream::<AccRecord>::open(b)?,
                *rel_tol,
            )?;
            rep.push("compared", c.compared);
            rep.push("mismatches", c.mismatches);
            rep.push("max_rel_diff", c.max_rel_diff);
            if let Some((id, x, y)) = c.first_mismatch {
                rep.push("first_mismatch", format!("{id}:{x}:{y}"));
            }
            ok = c.is_match();
        }
    }
    rep.push("wall_ms", start.elapsed().as_millis());
    Ok((rep, ok))
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok((rep, ok)) => {
            let _ = write!(std::io::stdout().lock(), "{rep}");
            if let Some(p) = &cli.global.report {
                if let Err(e) = std::fs::write(p, rep.to_string()) {
                    eprintln!("error: {}", Error::io(p, e));
                    return ExitCode::from(3);
                }
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
