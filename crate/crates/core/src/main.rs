use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fwa_core::bench::{self, BenchMode, Protocol, Tokens};
use fwa_core::flatten::{self, Axis, WindowSpec};
use fwa_core::fwa::{self, BackboneParams, FwaConfig};
use fwa_core::geometry::{self, PillarEncoder, PointCloud, PointFormat, SceneSpec};
use fwa_core::kernels::read_params;
use fwa_core::report::{self, PartitionOutput, ReportInput};
use fwa_core::workload::{self, WorkloadReport};
use fwa_core::{FwaError, Result};

#[derive(Parser)]
#[command(name = "fwa", version, about = "Flattened window attention toolkit")]
struct Cli {
    /// Seed for scene generation and parameter initialization.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file (default: stdout).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    EqualWindow,
    EqualSize,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TokenArg {
    /// One token per non-empty pillar.
    Pillars,
    /// One token per raw point.
    Points,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene. Writes binary when --out ends in .bin or .fwpc.
    Gen {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Compare equal-window and equal-size partitioning of a point cloud.
    Partition {
        #[arg(long)]
        input: PathBuf,
        /// Window size in meters, one value or x and y.
        #[arg(long, num_args = 1..=2, default_values_t = [2.88])]
        window: Vec<f64>,
        #[arg(long, default_value_t = 69)]
        group: usize,
        #[arg(long, default_value_t = 128)]
        d_model: usize,
        #[arg(long, value_enum, default_value_t = StrategyArg::Both)]
        strategy: StrategyArg,
        /// Bucket edges for equal-window padding (default: powers of two from 16).
        #[arg(long, value_delimiter = ',')]
        edges: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = TokenArg::Points)]
        tokens: TokenArg,
        /// Pillar size in meters when --tokens pillars.
        #[arg(long, default_value_t = 0.32)]
        resolution: f64,
        /// Scene label (default: input file stem).
        #[arg(long)]
        scene: Option<String>,
        /// Include the sort plan and grouping in the JSON output.
        #[arg(long)]
        emit_plan: bool,
    },
    /// Run the backbone on a point cloud.
    Attend {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Concatenated block parameters (default: seeded random).
        #[arg(long)]
        params: Option<PathBuf>,
        /// Raw little-endian f32 features of kept pillars, row-major.
        #[arg(long)]
        features_out: Option<PathBuf>,
    },
    /// Time the backbone.
    Bench {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = bench::DEFAULT_RUNS)]
        runs: usize,
        #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
        warmup: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Group)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = TokenArg::Pillars)]
        tokens: TokenArg,
        #[arg(long)]
        scene: Option<String>,
    },
    /// Merge bench and partition JSON files into CSV tables.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Group,
    Global,
    Window,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| FwaError::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Gen { spec } => {
            let spec: SceneSpec = serde_json::from_str(&read_text(spec)?)?;
            let cloud = geometry::generate_synthetic(&spec, cli.seed)?;
            match &cli.out {
                Some(path) => geometry::write(&cloud, path, PointFormat::from_path(path)),
                None => {
                    let mut out = io::stdout().lock();
                    geometry::write_csv(&cloud, &mut out)
                }
            }
        }
        Command::Partition {
            input,
            window,
            group,
            d_model,
            strategy,
            edges,
            tokens,
            resolution,
            scene,
            emit_plan,
        } => {
            let cloud = load_cloud(input)?;
            let coords = match tokens {
                TokenArg::Points => cloud.coords(),
                TokenArg::Pillars => {
                    let enc = PillarEncoder::identity(cloud.f_in())?;
                    geometry::pillarize(&cloud, *resolution, &enc)?.coords
                }
            };
            let (w_x, w_y) = (window[0], *window.get(1).unwrap_or(&window[0]));
            let spec = WindowSpec::new(w_x, w_y, false, Axis::X)?;
            let mut reports: Vec<WorkloadReport> = Vec::new();
            if *strategy != StrategyArg::EqualSize {
                let partition = workload::partition_equal_window(&coords, &spec);
                let max_occ = partition.occupancy.keys().next_back().copied().unwrap_or(0);
                let edges = edges
                    .clone()
                    .unwrap_or_else(|| workload::default_bucket_edges(max_occ));
                reports.push(workload::padding_cost(&partition, &edges, *d_model)?);
            }
            let mut out = PartitionOutput {
                scene: scene.clone().unwrap_or_else(|| stem(input)),
                reports: Vec::new(),
                proximity: None,
                sort_plan: None,
                grouping: None,
            };
            if *strategy != StrategyArg::EqualWindow {
                let plan = flatten::sort(&coords, &spec, None).plan;
                let grouping = flatten::group(&plan, *group)?;
                reports.push(workload::equal_size_report(&grouping, *d_model));
                out.proximity = Some(workload::spatial_proximity(&grouping, &coords));
                if *emit_plan {
                    out.sort_plan = Some(plan);
                    out.grouping = Some(grouping);
                }
            }
            out.reports = reports;
            match cli.format {
                Format::Json => emit_json(&cli.out, &out),
                Format::Csv => {
                    let mut text = format!("{}\n", WorkloadReport::CSV_HEADER);
                    for r in &out.reports {
                        text.push_str(&r.csv_row());
                        text.push('\n');
                    }
                    emit_text(&cli.out, &text)
                }
            }
        }
        Command::Attend {
            input,
            config,
            params,
            features_out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let cloud = load_cloud(input)?;
            let encoder = PillarEncoder::seeded(cloud.f_in(), cfg.pillar_channels, cli.seed)?;
            let pillars = geometry::pillarize(&cloud, cfg.resolution, &encoder)?;
            let mut bp = BackboneParams::seeded(&cfg, cfg.pillar_channels, cli.seed)?;
            if let Some(path) = params {
                let blocks = read_params(File::open(path)?)?;
                if blocks.len() != cfg.n_blocks {
                    return Err(FwaError::Config(format!(
                        "{} holds {} blocks, config asks for {}",
                        path.display(),
                        blocks.len(),
                        cfg.n_blocks
                    )));
                }
                bp.blocks = blocks;
            }
            let out = fwa::run_backbone(&pillars, &cfg, &bp)?;
            if let Some(path) = features_out {
                let mut w = BufWriter::new(File::create(path)?);
                for v in &out.features.data {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.flush()?;
            }
            let summary = out.summary();
            match cli.format {
                Format::Json => emit_json(&cli.out, &summary),
                Format::Csv => {
                    let mut text = String::from("index,x,y,row_sum\n");
                    for ((i, c), s) in summary
                        .kept_indices
                        .iter()
                        .zip(&summary.coords)
                        .zip(&summary.row_sums)
                    {
                        text.push_str(&format!("{i},{:?},{:?},{s:?}\n", c[0], c[1]));
                    }
                    emit_text(&cli.out, &text)
                }
            }
        }
        Command::Bench {
            input,
            config,
            runs,
            warmup,
            mode,
            tokens,
            scene,
        } => {
            let cfg = load_config(config.as_deref())?;
            let cloud = load_cloud(input)?;
            let encoder = PillarEncoder::seeded(cloud.f_in(), cfg.pillar_channels, cli.seed)?;
            let bp = BackboneParams::seeded(&cfg, cfg.pillar_channels, cli.seed)?;
            let toks = match tokens {
                TokenArg::Pillars => {
                    let pillars = geometry::pillarize(&cloud, cfg.resolution, &encoder)?;
                    Tokens::from_pillars(&pillars, &bp, cfg.d_model)?
                }
                TokenArg::Points => Tokens::from_points(&cloud, &encoder, &bp, cfg.d_model)?,
            };
            let mode = match mode {
                ModeArg::Group => BenchMode::Group,
                ModeArg::Global => BenchMode::Global,
                ModeArg::Window => BenchMode::Window,
            };
            let protocol = Protocol {
                runs: *runs,
                warmup: *warmup,
            };
            let label = scene.clone().unwrap_or_else(|| stem(input));
            let result = bench::bench_tokens(&toks, &cfg, &bp, mode, protocol, &label)?;
            match cli.format {
                Format::Json => emit_json(&cli.out, &result),
                Format::Csv => {
                    let tables = report::build_tables(&[ReportInput::Bench(result)]);
                    emit_text(&cli.out, &report::render_csv(&tables))
                }
            }
        }
        Command::Report { inputs } => {
            let parsed = inputs
                .iter()
                .map(|p| {
                    ReportInput::parse(&read_text(p)?)
                        .map_err(|e| FwaError::Schema(format!("{}: {e}", p.display())))
                })
                .collect::<Result<Vec<_>>>()?;
            let tables = report::build_tables(&parsed);
            match cli.format {
                Format::Json => emit_json(&cli.out, &tables),
                Format::Csv => emit_text(&cli.out, &report::render_csv(&tables)),
            }
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn load_cloud(path: &Path) -> Result<PointCloud> {
    if !path.exists() {
        return Err(io::Error::new(
            io::ErrorKind::NotFound,
            format!("{}: no such file", path.display()),
        )
        .into());
    }
    geometry::ingest(path, PointFormat::from_path(path))
}

fn load_config(path: Option<&Path>) -> Result<FwaConfig> {
    let cfg: FwaConfig = match path {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => FwaConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn emit_text(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn emit_json<T: Serialize>(out: &Option<PathBuf>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit_text(out, &text)
}
