use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use openuas::aggregate::{aggregate, parse_fine_into, read_table, write_fine, write_table, AreaTable};
use openuas::analysis::{cluster_profile, kmeanspp_cluster, resolve_embedding, similar_areas};
use openuas::anchoring::{
    generate_anchor_set, misalignment, run_appendix_sweeps, train_anchored_model, AnchorSchedule, AnchorSource,
    DistanceMetric, ScheduleKind, SweepGrid,
};
use openuas::embedding::{approximation_loss, train, AreaCounts, EmbeddingModel, Optimizer, TrainConfig};
use openuas::io::{
    embeddings_geojson, format_list, profile_svg, read_anchor_set, read_embeddings, write_anchor_data,
    write_anchor_embeddings, write_embeddings, write_profile, write_similarity, EmbeddingFile,
};
use openuas::mesh::Geocode;
use openuas::stay::{read_stays, write_stays, HolidayCalendar};
use openuas::synth::{generate, planted_city, SyntheticCity};
use openuas::{Error, Result};

/// Area embeddings from stay records.
#[derive(Parser)]
#[command(name = "openuas", version)]
struct Cli {
    /// More log output on standard error (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stay CSV.
    Synth(SynthArgs),
    /// Privacy-filtered mesh aggregation of a stay CSV.
    Aggregate(AggregateArgs),
    /// Train embeddings for an area table.
    Train(TrainArgs),
    /// Build anchor data and reference embeddings from one or more stay files.
    GenAnchors(GenAnchorsArgs),
    /// Train an area table into the anchored space.
    TrainAnchored(TrainAnchoredArgs),
    /// Misalignment between two embedding files over the same areas.
    Misalign(MisalignArgs),
    /// Approximation loss of a model on an area table.
    ApproxLoss(ApproxLossArgs),
    /// k-means++ clustering; fills the cluster<k> column.
    Cluster(ClusterArgs),
    /// Per-cluster usage profiles (CSV, optional SVG).
    Profile(ProfileArgs),
    /// Areas similar to a query area.
    Search(SearchArgs),
    /// Embedding of a mesh, falling back from 50m to the enclosing 250m.
    Resolve(ResolveArgs),
    /// Anchor size, schedule and alpha studies.
    Sweep(SweepArgs),
    /// GeoJSON cluster map.
    ExportGeojson(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// City description (TOML); without it a planted city with the four default archetypes is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cells per archetype for the planted city.
    #[arg(long, default_value_t = 25)]
    per_archetype: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write `geocode,archetype` ground truth.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    stays: PathBuf,
    /// Holiday dates, one `YYYY-MM-DD` per line.
    #[arg(long)]
    holidays: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Sidecar with the 30-minute histograms used by `profile`.
    #[arg(long)]
    fine: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainOpts {
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    #[arg(long, default_value_t = 256)]
    batch_areas: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

impl TrainOpts {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_areas: self.batch_areas,
            rng_seed: seed,
            schedule: AnchorSchedule::none(),
            optimizer: match self.optimizer {
                OptimizerArg::Adam => Optimizer::Adam,
                OptimizerArg::Sgd => Optimizer::Sgd,
            },
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    train: TrainOpts,
    /// Embedding CSV.
    #[arg(long)]
    out: PathBuf,
    /// Full model file (needed by `approx-loss`).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct GenAnchorsArgs {
    /// Stay CSV of one source dataset; repeat for several.
    #[arg(long, required = true)]
    stays: Vec<PathBuf>,
    #[arg(long)]
    holidays: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    anchors: usize,
    #[arg(long, default_value_t = 20_000)]
    records: usize,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    train: TrainOpts,
    /// `anchor_id,arrival_time,stay_time`.
    #[arg(long)]
    out_data: PathBuf,
    /// `anchor_id,v0..v7`.
    #[arg(long)]
    out_embeddings: PathBuf,
}

#[derive(Args)]
struct ScheduleOpts {
    #[arg(long, default_value = "exponential")]
    schedule: String,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
}

impl ScheduleOpts {
    fn schedule(&self) -> Result<AnchorSchedule> {
        let kind: ScheduleKind = self.schedule.parse()?;
        let s = AnchorSchedule {
            kind,
            alpha: self.alpha,
            beta: self.beta,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Args)]
struct TrainAnchoredArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    anchor_data: PathBuf,
    #[arg(long)]
    anchor_embeddings: PathBuf,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    train: TrainOpts,
    #[command(flatten)]
    schedule: ScheduleOpts,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct MisalignArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args)]
struct ApproxLossArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    table: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    seed: u64,
    /// Output file; defaults to rewriting the input.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    table: PathBuf,
    /// Fine histogram sidecar written by `aggregate --fine`.
    #[arg(long)]
    fine: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory for one `cluster<i>.svg` per cluster.
    #[arg(long)]
    svg_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 0.9, allow_negative_numbers = true)]
    threshold: f64,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ResolveArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    geocode: String,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, required = true)]
    stays: Vec<PathBuf>,
    #[arg(long)]
    holidays: Option<PathBuf>,
    /// First seed; repeats use seed, seed+1, ...
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    repeats: u64,
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    anchor_counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1000,5000,20000")]
    record_counts: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    base_anchors: usize,
    #[arg(long, default_value_t = 5000)]
    base_records: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.6")]
    alphas: Vec<f64>,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn calendar(path: Option<&PathBuf>) -> Result<HolidayCalendar> {
    match path {
        Some(p) => HolidayCalendar::read(p),
        None => Ok(HolidayCalendar::default()),
    }
}

fn source_from(paths: &[PathBuf], holidays: Option<&PathBuf>) -> Result<AnchorSource> {
    let cal = calendar(holidays)?;
    let parts = paths
        .iter()
        .enumerate()
        .map(|(i, p)| AnchorSource::from_stays(&read_stays(p)?, &cal, &format!("d{i}:")))
        .collect::<Result<Vec<_>>>()?;
    AnchorSource::concat(parts)
}

fn save_embeddings(model: &EmbeddingModel, out: &Path, model_out: Option<&PathBuf>) -> Result<()> {
    let file = EmbeddingFile::from_table(&model.trainable_table());
    let mut w = create(out)?;
    write_embeddings(&mut w, &file)?;
    finish(w, out)?;
    if let Some(p) = model_out {
        let mut w = create(p)?;
        model.write(&mut w)?;
        finish(w, p)?;
    }
    info!("wrote {} embeddings to {}", file.rows.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let (city, labels) = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    let mut city = SyntheticCity::from_toml(&text)?;
                    city.rng_seed = a.seed;
                    let labels = city.cells.iter().map(|c| c.archetype).collect();
                    (city, labels)
                }
                None => planted_city(a.per_archetype, a.seed)?,
            };
            let stays = generate(&city)?;
            let mut w = create(&a.out)?;
            write_stays(&mut w, &stays)?;
            finish(w, &a.out)?;
            info!("wrote {} stays for {} cells", stays.len(), city.cells.len());
            if let Some(p) = &a.labels {
                let mut w = csv::Writer::from_writer(create(p)?);
                w.write_record(["geocode", "archetype"])?;
                for (i, label) in labels.iter().enumerate() {
                    w.write_record([city.cell_geocode(i)?.to_string(), label.to_string()])?;
                }
                w.flush().map_err(|e| Error::io(p, e))?;
            }
        }
        Command::Aggregate(a) => {
            let stays = read_stays(&a.stays)?;
            let table = aggregate(&stays, &calendar(a.holidays.as_ref())?)?;
            let mut w = create(&a.out)?;
            write_table(&mut w, &table)?;
            finish(w, &a.out)?;
            if let Some(p) = &a.fine {
                let mut w = create(p)?;
                write_fine(&mut w, &table)?;
                finish(w, p)?;
            }
            info!("kept {} meshes from {} stays", table.len(), stays.len());
        }
        Command::Train(a) => {
            let counts = AreaCounts::from_table(&read_table(&a.table)?, "");
            let model = train(&counts, &a.train.config(a.seed))?;
            info!("approximation loss {:.6}", approximation_loss(&model, &counts)?);
            save_embeddings(&model, &a.out, a.model.as_ref())?;
        }
        Command::GenAnchors(a) => {
            let source = source_from(&a.stays, a.holidays.as_ref())?;
            let build = generate_anchor_set(&source, a.anchors, a.records, &a.train.config(a.seed))?;
            let mut w = create(&a.out_data)?;
            write_anchor_data(&mut w, &build.anchors)?;
            finish(w, &a.out_data)?;
            let refs = build.anchors.reference_embeddings.as_deref().unwrap_or_default();
            let mut w = create(&a.out_embeddings)?;
            write_anchor_embeddings(&mut w, refs)?;
            finish(w, &a.out_embeddings)?;
            info!("built {} anchors from {} source areas", build.anchors.n_anchors(), source.len());
        }
        Command::TrainAnchored(a) => {
            let counts = AreaCounts::from_table(&read_table(&a.table)?, "");
            let anchors = read_anchor_set(&a.anchor_data, Some(&a.anchor_embeddings))?;
            let cfg = TrainConfig {
                schedule: a.schedule.schedule()?,
                ..a.train.config(a.seed)
            };
            let model = train_anchored_model(&counts, &anchors, &cfg)?;
            info!("approximation loss {:.6}", approximation_loss(&model, &counts)?);
            save_embeddings(&model, &a.out, a.model.as_ref())?;
        }
        Command::Misalign(a) => {
            let e = read_embeddings(&a.a)?.table()?;
            let r = read_embeddings(&a.b)?.table()?;
            println!("euclidean,{}", misalignment(&e, &r, DistanceMetric::Euclidean)?);
            println!("cosine,{}", misalignment(&e, &r, DistanceMetric::Cosine)?);
        }
        Command::ApproxLoss(a) => {
            let model = EmbeddingModel::read(&a.model)?;
            let counts = AreaCounts::from_table(&read_table(&a.table)?, "");
            println!("{}", approximation_loss(&model, &counts)?);
        }
        Command::Cluster(a) => {
            let mut file = read_embeddings(&a.embeddings)?;
            let assign = kmeanspp_cluster(&file.table()?, a.k, a.seed)?;
            file.set_clusters(&assign)?;
            let out = a.out.as_ref().unwrap_or(&a.embeddings);
            let mut w = create(out)?;
            write_embeddings(&mut w, &file)?;
            finish(w, out)?;
            info!("cluster sizes {:?}", assign.sizes());
        }
        Command::Profile(a) => {
            let file = read_embeddings(&a.embeddings)?;
            let labels = file.clusters(a.k)?;
            let mut assign = openuas::analysis::ClusterAssignment {
                k: a.k,
                labels: Default::default(),
                centroids: Vec::new(),
                objective_history: Vec::new(),
            };
            for (r, l) in file.rows.iter().zip(labels) {
                let l = l.ok_or_else(|| Error::InvalidInput(format!("area {} has no cluster{} label", r.geocode, a.k)))?;
                if l >= a.k {
                    return Err(Error::InvalidInput(format!("label {l} of {} is not below k = {}", r.geocode, a.k)));
                }
                assign.labels.insert(r.geocode.clone(), l);
            }
            let mut table: AreaTable = read_table(&a.table)?;
            let fine = File::open(&a.fine).map_err(|e| Error::io(&a.fine, e))?;
            parse_fine_into(fine, &a.fine, &mut table)?;
            let profile = cluster_profile(&assign, &table)?;
            let mut w = create(&a.out)?;
            write_profile(&mut w, &profile)?;
            finish(w, &a.out)?;
            if let Some(dir) = &a.svg_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                for c in 0..a.k {
                    let p = dir.join(format!("cluster{c}.svg"));
                    std::fs::write(&p, profile_svg(&profile, c)?).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        Command::Search(a) => {
            let table = read_embeddings(&a.embeddings)?.table()?;
            let hits = similar_areas(&table, &a.query, a.threshold)?;
            match &a.out {
                Some(p) => {
                    let mut w = create(p)?;
                    write_similarity(&mut w, &hits)?;
                    finish(w, p)?;
                }
                None => write_similarity(std::io::stdout().lock(), &hits)?,
            }
        }
        Command::Resolve(a) => {
            let table = read_embeddings(&a.embeddings)?.table()?;
            let g: Geocode = a.geocode.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            println!("{}", format_list(&resolve_embedding(&table, &g)?));
        }
        Command::Sweep(a) => {
            if a.repeats == 0 {
                return Err(Error::Config("repeats must be at least 1".into()));
            }
            let source = source_from(&a.stays, a.holidays.as_ref())?;
            let grid = SweepGrid {
                anchor_counts: a.anchor_counts,
                record_counts: a.record_counts,
                base_anchors: a.base_anchors,
                base_records: a.base_records,
                alphas: a.alphas,
                seeds: (a.seed..a.seed + a.repeats).collect(),
                ..SweepGrid::default()
            };
            let report = run_appendix_sweeps(&source, &grid, &a.train.config(a.seed))?;
            let mut w = create(&a.out)?;
            report.write_csv(&mut w)?;
            finish(w, &a.out)?;
        }
        Command::ExportGeojson(a) => {
            let file = read_embeddings(&a.embeddings)?;
            let gj = embeddings_geojson(&file, a.k)?;
            let mut w = create(&a.out)?;
            serde_json::to_writer(&mut w, &gj)?;
            finish(w, &a.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
