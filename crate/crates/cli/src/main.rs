use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gemirec::checkpoint::{self, LoadOptions};
use gemirec::data::{parse_requests, Dataset, Split};
use gemirec::evaluation::{evaluate, verify_voronoi, Variant};
use gemirec::{rng, synth, trainer, Config, Error, GemiRec};

#[derive(Parser)]
#[command(name = "gemirec", version, about = "Multi-interest retrieval: data generation, training, evaluation and serving")]
struct Cli {
    /// Key-value configuration file; built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset (events.tsv, items.tsv, users.tsv).
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the three-stage schedule on a dataset's history split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Final checkpoint; stage checkpoints go next to it as `<out>.stage<N>`.
        #[arg(long)]
        out: PathBuf,
        /// Training report JSON (stdout if omitted).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluates a checkpoint on a dataset's test window.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "20,50")]
        topn: Vec<usize>,
        #[arg(long, value_enum, default_value_t = VariantArg::Full)]
        variant: VariantArg,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Load even if the checkpoint's configuration differs from --config.
        #[arg(long)]
        force: bool,
    },
    /// Checks the dictionary's separation properties; exits 3 on any failure.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Answers a file of user ids with top-N items as CSV.
    ServeBatch {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        requests: PathBuf,
        #[arg(long, default_value_t = 20)]
        topn: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Lists checkpoint sections and optionally dumps vectors as CSV.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `level,index,dim_0..` rows of the interest dictionary.
        #[arg(long)]
        dump_dictionary: Option<PathBuf>,
        /// `kind,id,dim_0..` rows for every item and every interest code.
        #[arg(long)]
        dump_embeddings: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    ZeroCondition,
    Frequency,
    Identical,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::ZeroCondition => Variant::ZeroCondition,
            VariantArg::Frequency => Variant::Frequency,
            VariantArg::Identical => Variant::Identical,
        }
    }
}

enum Failure {
    Usage(String),
    Data(String),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Usage(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(3)
        }
    }
}

/// The configuration the user asked for, if any, with the seed override.
fn requested_config(cli: &Cli) -> Result<Option<Config>, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::from_file(p)?,
        None => return Ok(None),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(Some(cfg))
}

fn config_or_default(cli: &Cli) -> Result<Config, Failure> {
    if let Some(cfg) = requested_config(cli)? {
        return Ok(cfg);
    }
    let mut cfg = Config::default();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_model(cli: &Cli, path: &Path, force: bool) -> Result<GemiRec, Failure> {
    let expected = requested_config(cli)?;
    let mut model = checkpoint::load(
        path,
        LoadOptions {
            expected: expected.as_ref(),
            force,
        },
    )?;
    if let (Some(s), None) = (cli.seed, &cli.config) {
        model.config.seed = s;
    }
    Ok(model)
}

fn write_out(path: &Path, text: &str) -> Outcome {
    checkpoint::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn stage_path(out: &Path, stage: u8) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(format!(".stage{stage}"));
    PathBuf::from(name)
}

fn load_matching_data(model: &GemiRec, dir: &Path) -> Result<Dataset, Failure> {
    let data = Dataset::load_dir(dir, model.config.min_count)?;
    if data.user_ids != model.catalog.user_ids || data.item_ids != model.catalog.item_ids {
        return Err(Failure::Data(format!(
            "dataset in `{}` does not match the checkpoint's users and items",
            dir.display()
        )));
    }
    Ok(data)
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Gen { out } => {
            let cfg = config_or_default(&cli)?;
            let (data, _) = synth::generate(&cfg.synth, cfg.seed)?;
            data.write_dir(out)?;
            println!(
                "wrote {} events for {} users and {} items to {}",
                data.events.len(),
                data.n_users(),
                data.n_items(),
                out.display()
            );
            Ok(())
        }
        Command::Train { data, out, report } => {
            let cfg = config_or_default(&cli)?;
            let data = Dataset::load_dir(data, cfg.min_count)?;
            let split = Split::new(&data);
            let mut model = GemiRec::new(cfg, &data)?;
            let result = trainer::run_three_stage(&mut model, &split.train_events, |stage, m| {
                checkpoint::save(m, &stage_path(out, stage))?;
                log::info!("stage {stage} checkpoint written");
                Ok(())
            })?;
            checkpoint::save(&model, out)?;
            match report {
                Some(p) => write_out(p, &result.to_json()),
                None => {
                    println!("{}", result.to_json());
                    Ok(())
                }
            }
        }
        Command::Eval {
            checkpoint: path,
            data,
            topn,
            variant,
            out,
            force,
        } => {
            if topn.is_empty() || topn.contains(&0) {
                return Err(Failure::Usage("--topn needs positive cutoffs".into()));
            }
            let mut model = load_model(&cli, path, *force)?;
            let data = load_matching_data(&model, data)?;
            let split = Split::new(&data);
            let report = evaluate(&mut model, &split, topn, (*variant).into())?;
            match out {
                Some(p) => write_out(p, &report.to_json()),
                None => {
                    println!("{}", report.to_json());
                    Ok(())
                }
            }
        }
        Command::Verify { checkpoint: path, samples } => {
            let dict = checkpoint::load_dictionary(path)?;
            let seed = cli.seed.unwrap_or(0);
            let report = verify_voronoi(&dict, *samples, &mut rng::stream(seed, rng::streams::PROBE));
            for line in report.lines() {
                println!("{line}");
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Verification("dictionary separation checks failed".into()))
            }
        }
        Command::ServeBatch {
            checkpoint: path,
            requests,
            topn,
            out,
            force,
        } => {
            if *topn == 0 {
                return Err(Failure::Usage("--topn must be positive".into()));
            }
            let model = load_model(&cli, path, *force)?;
            let text = std::fs::read_to_string(requests).map_err(Error::from)?;
            let users = parse_requests(&text)?;
            let index = model.build_index()?;
            let mut csv = String::from("user_id,rank,item_id,score\n");
            for id in users {
                let u = model
                    .catalog
                    .user_index(id)
                    .ok_or_else(|| Failure::Data(format!("unknown user id {id}")))?;
                let rec = model.recommend(&index, u, *topn)?;
                for (rank, (item, score)) in rec.items.iter().enumerate() {
                    let _ = writeln!(csv, "{id},{},{},{score:?}", rank + 1, model.catalog.item_ids[*item]);
                }
            }
            write_out(out, &csv)
        }
        Command::Inspect {
            checkpoint: path,
            dump_dictionary,
            dump_embeddings,
        } => {
            let bytes = std::fs::read(path).map_err(Error::from)?;
            for s in checkpoint::sections(&bytes)? {
                println!("{:<20} offset {:>10} length {:>10} crc {:08x}", s.name, s.offset, s.length, s.crc);
            }
            if let Some(p) = dump_dictionary {
                let dict = checkpoint::dictionary_from_bytes(&bytes)?;
                let width = dict.code_dim();
                let mut csv = header("level,index", width);
                for c in 0..dict.num_levels() {
                    let t = dict.level(c);
                    for r in 0..t.rows() {
                        row(&mut csv, &format!("{c},{r}"), t.row(r), width);
                    }
                }
                write_out(p, &csv)?;
            }
            if let Some(p) = dump_embeddings {
                let model = checkpoint::from_bytes(&bytes, LoadOptions { expected: None, force: true })?;
                let items = model.towers.all_item_vectors()?;
                let dict = &model.idmm.dict;
                let width = items.cols().max(dict.code_dim());
                let mut csv = header("kind,id", width);
                for i in 0..items.rows() {
                    row(&mut csv, &format!("item,{}", model.catalog.item_ids[i]), items.row(i), width);
                }
                for flat in 0..dict.capacity() {
                    let code = gemirec::code::InterestCode::from_flat(flat, dict.level_sizes())?;
                    row(&mut csv, &format!("interest,{flat}"), &dict.code_vector(&code.levels), width);
                }
                write_out(p, &csv)?;
            }
            Ok(())
        }
    }
}

fn header(prefix: &str, dims: usize) -> String {
    let mut s = prefix.to_string();
    for d in 0..dims {
        let _ = write!(s, ",dim_{d}");
    }
    s.push('\n');
    s
}

/// Pads short rows with empty fields so every line has `width` values.
fn row(out: &mut String, prefix: &str, values: &[f64], width: usize) {
    out.push_str(prefix);
    for v in values {
        let _ = write!(out, ",{v:?}");
    }
    for _ in values.len()..width {
        out.push(',');
    }
    out.push('\n');
}
