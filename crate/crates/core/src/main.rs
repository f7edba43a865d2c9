use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gabn::config::RunConfig;
use gabn::data::{
    generate_synthetic_dataset, load_image, load_image_dataset, sample_verification_pairs,
    GroupedDataset, Split, VerificationPair,
};
use gabn::evaluation::evaluate_pairs;
use gabn::gam::{average_gam, compute_gam, GamMap};
use gabn::metrics::FairnessReport;
use gabn::training::{load_model, train};
use gabn::Error;

/// Environment variable that overrides the output directory of every command.
const OUT_ENV: &str = "GABN_OUT_DIR";

#[derive(Parser)]
#[command(name = "gabn", version, about = "Gradient attention balance training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a recognizer and discriminator from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` settings applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Verification accuracy per group with STD and SER.
    Eval(EvalArgs),
    /// Write attention heatmaps for a directory of images.
    Gam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        average_by_group: bool,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "replay")]
    checkpoint: Option<PathBuf>,
    /// CSV of `pathA,pathB,same,group`.
    #[arg(long, group = "source")]
    pairs: Option<PathBuf>,
    /// Regenerate the synthetic evaluation split of the training config.
    #[arg(long, group = "source")]
    synthetic: bool,
    /// CSV of `group,accuracy` rows to report on directly.
    #[arg(long, group = "source")]
    replay: Option<PathBuf>,
    /// Run config for `--synthetic` (defaults to `run.conf` beside the checkpoint).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            overrides,
        } => cmd_train(&config, out, &overrides),
        Command::Eval(args) => cmd_eval(args),
        Command::Gam {
            checkpoint,
            images,
            out,
            average_by_group,
        } => cmd_gam(&checkpoint, &images, out, average_by_group),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn output_dir(flag: Option<PathBuf>, fallback: Option<PathBuf>) -> gabn::Result<PathBuf> {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or(fallback)
        .ok_or_else(|| Error::Config(format!("no output directory: pass --out or set {OUT_ENV}")))
}

fn read_text(path: &Path) -> gabn::Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> gabn::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> gabn::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn dataset_for(run: &RunConfig) -> gabn::Result<GroupedDataset> {
    match &run.dataset_root {
        Some(root) => load_image_dataset(root, run.synthetic.side, run.synthetic.eval_ids_per_group),
        None => generate_synthetic_dataset(&run.synthetic),
    }
}

fn cmd_train(config: &Path, out: Option<PathBuf>, overrides: &[String]) -> gabn::Result<()> {
    let text = read_text(config)?;
    let mut run = RunConfig::parse(&text)?;
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        run.set(k.trim(), v.trim())?;
    }
    let dir = output_dir(out, run.out_dir.clone())?;
    run.out_dir = Some(dir.clone());
    run.validate()?;
    let ds = dataset_for(&run)?;
    let cfg = run.train_config(ds.side);
    create_dir(&dir)?;
    let mut resolved = text.trim_end().to_string();
    for kv in overrides {
        resolved.push('\n');
        resolved.push_str(&kv.replacen('=', " = ", 1));
    }
    resolved.push('\n');
    write_text(&dir.join("run.conf"), &resolved)?;
    log::info!(
        "training on {} images ({} train), {} groups",
        ds.len(),
        ds.indices(Split::Train).len(),
        ds.num_groups()
    );
    let outcome = train(&cfg, &ds, &run.recognizer, &run.discriminator, Some(&dir))?;
    if let Some(last) = outcome.checkpoints.last() {
        std::fs::copy(last, dir.join("final.gabn")).map_err(|e| Error::Io {
            path: last.clone(),
            source: e,
        })?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn report_out(report: &FairnessReport, dir: &Path) -> gabn::Result<()> {
    print!("{}", report.to_table());
    create_dir(dir)?;
    write_text(&dir.join("report.csv"), &report.to_csv())?;
    write_text(&dir.join("report.txt"), &report.to_table())
}

fn cmd_eval(args: EvalArgs) -> gabn::Result<()> {
    if let Some(replay) = &args.replay {
        let text = read_text(replay)?;
        let mut names = Vec::new();
        let mut accs = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let Some((g, a)) = line.split_once(',') else {
                return Err(Error::Config(format!("replay line {line:?} is not group,accuracy")));
            };
            if g.trim() == "group" {
                continue;
            }
            names.push(g.trim().to_string());
            accs.push(a.trim().parse::<f64>().map_err(|_| {
                Error::Config(format!("replay accuracy {a:?} is not a number"))
            })?);
        }
        let report = FairnessReport::from_accuracies(names, accs)?;
        let dir = output_dir(args.out, replay.parent().map(Path::to_path_buf))?;
        return report_out(&report, &dir);
    }
    let ckpt = args.checkpoint.expect("clap requires a checkpoint");
    let model = load_model(&ckpt)?;
    let ckpt_dir = ckpt.parent().map(Path::to_path_buf).unwrap_or_default();
    let (ds, pairs): (GroupedDataset, Vec<VerificationPair>) = if let Some(pairs_path) = &args.pairs {
        pairs_dataset(pairs_path, model.recognizer.config.input_height)?
    } else if args.synthetic {
        let conf = args.config.clone().unwrap_or_else(|| ckpt_dir.join("run.conf"));
        let run = RunConfig::parse(&read_text(&conf)?)?;
        let ds = dataset_for(&run)?;
        let pairs = sample_verification_pairs(
            &ds,
            run.pairs_per_group,
            run.positive_fraction,
            run.train.seed,
        )?;
        (ds, pairs)
    } else {
        return Err(Error::Config("eval needs --pairs, --synthetic or --replay".into()));
    };
    let report = evaluate_pairs(&model.recognizer, &ds, &pairs, 1)?;
    let dir = output_dir(args.out, Some(ckpt_dir))?;
    report_out(&report, &dir)
}

/// Builds a dataset holding exactly the images a pairs file references.
fn pairs_dataset(path: &Path, side: usize) -> gabn::Result<(GroupedDataset, Vec<VerificationPair>)> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut ds = GroupedDataset {
        side,
        group_names: Vec::new(),
        identity_names: Vec::new(),
        identity_groups: Vec::new(),
        identity_splits: Vec::new(),
        images: Vec::new(),
        identities: Vec::new(),
        keys: Vec::new(),
    };
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("pathA")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(Error::Dataset(format!("pairs line {}: expected 4 fields", n + 1)));
        }
        let g = match groups.get(f[3]) {
            Some(&g) => g,
            None => {
                let g = ds.group_names.len();
                ds.group_names.push(f[3].to_string());
                groups.insert(f[3].to_string(), g);
                g
            }
        };
        let mut slot = |p: &str| -> gabn::Result<usize> {
            if let Some(&i) = index.get(p) {
                return Ok(i);
            }
            let full = if Path::new(p).is_absolute() { PathBuf::from(p) } else { base.join(p) };
            let img = load_image(&full, side)?;
            let i = ds.images.len();
            // Each image gets its own placeholder identity; only the pair flags matter here.
            ds.identity_names.push(p.to_string());
            ds.identity_groups.push(g);
            ds.identity_splits.push(Split::Eval);
            ds.identities.push(i);
            ds.images.push(img);
            ds.keys.push(p.to_string());
            index.insert(p.to_string(), i);
            Ok(i)
        };
        let a = slot(f[0])?;
        let b = slot(f[1])?;
        let same = match f[2] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Dataset(format!(
                    "pairs line {}: same flag must be 0 or 1, got {other}",
                    n + 1
                )))
            }
        };
        pairs.push(VerificationPair { a, b, same, group: g });
    }
    Ok((ds, pairs))
}

fn collect_images(root: &Path, out: &mut Vec<PathBuf>) -> gabn::Result<()> {
    let rd = std::fs::read_dir(root).map_err(|e| Error::Io {
        path: root.to_path_buf(),
        source: e,
    })?;
    let mut entries: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_images(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn cmd_gam(
    checkpoint: &Path,
    images: &Path,
    out: Option<PathBuf>,
    average_by_group: bool,
) -> gabn::Result<()> {
    let model = load_model(checkpoint)?;
    let dir = output_dir(out, None)?;
    let side = model.recognizer.config.input_height;
    let mut files = Vec::new();
    collect_images(images, &mut files)?;
    let mut maps: Vec<GamMap<f32>> = Vec::new();
    let mut group_ids: Vec<usize> = Vec::new();
    let mut group_names: Vec<String> = Vec::new();
    create_dir(&dir)?;
    for file in &files {
        let img = match load_image(file, side) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                continue;
            }
        };
        let map = compute_gam(&model.recognizer, &img, None)?;
        let rel = file.strip_prefix(images).unwrap_or(file);
        let target = dir.join(rel).with_extension("pgm");
        if let Some(parent) = target.parent() {
            create_dir(parent)?;
        }
        map.write_pgm(&target)?;
        let group = match rel.components().count() {
            0 | 1 => "all".to_string(),
            _ => rel
                .components()
                .next()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        let g = match group_names.iter().position(|n| *n == group) {
            Some(g) => g,
            None => {
                group_names.push(group);
                group_names.len() - 1
            }
        };
        group_ids.push(g);
        maps.push(map);
    }
    if maps.is_empty() {
        return Err(Error::Dataset(format!(
            "no decodable image under {}",
            images.display()
        )));
    }
    println!("wrote {} heatmaps to {}", maps.len(), dir.display());
    if average_by_group {
        let mut support = String::from("group,images,support\n");
        for (g, avg) in average_gam(&maps, &group_ids)? {
            let name = &group_names[g];
            avg.write_pgm(dir.join(format!("average_{name}.pgm")))?;
            avg.write_raw(dir.join(format!("average_{name}.raw")))?;
            let count = group_ids.iter().filter(|&&x| x == g).count();
            support.push_str(&format!("{name},{count},{}\n", avg.support(0.2)));
        }
        write_text(&dir.join("support.csv"), &support)?;
    }
    Ok(())
}
