//! `slid`: synthesize corpora, train and evaluate song language identifiers.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slid_core::checkpoint;
use slid_core::config::{Preset, RunConfig};
use slid_core::corpus::{closed_set_spec, generate_synth, load_manifest, open_set_spec, write_manifest, AudioSource};
use slid_core::dataset::{class_counts, prepare_dataset, ScenarioKind};
use slid_core::features::write_feature_cache;
use slid_core::pipeline::{evaluate_system, train_system};
use slid_core::selftest;
use slid_core::system::song_windows;
use slid_core::training::TrainMode;
use slid_core::{Error, SongSystemF32};

const CHECKPOINT: &str = "checkpoint.slid";
const CONFIG: &str = "config.toml";

#[derive(Parser)]
#[command(name = "slid", version, about = "Phonotactic song language identification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML file layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting configuration: standard or tiny.
    #[arg(long, global = true, default_value = "standard")]
    preset: String,
    /// Seed for splitting, training and synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// closed or open.
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// Corpus manifest, overriding data.manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Directory for checkpoints, logs and reports.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its manifest.
    Synth {
        /// Output directory (default: <run-dir>/corpus).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract feature caches, build the charset and report the split.
    Prepare,
    /// Train a system and write checkpoint, log and config into the run directory.
    Train {
        /// two_step, joint, e2e or statistics.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Print one language verdict per song of the manifest.
    Predict,
    /// Evaluate the trained system on the test split.
    Evaluate,
    /// Run the CTC oracle and gradient-check suites.
    Selftest {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

/// Preset, then config file, then flags.
fn resolve_config(g: &Global, base: Option<&Path>) -> slid_core::Result<RunConfig> {
    let preset: Preset = g.preset.parse()?;
    let mut cfg = match (&g.config, base) {
        (Some(p), _) => RunConfig::load(p, preset)?,
        (None, Some(p)) if p.exists() => RunConfig::load(p, preset)?,
        _ => RunConfig::preset(preset),
    };
    if let Some(seed) = g.seed {
        cfg.reseed(seed);
    }
    if let Some(w) = g.workers {
        cfg.train.workers = w;
    }
    if let Some(s) = &g.scenario {
        let kind: ScenarioKind = s.parse()?;
        if kind != cfg.scenario.kind {
            cfg.scenario = RunConfig::synthetic_scenario(kind);
        }
    }
    if let Some(m) = &g.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    cfg.validate()?;
    if cfg.train.workers > 0 {
        // Only fails if already initialized, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.train.workers).build_global();
    }
    Ok(cfg)
}

fn manifest_of(cfg: &RunConfig) -> slid_core::Result<PathBuf> {
    cfg.data
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("no corpus manifest: set data.manifest or pass --manifest".into()))
}

fn create_dir(p: &Path) -> slid_core::Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write(p: &Path, text: &str) -> slid_core::Result<()> {
    std::fs::write(p, text).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> slid_core::Result<()> {
    let g = &cli.global;
    let run_dir = &g.run_dir;
    let echoed = run_dir.join(CONFIG);
    match cli.command {
        Command::Synth { out } => {
            let cfg = resolve_config(g, None)?;
            let out = out.unwrap_or_else(|| run_dir.join("corpus"));
            let s = &cfg.synth;
            let spec = match cfg.scenario.kind {
                ScenarioKind::Closed => closed_set_spec(s.seed, s.songs_per_language, s.song_duration, s.noise_level),
                ScenarioKind::Open => open_set_spec(s.seed, s.songs_per_language, s.song_duration, s.noise_level),
            };
            let corpus = generate_synth(&spec, &cfg.features, &out)?;
            println!("{}\t{} songs", out.join("manifest.tsv").display(), corpus.len());
        }
        Command::Prepare => {
            let cfg = resolve_config(g, None)?;
            let mut corpus = load_manifest(&manifest_of(&cfg)?)?;
            let feat_dir = run_dir.join("features");
            create_dir(&feat_dir)?;
            for song in &mut corpus.songs {
                if let AudioSource::Wave(_) = song.source {
                    let feat = song.load_features(&cfg.features)?;
                    let path = feat_dir.join(format!("{}.feat", song.id));
                    write_feature_cache(&path, &feat)?;
                    song.source = AudioSource::Features(path);
                }
            }
            let manifest = run_dir.join("manifest.tsv");
            write_manifest(&corpus, &manifest)?;
            let ds = prepare_dataset(&corpus, &cfg.prepare_options())?;
            write(&run_dir.join("charset.json"), &serde_json::to_string(&ds.charset).expect("charset serializes"))?;
            let mut prepared = cfg.clone();
            prepared.data.manifest = Some(manifest);
            write(&echoed, &prepared.to_toml())?;
            for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
                let counts = class_counts(split, ds.labels.len());
                let per: Vec<String> = ds.labels.classes.iter().zip(&counts).map(|(c, n)| format!("{c}={n}")).collect();
                println!("{name}\tsongs={}\tsegments={}\t{}", split.songs.len(), split.num_segments(), per.join(" "));
            }
            println!("charset\t{} tokens", ds.charset.len());
        }
        Command::Train { mode } => {
            let mut cfg = resolve_config(g, None)?;
            if let Some(m) = mode {
                cfg.train.mode = m.parse::<TrainMode>()?;
            }
            let corpus = load_manifest(&manifest_of(&cfg)?)?;
            let ds = prepare_dataset(&corpus, &cfg.prepare_options())?;
            create_dir(run_dir)?;
            write(&echoed, &cfg.to_toml())?;
            let trained = train_system::<f32>(&ds, &cfg)?;
            checkpoint::save(&trained.system, &run_dir.join(CHECKPOINT))?;
            write(&run_dir.join("train.log"), &trained.log.text())?;
            write(
                &run_dir.join("summary.json"),
                &serde_json::to_string_pretty(&trained.summary).expect("summary serializes"),
            )?;
            println!(
                "{}\tmode={}\tval_per={:.4}",
                run_dir.join(CHECKPOINT).display(),
                cfg.train.mode,
                trained.summary.val_phoneme_error_rate
            );
        }
        Command::Predict => {
            let cfg = resolve_config(g, Some(&echoed))?;
            let system: SongSystemF32 = checkpoint::load(&run_dir.join(CHECKPOINT))?;
            let corpus = load_manifest(&manifest_of(&cfg)?)?;
            let mut out = std::io::stdout().lock();
            for song in &corpus.songs {
                let feat = song.load_features(&cfg.features)?;
                let windows = song_windows(&feat.data, &cfg.segment, &cfg.features);
                let p = system.predict_windows(&windows)?;
                // A closed pipe just ends the listing.
                if writeln!(out, "{}\t{}\t{:.6}", song.id, system.verdict_name(p.verdict), p.score()).is_err() {
                    break;
                }
            }
        }
        Command::Evaluate => {
            let cfg = resolve_config(g, Some(&echoed))?;
            let system: SongSystemF32 = checkpoint::load(&run_dir.join(CHECKPOINT))?;
            if system.labels.kind != cfg.scenario.kind {
                return Err(Error::Config("checkpoint scenario differs from the configured scenario".into()));
            }
            let corpus = load_manifest(&manifest_of(&cfg)?)?;
            let ds = prepare_dataset(&corpus, &cfg.prepare_options())?;
            let report = evaluate_system(&system, &ds, cfg.train.seed)?;
            write(&run_dir.join("report.json"), &report.to_json())?;
            let table = report.to_table();
            write(&run_dir.join("report.txt"), &table)?;
            print!("{table}");
        }
        Command::Selftest { instances } => {
            let seed = g.seed.unwrap_or(0);
            let sweep = selftest::ctc_oracle_sweep(seed)?;
            let ok = sweep.max_abs_diff < 1e-9;
            println!(
                "{}\tctc_oracle\tinstances={}\tmax_abs_diff={:.3e}",
                verdict(ok),
                sweep.instances,
                sweep.max_abs_diff
            );
            let mut all = ok;
            let mut checks = vec![selftest::ctc_gradient_check(seed, instances)?];
            checks.extend(selftest::layer_gradient_suite(seed, instances)?);
            for c in checks {
                let ok = c.passes(1e-4);
                all &= ok;
                println!("{}\tgrad_{}\tinstances={}\tmax_rel_err={:.3e}", verdict(ok), c.name, c.instances, c.max_rel_err);
            }
            if !all {
                return Err(Error::Invalid("selftest failed".into()));
            }
        }
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
