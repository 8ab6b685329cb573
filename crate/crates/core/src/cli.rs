//! Command-line interface. `run` returns the process exit code:
//! 0 on success, 1 on usage errors, 2 on runtime errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{eval_suite, EvalReport};
use crate::persistence::{
    load_checkpoint, load_token_cache, manifest_path, save_checkpoint, save_token_cache, Checkpoint, Manifest,
    CHECKPOINT_VERSION, TOKEN_CACHE_VERSION,
};
use crate::rng::{derive_seed, Stream};
use crate::sampling::{generate, GenerationResult, Motif, SampleMode, SampleOptions};
use crate::token_space::TrackPair;
use crate::toyworld::{gen_toy_dataset, gen_world_from, self_consistency};
use crate::training::{train, Snapshot, TrainHooks};

#[derive(Debug, Parser)]
#[command(name = "hybrid-diffusion", version, about = "Hybrid discrete/continuous diffusion on a synthetic toy world")]
#[command(subcommand_required = true)]
struct Cli {
    /// TOML run configuration; defaults apply to anything not set.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seed of the selected command.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output file (directory for `sweep`).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a toy-world dataset as a token cache.
    GenData,
    /// Train a model on a token cache.
    Train {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Unconditional co-generation.
    Sample {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Continuous track from each input's discrete track.
    Fold(Conditional),
    /// Discrete track from each input's continuous track.
    Invfold(Conditional),
    /// Regenerate each input around a motif taken from it.
    Scaffold(Conditional),
    /// Oracle-based report over a token cache of samples.
    Eval {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// One co-generation report per (tau_z, cfg_scale, lm_steps) cell.
    Sweep {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
struct Conditional {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Process at most this many inputs (default: sample.n_samples).
    #[arg(long)]
    limit: Option<usize>,
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn log(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut m = Manifest::new();
    m.set("program", env!("CARGO_PKG_NAME")).set("program_version", env!("CARGO_PKG_VERSION"));
    if let Some(p) = &cli.config {
        m.set("config_path", p.display());
    }
    match &cli.command {
        Command::GenData => gen_data(cli, &cfg, m),
        Command::Train { data } => train_cmd(cli, &cfg, data, m),
        Command::Sample { checkpoint, n, length } => sample_cmd(cli, &cfg, checkpoint, *n, *length, m),
        Command::Fold(c) => conditional(cli, &cfg, c, SampleMode::Fold, m),
        Command::Invfold(c) => conditional(cli, &cfg, c, SampleMode::InverseFold, m),
        Command::Scaffold(c) => conditional(cli, &cfg, c, SampleMode::Scaffold, m),
        Command::Eval { input } => eval_cmd(cli, &cfg, input, m),
        Command::Sweep { checkpoint } => sweep_cmd(cli, &cfg, checkpoint, m),
    }
}

fn gen_data(cli: &Cli, cfg: &RunConfig, mut m: Manifest) -> Result<()> {
    let out = out_path(cli, "data.hdtk");
    let mut data_cfg = cfg.data.clone();
    if let Some(s) = cli.seed {
        data_cfg.seed = s;
    }
    let ds = gen_toy_dataset(&cfg.world, &data_cfg)?;
    save_token_cache(&out, cfg.world.vocab_size, cfg.world.struct_dim, &ds.samples)?;
    m.set("command", "gen-data").set("token_cache_version", TOKEN_CACHE_VERSION);
    m.set_flattened("world", &cfg.world)?.set_flattened("data", &data_cfg)?;
    m.save(&manifest_path(&out))?;
    log(cli, format!("wrote {} samples to {}", ds.samples.len(), out.display()));
    Ok(())
}

fn train_cmd(cli: &Cli, cfg: &RunConfig, data: &Path, mut m: Manifest) -> Result<()> {
    let out = out_path(cli, "model.hdck");
    let cache = load_token_cache(data)?;
    if cache.vocab_size != cfg.model.vocab_size || cache.dim != cfg.model.struct_dim {
        return Err(Error::Config(format!(
            "data has V={} d={} but the model expects V={} d={}",
            cache.vocab_size, cache.dim, cfg.model.vocab_size, cfg.model.struct_dim
        )));
    }
    let mut tc = cfg.train.clone();
    if let Some(s) = cli.seed {
        tc.seed = s;
    }
    let digest = tc.digest();
    let metrics_path = PathBuf::from(format!("{}.metrics.tsv", out.display()));
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut save = |s: &Snapshot<'_>| -> Result<()> {
        let ck = Checkpoint {
            params: s.params.clone(),
            optimizer: Some(s.optimizer.clone()),
            step: s.step,
            train_digest: digest,
            scaler: *s.scaler,
        };
        save_checkpoint(&out, &ck)
    };
    let hooks = TrainHooks { metrics: Some(&mut metrics), checkpoint: Some(&mut save), quiet: cli.quiet };
    let outcome = train(&cfg.model, &tc, &cache.samples, hooks)?;
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    m.set("command", "train").set("data", data.display()).set("checkpoint_version", CHECKPOINT_VERSION);
    m.set("train_digest", format!("{digest:#018x}"));
    m.set_flattened("model", &cfg.model)?.set_flattened("train", &tc)?;
    m.set("scaler.scale", format!("{:?}", outcome.scaler.scale));
    if let Some(last) = outcome.history.last() {
        m.set("final_loss_total", format!("{:?}", last.loss_total));
    }
    m.save(&manifest_path(&out))?;
    log(cli, format!("wrote checkpoint {}", out.display()));
    Ok(())
}

/// Seed of sample `k` in a run seeded with `seed`.
pub fn sample_seed(seed: u64, k: u64) -> u64 {
    derive_seed(seed, Stream::SampleSeed, k, 0)
}

fn save_results(out: &Path, ck: &Checkpoint, results: &[GenerationResult]) -> Result<()> {
    let pairs = results.iter().map(GenerationResult::to_pair).collect::<Result<Vec<TrackPair>>>()?;
    let cfg = ck.params.config();
    save_token_cache(out, cfg.vocab_size, cfg.struct_dim, &pairs)
}

fn record_options(m: &mut Manifest, opts: &SampleOptions) -> Result<()> {
    let mut o = opts.clone();
    o.seed = 0;
    m.set_flattened("sample", &o)?;
    m.entries.retain(|(k, _)| k != "sample.seed");
    Ok(())
}

fn sample_cmd(
    cli: &Cli,
    cfg: &RunConfig,
    checkpoint: &Path,
    n: Option<usize>,
    length: Option<usize>,
    mut m: Manifest,
) -> Result<()> {
    let out = out_path(cli, "samples.hdtk");
    let ck = load_checkpoint(checkpoint)?;
    let seed = cli.seed.unwrap_or(cfg.sample.seed);
    let n = n.unwrap_or(cfg.sample.n_samples);
    let len = length.unwrap_or(cfg.sample.length);
    let mut results = Vec::with_capacity(n);
    let mut opts = cfg.sample.options(SampleMode::CoGen, len, seed);
    for k in 0..n as u64 {
        opts.seed = sample_seed(seed, k);
        results.push(generate(&ck.params, &ck.scaler, &opts, None)?);
    }
    save_results(&out, &ck, &results)?;
    m.set("command", "sample").set("checkpoint", checkpoint.display()).set("seed", seed).set("n_samples", n);
    m.set("token_cache_version", TOKEN_CACHE_VERSION);
    record_options(&mut m, &opts)?;
    m.save(&manifest_path(&out))?;
    log(cli, format!("wrote {n} samples to {}", out.display()));
    Ok(())
}

fn conditional(cli: &Cli, cfg: &RunConfig, c: &Conditional, mode: SampleMode, mut m: Manifest) -> Result<()> {
    let name = match mode {
        SampleMode::Fold => "fold",
        SampleMode::InverseFold => "invfold",
        SampleMode::Scaffold => "scaffold",
        SampleMode::CoGen => unreachable!("co-generation is not conditional"),
    };
    let out = out_path(cli, &format!("{name}.hdtk"));
    let ck = load_checkpoint(&c.checkpoint)?;
    let cache = load_token_cache(&c.input)?;
    let seed = cli.seed.unwrap_or(cfg.sample.seed);
    let limit = c.limit.unwrap_or(cfg.sample.n_samples).min(cache.samples.len());
    let ds = ck.params.config().struct_dim;
    let mut results = Vec::with_capacity(limit);
    let (mut sq, mut hits, mut positions) = (0.0f64, 0usize, 0usize);
    let mut last_opts = None;
    for (k, input) in cache.samples.iter().take(limit).enumerate() {
        let mut opts = cfg.sample.options(mode, input.len(), sample_seed(seed, k as u64));
        if mode == SampleMode::Scaffold {
            let start = cfg.sample.motif_start.min(input.len() - 1);
            let end = (start + cfg.sample.motif_len).min(input.len());
            opts.motif = Some(Motif {
                positions: (start..end).collect(),
                seq: input.seq[start..end].to_vec(),
                struct_tokens: input.struct_tokens[start * ds..end * ds].to_vec(),
            });
        }
        let r = generate(&ck.params, &ck.scaler, &opts, Some(input))?;
        sq += r.struct_tokens.iter().zip(&input.struct_tokens).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        hits += r.seq.iter().zip(&input.seq).filter(|(a, b)| a == b).count();
        positions += input.len();
        results.push(r);
        last_opts = Some(opts);
    }
    save_results(&out, &ck, &results)?;
    m.set("command", name).set("checkpoint", c.checkpoint.display()).set("input", c.input.display());
    m.set("seed", seed).set("n_inputs", limit).set("token_cache_version", TOKEN_CACHE_VERSION);
    if let Some(o) = &last_opts {
        let mut o = o.clone();
        o.length = 0;
        record_options(&mut m, &o)?;
        m.entries.retain(|(k, _)| k != "sample.length");
    }
    if positions > 0 {
        match mode {
            SampleMode::Fold => m.set("rms_vs_input", format!("{:?}", (sq / positions as f64).sqrt())),
            SampleMode::InverseFold => m.set("accuracy_vs_input", format!("{:?}", hits as f64 / positions as f64)),
            _ => &mut m,
        };
    }
    m.save(&manifest_path(&out))?;
    log(cli, format!("wrote {limit} results to {}", out.display()));
    Ok(())
}

fn as_results(samples: Vec<TrackPair>) -> Vec<GenerationResult> {
    samples
        .into_iter()
        .map(|p| {
            let dim = p.dim();
            GenerationResult { seq: p.seq, struct_tokens: p.struct_tokens, dim, trace: None }
        })
        .collect()
}

fn eval_cmd(cli: &Cli, cfg: &RunConfig, input: &Path, mut m: Manifest) -> Result<()> {
    let out = out_path(cli, "report.txt");
    let world = gen_world_from(&cfg.world)?;
    let cache = load_token_cache(input)?;
    if cache.samples.iter().any(|p| p.struct_mask.iter().any(|&x| x)) {
        return Err(Error::arg("evaluation needs complete samples"));
    }
    let samples = as_results(cache.samples);
    let report = eval_suite(&world, &samples, &cfg.eval.thresholds)?;
    crate::persistence::write_atomic(&out, report.to_text().as_bytes())?;
    let mut table = String::from("index\tlength\tself_consistency\n");
    for (k, s) in samples.iter().enumerate() {
        let sc = self_consistency(&world, &s.seq, &s.struct_f64())?;
        table.push_str(&format!("{k}\t{}\t{sc:?}\n", s.len()));
    }
    let table_path = PathBuf::from(format!("{}.samples.tsv", out.display()));
    crate::persistence::write_atomic(&table_path, table.as_bytes())?;
    m.set("command", "eval").set("input", input.display());
    m.set_flattened("world", &cfg.world)?.set_flattened("eval", &cfg.eval)?;
    m.save(&manifest_path(&out))?;
    log(cli, report.to_text());
    Ok(())
}

fn sweep_cmd(cli: &Cli, cfg: &RunConfig, checkpoint: &Path, mut m: Manifest) -> Result<()> {
    let dir = out_path(cli, "sweep");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ck = load_checkpoint(checkpoint)?;
    let world = gen_world_from(&cfg.world)?;
    let seed = cli.seed.unwrap_or(cfg.sample.seed);
    let sw = &cfg.sweep;
    let mut summary = String::from("tau_z\tcfg_scale\tlm_steps\tmean_self_consistency\tfile\n");
    for &tau_z in &sw.tau_z {
        for &omega in &sw.cfg_scale {
            for &steps in &sw.lm_steps {
                let mut opts = cfg.sample.options(SampleMode::CoGen, sw.length, seed);
                opts.tau_z = tau_z;
                opts.cfg_scale = omega;
                opts.lm_steps = Some(steps);
                let mut results = Vec::with_capacity(sw.n_samples);
                for k in 0..sw.n_samples as u64 {
                    opts.seed = sample_seed(seed, k);
                    results.push(generate(&ck.params, &ck.scaler, &opts, None)?);
                }
                let report: EvalReport = eval_suite(&world, &results, &cfg.eval.thresholds)?;
                let name = format!("cell_tz{tau_z}_w{omega}_T{steps}.txt");
                crate::persistence::write_atomic(&dir.join(&name), report.to_text().as_bytes())?;
                summary.push_str(&format!("{tau_z}\t{omega}\t{steps}\t{:?}\t{name}\n", report.mean_self_consistency));
                log(cli, format!("tau_z={tau_z} cfg={omega} T={steps}: sc={:.4}", report.mean_self_consistency));
            }
        }
    }
    crate::persistence::write_atomic(&dir.join("summary.tsv"), summary.as_bytes())?;
    m.set("command", "sweep").set("checkpoint", checkpoint.display()).set("seed", seed);
    m.set_flattened("sweep", sw)?.set_flattened("world", &cfg.world)?;
    m.save(&dir.join("manifest"))?;
    Ok(())
}
