use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hybrid_diffusion::eval::EvalReport;
use hybrid_diffusion::persistence::{load_checkpoint, load_token_cache, Manifest};

const TINY: &str = r#"
[world]
seed = 5
vocab_size = 4
struct_dim = 2

[data]
n_samples = 48
min_len = 4
max_len = 10

[model]
d_hidden = 8
n_layers = 1
n_heads = 2
max_len = 12
vocab_size = 4
struct_dim = 2
denoiser_hidden = 8
denoiser_layers = 2
time_embed_dim = 4
ddpm_steps = 10

[train]
steps = 4
batch_size = 4
mask_steps = 10
ddpm_steps = 10
checkpoint_every = 2
log_every = 1

[sample]
n_samples = 3
length = 8
motif_start = 2
motif_len = 2

[sweep]
tau_z = [0.0, 0.5]
cfg_scale = [1.0]
lm_steps = [4]
n_samples = 2
length = 6
"#;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybrid-diffusion")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = bin(dir, args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(dir.path(), &["--config", "tiny.toml", "--quiet", "gen-data", "--out", "data.hdtk"]);
    ok(dir.path(), &["--config", "tiny.toml", "--quiet", "train", "--data", "data.hdtk", "--out", "model.hdck"]);
    dir
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(bin(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(bin(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(bin(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(dir.path(), &["sample"]).status.code(), Some(1));
    assert_eq!(bin(dir.path(), &["sample", "--checkpoint", "missing.hdck"]).status.code(), Some(2));
    fs::write(dir.path().join("bad.toml"), "[world]\nbogus = 1\n").unwrap();
    assert_eq!(bin(dir.path(), &["--config", "bad.toml", "gen-data"]).status.code(), Some(2));
}

#[test]
fn pipeline_writes_outputs_and_manifests() {
    let dir = setup();
    let d = dir.path();
    let data = load_token_cache(&d.join("data.hdtk")).unwrap();
    assert_eq!(data.samples.len(), 48);
    let ck = load_checkpoint(&d.join("model.hdck")).unwrap();
    assert_eq!(ck.step, 4);
    let metrics = fs::read_to_string(d.join("model.hdck.metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    for name in ["data.hdtk", "model.hdck"] {
        let m = Manifest::load(&hybrid_diffusion::persistence::manifest_path(&d.join(name))).unwrap();
        assert!(m.get("command").is_some());
    }

    let cfg = ["--config", "tiny.toml", "--quiet"];
    let run = |extra: &[&str]| ok(d, &[&cfg[..], extra].concat());
    run(&["sample", "--checkpoint", "model.hdck", "--out", "samples.hdtk"]);
    assert_eq!(load_token_cache(&d.join("samples.hdtk")).unwrap().samples.len(), 3);
    run(&["fold", "--checkpoint", "model.hdck", "--input", "data.hdtk", "--limit", "2", "--out", "fold.hdtk"]);
    run(&["invfold", "--checkpoint", "model.hdck", "--input", "data.hdtk", "--limit", "2", "--out", "inv.hdtk"]);
    run(&["scaffold", "--checkpoint", "model.hdck", "--input", "data.hdtk", "--limit", "2", "--out", "sc.hdtk"]);
    let folded = load_token_cache(&d.join("fold.hdtk")).unwrap();
    assert_eq!(folded.samples.len(), 2);
    assert_eq!(folded.samples[0].seq, data.samples[0].seq);
    let scaffolds = load_token_cache(&d.join("sc.hdtk")).unwrap();
    for (s, input) in scaffolds.samples.iter().zip(&data.samples) {
        assert_eq!(s.seq[2..4], input.seq[2..4]);
        assert_eq!(s.struct_tokens[4..8], input.struct_tokens[4..8]);
    }
    run(&["eval", "--input", "samples.hdtk", "--out", "report.txt"]);
    let report = EvalReport::parse(&fs::read_to_string(d.join("report.txt")).unwrap()).unwrap();
    assert_eq!(report.n_samples, 3);
    run(&["sweep", "--checkpoint", "model.hdck", "--out", "sweep"]);
    assert!(d.join("sweep").join("manifest").exists());
}

#[test]
fn sampling_is_byte_identical_across_runs() {
    let dir = setup();
    let d = dir.path();
    let args = |out: &'static str| ["--config", "tiny.toml", "--quiet", "--seed", "7", "sample", "--checkpoint", "model.hdck", "--out", out];
    ok(d, &args("a.hdtk"));
    ok(d, &args("b.hdtk"));
    assert_eq!(fs::read(d.join("a.hdtk")).unwrap(), fs::read(d.join("b.hdtk")).unwrap());
    assert_eq!(fs::read(d.join("a.hdtk.manifest")).ok(), fs::read(d.join("b.hdtk.manifest")).ok());
}
