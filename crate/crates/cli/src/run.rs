use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use cooc_core::config::{parse_config, resolve, RunConfig};
use cooc_core::probes::{
    erf_stats, masking_robustness, pgd_attack, sample_pairs, similarity_correlation, strided_positions, AttackSpec,
};
use cooc_core::rfnet::{receptive_field_profile, solve_rf_config, ArchConfig, Backbone, Base, LayerKind};
use cooc_core::trainer::{fit, resume, Checkpoint, Dataset, EvalLayer, FitOptions, Split, TrainState};
use cooc_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything needed to repeat an invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub version: String,
    /// Covers the command, the resolved configuration and the input
    /// checkpoint contents.
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_sha256: Option<String>,
}

impl RunManifest {
    fn hash(command: &str, config: &RunConfig, checkpoint_sha256: Option<&str>) -> String {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(config).expect("config serializes"));
        h.update([0]);
        h.update(checkpoint_sha256.unwrap_or("").as_bytes());
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    fn write(&self) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(self.output_dir.join("manifest.json"), json)?;
        Ok(())
    }
}

/// Options of a configured command.
pub struct Invocation {
    pub command: String,
    pub config_file: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Value of `COOC_SEED`, used when no seed is set explicitly.
    pub env_seed: Option<String>,
}

fn resolve_config(inv: &Invocation) -> Result<RunConfig> {
    let (mut config, explicit) = match &inv.manifest {
        Some(path) => {
            let base = RunManifest::load(path)?.config;
            let mut entries: Vec<(String, String)> = base.to_text().lines().filter_map(split_line).collect();
            entries.extend(inv.overrides.iter().cloned());
            let parsed = resolve(&entries)?;
            // A manifest always pins the seed.
            (parsed.config, ["seed".to_string()].into_iter().collect())
        }
        None => {
            let parsed = parse_config(inv.config_file.as_deref(), &inv.overrides)?;
            (parsed.config, parsed.explicit)
        }
    };
    if !explicit.contains("seed") {
        if let Some(s) = &inv.env_seed {
            config.train.seed =
                s.trim().parse().map_err(|_| Error::Config { key: "COOC_SEED".into(), message: format!("not an integer: `{s}`") })?;
        }
    }
    Ok(config)
}

fn split_line(line: &str) -> Option<(String, String)> {
    line.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn timestamp() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string().replace(['-', ':'], "")
}

/// Resolve the configuration, create the output directory and write the
/// manifest before any computation. Returns the manifest and, for commands
/// that read one, the decoded checkpoint.
fn prepare(inv: &Invocation) -> Result<(RunManifest, Option<Checkpoint>)> {
    let config = resolve_config(inv)?;
    let ck_path = inv.checkpoint.clone().or_else(|| inv.resume.clone());
    let (ck, ck_sha) = match &ck_path {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", p.display())))?;
            (Some(Checkpoint::decode(&bytes)?), Some(sha256_hex(&bytes)))
        }
        None => (None, None),
    };
    let config_hash = RunManifest::hash(&inv.command, &config, ck_sha.as_deref());
    let output_dir = match &inv.out_dir {
        Some(d) => d.clone(),
        None => PathBuf::from("runs").join(format!("{}-{config_hash}", timestamp())),
    };
    fs::create_dir_all(&output_dir)?;
    let manifest = RunManifest {
        command: inv.command.clone(),
        seed: config.train.seed,
        config,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash,
        output_dir,
        checkpoint: ck_path,
        checkpoint_sha256: ck_sha,
    };
    manifest.write()?;
    Ok((manifest, ck))
}

pub fn dispatch(inv: &Invocation) -> Result<PathBuf> {
    if inv.command != "train" && inv.command != "probe-erf" && inv.checkpoint.is_none() {
        return Err(Error::Config { key: "checkpoint".into(), message: format!("`{}` needs --checkpoint", inv.command) });
    }
    let (m, ck) = prepare(inv)?;
    log::info!("{} → {}", m.command, m.output_dir.display());
    match m.command.as_str() {
        "train" => train(&m),
        "eval" => eval(&m, &ck.expect("checked above")),
        "probe-mask" => probe_mask(&m, &ck.expect("checked above")),
        "probe-pgd" => probe_pgd(&m, &ck.expect("checked above")),
        "probe-erf" => probe_erf(&m, ck.as_ref()),
        "probe-sim" => probe_sim(&m, &ck.expect("checked above")),
        other => Err(Error::Config { key: "command".into(), message: format!("unknown command `{other}`") }),
    }?;
    Ok(m.output_dir)
}

fn train(m: &RunManifest) -> Result<()> {
    let opts = FitOptions { out_dir: Some(m.output_dir.clone()), stop_after: None };
    let outcome = match &m.checkpoint {
        Some(p) => resume(&m.config.train, p, &opts)?,
        None => fit(&m.config.train, &opts)?,
    };
    println!("{}", serde_json::to_string(&outcome.summary)?);
    Ok(())
}

fn test_split(config: &RunConfig) -> Result<Dataset> {
    let data = config.train.dataset.load(Split::Test)?;
    if data.is_empty() {
        return Err(Error::Data("the test split is empty".into()));
    }
    Ok(data)
}

/// Decoded training state. Checkpoints written before any training step
/// carry no running statistics; identity statistics stand in for them.
fn load_state(m: &RunManifest, ck: &Checkpoint, classes: usize) -> Result<TrainState> {
    let mut state = TrainState::from_checkpoint(&m.config.train, classes, ck)?;
    let backbone = state.net.online.backbone.params_mut();
    if backbone.stats().iter().any(|s| !s.initialized) {
        log::warn!("checkpoint has no batch-norm statistics; using identity statistics");
        backbone.reset_stats_to_identity();
    }
    Ok(state)
}

#[derive(Serialize)]
struct ProbeSummary<'a, T: Serialize> {
    probe: &'a str,
    config_hash: &'a str,
    seed: u64,
    eval_layer: EvalLayer,
    result: T,
}

fn write_outputs<T: Serialize>(m: &RunManifest, probe: &str, header: &[&str], rows: &[Vec<String>], result: T) -> Result<()> {
    let mut w = csv::Writer::from_path(m.output_dir.join(format!("{probe}.csv")))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    let summary =
        ProbeSummary { probe, config_hash: &m.config_hash, seed: m.seed, eval_layer: m.config.train.eval_layer, result };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(m.output_dir.join("summary.json"), &json)?;
    print!("{json}");
    Ok(())
}

fn eval(m: &RunManifest, ck: &Checkpoint) -> Result<()> {
    let test = test_split(&m.config)?;
    let mut state = load_state(m, ck, test.classes)?;
    let acc = state.evaluate(&test)?;
    let rows: Vec<Vec<String>> = EvalLayer::ALL.iter().map(|l| vec![l.name().to_string(), acc[l.index()].to_string()]).collect();
    #[derive(Serialize)]
    struct EvalResult {
        patch: f64,
        post_mlp: f64,
        images: usize,
    }
    let result = EvalResult { patch: acc[0], post_mlp: acc[1], images: test.len() };
    write_outputs(m, "eval", &["layer", "accuracy"], &rows, result)
}

fn probe_mask(m: &RunManifest, ck: &Checkpoint) -> Result<()> {
    let test = test_split(&m.config)?;
    let mut state = load_state(m, ck, test.classes)?;
    let layer = m.config.train.eval_layer;
    let probe = state.probes[layer.index()].clone();
    let p = &m.config.probe;
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    let size = m.config.train.policy.output_size;
    let rep = masking_robustness(&mut state.net.online.backbone, &probe, &test, layer, &p.mask_fractions, p.mask_fill, size, &mut rng)?;
    let mut rows = vec![vec!["0".to_string(), rep.clean.to_string()]];
    rows.extend(rep.fractions.iter().zip(&rep.accuracies).map(|(f, a)| vec![f.to_string(), a.to_string()]));
    write_outputs(m, "probe-mask", &["fraction", "accuracy"], &rows, rep)
}

fn probe_pgd(m: &RunManifest, ck: &Checkpoint) -> Result<()> {
    let test = test_split(&m.config)?;
    let mut state = load_state(m, ck, test.classes)?;
    let layer = m.config.train.eval_layer;
    let probe = state.probes[layer.index()].clone();
    let p = &m.config.probe;
    let spec = AttackSpec::with_divisor(p.epsilon, p.gamma_div, p.iters)?;
    let size = m.config.train.policy.output_size;
    let rep = pgd_attack(&mut state.net.online.backbone, &probe, &test, &spec, layer, size)?;
    let row = vec![
        spec.epsilon.to_string(),
        spec.gamma.to_string(),
        spec.iterations.to_string(),
        rep.clean.to_string(),
        rep.adversarial.to_string(),
        rep.max_linf.to_string(),
    ];
    write_outputs(m, "probe-pgd", &["epsilon", "gamma", "iterations", "clean", "adversarial", "max_linf"], &[row], rep)
}

fn probe_erf(m: &RunManifest, ck: Option<&Checkpoint>) -> Result<()> {
    let test = test_split(&m.config)?;
    let backbone = match ck {
        Some(ck) => load_state(m, ck, test.classes)?.net.online.backbone,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
            Backbone::build(&m.config.train.arch, 3, &mut rng)?
        }
    };
    let p = &m.config.probe;
    let size = m.config.train.policy.output_size;
    let images = &test.images[..p.images.min(test.len())];
    let positions = strided_positions(backbone.grid_side(size), p.erf_stride);
    let stats = erf_stats(&backbone, images, &positions, &p.erf_thresholds, size)?;
    let rows: Vec<Vec<String>> = stats
        .thresholds
        .iter()
        .enumerate()
        .map(|(i, t)| vec![t.to_string(), stats.mean(i).to_string(), stats.max(i).to_string()])
        .collect();
    write_outputs(m, "probe-erf", &["threshold", "mean_sqrt_count", "max_sqrt_count"], &rows, stats)
}

fn probe_sim(m: &RunManifest, ck: &Checkpoint) -> Result<()> {
    let test = test_split(&m.config)?;
    let mut state = load_state(m, ck, test.classes)?;
    let p = &m.config.probe;
    let images = &test.images[..p.images.min(test.len())];
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    let pairs = sample_pairs(images.len(), p.pairs, &mut rng)?;
    let size = m.config.train.policy.output_size;
    let rep = similarity_correlation(&mut state.net.online.backbone, images, &pairs, m.config.train.eval_layer, size)?;
    let rows: Vec<Vec<String>> = rep
        .pairs
        .iter()
        .zip(rep.global_sims.iter().zip(&rep.local_sims))
        .map(|(&(a, b), (g, l))| vec![a.to_string(), b.to_string(), g.to_string(), l.to_string()])
        .collect();
    write_outputs(m, "probe-sim", &["image_a", "image_b", "global_sim", "local_sim"], &rows, rep)
}

/// Layerwise receptive-field table of `base`, or of the configuration
/// solved for `target`.
pub fn rf_report(base: &str, target: Option<usize>, image: usize, small_image_stem: bool) -> Result<String> {
    let base = Base::parse(base).ok_or_else(|| Error::Config {
        key: "base".into(),
        message: format!("unknown base `{base}`; expected rf-resnet18, rf-resnet50 or resnet-reference"),
    })?;
    let mut template = ArchConfig::for_base(base);
    if small_image_stem {
        template = template.with_small_image_stem();
    }
    let arch = match target {
        Some(t) => solve_rf_config(&template, t)?,
        None => template,
    };
    let chain = arch.descriptors();
    let profile = receptive_field_profile(&chain);
    let side = arch.grid_side(image);
    let mut out = format!("# {}\n# grid {side}x{side} at {image}px\n", arch.label());
    out.push_str("layer\tkind\tkernel\tstride\trf\n");
    for (i, (d, rf)) in chain.iter().zip(&profile).enumerate() {
        let kind = match d.kind {
            LayerKind::Conv => "conv",
            LayerKind::MaxPool => "max_pool",
            LayerKind::Identity => "identity",
        };
        out.push_str(&format!("{i}\t{kind}\t{}\t{}\t{rf}\n", d.kernel, d.stride));
    }
    let mut cfg = RunConfig::preset("toy")?;
    cfg.train.arch = arch;
    for line in cfg.to_text().lines().filter(|l| l.starts_with("arch.")) {
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}
