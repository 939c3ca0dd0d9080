use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};
use cooc_core::config;

/// Subcommands that take configuration flags.
pub const RUN_COMMANDS: [(&str, &str); 6] = [
    ("train", "Train a model and write metrics, summary and checkpoints"),
    ("eval", "Report linear-probe accuracy of a checkpoint at both layers"),
    ("probe-mask", "Probe accuracy when local representations are randomly discarded"),
    ("probe-pgd", "Probe accuracy under an l-infinity PGD attack"),
    ("probe-erf", "Effective receptive-field sizes of the local representations"),
    ("probe-sim", "Correlation between global and local similarity across image pairs"),
];

const RESERVED: [&str; 7] = ["config", "manifest", "out-dir", "checkpoint", "resume", "help", "version"];

fn kebab(s: &str) -> String {
    s.replace(['.', '_'], "-")
}

/// Long flag and optional short alias for every config key. The alias is
/// the key's last segment when that is unique and free.
pub fn config_flags() -> Vec<(&'static str, String, Option<String>)> {
    let keys = config::keys();
    let longs: BTreeSet<String> = keys.iter().map(|k| kebab(k)).collect();
    let leaf = |k: &str| kebab(k.rsplit('.').next().unwrap_or(k));
    keys.iter()
        .map(|&k| {
            let long = kebab(k);
            let l = leaf(k);
            let unique = keys.iter().filter(|o| leaf(o) == l).count() == 1;
            let alias = (l != long && unique && !longs.contains(&l) && !RESERVED.contains(&l.as_str())).then_some(l);
            (k, long, alias)
        })
        .collect()
}

fn run_command(name: &'static str, about: &'static str) -> Command {
    let mut cmd = Command::new(name)
        .about(about)
        .arg(Arg::new("config").long("config").value_name("FILE").value_parser(clap::value_parser!(PathBuf)).help("key = value config file"))
        .arg(
            Arg::new("manifest")
                .long("manifest")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Reuse the configuration recorded in a run manifest")
                .conflicts_with("config"),
        )
        .arg(Arg::new("out-dir").long("out-dir").value_name("DIR").value_parser(clap::value_parser!(PathBuf)).help("Output directory (default runs/<timestamp>-<hash>)"))
        .arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE").value_parser(clap::value_parser!(PathBuf)).help("Checkpoint to evaluate"));
    if name == "train" {
        cmd = cmd.arg(
            Arg::new("resume")
                .long("resume")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Continue training from a checkpoint")
                .conflicts_with("checkpoint"),
        );
    }
    for (key, long, alias) in config_flags() {
        let mut arg = Arg::new(key).long(long).value_name("VALUE").action(ArgAction::Set).help(format!("Set `{key}`"));
        if let Some(a) = alias {
            arg = arg.visible_alias(a);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

pub fn command() -> Command {
    let mut cmd = Command::new("cooc")
        .about("Co-occurrence self-supervised learning: training, probes and receptive-field tools")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in RUN_COMMANDS {
        cmd = cmd.subcommand(run_command(name, about));
    }
    cmd.subcommand(
        Command::new("rf")
            .about("Print the layerwise receptive-field table, solving for a target if given")
            .arg(Arg::new("base").long("base").default_value("rf-resnet50").help("rf-resnet18, rf-resnet50 or resnet-reference"))
            .arg(Arg::new("target").long("target").value_parser(clap::value_parser!(usize)).help("Receptive field to solve for"))
            .arg(Arg::new("image").long("image").value_parser(clap::value_parser!(usize)).default_value("224").help("Input side for grid sizes"))
            .arg(Arg::new("small-image-stem").long("small-image-stem").action(ArgAction::SetTrue).help("3x3 stride-1 stem without max-pool")),
    )
}

/// Config overrides in command-line order.
pub fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    let mut found: Vec<(usize, String, String)> = Vec::new();
    for (key, _, _) in config_flags() {
        if let (Some(v), Some(i)) = (m.get_one::<String>(key), m.index_of(key)) {
            found.push((i, key.to_string(), v.clone()));
        }
    }
    found.sort();
    found.into_iter().map(|(_, k, v)| (k, v)).collect()
}
