use std::process::ExitCode;

use clap::{Arg, ArgAction, Command};
use texsync::config::{parse_override, parse_value_for, RunConfig, KEYS};
use texsync::pipeline;

fn command() -> Command {
    let mut cmd = Command::new("texsync")
        .about("Texture a mesh by synchronized multi-view diffusion")
        .arg(Arg::new("config").long("config").short('c').value_name("FILE").help("TOML config file"))
        .arg(Arg::new("verbose").short('v').action(ArgAction::Count).help("Increase log verbosity"))
        .arg(
            Arg::new("print-config")
                .long("print-config")
                .action(ArgAction::SetTrue)
                .help("Print the effective config and exit"),
        )
        .arg(
            Arg::new("overrides")
                .value_name("KEY=VALUE")
                .num_args(0..)
                .help("Further overrides, including dotted keys such as direction_bins.top_min=50"),
        );
    for key in KEYS {
        let dashed = key.replace('_', "-");
        let mut arg = Arg::new(*key).long(*key).value_name("VALUE").action(ArgAction::Set);
        if dashed != *key {
            arg = arg.visible_alias(dashed);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn main() -> ExitCode {
    let matches = command().get_matches();
    let level = match matches.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let mut overrides: Vec<_> = KEYS
        .iter()
        .filter_map(|k| matches.get_one::<String>(k).map(|v| (k.to_string(), parse_value_for(k, v))))
        .collect();
    for raw in matches.get_many::<String>("overrides").into_iter().flatten() {
        match parse_override(raw) {
            Ok(o) => overrides.push(o),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    }
    let document = match matches.get_one::<String>("config") {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => Some(text),
            Err(e) => {
                eprintln!("error: cannot read {path}: {e}");
                return ExitCode::from(2);
            }
        },
        None => None,
    };
    let cfg = match RunConfig::from_sources(document.as_deref(), &overrides).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if matches.get_flag("print-config") {
        print!("{}", cfg.to_toml());
        return ExitCode::SUCCESS;
    }
    match pipeline::run(&cfg) {
        Ok(report) => {
            println!("{}", report.outputs.report.display());
            if let Some(toy) = &report.toy {
                println!("psnr vs oracle: {:.2} dB", toy.psnr_vs_oracle_db);
            }
            println!(
                "coverage: {:.1}% of chart texels, {:.2}s",
                100.0 * report.coverage.visible_fraction,
                report.total_seconds
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
