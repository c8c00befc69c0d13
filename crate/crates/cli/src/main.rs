mod config;
mod run;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use fsmol_core::Error;

fn config_args() -> Vec<Arg> {
    let mut args = vec![
        Arg::new("config").long("config").value_name("FILE").help("flat key = value config file"),
        Arg::new("set")
            .long("set")
            .value_name("KEY=VALUE")
            .action(ArgAction::Append)
            .help("override any config key (repeatable)"),
    ];
    for (key, help) in config::keys() {
        let mut a = Arg::new(key).long(config::flag_name(key)).value_name("VALUE").help(help);
        if config::is_bool_key(key) {
            a = a.num_args(0..=1).default_missing_value("true");
        }
        args.push(a);
    }
    args
}

fn data_args() -> Vec<Arg> {
    vec![
        Arg::new("data")
            .long("data")
            .value_name("DIR")
            .help("dataset directory holding molecules.jsonl and labels.csv"),
        Arg::new("graphs").long("graphs").value_name("FILE").help("molecule graph file (JSON lines)"),
        Arg::new("labels").long("labels").value_name("FILE").help("label file (CSV)"),
        Arg::new("test_props")
            .long("test-props")
            .value_name("IDS")
            .help("comma-separated test property ids (default: the last --num-test properties)"),
        Arg::new("num_test")
            .long("num-test")
            .value_name("N")
            .default_value("3")
            .help("number of trailing properties held out for testing"),
    ]
}

fn out_arg(help: &'static str) -> Arg {
    Arg::new("out").long("out").value_name("DIR").required(true).help(help)
}

fn cli() -> Command {
    Command::new("fsmol")
        .about("Few-shot molecular property prediction with relational context graphs")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen-synth")
                .about("Generate a planted-similarity synthetic dataset")
                .arg(out_arg("output directory"))
                .arg(Arg::new("seed").long("seed").value_name("N").default_value("0").help("random seed"))
                .arg(Arg::new("molecules").long("molecules").value_name("N").default_value("2000").help("molecule count"))
                .arg(Arg::new("properties").long("properties").value_name("N").default_value("10").help("property count"))
                .arg(Arg::new("clusters").long("clusters").value_name("N").default_value("3").help("property families"))
                .arg(Arg::new("spread").long("spread").value_name("X").default_value("0.5").help("within-family weight noise"))
                .arg(Arg::new("label_noise").long("label-noise").value_name("P").default_value("0").help("label flip probability"))
                .arg(Arg::new("unknown_rate").long("unknown-rate").value_name("P").default_value("0").help("fraction of labels hidden"))
                .arg(
                    Arg::new("min_per_class")
                        .long("min-per-class")
                        .value_name("N")
                        .default_value("10")
                        .help("known labels required per class and property"),
                ),
        )
        .subcommand(
            Command::new("train")
                .about("Meta-train, then meta-test on the held-out properties")
                .args(config_args())
                .args(data_args())
                .arg(out_arg("output directory for log, checkpoints, gates and report"))
                .arg(Arg::new("mode").long("mode").value_name("MODE").help("ablation variant applied on top of the config")),
        )
        .subcommand(
            Command::new("eval")
                .about("Meta-test a checkpoint on the held-out properties")
                .args(config_args())
                .args(data_args())
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true).help("checkpoint file"))
                .arg(out_arg("output directory for the report")),
        )
        .subcommand(
            Command::new("ablate")
                .about("Train and test every ablation variant under every seed")
                .args(config_args())
                .args(data_args())
                .arg(out_arg("output directory for the ablation table"))
                .arg(
                    Arg::new("modes")
                        .long("modes")
                        .value_name("LIST")
                        .default_value("full,no_cprl,no_cgib,no_cprl_cgib")
                        .help("comma-separated variants: full, no_cprl, no_cgib, no_cprl_cgib, contrastive"),
                )
                .arg(Arg::new("seeds").long("seeds").value_name("LIST").default_value("0").help("comma-separated seeds")),
        )
        .subcommand(
            Command::new("sweep")
                .about("One train-and-test run per value of a hyperparameter")
                .args(config_args())
                .args(data_args())
                .arg(out_arg("output directory; each value gets its own subdirectory"))
                .arg(
                    Arg::new("axis")
                        .long("axis")
                        .value_name("AXIS")
                        .required(true)
                        .help("beta, temperature or n_auxi"),
                )
                .arg(
                    Arg::new("values")
                        .long("values")
                        .value_name("LIST")
                        .help("comma-separated values (default: the axis preset grid)"),
                ),
        )
        .subcommand(
            Command::new("export-gates")
                .about("Write retain probabilities of a checkpoint for every training target")
                .args(config_args())
                .args(data_args())
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true).help("checkpoint file"))
                .arg(out_arg("output directory for gates.csv"))
                .arg(
                    Arg::new("similarity")
                        .long("similarity")
                        .value_name("FILE")
                        .help("property similarity CSV; adds a rank-correlation summary"),
                )
                .arg(Arg::new("epoch").long("epoch").value_name("N").default_value("0").help("epoch label for the rows")),
        )
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 1,
        Error::Numerical(_) | Error::UndefinedMetric(_) => 3,
        _ => 2,
    }
}

fn dispatch(m: &ArgMatches) -> fsmol_core::Result<()> {
    match m.subcommand() {
        Some(("gen-synth", s)) => run::gen_synth(s),
        Some(("train", s)) => run::train(s),
        Some(("eval", s)) => run::eval(s),
        Some(("ablate", s)) => run::ablate(s),
        Some(("sweep", s)) => run::sweep(s),
        Some(("export-gates", s)) => run::export_gates(s),
        _ => Err(Error::Usage("missing command".into())),
    }
}

fn run_cli(argv: Vec<OsString>) -> u8 {
    let m = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&m) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run_cli(std::env::args_os().collect()))
}
