//! Command-line front end: corpus generation, pretraining, probing,
//! fine-tuning, full evaluation, checkpoint inspection and ablation runs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use vqssl::checkpoint::{inspect_checkpoint, load_checkpoint};
use vqssl::config::TrainConfig;
use vqssl::datagen::{generate_corpus, load_corpus};
use vqssl::error::Error;
use vqssl::evalsuite::{eval_all, finetune, linear_probe};
use vqssl::trainer::{fit, fit_state, MetricsLog};

const USAGE: &str = "\
usage: vqssl <command> [flags]

commands:
  gen-data   --out DIR --num N [--seed S] [--config FILE]
  pretrain   --data DIR --out CKPT [--config FILE] [--seed S] [--epochs N]
             [--threads N] [--metrics FILE] [--resume CKPT] [--variant NAME]
  probe      --ckpt CKPT --data DIR [--config FILE] [--seed S] [--out FILE]
  finetune   --ckpt CKPT --data DIR [--config FILE] [--seed S] [--out FILE]
  eval-all   --ckpt CKPT --data DIR [--config FILE] [--seed S] [--out FILE]
  inspect    --ckpt CKPT [--config FILE] [--seed S] [--out FILE]
  ablate     --variant NAME --data DIR --out DIR [--config FILE] [--seed S]
             [--epochs N] [--threads N]

Config files are flat key=value lines (see README); --seed overrides
train.seed and data.seed, --epochs overrides train.epochs, --threads
overrides train.threads. Unknown flags and unknown config keys are errors.
";

struct Args {
    flags: Vec<(String, String)>,
}

impl Args {
    fn parse(argv: &[String], allowed: &[&str]) -> Result<Args, String> {
        let mut flags = Vec::new();
        let mut i = 0;
        while i < argv.len() {
            let flag = &argv[i];
            let Some(name) = flag.strip_prefix("--") else {
                return Err(format!("unexpected argument `{flag}`"));
            };
            if !allowed.contains(&name) {
                return Err(format!("unknown flag `--{name}`"));
            }
            let Some(value) = argv.get(i + 1) else {
                return Err(format!("flag `--{name}` needs a value"));
            };
            flags.push((name.to_string(), value.clone()));
            i += 2;
        }
        Ok(Args { flags })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.flags.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }

    fn require(&self, name: &str) -> Result<&str, String> {
        self.get(name).ok_or_else(|| format!("missing required flag `--{name}`"))
    }
}

fn load_config(args: &Args) -> Result<TrainConfig, Error> {
    let mut cfg = match args.get("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.get("seed") {
        let s: u64 = seed.parse().map_err(|_| Error::Config(format!("bad seed `{seed}`")))?;
        cfg.seed = s;
        cfg.data.seed = s;
    }
    if let Some(epochs) = args.get("epochs") {
        cfg.epochs =
            epochs.parse().map_err(|_| Error::Config(format!("bad epochs `{epochs}`")))?;
    }
    if let Some(threads) = args.get("threads") {
        cfg.threads =
            threads.parse().map_err(|_| Error::Config(format!("bad threads `{threads}`")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_or_print(path: Option<&str>, content: &str) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, content).map_err(|e| Error::io(p, e)),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn cmd_gen_data(args: &Args) -> Result<(), Error> {
    let cfg = load_config(args)?;
    let out = args.require("out").map_err(Error::Config)?;
    let num: usize = args
        .require("num")
        .map_err(Error::Config)?
        .parse()
        .map_err(|_| Error::Config("bad --num".into()))?;
    let manifest = generate_corpus(&cfg.data, num, Path::new(out))?;
    println!(
        "wrote {} samples ({}x{}) to {out}, spec hash {:016x}",
        manifest.count, manifest.image_size, manifest.image_size, manifest.spec_hash
    );
    Ok(())
}

fn cmd_pretrain(args: &Args) -> Result<(), Error> {
    let out = PathBuf::from(args.require("out").map_err(Error::Config)?);
    let data = args.require("data").map_err(Error::Config)?;
    let corpus = load_corpus(Path::new(data))?;
    let mut metrics = match args.get("metrics") {
        Some(p) => MetricsLog::to_file(Path::new(p))?,
        None => MetricsLog::in_memory(),
    };
    match args.get("resume") {
        Some(ckpt) => {
            let mut state = load_checkpoint(Path::new(ckpt))?;
            if let Some(epochs) = args.get("epochs") {
                state.config.epochs =
                    epochs.parse().map_err(|_| Error::Config("bad epochs".into()))?;
            }
            if let Some(threads) = args.get("threads") {
                state.config.threads =
                    threads.parse().map_err(|_| Error::Config("bad threads".into()))?;
            }
            fit_state(&mut state, &corpus, &out, &mut metrics)?;
            println!("resumed at epoch {} -> {}", state.epoch, out.display());
        }
        None => {
            let mut cfg = load_config(args)?;
            if let Some(name) = args.get("variant") {
                cfg.apply_variant_preset(name)?;
            }
            let state = fit(&cfg, &corpus, &out, &mut metrics)?;
            println!(
                "trained {} epochs ({} steps) -> {}",
                state.epoch,
                state.step,
                out.display()
            );
        }
    }
    Ok(())
}

fn cmd_probe(args: &Args) -> Result<(), Error> {
    let state = load_checkpoint(Path::new(args.require("ckpt").map_err(Error::Config)?))?;
    let corpus = load_corpus(Path::new(args.require("data").map_err(Error::Config)?))?;
    let outcomes = linear_probe(&state, &corpus, &state.config.probe)?;
    let mut text = String::from("fraction      LP (per-seed)\n");
    for o in &outcomes {
        let seeds: Vec<String> = o.per_seed.iter().map(|v| format!("{v:.3}")).collect();
        text += &format!("{:>7.0}% {:>7.3}  [{}]\n", o.fraction * 100.0, o.mean(), seeds.join(", "));
    }
    write_or_print(args.get("out"), &text)
}

fn cmd_finetune(args: &Args) -> Result<(), Error> {
    let state = load_checkpoint(Path::new(args.require("ckpt").map_err(Error::Config)?))?;
    let corpus = load_corpus(Path::new(args.require("data").map_err(Error::Config)?))?;
    let outcomes = finetune(&state, &corpus, &state.config.probe)?;
    let mut text = String::from("fraction      FT (per-seed)\n");
    for o in &outcomes {
        let seeds: Vec<String> = o.per_seed.iter().map(|v| format!("{v:.3}")).collect();
        text += &format!("{:>7.0}% {:>7.3}  [{}]\n", o.fraction * 100.0, o.mean(), seeds.join(", "));
    }
    write_or_print(args.get("out"), &text)
}

fn cmd_eval_all(args: &Args) -> Result<(), Error> {
    let state = load_checkpoint(Path::new(args.require("ckpt").map_err(Error::Config)?))?;
    let corpus = load_corpus(Path::new(args.require("data").map_err(Error::Config)?))?;
    let report = eval_all(&state, &corpus, &state.config.probe)?;
    let text = format!("{}\n{}", report.to_table(), report.to_text());
    write_or_print(args.get("out"), &text)
}

fn cmd_inspect(args: &Args) -> Result<(), Error> {
    let path = args.require("ckpt").map_err(Error::Config)?;
    let summary = inspect_checkpoint(Path::new(path))?;
    let mut text = String::new();
    text += &format!("checkpoint: {path}\n");
    text += &format!("step: {}\nepoch: {}\n", summary.step, summary.epoch);
    text += &format!("config_hash: {:016x}\n", summary.config_hash);
    text += &format!(
        "perplexity (coarse/medium/fine): {:.3} / {:.3} / {:.3}\n",
        summary.ppl[0], summary.ppl[1], summary.ppl[2]
    );
    text += &format!("payload: {} bytes in {} arrays\n", summary.payload_bytes, summary.arrays.len());
    for (name, shape) in &summary.arrays {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        text += &format!("  {name} [{}]\n", dims.join("x"));
    }
    write_or_print(args.get("out"), &text)
}

fn cmd_ablate(args: &Args) -> Result<(), Error> {
    let variant = args.require("variant").map_err(Error::Config)?;
    let out_dir = PathBuf::from(args.require("out").map_err(Error::Config)?);
    let corpus = load_corpus(Path::new(args.require("data").map_err(Error::Config)?))?;
    let mut cfg = load_config(args)?;
    cfg.apply_variant_preset(variant)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let ckpt = out_dir.join(format!("{variant}.ckpt"));
    let mut metrics = MetricsLog::to_file(&out_dir.join(format!("{variant}.metrics.tsv")))?;
    let state = fit(&cfg, &corpus, &ckpt, &mut metrics)?;
    let report = eval_all(&state, &corpus, &cfg.probe)?;
    let text = format!("variant: {variant}\n{}\n{}", report.to_table(), report.to_text());
    std::fs::write(out_dir.join(format!("{variant}.report.txt")), &text)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    print!("{text}");
    Ok(())
}

fn dispatch(command: &str, args: &Args) -> Result<(), Error> {
    match command {
        "gen-data" => cmd_gen_data(args),
        "pretrain" => cmd_pretrain(args),
        "probe" => cmd_probe(args),
        "finetune" => cmd_finetune(args),
        "eval-all" => cmd_eval_all(args),
        "inspect" => cmd_inspect(args),
        "ablate" => cmd_ablate(args),
        other => Err(Error::Config(format!("unknown command `{other}`"))),
    }
}

/// Flags accepted per command; --seed, --config and --out work everywhere.
fn allowed_flags(command: &str) -> &'static [&'static str] {
    match command {
        "gen-data" => &["out", "num", "seed", "config"],
        "pretrain" => &["out", "data", "seed", "config", "epochs", "threads", "metrics", "resume", "variant"],
        "probe" | "finetune" | "eval-all" => &["ckpt", "data", "seed", "config", "out"],
        "inspect" => &["ckpt", "seed", "config", "out"],
        "ablate" => &["variant", "data", "out", "seed", "config", "epochs", "threads"],
        _ => &[],
    }
}

pub fn run(argv: &[String]) -> u8 {
    let Some(command) = argv.first() else {
        eprint!("{USAGE}");
        return 2;
    };
    if command == "--help" || command == "-h" || command == "help" {
        print!("{USAGE}");
        return 0;
    }
    let allowed = allowed_flags(command);
    if allowed.is_empty() {
        eprintln!("error: unknown command `{command}`");
        eprint!("{USAGE}");
        return 2;
    }
    let args = match Args::parse(&argv[1..], allowed) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    match dispatch(command, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Precondition(_) => 2,
                _ => 1,
            }
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    ExitCode::from(run(&argv))
}
