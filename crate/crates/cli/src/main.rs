use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stg_core::harness::{
    eval_all, gen_data, pretrain_base, render_curves, score_lines, summary_table, sweep, train_all,
    ExperimentConfig, SweepKind, TrainOptions,
};
use stg_core::Result;

#[derive(Parser)]
#[command(
    name = "stg",
    version,
    about = "Selective token generation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and freeze the base language model.
    Pretrain(Common),
    /// Write the few-shot train/valid/test files of every seed.
    GenData(Common),
    /// Train the configured method for every seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from existing run checkpoints.
        #[arg(long)]
        resume: bool,
        /// Stop after this many updates, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Decode the test split and write the run report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Fixed-c grid against dynamic selection, or a few-shot size grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "c")]
        over: SweepOver,
    },
    /// Score hypothesis lines against reference lines.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Render learning curves into a tab-separated file.
    Curves(Common),
    /// Print the resolved config.
    Config(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepOver {
    C,
    NTrain,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.updates=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    method: Option<String>,
    /// Selection probability for `fixed-c`.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    /// `greedy`, `beam:K` or `top-p:P:K`.
    #[arg(long)]
    decode: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut sets = vec![];
        if let Some(d) = &self.output_dir {
            sets.push(format!("output_dir={}", toml_str(&d.display().to_string())));
        }
        if let Some(s) = &self.seeds {
            let list: Vec<String> = s.iter().map(u64::to_string).collect();
            sets.push(format!("seeds=[{}]", list.join(",")));
        }
        if let Some(m) = &self.method {
            sets.push(format!("train.method={}", toml_str(m)));
        }
        if let Some(c) = self.c {
            sets.push(format!("train.c={c:?}"));
        }
        if let Some(u) = self.updates {
            sets.push(format!("train.updates={u}"));
        }
        if let Some(n) = self.n_train {
            sets.push(format!("task.n_train={n}"));
        }
        if let Some(w) = self.workers {
            sets.push(format!("train.workers={w}"));
            sets.push(format!("pretrain.workers={w}"));
        }
        sets.extend(self.sets.iter().cloned());
        let mut cfg = base.with_overrides(&sets)?;
        if let Some(d) = &self.decode {
            cfg.eval.decode = d.parse()?;
        }
        cfg.validate()?;
        for w in cfg.train.warnings() {
            eprintln!("warning: {w}");
        }
        Ok(cfg)
    }
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn read_lines(p: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(p).map_err(|source| stg_core::Error::File {
        path: p.display().to_string(),
        source,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let cfg = c.resolve()?;
            let path = pretrain_base(&cfg)?;
            println!("base checkpoint {}", path.display());
        }
        Command::GenData(c) => {
            for dir in gen_data(&c.resolve()?)? {
                println!("{}", dir.display());
            }
        }
        Command::Train {
            common,
            resume,
            stop_after,
        } => {
            let cfg = common.resolve()?;
            let states = train_all(&cfg, TrainOptions { resume, stop_after })?;
            for (seed, st) in cfg.seeds.iter().zip(&states) {
                let last = st.curve.last().map_or(f64::NAN, |r| r.valid_score);
                println!(
                    "seed {seed}: {} updates, valid score {last:.4}, {}",
                    st.update,
                    cfg.run_dir(*seed).display()
                );
            }
        }
        Command::Eval { common, json } => {
            let report = eval_all(&common.resolve()?)?;
            if json {
                print!("{}", report.to_json()?);
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::Sweep { common, over } => {
            let kind = match over {
                SweepOver::C => SweepKind::FixedC,
                SweepOver::NTrain => SweepKind::FewShot,
            };
            print!("{}", summary_table(&sweep(&common.resolve()?, kind)?));
        }
        Command::Score { hyp, reference } => {
            let m = score_lines(&read_lines(&hyp)?, &read_lines(&reference)?)?;
            for (k, v) in m {
                println!("{k}\t{v:.6}");
            }
        }
        Command::Curves(c) => println!("{}", render_curves(&c.resolve()?)?.display()),
        Command::Config(c) => print!("{}", c.resolve()?.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
