//! Writes a seeded toy corpus: clean scenes and degraded copies for a train
//! and a test split.
//!
//! cargo run --release --example synthetic_corpus -- <out-dir> [train] [test] [seed]

use std::path::PathBuf;
use std::process::ExitCode;

use ccsp_core::training::synth::build_desk_corpus;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(out) = args.first().map(PathBuf::from) else {
        eprintln!("usage: synthetic_corpus <out-dir> [train=200] [test=50] [seed=7]");
        return ExitCode::from(2);
    };
    let num = |i: usize, default: u64| args.get(i).and_then(|v| v.parse().ok()).unwrap_or(default);
    match build_desk_corpus(&out, num(1, 200) as usize, num(2, 50) as usize, num(3, 7)) {
        Ok(c) => {
            for (name, path) in [
                ("train clean", &c.train_clean),
                ("train degraded", &c.train_degraded),
                ("test clean", &c.test_clean),
                ("test degraded", &c.test_degraded),
            ] {
                println!("{name}: {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
