//! Write a small synthetic dataset in the CIFAR-10 binary layout, for
//! exercising the pipeline without the real files.
//!
//! Usage: synthetic_cifar DIR [PER_TRAIN_FILE] [TEST] [SEED]

use std::path::PathBuf;

fn main() -> msrnn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(dir) = args.first().map(PathBuf::from) else {
        eprintln!("usage: synthetic_cifar DIR [PER_TRAIN_FILE] [TEST] [SEED]");
        std::process::exit(1);
    };
    let num = |i: usize, default: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    msrnn::train::write_synthetic_cifar(&dir, num(1, 400), num(2, 1000), num(3, 0) as u64)
}
