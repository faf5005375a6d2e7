//! `train`: run one training experiment and leave steps.csv, checkpoints,
//! and the resolved config in the output directory.

use std::path::{Path, PathBuf};

use poise_core::trainer::run_training;

use crate::config::{self, Needs};
use crate::error::Result;

pub fn run(config_path: &Path, output_flag: Option<PathBuf>) -> Result<()> {
    let raw = config::load_raw(config_path)?;
    let res = config::resolve(&raw, Needs::Train, None, None)?;
    let out = config::output_dir(output_flag, &res)?;
    config::prepare_run_dir(&out, &res.snapshot(&out))?;

    let train = res.train.as_ref().expect("train section resolved");
    let run = run_training(&res.task, &res.policy, &res.features, train, Some(&out))?;
    match run.reports.last() {
        Some(last) => println!(
            "train: method={} steps={} final_reward={:.4} final_grad_norm={:.4e} -> {}",
            train.method.name(),
            run.reports.len(),
            last.reward_mean,
            last.grad_norm,
            out.display()
        ),
        None => println!("train: method={} steps=0 -> {}", train.method.name(), out.display()),
    }
    Ok(())
}
