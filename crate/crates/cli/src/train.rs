use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use freqmamba::model::Model;
use freqmamba::training::{evaluate, synth_rain, Pair, Trainer};

use crate::config::RunConfig;
use crate::fail::Exit;
use crate::restore::load_pairs;

const DEFAULT_OUT: &str = "runs/train";

pub fn run(config: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let out = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| DEFAULT_OUT.into());
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(|e| e.context(Exit::Io))?;
    fs::write(out.join("run.toml"), cfg.to_text()).context("writing run.toml")?;

    let data = match &cfg.data.paired_folder {
        Some(dir) => load_pairs(dir)?.into_iter().map(|(_, p)| p).collect(),
        None => synth_rain(&cfg.data.synth, cfg.train.seed, cfg.data.pairs)?
            .into_iter()
            .map(|s| Pair {
                rainy: s.rainy,
                clean: s.clean,
            })
            .collect::<Vec<_>>(),
    };
    let model = Model::build(cfg.model.clone(), cfg.train.seed)?;
    println!(
        "training {} parameters on {} pairs for {} iterations",
        model.parameter_count(),
        data.len(),
        cfg.train.total_iters
    );

    let mut log = BufWriter::new(File::create(out.join("train.log")).context("creating train.log")?);
    let mut trainer = Trainer::new(model, cfg.train.clone(), data.clone())?;
    let mut io_err = None;
    trainer.run(|entry| {
        println!("{entry}");
        if let Err(e) = writeln!(log, "{entry}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing train.log");
    }
    log.flush().context("writing train.log")?;

    let names: Vec<String> = trainer.model.store.names().map(str::to_owned).collect();
    let mut ck = trainer.model.to_checkpoint(trainer.iteration() as u64);
    ck.tensors.extend(trainer.adam.to_records(&names));
    let ck_path = out.join("model.fmck");
    ck.save(&ck_path)?;

    let e = evaluate(&trainer.model, &data)?;
    println!(
        "train set: PSNR {:.2} dB -> {:.2} dB, SSIM {:.4} -> {:.4}",
        e.input_psnr, e.psnr, e.input_ssim, e.ssim
    );
    println!("checkpoint written to {}", ck_path.display());
    Ok(())
}
