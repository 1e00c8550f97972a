use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dac_core::datagen::{read_csv, write_csv, Generator, PointSet};
use dac_core::engine::{
    cluster_points, emit_plot, evaluate, train_with, Checkpoint, ClusterOptions, EvalOptions, TrainConfig,
};
use dac_core::{Error, Result};

use crate::{ClusterArgs, EvalArgs, GenDataArgs, PlotArgs, TrainArgs};

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn read_sets(path: &Path) -> Result<Vec<PointSet>> {
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    read_csv(BufReader::new(file))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

/// Writes through a temporary file so readers never see a half-written checkpoint.
fn save_atomically(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    ckpt.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let generator = Generator::new(a.kind.into(), a.n_max, a.k_max)?;
    let sets: Vec<PointSet> = (0..a.count as u64)
        .map(|i| {
            let d = generator.dataset(a.seed, i);
            PointSet { set_id: i, points: d.points, labels: Some(d.labels) }
        })
        .collect();
    let mut out = create(&a.out)?;
    write_csv(&mut out, &sets)?;
    out.flush()?;
    eprintln!("wrote {} datasets to {}", sets.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        model: a.model.into(),
        kind: a.kind.into(),
        density: a.density.into(),
        n_max: a.n_max,
        k_max: a.k_max,
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
        micro_batch: a.micro_batch,
        dim: a.dim,
        heads: a.heads,
        inducing: a.inducing,
        encoder_depth: a.encoder_depth,
        decoder_depth: a.decoder_depth,
        ..TrainConfig::default()
    };
    config.validate()?;
    eprintln!("training {}", describe_config(&config));
    let total = config.steps;
    let ckpt = train_with(config, |log, ckpt| {
        if a.log_every > 0 && (log.step % a.log_every == 0 || log.step == total) {
            eprintln!(
                "step {}/{} loss {:.5} running {:.5} grad-norm {:.4} elapsed {:.1}s",
                log.step,
                total,
                log.loss,
                log.running,
                log.grad_norm,
                log.elapsed.as_secs_f64()
            );
        }
        if a.save_every > 0 && log.step % a.save_every == 0 {
            save_atomically(ckpt, &a.out)?;
        }
        Ok(())
    })?;
    save_atomically(&ckpt, &a.out)?;
    eprintln!("saved {} after {} steps", a.out.display(), ckpt.steps_completed);
    Ok(())
}

fn describe_config(config: &TrainConfig) -> String {
    config.describe().iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

pub fn cluster(a: ClusterArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let sets = read_sets(&a.data)?;
    let options = ClusterOptions { threshold: a.threshold, max_iters: a.max_iters, seed: a.seed, removal: a.removal.into() };
    let mut results = Vec::with_capacity(sets.len());
    for set in &sets {
        let r = cluster_points(&ckpt, &set.points, &ClusterOptions { seed: a.seed.wrapping_add(set.set_id), ..options })?;
        let note = if r.exhausted { " (max-iters reached; leftover points form the last cluster)" } else { "" };
        eprintln!("set {}: {} points, {} clusters, {} iterations{note}", set.set_id, set.points.len(), r.k, r.iterations);
        results.push(PointSet { set_id: set.set_id, points: set.points.clone(), labels: Some(r.labels) });
    }
    let mut out = create(&a.out)?;
    write_csv(&mut out, &results)?;
    out.flush()?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let mut options = EvalOptions::new(a.kind.into(), a.n_max, a.k_max, a.num_datasets, a.seed);
    options.cluster.threshold = a.threshold;
    options.cluster.max_iters = a.max_iters;
    let report = evaluate(&ckpt, &options)?;
    let kv = report.to_key_value();
    fs::write(&a.report, &kv).map_err(|e| Error::Config(format!("cannot write {}: {e}", a.report.display())))?;
    let mut json = a.report.as_os_str().to_owned();
    json.push(".json");
    fs::write(PathBuf::from(json), report.to_json()?)?;
    print!("{kv}");
    Ok(())
}

pub fn plot(a: PlotArgs) -> Result<()> {
    let sets = read_sets(&a.data)?;
    let pick = |sets: &[PointSet], what: &str| -> Result<PointSet> {
        let found = match a.set_id {
            Some(id) => sets.iter().find(|s| s.set_id == id),
            None => sets.first(),
        };
        found.cloned().ok_or_else(|| Error::Contract(format!("{what} has no set {}", a.set_id.map_or("at all".into(), |i| i.to_string()))))
    };
    let (points, labels) = if sets.is_empty() && a.labels.is_none() {
        (Vec::new(), None)
    } else {
        let data = pick(&sets, "data file")?;
        let labels = match &a.labels {
            Some(path) => {
                let labelled = pick(&read_sets(path)?, "labels file")?;
                if labelled.points.len() != data.points.len() {
                    return Err(Error::Contract(format!(
                        "labels file has {} rows for set {} but the data has {}",
                        labelled.points.len(),
                        data.set_id,
                        data.points.len()
                    )));
                }
                labelled.labels
            }
            None => data.labels,
        };
        (data.points, labels)
    };
    emit_plot(&points, labels.as_deref(), &a.out)?;
    eprintln!("wrote {} points to {}", points.len(), a.out.display());
    Ok(())
}
