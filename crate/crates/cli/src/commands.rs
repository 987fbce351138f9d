use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use placefl_core::config::ExperimentConfig;
use placefl_core::experiment::{load_or_generate, partition_clients, run_experiment};
use placefl_core::manifest::Manifest;
use placefl_core::metrics::{read_metrics, MetricRecord, MetricsWriter, RunSummary};
use placefl_core::model::ParamVector;
use placefl_core::partition::{partition_stats, pooled_samples, read_partition, write_partition, PartitionStats};
use placefl_core::report::{tables, MeanStd};
use placefl_core::retrieval::{outcomes_at_k, recall_at_k, EvalSet};
use placefl_core::synth::{generate_world, world_stats};
use placefl_core::{Error, Result};

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", path.display())))
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn generate(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    cfg.world.validate()?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("manifest.csv"));
    let manifest = generate_world(&cfg.world)?;
    create_parent(&out)?;
    manifest.save(&out)?;
    let s = world_stats(&manifest);
    println!("wrote {}", out.display());
    println!(
        "cities {}  sequences {}  images {} ({} query, {} database)  usable queries {:.1}%",
        s.cities,
        s.sequences,
        s.images,
        s.query_images,
        s.database_images,
        100.0 * s.usable_query_fraction
    );
    Ok(())
}

fn print_stats(kind: &str, stats: &PartitionStats) {
    println!("{:<12} {:>8} {:>16} {:>18}", "split", "clients", "seqs/client", "images/client");
    println!(
        "{:<12} {:>8} {:>16} {:>18}",
        kind,
        stats.clients,
        format!("{:.1} ± {:.1}", stats.seqs_mean, stats.seqs_std),
        format!("{:.1} ± {:.1}", stats.images_mean, stats.images_std)
    );
}

pub fn partition(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    if let Some(m) = &cfg.manifest {
        require_file(m)?;
    } else {
        cfg.world.validate()?;
    }
    cfg.partition.validate()?;
    let manifest = load_or_generate(cfg)?;
    let mut fresh = cfg.clone();
    fresh.partition_file = None;
    let clients = partition_clients(&fresh, &manifest)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("partition.jsonl"));
    create_parent(&out)?;
    write_partition(&clients, BufWriter::new(File::create(&out)?))?;
    println!("wrote {}", out.display());
    print_stats(cfg.partition.kind.as_str(), &partition_stats(&manifest, &clients)?);
    Ok(())
}

pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    cfg.save(&cfg.output_dir.join("config.toml"))?;
    let mut writer = MetricsWriter::create(&cfg.output_dir.join("metrics.jsonl"))?;
    let mut sink = |record: &MetricRecord| {
        if let MetricRecord::Summary(s) = record {
            let k = cfg.eval.ks[0];
            eprintln!(
                "{} / {} / seed {}: R@{k} {:.2}% -> {:.2}%",
                s.key.study,
                s.key.variant,
                s.key.seed,
                100.0 * s.initial.at(k).unwrap_or(0.0),
                100.0 * s.final_recall.at(k).unwrap_or(0.0)
            );
        }
        writer.write(record)
    };
    let summaries = run_experiment(cfg, &mut sink, Some(&cfg.output_dir.join("checkpoints")))?;
    let text: String = tables(&summaries).iter().map(|t| t.render() + "\n").collect();
    std::fs::write(cfg.output_dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    manifest: &Path,
    partition: Option<&Path>,
    outcomes: Option<&Path>,
) -> Result<()> {
    require_file(checkpoint)?;
    require_file(manifest)?;
    if let Some(p) = partition {
        require_file(p)?;
    }
    let ks = &cfg.eval.ks;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("ks must be non-empty and every k >= 1".into()));
    }
    let params = ParamVector::read_from(BufReader::new(File::open(checkpoint)?))?;
    params.check_spec(&cfg.embedder)?;
    let manifest = Manifest::load(manifest)?;
    let (queries, database) = match partition {
        Some(p) => {
            let clients = read_partition(BufReader::new(File::open(p)?), p)?;
            placefl_core::partition::check_against(&manifest, &clients)?;
            pooled_samples(&manifest, &clients)
        }
        None => manifest
            .samples()
            .iter()
            .cloned()
            .partition(|s| s.role == placefl_core::geo::Role::Query),
    };
    let set = EvalSet::new(queries, database, cfg.eval.positive_radius)?;
    let report = recall_at_k(&params, &cfg.embedder, &set, ks)?;
    println!(
        "queries {} (excluded {})  database {}",
        report.usable_queries,
        report.excluded_queries,
        set.database().len()
    );
    for (k, r) in &report.recall {
        println!("R@{k:<4} {:.2}%", 100.0 * r);
    }
    if let Some(path) = outcomes {
        let max_k = *ks.iter().max().expect("ks checked non-empty");
        create_parent(path)?;
        let mut w = BufWriter::new(File::create(path)?);
        for o in outcomes_at_k(&params, &cfg.embedder, &set, max_k)? {
            serde_json::to_writer(&mut w, &o)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn report(metrics: &[PathBuf], csv_dir: Option<&Path>) -> Result<()> {
    let mut summaries: Vec<RunSummary> = Vec::new();
    for path in metrics {
        require_file(path)?;
        for r in read_metrics(path)? {
            if let MetricRecord::Summary(s) = r {
                summaries.push(s);
            }
        }
    }
    if summaries.is_empty() {
        return Err(Error::InvalidInput("no finished runs in the metrics files".into()));
    }
    let all = tables(&summaries);
    for t in &all {
        println!("{}", t.render());
    }
    if let Some(dir) = csv_dir {
        std::fs::create_dir_all(dir)?;
        for t in &all {
            std::fs::write(dir.join(format!("{}.csv", t.study)), t.to_csv())?;
        }
    }
    let k = summaries[0].final_recall.recall.keys().next().copied().unwrap_or(1);
    let overall = MeanStd::of(&summaries.iter().filter_map(|s| s.final_recall.at(k)).collect::<Vec<_>>());
    println!("{} runs, overall R@{k} {}", overall.n, overall.percent());
    Ok(())
}
