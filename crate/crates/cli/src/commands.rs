use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use geodiff_core::config::ExperimentConfig;
use geodiff_core::container::{
    embedding_records, load_model_into, load_records, records_to_embeddings, save_model, save_records,
};
use geodiff_core::dataset::{export_dataset, generate_dataset};
use geodiff_core::matching::Variant;
use geodiff_core::model::JointModel;
use geodiff_core::nn::gradcheck::{check_layer, joint_graph_check, layer_suite, loss_suite, REL_TOLERANCE};
use geodiff_core::ppm::{read_ppm, write_ppm};
use geodiff_core::restoration::restore;
use geodiff_core::retrieval::{build_index, top_k_batch, write_ground_truth, GroundTruth};
use geodiff_core::train::{
    embed_images, evaluate_model, gallery_images, init_model, restore_queries, split_dataset, train_on,
};
use geodiff_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Command, ConfigArgs};

const MODEL_FILE: &str = "model.mcgt";
const CONFIG_FILE: &str = "config.ini";

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { cfg, out } => gen_data(&cfg, &out),
        Command::Train { cfg, out, full_chain } => train(&cfg, &out, full_chain),
        Command::Restore { run, query, out, seed } => restore_image(&run, &query, &out, seed),
        Command::Index { run, out } => index(&run, &out),
        Command::Query { index, query, k, out } => query_index(&index, &query, k, out.as_deref()),
        Command::Eval { run, out } => eval(&run, out),
        Command::Gradcheck { seed } => gradcheck(seed),
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::toy(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(s) = args.seed {
        cfg.dataset.seed = s;
    }
    let ds = generate_dataset(&cfg.dataset)?;
    export_dataset(&ds, out)?;
    eprintln!("wrote {} gallery images to {}", ds.gallery_len(), out.display());
    Ok(())
}

fn train(args: &ConfigArgs, out: &Path, full_chain: bool) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(s) = args.seed {
        cfg.optim.seed = s;
    }
    cfg.optim.full_chain |= full_chain;
    cfg.output_dir = out.to_path_buf();
    fs::create_dir_all(out)?;
    let ds = generate_dataset(&cfg.dataset)?;
    let (model, history) = train_on(&cfg, &ds, |epoch, loss| eprintln!("epoch {epoch:>3}  L_all {loss:.4}"))?;
    save_model(&model, &out.join(MODEL_FILE))?;
    cfg.save(&out.join(CONFIG_FILE))?;
    fs::write(out.join("history.csv"), history.to_csv())?;
    if !history.evals.is_empty() {
        fs::write(out.join("epoch_eval.csv"), history.evals_csv())?;
    }
    eprintln!("saved run to {}", out.display());
    Ok(())
}

fn load_run(run: &Path) -> Result<(ExperimentConfig, JointModel<f32>)> {
    let cfg = ExperimentConfig::load(&run.join(CONFIG_FILE))?;
    cfg.validate()?;
    let mut model = init_model(&cfg)?;
    load_model_into(&mut model, &run.join(MODEL_FILE))?;
    Ok((cfg, model))
}

fn restore_image(run: &Path, query: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let (cfg, model) = load_run(run)?;
    let img = read_ppm(query)?;
    let sched = cfg.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.eval.seed));
    let chain = restore(&model, &img, &sched, cfg.schedule.sigma, &mut rng)?;
    write_ppm(out, chain.last().expect("non-empty chain"))?;
    Ok(())
}

fn index(run: &Path, out: &Path) -> Result<()> {
    let (cfg, model) = load_run(run)?;
    let ds = generate_dataset(&cfg.dataset)?;
    let split = split_dataset(&ds, &cfg);
    let gallery = gallery_images(&ds)?;
    let imgs: Vec<_> = gallery.iter().map(|(_, i)| i.clone()).collect();
    let gallery_items: Vec<_> = gallery.iter().map(|(id, _)| *id).zip(embed_images(&model, &imgs)?).collect();
    let corrupted: Vec<_> = split.held_out.iter().map(|q| q.corrupted.clone()).collect();
    let inputs = match cfg.model.variant {
        Variant::Joint => restore_queries(&model, &cfg, &cfg.schedule.build()?, &corrupted)?,
        Variant::MatchingOnly => corrupted,
    };
    let query_items: Vec<_> = split.held_out.iter().map(|q| q.id).zip(embed_images(&model, &inputs)?).collect();
    let truth: GroundTruth = split.held_out.iter().map(|q| (q.id, [q.location_id].into())).collect();
    fs::create_dir_all(out)?;
    save_records(&out.join("gallery.mcgt"), &embedding_records(&gallery_items))?;
    save_records(&out.join("queries.mcgt"), &embedding_records(&query_items))?;
    write_ground_truth(&out.join("ground_truth.csv"), &truth)?;
    eprintln!("indexed {} gallery items and {} queries", gallery_items.len(), query_items.len());
    Ok(())
}

fn query_index(index: &Path, query: &Path, k: usize, out: Option<&Path>) -> Result<()> {
    let gallery = records_to_embeddings(&load_records(index)?)?;
    let queries = records_to_embeddings(&load_records(query)?)?;
    let idx = build_index(gallery.iter().map(|(id, v)| (*id, v)))?;
    let lists = top_k_batch(&idx, &queries, k)?;
    let mut csv = String::from("query_id,rank,item_id,score\n");
    for l in &lists {
        for (rank, (id, score)) in l.entries.iter().enumerate() {
            csv.push_str(&format!("{},{},{},{:.6}\n", l.query_id, rank + 1, id, score));
        }
    }
    match out {
        Some(p) => fs::write(p, csv)?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn eval(run: &Path, out: Option<PathBuf>) -> Result<()> {
    let (cfg, model) = load_run(run)?;
    let ds = generate_dataset(&cfg.dataset)?;
    let outcome = evaluate_model(&model, &cfg, &ds)?;
    let out = out.unwrap_or_else(|| run.join("metrics.csv"));
    fs::write(&out, outcome.held_out.metrics.to_csv())?;
    println!("held-out views of training locations\n{}", outcome.held_out.metrics.table());
    if let Some(r) = outcome.held_out.restoration {
        println!("restoration MSE: corrupted {:.4} -> restored {:.4}\n", r.corrupted_mse, r.restored_mse);
    }
    if let Some(u) = outcome.unseen {
        let path = out.with_file_name("unseen_metrics.csv");
        fs::write(&path, u.metrics.to_csv())?;
        println!("unseen locations\n{}", u.metrics.table());
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let mut failed = 0;
    let joint = joint_graph_check(seed, 6)?;
    let reports = layer_suite()
        .into_iter()
        .map(|(spec, shape)| check_layer(&spec, &shape, seed))
        .chain(loss_suite(seed))
        .chain([Ok(joint.all), Ok(joint.res), Ok(joint.mat)])
        .collect::<Result<Vec<_>>>()?;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!("{:<28} {:>5} probes  max rel err {:.2e}  {status}", r.name, r.checked, r.max_rel_err);
    }
    let additive = joint.additivity_err <= REL_TOLERANCE;
    failed += usize::from(!additive);
    println!(
        "{:<28} {:>5}         max rel err {:.2e}  {}",
        "joint additivity",
        "",
        joint.additivity_err,
        if additive { "ok" } else { "FAIL" }
    );
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}
