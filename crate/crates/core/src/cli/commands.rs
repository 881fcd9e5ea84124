//! Implementations of the command-line verbs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde_json::json;

use super::config::{sweep_patterns, RunConfig};
use super::experiment::{mean_std, run_recovery, InitMethod};
use crate::backbone::{load_checkpoint, save_checkpoint, EmbeddingScheme, MixerModel, TimeAveraging, VelocityDenoiser};
use crate::channel::{ChannelDataset, InitPatternKind};
use crate::diffusion::NormalizationMode;
use crate::error::{Error, Result};
use crate::oracle::{check_forward_law, check_theorem2};
use crate::rng::{seeded, stream};
use crate::schedule::Stepping;
use crate::trainer::{train, write_loss_csv, write_timing_csv, TrainReport};

/// Independent seed lanes derived from the run seed.
mod lane {
    pub const TRAIN_SET: u64 = 0;
    pub const TEST_SET: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const GENERATE: u64 = 4;
    pub const ORACLE: u64 = 5;
    pub const EVAL: u64 = 100;
}

fn lane_seed(seed: u64, lane: u64) -> u64 {
    stream(seed, lane).random()
}

/// A command finished but a checked tolerance did not hold.
#[derive(Debug, Clone, PartialEq)]
pub struct ToleranceFailure(pub String);

pub type Outcome = std::result::Result<(), ToleranceFailure>;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn csv_with_header(config: &RunConfig, body: &str) -> String {
    format!("{}\n{body}", config.header())
}

fn json_report(config: &RunConfig, report: serde_json::Value) -> Result<String> {
    let doc = json!({ "config_sha256": config.hash(), "seed": config.seed, "report": report });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

impl Split {
    fn file(self) -> &'static str {
        match self {
            Split::Train => "train.nidf",
            Split::Test => "test.nidf",
        }
    }
}

fn synthesize(config: &RunConfig, split: Split) -> Result<ChannelDataset> {
    let d = &config.dataset;
    let (n, lane) = match split {
        Split::Train => (d.n_train, lane::TRAIN_SET),
        Split::Test => (d.n_test, lane::TEST_SET),
    };
    ChannelDataset::synthesize(&d.channel, n, d.n_antennas, d.n_subcarriers, lane_seed(config.seed, lane))
}

/// An explicit path, else the file in the output directory, else a fresh
/// in-memory synthesis.
fn load_split(config: &RunConfig, split: Split) -> Result<ChannelDataset> {
    let explicit = match split {
        Split::Train => &config.dataset.train_path,
        Split::Test => &config.dataset.test_path,
    };
    let default = config.out.join(split.file());
    let path = explicit.clone().or_else(|| default.is_file().then_some(default));
    let ds = match path {
        Some(p) => {
            log::info!("loading {}", p.display());
            ChannelDataset::load(&p)?
        }
        None => {
            log::info!("no {} found; synthesizing from the config", split.file());
            synthesize(config, split)?
        }
    };
    if (ds.n_antennas, ds.n_subcarriers) != (config.dataset.n_antennas, config.dataset.n_subcarriers) {
        return Err(Error::Shape {
            expected: format!("{}x{} channels", config.dataset.n_antennas, config.dataset.n_subcarriers),
            found: format!("{}x{}", ds.n_antennas, ds.n_subcarriers),
        });
    }
    if ds.is_empty() {
        return Err(Error::Config(format!("{} is empty", split.file())));
    }
    Ok(ds)
}

pub fn cmd_dataset(config: &RunConfig) -> Result<Outcome> {
    fs::create_dir_all(&config.out)?;
    for split in [Split::Train, Split::Test] {
        let ds = synthesize(config, split)?;
        let path = config.out.join(split.file());
        ds.save(&path)?;
        let worst = ds
            .samples
            .iter()
            .map(|s| (s.iter().map(|v| v * v).sum::<f64>() / ds.sample_len() as f64).sqrt() - 1.0)
            .fold(0.0f64, |a, e| a.max(e.abs()));
        println!(
            "wrote {}: {} samples of {}x{}, max relative norm deviation {worst:.2e}",
            path.display(),
            ds.len(),
            ds.n_antennas,
            ds.n_subcarriers
        );
    }
    Ok(Ok(()))
}

fn train_one(config: &RunConfig, checkpoint_dir: Option<&Path>) -> Result<(MixerModel, TrainReport)> {
    let schedule = config.schedule()?;
    let data = load_split(config, Split::Train)?;
    let mut model = MixerModel::new(config.mixer(), &mut seeded(lane_seed(config.seed, lane::INIT)))?;
    let train_config = crate::trainer::TrainConfig { seed: lane_seed(config.seed, lane::TRAIN), ..config.train.clone() };
    let report = train(&mut model, &data.samples, &train_config, &schedule, checkpoint_dir)?;
    Ok((model, report))
}

pub fn cmd_train(config: &RunConfig, grid: bool) -> Result<Outcome> {
    fs::create_dir_all(&config.out)?;
    if grid {
        return cmd_train_grid(config);
    }
    let ckpt_dir = config.out.join("checkpoints");
    if config.train.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir)?;
    }
    let (model, report) = train_one(config, Some(&ckpt_dir))?;
    let model_path = config.out.join("model.nidm");
    save_checkpoint(&model, &model_path)?;
    println!("wrote {}", model_path.display());
    let mut loss = Vec::new();
    write_loss_csv(&report.history, &mut loss)?;
    write_file(&config.out.join("loss.csv"), &csv_with_header(config, &String::from_utf8_lossy(&loss)))?;
    let mut timing = Vec::new();
    write_timing_csv(&report.history, &mut timing)?;
    write_file(&config.out.join("timing.csv"), &String::from_utf8_lossy(&timing))?;
    if let (Some(first), Some(last)) = (report.history.first(), report.history.last()) {
        println!("loss {:.6} (epoch 1) -> {:.6} (epoch {})", first.mean_loss, last.mean_loss, last.epoch);
    }
    Ok(Ok(()))
}

fn scheme_name(s: EmbeddingScheme) -> &'static str {
    match s {
        EmbeddingScheme::RowWise => "row_wise",
        EmbeddingScheme::ColumnWise => "column_wise",
        EmbeddingScheme::Together => "together",
    }
}

fn averaging_name(a: TimeAveraging) -> &'static str {
    match a {
        TimeAveraging::TauAvg => "tau_avg",
        TimeAveraging::AlphaAvg => "alpha_avg",
    }
}

fn normalization_name(n: NormalizationMode) -> &'static str {
    match n {
        NormalizationMode::IdenticalTotalPower => "identical_total_power",
        NormalizationMode::IdenticalNoisePower => "identical_noise_power",
    }
}

fn pattern_name(k: InitPatternKind) -> String {
    serde_json::to_value(k).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Two normalizations by three embedding schemes by two averagings.
fn cmd_train_grid(config: &RunConfig) -> Result<Outcome> {
    let grid_dir = config.out.join("grid");
    fs::create_dir_all(&grid_dir)?;
    let mut body = String::from("normalization,scheme,averaging,final_loss,best_loss\n");
    for norm in [NormalizationMode::IdenticalTotalPower, NormalizationMode::IdenticalNoisePower] {
        for scheme in [EmbeddingScheme::RowWise, EmbeddingScheme::ColumnWise, EmbeddingScheme::Together] {
            for avg in [TimeAveraging::TauAvg, TimeAveraging::AlphaAvg] {
                let mut c = config.clone();
                c.train.normalization = norm;
                c.model.embedding_scheme = scheme;
                c.model.averaging = avg;
                let tag = format!("{}_{}_{}", normalization_name(norm), scheme_name(scheme), averaging_name(avg));
                let (model, report) = train_one(&c, None)?;
                save_checkpoint(&model, &grid_dir.join(format!("{tag}.nidm")))?;
                let losses = report.losses();
                let last = losses.last().copied().unwrap_or(f64::NAN);
                let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
                println!("{tag}: final loss {last:.6}");
                writeln!(
                    body,
                    "{},{},{},{last},{best}",
                    normalization_name(norm),
                    scheme_name(scheme),
                    averaging_name(avg)
                )
                .expect("string write");
            }
        }
    }
    write_file(&config.out.join("grid_summary.csv"), &csv_with_header(config, &body))?;
    Ok(Ok(()))
}

fn load_denoiser(config: &RunConfig, checkpoint: Option<&Path>) -> Result<VelocityDenoiser> {
    let path: PathBuf = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| config.out.join("model.nidm"));
    if !path.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", path.display()),
        )));
    }
    let model = load_checkpoint(&path)?;
    let mc = model.config();
    if (mc.n_antennas, mc.n_subcarriers) != (config.dataset.n_antennas, config.dataset.n_subcarriers) {
        return Err(Error::Shape {
            expected: format!("a model for {}x{} channels", config.dataset.n_antennas, config.dataset.n_subcarriers),
            found: format!("{}x{}", mc.n_antennas, mc.n_subcarriers),
        });
    }
    if mc.max_time != config.schedule.max_time {
        return Err(Error::Config(format!("checkpoint uses T = {}, config T = {}", mc.max_time, config.schedule.max_time)));
    }
    Ok(VelocityDenoiser {
        model,
        normalization: config.generate.normalization.unwrap_or(config.train.normalization),
        schedule: config.schedule()?,
    })
}

fn test_channels(config: &RunConfig) -> Result<Vec<Vec<f64>>> {
    let mut ds = load_split(config, Split::Test)?;
    ds.samples.truncate(config.generate.n_samples);
    Ok(ds.samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerateMode {
    Single,
    /// Identical against non-identical initialization on four patterns.
    Compare,
    /// Final NMSE of the ten stepping rules on five patterns.
    Sweep,
}

pub fn cmd_generate(config: &RunConfig, checkpoint: Option<&Path>, mode: GenerateMode) -> Result<Outcome> {
    let denoiser = load_denoiser(config, checkpoint)?;
    let channels = test_channels(config)?;
    fs::create_dir_all(&config.out)?;
    let schedule = config.schedule()?;
    let g = &config.generate;
    let (na, nc) = (config.dataset.n_antennas, config.dataset.n_subcarriers);
    let seed = lane_seed(config.seed, lane::GENERATE);
    match mode {
        GenerateMode::Single => {
            let spec = g.pattern_spec(g.pattern);
            let run = run_recovery(&denoiser, &channels, na, nc, &spec, InitMethod::NonIdentical, &g.generation(true), &schedule, seed)?;
            let mut body = String::from("step,tau_mean,nmse\n");
            for (k, (t, e)) in run.tau_mean.iter().zip(&run.nmse).enumerate() {
                writeln!(body, "{k},{t},{e}").expect("string write");
            }
            write_file(&config.out.join("trajectory.csv"), &csv_with_header(config, &body))?;
            let (mean, std) = mean_std(&run.final_nmse);
            let report = json!({
                "pattern": pattern_name(g.pattern),
                "stepping": g.stepping.to_string(),
                "steps": g.steps,
                "eps_hybrid": g.eps_hybrid,
                "n_samples": channels.len(),
                "initial_nmse": run.nmse[0],
                "final_nmse_mean": mean,
                "final_nmse_std": std,
            });
            write_file(&config.out.join("generate_summary.json"), &json_report(config, report)?)?;
            println!("final NMSE {mean:.5} +- {std:.5} over {} channels", channels.len());
        }
        GenerateMode::Compare => {
            let patterns = [InitPatternKind::White, InitPatternKind::Salt, InitPatternKind::SaltRec, InitPatternKind::PilotCar];
            let mut body = String::from("step,pattern,method,tau_mean,nmse\n");
            for kind in patterns {
                for (method, name) in [(InitMethod::Identical, "identical"), (InitMethod::NonIdentical, "non_identical")] {
                    let run = run_recovery(&denoiser, &channels, na, nc, &g.pattern_spec(kind), method, &g.generation(true), &schedule, seed)?;
                    for (k, (t, e)) in run.tau_mean.iter().zip(&run.nmse).enumerate() {
                        writeln!(body, "{k},{},{name},{t},{e}", pattern_name(kind)).expect("string write");
                    }
                    println!("{} {name}: final NMSE {:.5}", pattern_name(kind), run.mean_final());
                }
            }
            write_file(&config.out.join("compare.csv"), &csv_with_header(config, &body))?;
        }
        GenerateMode::Sweep => {
            let patterns = sweep_patterns();
            let mut body = String::from("stepping");
            for kind in patterns {
                write!(body, ",{}", pattern_name(kind)).expect("string write");
            }
            body.push('\n');
            for stepping in Stepping::sweep() {
                let gen = crate::diffusion::GenerationConfig { stepping, ..g.generation(false) };
                body.push_str(&stepping.to_string());
                for kind in patterns {
                    let run = run_recovery(&denoiser, &channels, na, nc, &g.pattern_spec(kind), InitMethod::NonIdentical, &gen, &schedule, seed)?;
                    write!(body, ",{}", run.mean_final()).expect("string write");
                }
                body.push('\n');
                println!("{stepping} done");
            }
            write_file(&config.out.join("sweep.csv"), &csv_with_header(config, &body))?;
        }
    }
    Ok(Ok(()))
}

/// Final NMSE per requested pattern and stepping, mean and std over seeds.
pub fn cmd_eval(config: &RunConfig, checkpoint: Option<&Path>) -> Result<Outcome> {
    let denoiser = load_denoiser(config, checkpoint)?;
    let channels = test_channels(config)?;
    fs::create_dir_all(&config.out)?;
    let schedule = config.schedule()?;
    let g = &config.generate;
    let (na, nc) = (config.dataset.n_antennas, config.dataset.n_subcarriers);
    let mut body = String::from("stepping");
    for &kind in &g.eval_patterns {
        write!(body, ",{0}_mean,{0}_std", pattern_name(kind)).expect("string write");
    }
    body.push('\n');
    let mut rows = Vec::new();
    for &stepping in &g.eval_steppings {
        let gen = crate::diffusion::GenerationConfig { stepping, ..g.generation(false) };
        body.push_str(&stepping.to_string());
        let mut cells = serde_json::Map::new();
        for &kind in &g.eval_patterns {
            let per_seed = (0..g.eval_seeds as u64)
                .map(|s| {
                    let seed = lane_seed(config.seed, lane::EVAL + s);
                    run_recovery(&denoiser, &channels, na, nc, &g.pattern_spec(kind), InitMethod::NonIdentical, &gen, &schedule, seed)
                        .map(|r| r.mean_final())
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&per_seed);
            write!(body, ",{mean},{std}").expect("string write");
            cells.insert(pattern_name(kind), json!({ "mean": mean, "std": std, "per_seed": per_seed }));
        }
        body.push('\n');
        println!("{stepping} done");
        rows.push(json!({ "stepping": stepping.to_string(), "patterns": cells }));
    }
    write_file(&config.out.join("eval.csv"), &csv_with_header(config, &body))?;
    let report = json!({ "seeds": g.eval_seeds, "n_samples": channels.len(), "rows": rows });
    write_file(&config.out.join("eval.json"), &json_report(config, report)?)?;
    Ok(Ok(()))
}

/// Forward-law and generation checks with an exact denoiser. `sabotage`
/// replaces the denoiser bias.
pub fn cmd_oracle(config: &RunConfig, sabotage: Option<f64>) -> Result<Outcome> {
    fs::create_dir_all(&config.out)?;
    let schedule = config.schedule()?;
    let seed = lane_seed(config.seed, lane::ORACLE);
    let forward = check_forward_law(&config.oracle.forward, &schedule, seed)?;
    let mut gen_config = config.oracle.generation.clone();
    if let Some(bias) = sabotage {
        gen_config.denoiser_bias = bias;
    }
    let generation = check_theorem2(&gen_config, &schedule, seed.wrapping_add(1))?;
    let passed = forward.passed && generation.passed;
    let report = json!({ "passed": passed, "forward_law": forward, "generation": generation });
    write_file(&config.out.join("oracle.json"), &json_report(config, report)?)?;
    println!("forward law: {}", if forward.passed { "PASS" } else { "FAIL" });
    for c in &generation.cases {
        println!(
            "generation {} eps={} t0={:?}: energy {:.4} ({}), moments z {:.2}/{:.2} ({})",
            c.stepping,
            c.eps_hybrid,
            c.t0,
            c.energy_distance,
            if c.energy_pass { "ok" } else { "fail" },
            c.moments.max_mean_z,
            c.moments.max_cov_z,
            if c.moment_pass { "ok" } else { "fail" }
        );
    }
    if passed {
        Ok(Ok(()))
    } else {
        Ok(Err(ToleranceFailure("oracle checks failed; see oracle.json".into())))
    }
}
