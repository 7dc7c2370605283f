//! Command implementations shared by the binary and the integration tests.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_dataset, save_dataset, Dataset, DatasetHeader};
use crate::domain::{Episode, Modality};
use crate::env::{rollout, ACTION_TYPE_NAMES};
use crate::error::{Error, Result};
use crate::eval::{self, bench_retrieval, evaluate_episodes, heldout_episodes, three_fold, BenchConfig, BENCH_HEADER};
use crate::learn::{train, MetricsRow, TrainState, METRICS_HEADER};
use crate::linalg::cosine;
use crate::model::{stream_rng, Model, STAGE_EVAL};

pub const OUTPUT_FORMAT_VERSION: u32 = 1;

fn config_json(cfg: &RunConfig) -> String {
    serde_json::to_string(cfg).expect("config serializes")
}

/// Two comment lines carrying the format version and the config echo.
fn csv_preamble(cfg: &RunConfig) -> String {
    format!(
        "# format_version: {OUTPUT_FORMAT_VERSION}\n# config: {}\n",
        config_json(cfg)
    )
}

/// Checks the version line written by [`csv_preamble`] and returns the data
/// lines (header included).
pub fn read_csv_output(text: &str) -> Result<Vec<&str>> {
    let mut lines = text.lines();
    let first = lines.next().unwrap_or_default();
    let found: u32 = first
        .strip_prefix("# format_version: ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing format_version line".into(),
        })?;
    if found != OUTPUT_FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: OUTPUT_FORMAT_VERSION,
        });
    }
    Ok(lines.filter(|l| !l.starts_with('#')).collect())
}

pub fn init_state(cfg: &RunConfig) -> TrainState {
    let model = Model::init(cfg.model_shape(), cfg.initial_lambda(), cfg.attention.tau, cfg.seed);
    TrainState::new(model, cfg.adam(), cfg.seed)
}

pub fn generate_dataset(cfg: &RunConfig) -> Dataset {
    let mut header = DatasetHeader::new(cfg.d_raw, ACTION_TYPE_NAMES.iter().map(|s| s.to_string()).collect());
    header.generator = Some(serde_json::to_value(cfg).expect("config serializes"));
    Dataset {
        header,
        episodes: heldout_episodes(&cfg.env_config(), cfg.eval.episodes, cfg.env.seed),
    }
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let ds = generate_dataset(cfg);
    save_dataset(out, &ds)?;
    Ok(ds.episodes.len())
}

fn load_episodes(path: &Path, cfg: &RunConfig) -> Result<Vec<Episode>> {
    let ds = load_dataset(path)?;
    if ds.header.d_raw != cfg.d_raw {
        return Err(Error::Dimension {
            what: "dataset d_raw",
            expected: cfg.d_raw,
            actual: ds.header.d_raw,
        });
    }
    Ok(ds.episodes)
}

pub struct TrainOutput {
    pub state: TrainState,
    pub metrics_csv: String,
}

/// Trains from the initial state; `dataset` replaces generated episodes.
pub fn run_training(cfg: &RunConfig, dataset: Option<&[Episode]>) -> Result<TrainOutput> {
    let mut state = init_state(cfg);
    let mut csv = csv_preamble(cfg);
    csv.push_str(METRICS_HEADER);
    csv.push('\n');
    let mut sink = |row: &MetricsRow| {
        csv.push_str(&row.csv());
        csv.push('\n');
        if row.step % 250 == 0 {
            log::info!("stage {} step {}: loss {:.5}", row.stage, row.step, row.loss_total);
        }
    };
    train(&cfg.train_config(), &mut state, dataset, &mut sink)?;
    Ok(TrainOutput {
        state,
        metrics_csv: csv,
    })
}

pub fn cmd_train(cfg: &RunConfig, out_ckpt: &Path, metrics_out: Option<&Path>, dataset: Option<&Path>) -> Result<TrainOutput> {
    let episodes = dataset.map(|p| load_episodes(p, cfg)).transpose()?;
    let out = run_training(cfg, episodes.as_deref())?;
    Checkpoint::from_state(cfg, &out.state).save(out_ckpt)?;
    if let Some(path) = metrics_out {
        std::fs::write(path, &out.metrics_csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(out)
}

/// Metric JSON over three folds of `episodes`.
pub fn evaluate_json(cfg: &RunConfig, model: &Model, episodes: &[Episode]) -> Result<String> {
    if episodes.is_empty() {
        return Err(Error::Empty("evaluation needs at least one episode"));
    }
    let per = evaluate_episodes(model, &cfg.rollout_options(), episodes, cfg.seed)?;
    let column = |f: fn(&eval::EpisodeMetrics) -> f64| three_fold(&per.iter().map(f).collect::<Vec<_>>());
    let metrics = json!({
        "ndcg@10": column(|m| m.ndcg),
        "map@10": column(|m| m.map),
        "mrr": column(|m| m.mrr),
        "recall@10": column(|m| m.recall),
        "precision@10": column(|m| m.precision),
        "mp@10": column(|m| m.mp),
        "success_rate": column(|m| m.success),
        "edges_per_node": column(|m| m.edges_per_node),
    });
    let out = json!({
        "format_version": OUTPUT_FORMAT_VERSION,
        "config": cfg,
        "episodes": episodes.len(),
        "folds": 3,
        "metrics": metrics,
    });
    Ok(serde_json::to_string_pretty(&out).expect("metrics serialize"))
}

/// Loads a checkpoint; `adjust` may override its configuration (ablation
/// flags at evaluation time) and the result is validated again.
pub fn load_checkpoint(path: &Path, adjust: &dyn Fn(&mut RunConfig)) -> Result<(RunConfig, TrainState)> {
    let (mut cfg, state) = Checkpoint::load(path)?.into_state()?;
    adjust(&mut cfg);
    cfg.validate()?;
    Ok((cfg, state))
}

pub fn cmd_evaluate(ckpt: &Path, dataset: &Path, adjust: &dyn Fn(&mut RunConfig)) -> Result<String> {
    let (cfg, state) = load_checkpoint(ckpt, adjust)?;
    let episodes = load_episodes(dataset, &cfg)?;
    evaluate_json(&cfg, &state.model, &episodes)
}

pub fn bench_csv(cfg: &RunConfig, bench: &BenchConfig) -> Result<String> {
    let rows = bench_retrieval(bench)?;
    let mut out = csv_preamble(cfg);
    out.push_str(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<String> {
    let bench = BenchConfig {
        seeds: vec![cfg.seed, cfg.seed + 1, cfg.seed + 2],
        d: cfg.d,
        k: cfg.k,
        index: cfg.index_config(),
        ..BenchConfig::default()
    };
    bench_csv(cfg, &bench)
}

/// Human-readable view of the memory used at step `t` of one episode.
pub fn cmd_retrieve(ckpt: &Path, dataset: &Path, episode: usize, t: usize, adjust: &dyn Fn(&mut RunConfig)) -> Result<String> {
    let (cfg, state) = load_checkpoint(ckpt, adjust)?;
    let episodes = load_episodes(dataset, &cfg)?;
    let ep = episodes
        .get(episode)
        .ok_or_else(|| Error::Config(format!("episode {episode} out of range (dataset has {})", episodes.len())))?;
    if t == 0 || t > ep.len() {
        return Err(Error::Config(format!("t = {t} outside [1, {}]", ep.len())));
    }
    let mut truncated = ep.clone();
    truncated.observations.truncate(t);
    let mut rng = stream_rng(cfg.seed, STAGE_EVAL, 1, episode as u64);
    let rec = rollout(&state.model, &truncated, &cfg.rollout_options(), &mut rng)?;
    let step = rec.steps.last().expect("t >= 1");
    let mut out = String::new();
    let _ = writeln!(
        out,
        "episode {episode} t {t} action {} target {} expert {:?}",
        step.action.action,
        ep.target_action.map_or_else(|| "-".to_string(), |a| a.to_string()),
        ep.expert_states
    );
    let _ = writeln!(out, "modality\tt\tcosine\talpha\tbeta_alpha");
    for m in Modality::ALL {
        let i = m.index();
        let q = &rec.items[t - 1][i];
        for (it, a) in step.pools[i].iter().zip(&step.memory.contributing_weights[i]) {
            let _ = writeln!(
                out,
                "{m}\t{}\t{:.6}\t{:.6}\t{:.6}",
                it.t,
                cosine(&q.e, &it.e),
                a,
                step.memory.beta[i] * a
            );
        }
    }
    Ok(out)
}
