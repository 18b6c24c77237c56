//! End-to-end stages shared by the command-line tool and the test suites.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::encoder::Encoder;
use crate::error::Result;
use crate::params::ParamStore;
use crate::predmae::{pretrain_run, LossCurve, PredMae};
use crate::retrieval::{evaluate, AnnotationSet, CorpusIndex, EvalReport, Scoring, Task};
use crate::rng::SeedRng;
use crate::simlearn::{SimTrainConfig, SimTrainer, StepMetrics};
use crate::synth::{moving_patterns, training_videos, SyntheticBenchmark};

/// A freshly initialised encoder, seeded by `train.seed`.
pub fn init_encoder(cfg: &RunConfig) -> Result<(Encoder, ParamStore<f32>)> {
    let mut params = ParamStore::new();
    let encoder = Encoder::init(cfg.model.clone(), &mut params, &mut SeedRng::new(cfg.train.seed))?;
    Ok((encoder, params))
}

/// Encoder for `cfg.model` with every matching weight copied from `init`.
pub fn encoder_from(cfg: &RunConfig, init: &ParamStore<f32>) -> Result<(Encoder, ParamStore<f32>)> {
    let (encoder, mut params) = init_encoder(cfg)?;
    let copied = params.load_matching(init);
    log::info!("initialised {copied} of {} encoder tensors from checkpoint", params.len());
    Ok((encoder, params))
}

/// Future-frame pretraining on generated moving-pattern videos.
pub fn pretrain(cfg: &RunConfig) -> Result<(PredMae, LossCurve)> {
    let videos = moving_patterns(
        cfg.pretrain_videos,
        cfg.pretrain_video_len,
        cfg.model.image_size,
        cfg.pretrain.seed,
    )?;
    let mut model = PredMae::init(cfg.model.clone(), cfg.pretrain.seed)?;
    let curve = pretrain_run(&mut model, &videos, &cfg.pretrain)?;
    Ok((model, curve))
}

/// Similarity training on generated unlabelled videos.
pub fn train_similarity(
    cfg: &RunConfig,
    train: &SimTrainConfig,
    encoder: Encoder,
    params: ParamStore<f32>,
) -> Result<(ParamStore<f32>, Vec<StepMetrics>)> {
    let videos = training_videos(cfg.train_videos, &cfg.synth)?;
    let mut trainer = SimTrainer::new(encoder, params, train.clone())?;
    let metrics = trainer.run(&videos)?;
    Ok((trainer.into_params(), metrics))
}

/// One report per task.
pub fn evaluate_all(index: &CorpusIndex, annotations: &AnnotationSet, scoring: Scoring) -> Result<Vec<EvalReport>> {
    Task::ALL.iter().map(|&t| evaluate(index, annotations, t, scoring)).collect()
}

/// mAP for every task, in [`Task::ALL`] order.
pub fn benchmark_map(
    encoder: &Encoder,
    params: &ParamStore<f32>,
    bench: &SyntheticBenchmark,
    scoring: Scoring,
) -> Result<[f64; 3]> {
    let index = CorpusIndex::build(encoder, params, &bench.videos)?;
    let reports = evaluate_all(&index, &bench.annotations, scoring)?;
    Ok([reports[0].mean_ap, reports[1].mean_ap, reports[2].mean_ap])
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub shotmix: bool,
    pub fcs: bool,
    pub topk: bool,
    pub map: [f64; 3],
}

impl AblationRow {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [(self.shotmix, "ShotMix"), (self.fcs, "FCS"), (self.topk, "TopK-CS")] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join(" + ")
        }
    }
}

/// Trains the baseline, `+ShotMix` and `+ShotMix+FCS` models from the same
/// initialisation and scores them with chamfer, then scores the last one with
/// TopK-CS as well.
pub fn run_ablation(cfg: &RunConfig, bench: &SyntheticBenchmark) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4);
    for (shotmix, fcs) in [(false, false), (true, false), (true, true)] {
        let mut train = cfg.train.clone();
        if !shotmix {
            train.shotmix_prob = 0.0;
        }
        if !fcs {
            train.loss.w2 = 0.0;
        }
        let (encoder, params) = init_encoder(cfg)?;
        let (params, _) = train_similarity(cfg, &train, encoder.clone(), params)?;
        let map = benchmark_map(&encoder, &params, bench, Scoring::Chamfer)?;
        log::info!("ablation shotmix={shotmix} fcs={fcs}: {map:?}");
        rows.push(AblationRow { shotmix, fcs, topk: false, map });
        if shotmix && fcs {
            let map = benchmark_map(&encoder, &params, bench, Scoring::TopK(cfg.k))?;
            rows.push(AblationRow { shotmix, fcs, topk: true, map });
        }
    }
    Ok(rows)
}

/// Whether DSVR mAP never decreases down the table.
pub fn ablation_monotone(rows: &[AblationRow]) -> bool {
    rows.windows(2).all(|w| w[1].map[0] >= w[0].map[0])
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("| configuration | DSVR | CSVR | ISVR |\n|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(out, "| {} | {:.4} | {:.4} | {:.4} |", r.label(), r.map[0], r.map[1], r.map[2]);
    }
    out
}
