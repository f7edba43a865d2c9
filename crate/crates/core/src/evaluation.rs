//! Scoring trained recognizers: verification fairness and attention spread.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::{
    generate_synthetic_dataset, sample_verification_pairs, GroupedDataset, Split, SyntheticSpec,
    VerificationPair,
};
use crate::error::Result;
use crate::gam::{average_gam, compute_gam_batch, GamMap};
use crate::metrics::{verification_accuracy, FairnessReport};
use crate::models::Recognizer;
use crate::training::{train, Method};

const CHUNK: usize = 64;

/// Embeddings of the listed images (other rows left empty).
pub fn embed_images(
    recognizer: &Recognizer<f32>,
    ds: &GroupedDataset,
    indices: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); ds.len()];
    for chunk in indices.chunks(CHUNK) {
        let e = recognizer.embed_batch(ds.batch(chunk))?;
        let d = e.shape()[1];
        for (row, &i) in e.data().chunks(d).zip(chunk) {
            out[i] = row.iter().map(|&v| v as f64).collect();
        }
    }
    Ok(out)
}

/// Fairness report over `pairs` (best-threshold accuracy per group).
pub fn evaluate_pairs(
    recognizer: &Recognizer<f32>,
    ds: &GroupedDataset,
    pairs: &[VerificationPair],
    folds: usize,
) -> Result<FairnessReport> {
    let mut needed: Vec<usize> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    needed.sort_unstable();
    needed.dedup();
    let emb = embed_images(recognizer, ds, &needed)?;
    let acc = verification_accuracy(&emb, pairs, folds)?;
    let names = acc.keys().map(|&g| ds.group_names[g].clone()).collect();
    FairnessReport::from_accuracies(names, acc.into_values().collect())
}

/// Unlabelled attention maps of the listed images, in order.
pub fn gam_maps(
    recognizer: &Recognizer<f32>,
    ds: &GroupedDataset,
    indices: &[usize],
) -> Result<Vec<GamMap<f32>>> {
    let mut maps = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(CHUNK) {
        maps.extend(compute_gam_batch(recognizer, ds.batch(chunk), None)?.maps);
    }
    Ok(maps)
}

/// Group-averaged attention maps over the evaluation split.
pub fn group_average_gams(
    recognizer: &Recognizer<f32>,
    ds: &GroupedDataset,
) -> Result<BTreeMap<usize, GamMap<f32>>> {
    let idx = ds.indices(Split::Eval);
    let maps = gam_maps(recognizer, ds, &idx)?;
    let groups: Vec<usize> = idx.iter().map(|&i| ds.group_of(i)).collect();
    average_gam(&maps, &groups)
}

/// Outcome of training and scoring one method on one seed of the synthetic data.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub method: Method,
    pub seed: u64,
    pub report: FairnessReport,
    /// Max minus min group mean confidence in the final epoch.
    pub confidence_gap: f64,
    /// Pixels above 0.2 of the peak in each group's average attention map.
    pub support: BTreeMap<usize, usize>,
    /// Group whose identity code is most concentrated.
    pub focus_group: usize,
    /// Mean identity loss of the final epoch.
    pub final_l_id: f64,
    pub seconds: f64,
}

/// Trains `method` on the synthetic data of `run` with every seed offset by
/// `seed`, then measures fairness, confidence gap and attention support.
pub fn run_arm(run: &RunConfig, method: Method, seed: u64) -> Result<ArmResult> {
    let spec = SyntheticSpec {
        seed: run.synthetic.seed.wrapping_add(seed),
        ..run.synthetic.clone()
    };
    let ds = generate_synthetic_dataset(&spec)?;
    let pairs = sample_verification_pairs(&ds, run.pairs_per_group, run.positive_fraction, seed)?;
    let mut cfg = method.configure(&run.train_config(spec.side));
    cfg.seed = run.train.seed.wrapping_add(seed);
    let start = Instant::now();
    let out = train(&cfg, &ds, &run.recognizer, &run.discriminator, None)?;
    let seconds = start.elapsed().as_secs_f64();
    let report = evaluate_pairs(&out.state.recognizer, &ds, &pairs, run.folds)?;
    let support = group_average_gams(&out.state.recognizer, &ds)?
        .into_iter()
        .map(|(g, m)| (g, m.support(0.2)))
        .collect();
    Ok(ArmResult {
        method,
        seed,
        report,
        confidence_gap: out.curve.gap.last().copied().unwrap_or(0.0),
        support,
        focus_group: spec.most_localized_group(),
        final_l_id: out.rows.last().map_or(f64::NAN, |r| r.l_id),
        seconds,
    })
}
