//! Retrieval evaluation: average precision, mAP with the standard
//! same-identity/same-camera junk exclusion, CMC rank-k, the aggregate
//! aAP/mDR figures and a serializable evaluation report.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{apply_perturbation, DistanceMetric, PerturbationGenerator, SurrogateModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identity and camera labels of one query or gallery entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalItem {
    pub pid: u32,
    pub camid: u32,
}

/// Average precision of one ranked relevance list:
/// mean over relevant positions k of precision@k. Empty-of-positives
/// lists are the caller's responsibility.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / total as f64
}

fn dissimilarity<A: Scalar>(a: &Tensor<A>, b: &Tensor<A>, metric: DistanceMetric) -> f64 {
    match metric {
        DistanceMetric::L2 => a.l2_distance(b).to_f64_(),
        DistanceMetric::Cosine => -a.cosine(b).to_f64_(),
    }
}

/// Ranked gallery relevance list for one query, after dropping gallery
/// entries that share both the identity and the camera with the query.
/// Returns `None` when no positive remains.
fn ranked_relevance<A: Scalar>(
    query: &Tensor<A>,
    query_meta: RetrievalItem,
    gallery: &[Tensor<A>],
    gallery_meta: &[RetrievalItem],
    metric: DistanceMetric,
) -> Option<Vec<bool>> {
    let mut order: Vec<(usize, f64)> = gallery
        .iter()
        .zip(gallery_meta)
        .enumerate()
        .filter(|(_, (_, m))| !(m.pid == query_meta.pid && m.camid == query_meta.camid))
        .map(|(i, (g, _))| (i, dissimilarity(query, g, metric)))
        .collect();
    // Stable ascending sort; ties break to the lower gallery index.
    order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let relevant: Vec<bool> = order
        .iter()
        .map(|&(i, _)| gallery_meta[i].pid == query_meta.pid)
        .collect();
    if relevant.iter().any(|&r| r) {
        Some(relevant)
    } else {
        None
    }
}

/// Mean average precision over all queries that keep at least one
/// positive after the junk exclusion.
pub fn mean_average_precision<A: Scalar>(
    queries: &[Tensor<A>],
    query_meta: &[RetrievalItem],
    gallery: &[Tensor<A>],
    gallery_meta: &[RetrievalItem],
    metric: DistanceMetric,
) -> Result<f64> {
    validate_sets(queries, query_meta, gallery, gallery_meta)?;
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (q, &qm) in queries.iter().zip(query_meta) {
        if let Some(rel) = ranked_relevance(q, qm, gallery, gallery_meta, metric) {
            sum += average_precision(&rel);
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Evaluation(
            "no query has a valid gallery positive".into(),
        ));
    }
    Ok(sum / counted as f64)
}

/// CMC rank-k: the fraction of valid queries whose first k ranked gallery
/// entries contain a correct identity.
pub fn rank_k<A: Scalar>(
    queries: &[Tensor<A>],
    query_meta: &[RetrievalItem],
    gallery: &[Tensor<A>],
    gallery_meta: &[RetrievalItem],
    metric: DistanceMetric,
    k: usize,
) -> Result<f64> {
    validate_sets(queries, query_meta, gallery, gallery_meta)?;
    if k == 0 {
        return Err(Error::Evaluation("rank k must be at least 1".into()));
    }
    let mut hits = 0usize;
    let mut counted = 0usize;
    for (q, &qm) in queries.iter().zip(query_meta) {
        if let Some(rel) = ranked_relevance(q, qm, gallery, gallery_meta, metric) {
            counted += 1;
            if rel.iter().take(k).any(|&r| r) {
                hits += 1;
            }
        }
    }
    if counted == 0 {
        return Err(Error::Evaluation(
            "no query has a valid gallery positive".into(),
        ));
    }
    Ok(hits as f64 / counted as f64)
}

fn validate_sets<A: Scalar>(
    queries: &[Tensor<A>],
    query_meta: &[RetrievalItem],
    gallery: &[Tensor<A>],
    gallery_meta: &[RetrievalItem],
) -> Result<()> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Evaluation("query and gallery must be nonempty".into()));
    }
    if queries.len() != query_meta.len() || gallery.len() != gallery_meta.len() {
        return Err(Error::Evaluation("feature/label length mismatch".into()));
    }
    Ok(())
}

/// Average of per-model average precisions, in the same unit as its
/// inputs (use percentage points throughout).
pub fn aap(model_maps: &[f64]) -> f64 {
    if model_maps.is_empty() {
        return 0.0;
    }
    model_maps.iter().sum::<f64>() / model_maps.len() as f64
}

/// Mean drop rate in percent: 100 * (before - after) / before.
pub fn mdr(before: f64, after: f64) -> Result<f64> {
    if before <= 0.0 {
        return Err(Error::Evaluation(format!(
            "drop rate undefined for non-positive baseline {before}"
        )));
    }
    Ok(100.0 * (before - after) / before)
}

/// Per-model evaluation row; all AP figures in percentage points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub clean_map: f64,
    pub adversarial_map: f64,
    pub drop_rate: f64,
    pub clean_rank1: f64,
    pub adversarial_rank1: f64,
}

/// Evaluation over a set of victim models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_model: Vec<ModelReport>,
    /// Average of clean mAPs across models.
    pub clean_aap: f64,
    /// Average of attacked mAPs across models.
    pub adversarial_aap: f64,
    /// 100 * (clean_aap - adversarial_aap) / clean_aap.
    pub mean_drop_rate: f64,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,clean_map,adversarial_map,drop_rate,clean_rank1,adversarial_rank1\n",
        );
        for r in &self.per_model {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                r.model,
                r.clean_map,
                r.adversarial_map,
                r.drop_rate,
                r.clean_rank1,
                r.adversarial_rank1
            ));
        }
        out.push_str(&format!(
            "aggregate,{:.4},{:.4},{:.4},,\n",
            self.clean_aap, self.adversarial_aap, self.mean_drop_rate
        ));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Pre-transform applied to every image before feature extraction
/// (used to evaluate input-transformation defenses).
pub type ImageTransform<'a, A> = dyn Fn(&Tensor<A>) -> Result<Tensor<A>> + 'a;

/// Attack the query set with the trained generator and score each victim
/// model on clean and adversarial retrieval. An optional transform (a
/// defense) is applied to query and gallery images before extraction.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<A: Scalar>(
    models: &[&dyn SurrogateModel<A>],
    queries: &[Tensor<A>],
    query_meta: &[RetrievalItem],
    gallery: &[Tensor<A>],
    gallery_meta: &[RetrievalItem],
    generator: &PerturbationGenerator<A>,
    epsilon: A,
    metric: DistanceMetric,
    defense: Option<&ImageTransform<'_, A>>,
) -> Result<EvaluationReport> {
    if models.is_empty() {
        return Err(Error::Evaluation("need at least one victim model".into()));
    }
    let adversarial: Vec<Tensor<A>> = queries
        .iter()
        .map(|q| apply_perturbation(generator, q, epsilon))
        .collect::<Result<_>>()?;
    let prep = |x: &Tensor<A>| -> Result<Tensor<A>> {
        match defense {
            Some(d) => d(x),
            None => Ok(x.clone()),
        }
    };
    let mut per_model = Vec::with_capacity(models.len());
    for m in models {
        let extract_all = |imgs: &[Tensor<A>]| -> Result<Vec<Tensor<A>>> {
            imgs.iter().map(|x| m.extract(&prep(x)?)).collect()
        };
        let qf = extract_all(queries)?;
        let qaf = extract_all(&adversarial)?;
        let gf = extract_all(gallery)?;
        let clean_map = 100.0 * mean_average_precision(&qf, query_meta, &gf, gallery_meta, metric)?;
        let adversarial_map =
            100.0 * mean_average_precision(&qaf, query_meta, &gf, gallery_meta, metric)?;
        let clean_rank1 = 100.0 * rank_k(&qf, query_meta, &gf, gallery_meta, metric, 1)?;
        let adversarial_rank1 = 100.0 * rank_k(&qaf, query_meta, &gf, gallery_meta, metric, 1)?;
        per_model.push(ModelReport {
            model: m.name().to_string(),
            clean_map,
            adversarial_map,
            drop_rate: mdr(clean_map, adversarial_map)?,
            clean_rank1,
            adversarial_rank1,
        });
    }
    let clean_aap = aap(&per_model.iter().map(|r| r.clean_map).collect::<Vec<_>>());
    let adversarial_aap = aap(&per_model
        .iter()
        .map(|r| r.adversarial_map)
        .collect::<Vec<_>>());
    let mean_drop_rate = mdr(clean_aap, adversarial_aap)?;
    Ok(EvaluationReport {
        per_model,
        clean_aap,
        adversarial_aap,
        mean_drop_rate,
    })
}
