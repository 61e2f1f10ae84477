//! Text-to-image retrieval metrics: Rank-K recall and mean average precision.
//!
//! This is the only module that reads target identities.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_matrix, stack_raw, EncoderParams, UNIT_NORM_TOL};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{norm, Matrix};
use crate::synth_data::{Modality, SourcePair, TargetGroundTruth, TargetSet};

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    gallery: Matrix,
    gallery_ids: Vec<u32>,
    queries: Matrix,
    query_ids: Vec<u32>,
}

impl RetrievalIndex {
    pub fn new(gallery: Matrix, gallery_ids: Vec<u32>, queries: Matrix, query_ids: Vec<u32>) -> Result<Self> {
        if gallery.rows() != gallery_ids.len() || queries.rows() != query_ids.len() {
            return Err(shape_err!("identity lists do not align with embedding rows"));
        }
        if gallery.rows() == 0 || queries.rows() == 0 {
            return Err(Error::Usage("gallery and queries must be non-empty".into()));
        }
        if gallery.cols() != queries.cols() {
            return Err(shape_err!("gallery width {} vs query width {}", gallery.cols(), queries.cols()));
        }
        for r in gallery.row_iter().chain(queries.row_iter()) {
            if (norm(r) - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Domain("index rows must be unit norm".into()));
            }
        }
        Ok(Self {
            gallery,
            gallery_ids,
            queries,
            query_ids,
        })
    }

    pub fn gallery(&self) -> &Matrix {
        &self.gallery
    }

    pub fn queries(&self) -> &Matrix {
        &self.queries
    }

    pub fn gallery_ids(&self) -> &[u32] {
        &self.gallery_ids
    }

    pub fn query_ids(&self) -> &[u32] {
        &self.query_ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// `(K, recall %)` for every requested K.
    pub rank_k: Vec<(usize, f64)>,
    /// AP in `[0, 1]` per evaluated query, in query order.
    pub per_query_ap: Vec<f64>,
    pub evaluated: usize,
    /// Queries whose identity has no gallery item.
    pub excluded: usize,
}

/// Gallery indices by descending similarity; ties go to the lower index.
/// Signed zeros count as equal.
pub fn ranking(sims: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| (sims[b] + 0.0).total_cmp(&(sims[a] + 0.0)).then(a.cmp(&b)));
    order
}

pub fn evaluate(index: &RetrievalIndex, ks: &[usize]) -> Result<MetricsReport> {
    if ks.contains(&0) {
        return Err(Error::Parameter("Rank-K needs K ≥ 1".into()));
    }
    let mut all_ks: Vec<usize> = vec![1, 5, 10];
    all_ks.extend_from_slice(ks);
    let sims = index.queries.matmul_t(&index.gallery)?;
    let mut hits = vec![0usize; all_ks.len()];
    let mut per_query_ap = Vec::with_capacity(index.queries.rows());
    let mut excluded = 0;
    for (q, &qid) in index.query_ids.iter().enumerate() {
        let relevant = index.gallery_ids.iter().filter(|&&g| g == qid).count();
        if relevant == 0 {
            excluded += 1;
            continue;
        }
        let order = ranking(sims.row(q));
        let mut found = 0;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (pos, &g) in order.iter().enumerate() {
            if index.gallery_ids[g] == qid {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
                first.get_or_insert(pos);
                if found == relevant {
                    break;
                }
            }
        }
        let first = first.expect("relevant > 0");
        for (h, &k) in hits.iter_mut().zip(&all_ks) {
            if first < k {
                *h += 1;
            }
        }
        per_query_ap.push(precision_sum / relevant as f64);
    }
    let evaluated = per_query_ap.len();
    if evaluated == 0 {
        return Err(Error::Usage("no query identity appears in the gallery".into()));
    }
    let pct = |h: usize| 100.0 * h as f64 / evaluated as f64;
    Ok(MetricsReport {
        rank1: pct(hits[0]),
        rank5: pct(hits[1]),
        rank10: pct(hits[2]),
        map: 100.0 * per_query_ap.iter().sum::<f64>() / evaluated as f64,
        rank_k: ks.iter().zip(&hits[3..]).map(|(&k, &h)| (k, pct(h))).collect(),
        per_query_ap,
        evaluated,
        excluded,
    })
}

/// Target texts query the target image gallery, both encoded with the given
/// (student) encoders and no graph propagation.
pub fn target_index(encoders: &EncoderParams, target: &TargetSet, truth: &TargetGroundTruth) -> Result<RetrievalIndex> {
    if truth.image_ids.len() != target.images.len() || truth.text_ids.len() != target.texts.len() {
        return Err(Error::Structural("ground truth does not match the target set".into()));
    }
    check_raw_width(encoders, target.images.first().map(|s| s.raw.len()))?;
    let gallery = encode_matrix(encoders, Modality::Image, &stack_raw(&target.images)?.0)?;
    let queries = encode_matrix(encoders, Modality::Text, &stack_raw(&target.texts)?.0)?;
    RetrievalIndex::new(gallery, truth.image_ids.clone(), queries, truth.text_ids.clone())
}

/// Source texts query the source image gallery.
pub fn source_index(encoders: &EncoderParams, source: &[SourcePair]) -> Result<RetrievalIndex> {
    check_raw_width(encoders, source.first().map(|p| p.image.raw.len()))?;
    let images: Vec<_> = source.iter().map(|p| &p.image).collect();
    let texts: Vec<_> = source.iter().map(|p| &p.text).collect();
    let gallery = encode_matrix(encoders, Modality::Image, &stack_raw(&images)?.0)?;
    let queries = encode_matrix(encoders, Modality::Text, &stack_raw(&texts)?.0)?;
    let ids = source.iter().map(|p| p.image.identity).collect();
    let qids = source.iter().map(|p| p.text.identity).collect();
    RetrievalIndex::new(gallery, ids, queries, qids)
}

fn check_raw_width(encoders: &EncoderParams, width: Option<usize>) -> Result<()> {
    match width {
        Some(w) if w != encoders.raw_dim() => Err(Error::Structural(format!(
            "encoders expect raw width {}, data has {w}",
            encoders.raw_dim()
        ))),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize;

    fn unit(v: &[f64]) -> Vec<f64> {
        l2_normalize(v).unwrap()
    }

    fn index(gallery: &[Vec<f64>], gids: &[u32], queries: &[Vec<f64>], qids: &[u32]) -> RetrievalIndex {
        let g: Vec<_> = gallery.iter().map(|r| unit(r)).collect();
        let q: Vec<_> = queries.iter().map(|r| unit(r)).collect();
        RetrievalIndex::new(
            Matrix::from_rows(&g, g[0].len()).unwrap(),
            gids.to_vec(),
            Matrix::from_rows(&q, q[0].len()).unwrap(),
            qids.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn correct_first() {
        let idx = index(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[7, 8], &[vec![1.0, 0.1]], &[7]);
        let r = evaluate(&idx, &[]).unwrap();
        assert_eq!((r.rank1, r.map), (100.0, 100.0));
    }

    #[test]
    fn correct_second_of_ten() {
        // gallery item 1 is the only match and the second most similar
        let gallery: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64]).collect();
        let mut ids: Vec<u32> = (100..110).collect();
        ids[1] = 5;
        let r = evaluate(&index(&gallery, &ids, &[vec![1.0, 0.0]], &[5]), &[2]).unwrap();
        assert_eq!(r.rank1, 0.0);
        assert_eq!(r.rank5, 100.0);
        assert_eq!(r.per_query_ap, vec![0.5]);
        assert_eq!(r.map, 50.0);
        assert_eq!(r.rank_k, vec![(2, 100.0)]);
    }

    #[test]
    fn ties_rank_lower_index_first() {
        assert_eq!(ranking(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
        assert_eq!(ranking(&[-0.0, 0.0]), vec![0, 1]);
    }

    #[test]
    fn missing_identity_is_excluded() {
        let idx = index(&[vec![1.0, 0.0]], &[1], &[vec![1.0, 0.0], vec![0.0, 1.0]], &[1, 2]);
        let r = evaluate(&idx, &[]).unwrap();
        assert_eq!((r.evaluated, r.excluded), (1, 1));
        let none = index(&[vec![1.0, 0.0]], &[1], &[vec![0.0, 1.0]], &[2]);
        assert!(matches!(evaluate(&none, &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn perfect_separation_gives_full_map() {
        let idx = index(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.05], vec![0.05, 1.0]],
            &[0, 1, 0, 1],
            &[vec![1.0, 0.02], vec![0.02, 1.0]],
            &[0, 1],
        );
        assert_eq!(evaluate(&idx, &[]).unwrap().map, 100.0);
    }

    #[test]
    fn bad_inputs() {
        let m = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(RetrievalIndex::new(m.clone(), vec![], m.clone(), vec![0]).is_err());
        let big = Matrix::new(1, 2, vec![3.0, 0.0]).unwrap();
        assert!(matches!(RetrievalIndex::new(big, vec![0], m.clone(), vec![0]), Err(Error::Domain(_))));
        let idx = RetrievalIndex::new(m.clone(), vec![0], m, vec![0]).unwrap();
        assert!(evaluate(&idx, &[0]).is_err());
    }
}
