//! Text-to-image retrieval metrics: cosine ranking, Rank-K and mAP.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Modality};
use crate::encoders::{encode_batch, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, NORM_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub n_queries: usize,
    pub n_gallery: usize,
}

impl MetricsReport {
    /// `key=value` lines in field order.
    pub fn to_flat(&self) -> String {
        format!(
            "rank1={}\nrank5={}\nrank10={}\nmap={}\nn_queries={}\nn_gallery={}\n",
            self.rank1, self.rank5, self.rank10, self.map, self.n_queries, self.n_gallery
        )
    }
}

/// Which student features embed queries and gallery.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalFeatures {
    #[default]
    High,
    /// Low and high stages concatenated.
    LowHigh,
}

/// `m×n` cosine similarities; rows with zero norm score 0 everywhere.
pub fn cosine_similarity_matrix(q: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (_, dq) = q.dims2("cosine_similarity")?;
    let (_, dg) = g.dims2("cosine_similarity")?;
    if dq != dg {
        return Err(Error::dim(
            "cosine_similarity",
            format!("feature dims {dq} and {dg}"),
        ));
    }
    let unit = |t: &Tensor| {
        let mut t = t.clone();
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = if n > NORM_FLOOR { 1.0 / n } else { 0.0 };
            row.iter_mut().for_each(|v| *v *= inv);
        }
        t
    };
    unit(q).matmul_nt(&unit(g))
}

/// Gallery indices by descending similarity, ties by ascending index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Match flags of each query's ranked gallery.
fn ranked_matches(sim: &Tensor, query_ids: &[u32], gallery_ids: &[u32]) -> Result<Vec<Vec<bool>>> {
    let (m, n) = sim.dims2("retrieval")?;
    if query_ids.len() != m || gallery_ids.len() != n {
        return Err(Error::dim(
            "retrieval",
            format!(
                "[{m}x{n}] similarities, {} query and {} gallery ids",
                query_ids.len(),
                gallery_ids.len()
            ),
        ));
    }
    let missing: Vec<usize> = (0..m)
        .filter(|&i| !gallery_ids.contains(&query_ids[i]))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Contract(format!(
            "queries without a gallery match: {missing:?}"
        )));
    }
    Ok((0..m)
        .map(|i| {
            ranking(sim.row(i))
                .into_iter()
                .map(|j| gallery_ids[j] == query_ids[i])
                .collect()
        })
        .collect())
}

/// Fraction of queries with a match among the top `k` gallery entries.
pub fn rank_k(sim: &Tensor, query_ids: &[u32], gallery_ids: &[u32], k: usize) -> Result<f64> {
    let ranked = ranked_matches(sim, query_ids, gallery_ids)?;
    Ok(hit_rate(&ranked, k))
}

fn hit_rate(ranked: &[Vec<bool>], k: usize) -> f64 {
    if ranked.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .filter(|r| r.iter().take(k).any(|&m| m))
        .count();
    hits as f64 / ranked.len() as f64
}

/// Mean over true matches of precision at each match rank.
pub fn average_precision(matches: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut total = 0.0;
    for (r, _) in matches.iter().enumerate().filter(|(_, &m)| m) {
        found += 1;
        total += found as f64 / (r + 1) as f64;
    }
    if found == 0 {
        0.0
    } else {
        total / found as f64
    }
}

pub fn mean_ap(sim: &Tensor, query_ids: &[u32], gallery_ids: &[u32]) -> Result<f64> {
    let ranked = ranked_matches(sim, query_ids, gallery_ids)?;
    Ok(mean_of(&ranked))
}

fn mean_of(ranked: &[Vec<bool>]) -> f64 {
    if ranked.is_empty() {
        return 0.0;
    }
    ranked.iter().map(|r| average_precision(r)).sum::<f64>() / ranked.len() as f64
}

/// All metrics for precomputed query and gallery embeddings.
pub fn metrics(sim: &Tensor, query_ids: &[u32], gallery_ids: &[u32]) -> Result<MetricsReport> {
    let ranked = ranked_matches(sim, query_ids, gallery_ids)?;
    Ok(MetricsReport {
        rank1: hit_rate(&ranked, 1),
        rank5: hit_rate(&ranked, 5),
        rank10: hit_rate(&ranked, 10),
        map: mean_of(&ranked),
        n_queries: query_ids.len(),
        n_gallery: gallery_ids.len(),
    })
}

fn embed(
    params: &EncoderParams,
    ds: &Dataset,
    idx: &[usize],
    features: EvalFeatures,
) -> Result<Tensor> {
    let f = encode_batch(params, &ds.features(idx))?;
    match features {
        EvalFeatures::High => Ok(f.high),
        EvalFeatures::LowHigh => {
            let rows: Vec<Vec<f64>> = (0..idx.len())
                .map(|i| f.low.row(i).iter().chain(f.high.row(i)).copied().collect())
                .collect();
            Tensor::from_rows(&rows)
        }
    }
}

/// Text queries against the image gallery of `ds`, embedded by the student
/// encoders.
pub fn evaluate(
    image: &EncoderParams,
    text: &EncoderParams,
    ds: &Dataset,
    features: EvalFeatures,
) -> Result<MetricsReport> {
    for p in [image, text] {
        if p.input_dim() != ds.input_dim() {
            return Err(Error::Config(format!(
                "encoder expects input_dim {}, dataset has {}",
                p.input_dim(),
                ds.input_dim()
            )));
        }
    }
    let queries = ds.modality_indices(Modality::Text);
    let gallery = ds.modality_indices(Modality::Image);
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Contract(
            "evaluation needs at least one text and one image".into(),
        ));
    }
    let sim = cosine_similarity_matrix(
        &embed(text, ds, &queries, features)?,
        &embed(image, ds, &gallery, features)?,
    )?;
    metrics(&sim, &ds.labels(&queries), &ds.labels(&gallery))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let i2 = Tensor::identity(2);
        assert_eq!(cosine_similarity_matrix(&i2, &i2).unwrap(), i2);
        let s = cosine_similarity_matrix(
            &Tensor::from_rows(&[[2.0, 0.0]]).unwrap(),
            &Tensor::from_rows(&[[1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(s.data(), &[1.0]);
        let s = cosine_similarity_matrix(
            &Tensor::from_rows(&[[1.0, 1.0]]).unwrap(),
            &Tensor::from_rows(&[[1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        assert!((s.data()[0] - 0.5f64.sqrt()).abs() < 1e-15);
        let s = cosine_similarity_matrix(
            &Tensor::from_rows(&[[0.0, 0.0]]).unwrap(),
            &Tensor::from_rows(&[[1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(s.data(), &[0.0]);
    }

    #[test]
    fn rank_examples() {
        // Query 0 hits at rank 1, query 1 at rank 3.
        let sim = Tensor::from_rows(&[[0.9, 0.1, 0.0, -0.1], [0.8, 0.7, 0.6, 0.5]]).unwrap();
        let q = [0, 1];
        let g = [0, 2, 1, 3];
        assert_eq!(rank_k(&sim, &q, &g, 1).unwrap(), 0.5);
        assert_eq!(rank_k(&sim, &q, &g, 5).unwrap(), 1.0);
        assert_eq!(rank_k(&sim, &q, &g, 100).unwrap(), 1.0);
        let err = rank_k(&sim, &[0, 9], &g, 1).unwrap_err();
        assert!(err.to_string().contains("[1]"), "{err}");
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(ranking(&[0.5, 0.7, 0.5, 0.7]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, false, false]), 1.0);
        assert!((average_precision(&[true, false, true]) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false, false, true]), 0.25);
    }
}
