//! Brute-force reference implementations shared by the integration tests.
//! Each one follows the textbook definition and shares no code with the
//! library beyond the `Matrix` container and `cosine_sim`.

#![allow(dead_code)]

use std::collections::VecDeque;
use std::path::Path;

use gckd::experiment::ExperimentConfig;
use gckd::graph::GnnLayerParams;
use gckd::numerics::{cosine_sim, dot, Matrix};
use gckd::synth_data::DatasetSpec;
use gckd::trainer::{AblationMode, GraphConfig, MemoryConfig, TrainConfig};
use gckd::losses::LossConfig;
use rand::Rng;

/// Full O(V² log V) KNN: every other vertex sorted by cosine, ties to the
/// lower index, truncated to `min(k, V-1)`.
pub fn knn_oracle(x: &Matrix, k: usize) -> Vec<Vec<usize>> {
    let v = x.rows();
    (0..v)
        .map(|j| {
            let mut all: Vec<(f64, usize)> = (0..v)
                .filter(|&i| i != j)
                .map(|i| (cosine_sim(x.row(j), x.row(i)).unwrap(), i))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k.min(v - 1)).map(|(_, i)| i).collect()
        })
        .collect()
}

pub fn adjacency_from_lists(lists: &[Vec<usize>]) -> Matrix {
    let v = lists.len();
    let mut a = Matrix::zeros(v, v);
    for (j, ns) in lists.iter().enumerate() {
        for &i in ns {
            a.set(j, i, 1.0);
        }
    }
    a
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let s: f64 = (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum();
            out.set(i, j, s);
        }
    }
    out
}

/// `normalize((D̃⁻¹Ã) · tanh((D̃⁻¹Ã)XW₁ + b₁) ⋯ W_L + b_L)` with `Ã = A + I`.
pub fn dense_gnn(adjacency: &Matrix, x: &Matrix, layers: &[GnnLayerParams]) -> Matrix {
    let v = adjacency.rows();
    let mut p = adjacency.clone();
    for j in 0..v {
        p.set(j, j, p.get(j, j) + 1.0);
        let deg: f64 = p.row(j).iter().sum();
        for i in 0..v {
            p.set(j, i, p.get(j, i) / deg);
        }
    }
    let mut h = x.clone();
    for (l, layer) in layers.iter().enumerate() {
        let mut z = naive_matmul(&naive_matmul(&p, &h), &layer.weight);
        for r in 0..z.rows() {
            for (c, b) in layer.bias.iter().enumerate() {
                z.set(r, c, z.get(r, c) + b);
            }
        }
        h = if l + 1 < layers.len() {
            z.map(f64::tanh)
        } else {
            let mut out = z.clone();
            for r in 0..out.rows() {
                let n = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
            out
        };
    }
    h
}

/// Bounded FIFO: push to the back, drop from the front when over capacity.
pub struct QueueOracle {
    pub capacity: usize,
    pub items: VecDeque<Vec<f64>>,
}

impl QueueOracle {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::new(),
        }
    }

    pub fn push(&mut self, v: Vec<f64>) {
        self.items.push_back(v);
        if self.items.len() > self.capacity {
            self.items.pop_front();
        }
    }
}

pub struct RetrievalReference {
    pub rank_k: Vec<(usize, f64)>,
    pub ap: Vec<f64>,
    pub map: f64,
    pub excluded: usize,
}

/// Rank-K and AP straight from the definitions: rank the whole gallery by
/// dot product (rows are unit norm), ties to the lower index; AP is the mean
/// of precision@rank over the ranks that hold a correct item.
pub fn retrieval_reference(
    gallery: &Matrix,
    gallery_ids: &[u32],
    queries: &Matrix,
    query_ids: &[u32],
    ks: &[usize],
) -> RetrievalReference {
    let mut hits = vec![0usize; ks.len()];
    let mut ap = Vec::new();
    let mut excluded = 0;
    for q in 0..queries.rows() {
        let mut order: Vec<(f64, usize)> =
            (0..gallery.rows()).map(|g| (dot(queries.row(q), gallery.row(g)), g)).collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let correct: Vec<bool> = order.iter().map(|&(_, g)| gallery_ids[g] == query_ids[q]).collect();
        let relevant = correct.iter().filter(|&&c| c).count();
        if relevant == 0 {
            excluded += 1;
            continue;
        }
        let mut precisions = 0.0;
        for r in 0..correct.len() {
            if correct[r] {
                let seen = correct[..=r].iter().filter(|&&c| c).count();
                precisions += seen as f64 / (r + 1) as f64;
            }
        }
        ap.push(precisions / relevant as f64);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if correct.iter().take(k).any(|&c| c) {
                *h += 1;
            }
        }
    }
    let n = ap.len() as f64;
    RetrievalReference {
        rank_k: ks.iter().zip(&hits).map(|(&k, &h)| (k, 100.0 * h as f64 / n)).collect(),
        map: 100.0 * ap.iter().sum::<f64>() / n,
        ap,
        excluded,
    }
}

/// Random unit rows with coordinates drawn from a small integer grid, so
/// that exact duplicates (and hence similarity ties) are common.
pub fn quantized_unit_rows(rows: usize, dim: usize, levels: i32, rng: &mut impl Rng) -> Matrix {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let row = loop {
            let r: Vec<f64> = (0..dim).map(|_| rng.random_range(-levels..=levels) as f64).collect();
            if r.iter().any(|&v| v != 0.0) {
                break r;
            }
        };
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / n));
    }
    Matrix::new(rows, dim, data).unwrap()
}

pub fn config_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

/// A run that finishes in well under a second.
pub fn small_experiment(out_dir: &Path, mode: AblationMode) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        out_dir: out_dir.to_path_buf(),
        seeds: vec![0],
        data: DatasetSpec {
            num_identities_source: 24,
            num_identities_target: 24,
            samples_per_identity_per_modality: 2,
            d_raw: 8,
            ..Default::default()
        },
        train: TrainConfig {
            embed_dim: 8,
            lr: 1e-3,
            epochs: 1,
            warmup_epochs: 2,
            warmup_batch_size: 8,
            memory: MemoryConfig { capacity: 32 },
            graph: GraphConfig { k: 4, layers: 2 },
            loss: LossConfig {
                delta: 0.3,
                ..Default::default()
            },
            ..Default::default()
        },
    }
}
