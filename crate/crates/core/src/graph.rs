//! Cross-domain KNN graph over a batch plus both memories, and mean-aggregation
//! GNN propagation on it.
//!
//! Vertex order is fixed: the `B` input rows, then the source memory rows,
//! then the target memory rows. Each vertex keeps a list of its `K` most
//! cosine-similar other vertices (ties go to the lower index). A layer
//! averages a vertex with its own neighbour list, applies an affine map and
//! then `tanh`; the last layer replaces `tanh` with row L2 normalization.

use std::io::Write;

use rand::Rng;

use crate::encoder::{Dense, FeatureBatch, FeatureRole, Provenance};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, norm, normalize_rows, normalize_rows_backward, Matrix};

/// Parameters of one propagation layer (`D x D` weight, length-`D` bias).
pub type GnnLayerParams = Dense;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partition {
    pub inputs: usize,
    pub source_memory: usize,
    pub target_memory: usize,
}

impl Partition {
    pub fn total(&self) -> usize {
        self.inputs + self.source_memory + self.target_memory
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossDomainGraph {
    x: Matrix,
    neighbors: Vec<Vec<usize>>,
    partition: Partition,
    k: usize,
    clamped: bool,
    input_role: FeatureRole,
}

impl CrossDomainGraph {
    pub fn x(&self) -> &Matrix {
        &self.x
    }

    /// `neighbors()[j]` lists the vertices `i` with `A[j][i] = 1`.
    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    /// Effective neighbour count after clamping.
    pub fn k(&self) -> usize {
        self.k
    }

    /// True when the requested `K` exceeded `V - 1`.
    pub fn was_clamped(&self) -> bool {
        self.clamped
    }

    pub fn input_role(&self) -> FeatureRole {
        self.input_role
    }

    pub fn vertex_count(&self) -> usize {
        self.x.rows()
    }

    /// Dense adjacency, mostly for tests and debugging.
    pub fn dense_adjacency(&self) -> Matrix {
        let v = self.vertex_count();
        let mut a = Matrix::zeros(v, v);
        for (j, ns) in self.neighbors.iter().enumerate() {
            for &i in ns {
                a.set(j, i, 1.0);
            }
        }
        a
    }

    /// Writes the edge list as `src dst` lines.
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> Result<()> {
        for (j, ns) in self.neighbors.iter().enumerate() {
            for &i in ns {
                writeln!(w, "{j} {i}")?;
            }
        }
        Ok(())
    }
}

/// Directed KNN lists under cosine similarity. Returns the lists and the
/// effective `K` (clamped to `V - 1`).
pub fn knn_lists(x: &Matrix, k: usize) -> Result<(Vec<Vec<usize>>, usize)> {
    let v = x.rows();
    let k = k.min(v.saturating_sub(1));
    let norms: Vec<f64> = x.row_iter().map(norm).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Domain(format!("vertex {i} has a zero embedding")));
    }
    let mut lists = Vec::with_capacity(v);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(v);
    for j in 0..v {
        cand.clear();
        let xj = x.row(j);
        for i in (0..v).filter(|&i| i != j) {
            // `+ 0.0` folds -0.0 into 0.0 so that the two compare as a tie
            let s = (dot(xj, x.row(i)) / (norms[j] * norms[i])).clamp(-1.0, 1.0) + 0.0;
            cand.push((s, i));
        }
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k > 0 && k < cand.len() {
            cand.select_nth_unstable_by(k - 1, order);
        }
        let top = &mut cand[..k];
        top.sort_unstable_by(order);
        lists.push(top.iter().map(|&(_, i)| i).collect());
    }
    Ok((lists, k))
}

/// Builds the graph over `[input; src_mem; tgt_mem]`.
pub fn build_graph(
    input: &FeatureBatch,
    src_mem: &Matrix,
    tgt_mem: &Matrix,
    k: usize,
) -> Result<CrossDomainGraph> {
    let d = input.dim();
    for (name, m) in [("source memory", src_mem), ("target memory", tgt_mem)] {
        if m.rows() > 0 && m.cols() != d {
            return Err(shape_err!("{name} has width {}, inputs have {d}", m.cols()));
        }
    }
    let partition = Partition {
        inputs: input.len(),
        source_memory: src_mem.rows(),
        target_memory: tgt_mem.rows(),
    };
    if partition.total() < 2 {
        return Err(Error::Usage("a graph needs at least two vertices".into()));
    }
    let x = Matrix::vstack(&[input.features(), src_mem, tgt_mem])?;
    let (neighbors, eff_k) = knn_lists(&x, k)?;
    let clamped = eff_k < k;
    if clamped {
        log::warn!("K={k} exceeds vertex count {}; clamped to {eff_k}", partition.total());
    }
    Ok(CrossDomainGraph {
        x,
        neighbors,
        partition,
        k: eff_k,
        clamped,
        input_role: input.role(),
    })
}

/// Identity-initialized propagation layers.
pub fn init_layers(dim: usize, count: usize) -> Vec<GnnLayerParams> {
    (0..count)
        .map(|_| Dense {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
        })
        .collect()
}

/// Identity plus small uniform noise, for tests that need generic weights.
pub fn init_layers_perturbed(dim: usize, count: usize, scale: f64, rng: &mut impl Rng) -> Vec<GnnLayerParams> {
    let mut layers = init_layers(dim, count);
    for l in &mut layers {
        for w in l.weight.data_mut() {
            *w += rng.random_range(-scale..=scale);
        }
        for b in &mut l.bias {
            *b += rng.random_range(-scale..=scale);
        }
    }
    layers
}

fn mean_aggregate(h: &Matrix, neighbors: &[Vec<usize>]) -> Matrix {
    let mut out = h.clone();
    for (j, ns) in neighbors.iter().enumerate() {
        let inv = 1.0 / (ns.len() + 1) as f64;
        let row = out.row_mut(j);
        for &i in ns {
            for (o, v) in row.iter_mut().zip(h.row(i)) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|o| *o *= inv);
    }
    out
}

/// Transpose of [`mean_aggregate`]: scatters `dm` back onto the source rows.
fn mean_aggregate_backward(dm: &Matrix, neighbors: &[Vec<usize>]) -> Matrix {
    let mut dh = Matrix::zeros(dm.rows(), dm.cols());
    for (j, ns) in neighbors.iter().enumerate() {
        let inv = 1.0 / (ns.len() + 1) as f64;
        let g: Vec<f64> = dm.row(j).iter().map(|v| v * inv).collect();
        for &i in ns.iter().chain(std::iter::once(&j)) {
            for (o, v) in dh.row_mut(i).iter_mut().zip(&g) {
                *o += v;
            }
        }
    }
    dh
}

#[derive(Debug, Clone)]
pub struct GnnCache {
    aggregated: Vec<Matrix>,
    hidden: Vec<Matrix>,
    output: Matrix,
    norms: Vec<f64>,
}

impl GnnCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

fn check_layers(x: &Matrix, layers: &[GnnLayerParams]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Parameter("at least one propagation layer is required".into()));
    }
    for (l, p) in layers.iter().enumerate() {
        if p.d_in() != x.cols() || p.d_out() != x.cols() || p.bias.len() != x.cols() {
            return Err(shape_err!(
                "layer {l} is {}x{} but embeddings have width {}",
                p.d_in(),
                p.d_out(),
                x.cols()
            ));
        }
    }
    Ok(())
}

/// Forward propagation over explicit neighbour lists, keeping activations.
pub fn propagate_cached(
    x: &Matrix,
    neighbors: &[Vec<usize>],
    layers: &[GnnLayerParams],
) -> Result<GnnCache> {
    check_layers(x, layers)?;
    if neighbors.len() != x.rows() {
        return Err(shape_err!("{} neighbour lists for {} vertices", neighbors.len(), x.rows()));
    }
    let mut aggregated = Vec::with_capacity(layers.len());
    let mut hidden = Vec::with_capacity(layers.len() - 1);
    let mut h = x.clone();
    for (l, layer) in layers.iter().enumerate() {
        let m = mean_aggregate(&h, neighbors);
        let z = layer.forward(&m)?;
        aggregated.push(m);
        if l + 1 < layers.len() {
            h = z.map(f64::tanh);
            hidden.push(h.clone());
        } else {
            let (output, norms) = normalize_rows(&z)?;
            return Ok(GnnCache {
                aggregated,
                hidden,
                output,
                norms,
            });
        }
    }
    unreachable!("layers is non-empty")
}

pub fn gnn_forward(g: &CrossDomainGraph, layers: &[GnnLayerParams]) -> Result<Matrix> {
    Ok(propagate_cached(&g.x, &g.neighbors, layers)?.output)
}

/// Accumulates layer gradients into `grads` and returns `dL/dX` for every
/// vertex. Callers keep only the input rows; memory rows are constants.
pub fn propagate_backward(
    neighbors: &[Vec<usize>],
    layers: &[GnnLayerParams],
    cache: &GnnCache,
    d_out: &Matrix,
    grads: &mut [GnnLayerParams],
) -> Result<Matrix> {
    let mut dz = normalize_rows_backward(&cache.output, &cache.norms, d_out);
    for l in (0..layers.len()).rev() {
        let dm = layers[l].backward(&cache.aggregated[l], &dz, &mut grads[l])?;
        let dh = mean_aggregate_backward(&dm, neighbors);
        if l == 0 {
            return Ok(dh);
        }
        dz = dh;
        for (d, &t) in dz.data_mut().iter_mut().zip(cache.hidden[l - 1].data()) {
            *d *= 1.0 - t * t;
        }
    }
    unreachable!("layers is non-empty")
}

/// The first `b` propagated rows, tagged like the graph's input batch.
pub fn extract_domain_aware(g_out: &Matrix, b: usize, input_role: FeatureRole) -> Result<FeatureBatch> {
    if b > g_out.rows() {
        return Err(shape_err!("asked for {b} rows of a {}-row matrix", g_out.rows()));
    }
    FeatureBatch::new(g_out.slice_rows(0, b), input_role, Provenance::Student)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fb(rows: &[Vec<f64>]) -> FeatureBatch {
        let d = rows.first().map_or(1, Vec::len);
        FeatureBatch::new(
            Matrix::from_rows(rows, d).unwrap(),
            FeatureRole::TargetImage,
            Provenance::Student,
        )
        .unwrap()
    }

    fn at(deg: f64) -> Vec<f64> {
        let r = deg.to_radians();
        vec![r.cos(), r.sin()]
    }

    #[test]
    fn three_vectors_k1() {
        // cos table: (0,1)=cos10°, (0,2)=0, (1,2)=cos80°
        let g = build_graph(&fb(&[at(0.0), at(10.0), at(90.0)]), &Matrix::zeros(0, 2), &Matrix::zeros(0, 2), 1).unwrap();
        assert_eq!(g.neighbors(), &[vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn identical_vertices_tie_break_low_index() {
        let v = vec![vec![0.6, 0.8]; 5];
        let g = build_graph(&fb(&v), &Matrix::zeros(0, 2), &Matrix::zeros(0, 2), 2).unwrap();
        assert_eq!(g.neighbors()[0], vec![1, 2]);
        assert_eq!(g.neighbors()[1], vec![0, 2]);
        assert_eq!(g.neighbors()[4], vec![0, 1]);
    }

    #[test]
    fn k_clamped_with_empty_memories() {
        let g = build_graph(&fb(&[at(0.0), at(30.0)]), &Matrix::zeros(0, 2), &Matrix::zeros(0, 2), 5).unwrap();
        assert_eq!(g.k(), 1);
        assert!(g.was_clamped());
        assert!(g.neighbors().iter().all(|n| n.len() == 1));
    }

    #[test]
    fn vertex_order_follows_stacking() {
        let src = Matrix::from_rows(&[at(30.0)], 2).unwrap();
        let tgt = Matrix::from_rows(&[at(80.0), at(120.0)], 2).unwrap();
        let g = build_graph(&fb(&[at(0.0)]), &src, &tgt, 1).unwrap();
        assert_eq!(g.x().row(1), at(30.0).as_slice());
        assert_eq!(g.x().row(3), at(120.0).as_slice());
        assert_eq!(g.partition().total(), 4);
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0 1\n1 0\n2 3\n3 2\n");
    }

    #[test]
    fn single_vertex_one_layer_is_identity() {
        let x = Matrix::from_rows(&[at(33.0)], 2).unwrap();
        let out = propagate_cached(&x, &[vec![]], &init_layers(2, 1)).unwrap();
        assert!(out.output().max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn identical_linked_pair_is_fixed_point() {
        let g = build_graph(&fb(&[at(20.0), at(20.0)]), &Matrix::zeros(0, 2), &Matrix::zeros(0, 2), 1).unwrap();
        let out = gnn_forward(&g, &init_layers(2, 1)).unwrap();
        assert!(out.max_abs_diff(g.x()) < 1e-15);
    }

    #[test]
    fn extract_rows() {
        let m = Matrix::from_rows(&[at(0.0), at(90.0), at(45.0)], 2).unwrap();
        let all = extract_domain_aware(&m, 3, FeatureRole::TargetText).unwrap();
        assert_eq!(all.features(), &m);
        assert!(extract_domain_aware(&m, 0, FeatureRole::TargetText).unwrap().is_empty());
        let one = extract_domain_aware(&m, 1, FeatureRole::TargetText).unwrap();
        assert_eq!(one.features().row(0), m.row(0));
        assert_eq!(one.provenance(), Provenance::Student);
    }

    #[test]
    fn wrong_layer_shape_rejected() {
        let x = Matrix::from_rows(&[at(0.0), at(1.0)], 2).unwrap();
        let bad = init_layers(3, 2);
        assert!(matches!(propagate_cached(&x, &[vec![1], vec![0]], &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn memory_permutation_leaves_outputs_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rand_unit = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| l2_normalize(&(0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap())
                .collect()
        };
        let input = rand_unit(3);
        let src = rand_unit(5);
        let tgt = rand_unit(6);
        let layers = init_layers_perturbed(4, 2, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        let base = build_graph(&fb(&input), &Matrix::from_rows(&src, 4).unwrap(), &Matrix::from_rows(&tgt, 4).unwrap(), 3).unwrap();
        let mut src_p = src.clone();
        src_p.reverse();
        let mut tgt_p = tgt.clone();
        tgt_p.rotate_left(2);
        let perm = build_graph(&fb(&input), &Matrix::from_rows(&src_p, 4).unwrap(), &Matrix::from_rows(&tgt_p, 4).unwrap(), 3).unwrap();
        let a = gnn_forward(&base, &layers).unwrap().slice_rows(0, 3);
        let b = gnn_forward(&perm, &layers).unwrap().slice_rows(0, 3);
        assert!(a.max_abs_diff(&b) < 1e-12);
        for row in a.row_iter() {
            assert!((norm(row) - 1.0).abs() < 1e-12);
        }
    }
}
