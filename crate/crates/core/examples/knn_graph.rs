//! Builds a cross-domain KNN graph over a batch plus two memories, prints its
//! edges and propagates the embeddings through two identity-initialized
//! layers.

use gckd::encoder::{FeatureBatch, FeatureRole, Provenance};
use gckd::graph::{build_graph, extract_domain_aware, gnn_forward, init_layers};
use gckd::numerics::{l2_normalize, Matrix};

fn unit_rows(angles_deg: &[f64]) -> gckd::Result<Matrix> {
    let rows: Vec<Vec<f64>> = angles_deg
        .iter()
        .map(|a| l2_normalize(&[a.to_radians().cos(), a.to_radians().sin()]))
        .collect::<gckd::Result<_>>()?;
    Matrix::from_rows(&rows, 2)
}

fn main() -> gckd::Result<()> {
    let batch = FeatureBatch::new(unit_rows(&[0.0, 90.0])?, FeatureRole::TargetImage, Provenance::Student)?;
    let source_memory = unit_rows(&[10.0, 80.0, 180.0])?;
    let target_memory = unit_rows(&[5.0, 100.0])?;
    let graph = build_graph(&batch, &source_memory, &target_memory, 2)?;

    println!("{:?}, K = {}", graph.partition(), graph.k());
    let mut edges = Vec::new();
    graph.write_edge_list(&mut edges)?;
    print!("{}", String::from_utf8_lossy(&edges));

    let out = gnn_forward(&graph, &init_layers(2, 2))?;
    let propagated = extract_domain_aware(&out, batch.len(), graph.input_role())?;
    for (i, row) in propagated.features().row_iter().enumerate() {
        let angle = row[1].atan2(row[0]).to_degrees();
        println!("batch row {i}: now at {angle:.1} degrees");
    }
    Ok(())
}
