//! Node and graph homophily on a small hand-built graph, plus the
//! quantile bucketing used by the analyses.

use nodemoe::analysis::{bucket_by_degree, bucket_by_homophily};
use nodemoe::graph::{graph_homophily, node_homophily_all};
use nodemoe::Graph;

fn main() -> nodemoe::Result<()> {
    // Two triangles joined by a bridge, plus one isolated node.
    let g = Graph::from_edges(7, &[(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (4, 5), (3, 5)])?;
    let labels = [0, 0, 0, 1, 1, 0, 1];
    for (i, h) in node_homophily_all(&g, &labels).iter().enumerate() {
        match h {
            Some(h) => println!("node {i}: degree {} homophily {h:.3}", g.degree(i)),
            None => println!("node {i}: isolated"),
        }
    }
    println!("graph homophily {:.4}", graph_homophily(&g, &labels)?);

    let nodes: Vec<usize> = (0..7).collect();
    let by_h = bucket_by_homophily(&g, &labels, &nodes, 3)?;
    for b in &by_h.buckets {
        println!("homophily bucket {} [{:.2}, {:.2}]: {:?}", b.index, b.lower, b.upper, b.nodes);
    }
    let by_d = bucket_by_degree(&g, &nodes, 3)?;
    println!("degree buckets (merged: {}): {:?}", by_d.merged, by_d.buckets.iter().map(|b| &b.nodes).collect::<Vec<_>>());
    Ok(())
}
