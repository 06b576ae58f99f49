//! Diagrams of the three synthetic shapes after subsampling to 64 landmarks.
//!
//! `cargo run --release --example known_shapes`

use std::time::Instant;

use topogen::geometry::{farthest_point_sample, PointCloud};
use topogen::homology::{build_vr_filtration, persistence_diagrams};
use topogen::{rng, synth};

fn main() {
    for shape in [synth::Shape::Sphere, synth::Shape::Torus, synth::Shape::DoubleTorus] {
        let mut r = rng::stream(1, "known-shapes");
        let dense = PointCloud::new(synth::generate(shape, 2048, 0.0, &mut r)).unwrap();
        let cloud = dense.select(&farthest_point_sample(&dense, 64, 0).unwrap());
        let start = Instant::now();
        let f = build_vr_filtration(&cloud, 3, cloud.diameter()).unwrap();
        let pds = persistence_diagrams(&f);
        println!("{shape:?}: {} simplices, {:?}", f.len(), start.elapsed());
        for pd in &pds {
            let mut p: Vec<f64> = pd.persistences().collect();
            p.sort_by(|a, b| b.total_cmp(a));
            p.truncate(4);
            println!("  H{} pairs={} essential={} top={p:.3?}", pd.dimension, pd.pairs.len(), pd.essential.len());
        }
    }
}
