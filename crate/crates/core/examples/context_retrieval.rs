//! Exact top-k retrieval over embedded firm-year rows and attention-style
//! fusion of the retrieved context with the query representation.
//!
//! cargo run --example context_retrieval

use creditkit::context_store::{fuse, EmbeddingRecord, FusionConfig, Similarity, VectorIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> creditkit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 6;
    let mut index = VectorIndex::new(d, Similarity::Cosine)?;
    index.upsert((0..500).map(|i| EmbeddingRecord::new(format!("firm{i:03}"), (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())))?;
    let query: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let hits = index.query_topk(&query, 5)?;
    for h in &hits {
        println!("{} cosine {:.4}", h.id, h.similarity);
    }

    let fusion = fuse(&query, &index.context_matrix(&hits), &FusionConfig::identity(d))?;
    println!("attention weights {:.4?} (sum {:.6})", fusion.weights, fusion.weights.iter().sum::<f64>());
    println!("fused representation {:.4?}", fusion.output);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("index.bin");
    index.save(&path)?;
    let loaded = VectorIndex::load(&path)?;
    println!("reloaded {} records; identical = {}", loaded.len(), loaded == index);
    Ok(())
}
