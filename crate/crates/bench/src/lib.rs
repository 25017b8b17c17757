//! Random inputs shared by the benchmarks.

use metafm::hin::{EntitySet, HinStore, Relation, RelationDecl, SparseAdjacency};
use metafm::sparse::CsrMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `rows x cols` with each entry present with probability `density`.
pub fn random_csr(rows: usize, cols: usize, density: f64, seed: u64) -> CsrMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trip: Vec<_> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|_| rng.random::<f64>() < density)
        .map(|(r, c)| (r, c, 1.0))
        .collect();
    CsrMatrix::from_triplets(rows, cols, trip).unwrap()
}

/// Users, items, reviews and aspects with binary `rate`, `write`, `about`
/// and `mention` relations.
pub fn review_hin(users: usize, items: usize, seed: u64) -> HinStore {
    let reviews = 2 * users;
    let aspects = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate: Vec<_> = (0..users)
        .flat_map(|u| (0..5).map(move |k| (u, k)))
        .map(|(u, _)| (u, rng.random_range(0..items), 1.0))
        .collect();
    let write: Vec<_> = (0..reviews).map(|r| (r % users, r, 1.0)).collect();
    let about: Vec<_> = (0..reviews).map(|r| (r, rng.random_range(0..items), 1.0)).collect();
    let mention: Vec<_> = (0..reviews)
        .flat_map(|r| (0..3).map(move |k| (r, k)))
        .map(|(r, _)| (r, rng.random_range(0..aspects), 1.0))
        .collect();
    let rel = |name: &str, h: &str, t: &str, rows, cols, e: Vec<(usize, usize, f64)>| Relation {
        decl: RelationDecl::new(name, h, t),
        adjacency: SparseAdjacency::from_entries(rows, cols, e).unwrap(),
    };
    HinStore::from_parts(
        [("U", users), ("B", items), ("R", reviews), ("A", aspects)]
            .iter()
            .map(|&(t, n)| (t.to_string(), EntitySet::with_count(t, n)))
            .collect(),
        vec![
            rel("rate", "U", "B", users, items, rate),
            rel("write", "U", "R", users, reviews, write),
            rel("about", "R", "B", reviews, items, about),
            rel("mention", "R", "A", reviews, aspects, mention),
        ],
    )
}
