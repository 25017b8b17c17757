use std::path::Path;

use metafm::hin::{EntitySet, HinStore, Relation, RelationDecl, SparseAdjacency};
use metafm::metagraph::{
    brute_force_count, compile_plan, execute_plan, parse_metagraph_file, CompileOptions, ExecOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const YELP: &[(&str, &str, &str)] = &[
    ("rate", "U", "B"),
    ("friend", "U", "U"),
    ("write", "U", "R"),
    ("about", "R", "B"),
    ("mention", "R", "A"),
    ("incat", "B", "Ca"),
    ("incity", "B", "Ci"),
    ("instate", "B", "St"),
    ("hasstar", "B", "Sr"),
];

const AMAZON: &[(&str, &str, &str)] = &[
    ("rate", "U", "B"),
    ("write", "U", "R"),
    ("about", "R", "B"),
    ("mention", "R", "A"),
    ("incat", "B", "Ca"),
    ("brand", "B", "Br"),
];

fn random_hin(rels: &[(&str, &str, &str)], seed: u64) -> HinStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = |t: &str| if t == "U" || t == "B" { 7 } else { 4 };
    let mut types: Vec<&str> = rels.iter().flat_map(|r| [r.1, r.2]).collect();
    types.sort_unstable();
    types.dedup();
    let relations = rels
        .iter()
        .map(|&(name, h, t)| {
            let (r, c) = (count(h), count(t));
            let edges: Vec<_> = (0..r)
                .flat_map(|i| (0..c).map(move |j| (i, j, 1.0)))
                .filter(|_| rng.random::<f64>() < 0.3)
                .collect();
            Relation {
                decl: RelationDecl::new(name, h, t),
                adjacency: SparseAdjacency::from_entries(r, c, edges).unwrap(),
            }
        })
        .collect();
    HinStore::from_parts(
        types
            .iter()
            .map(|&t| (t.to_string(), EntitySet::with_count(t, count(t))))
            .collect(),
        relations,
    )
}

fn check(file: &str, rels: &[(&str, &str, &str)], expected: usize) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/metagraphs")
        .join(file);
    let specs = parse_metagraph_file(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(specs.len(), expected);
    for seed in 0..3 {
        let hin = random_hin(rels, seed);
        for spec in &specs {
            assert_eq!((spec.source_type(), spec.sink_type()), ("U", "B"), "{}", spec.name);
            let plan = compile_plan(spec, &hin, CompileOptions::default()).unwrap();
            let m = execute_plan(&plan, &hin, &ExecOptions::default()).unwrap().matrix;
            for u in 0..7 {
                for b in 0..7 {
                    let want = brute_force_count(spec, &hin, u, b).unwrap() as f64;
                    assert_eq!(m.get(u, b), want, "{} at ({u}, {b})", spec.name);
                }
            }
        }
    }
}

#[test]
fn yelp_metagraphs_match_oracle() {
    check("yelp.dsl", YELP, 9);
}

#[test]
fn amazon_metagraphs_match_oracle() {
    check("amazon.dsl", AMAZON, 6);
}
