//! Synthetic data with known structure: planted heterogeneous networks whose
//! ratings depend on chosen metagraphs, and planted factorization machine
//! problems.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fm::{predict, FeatureTable, FmParams, GroupLayout};
use crate::hin::{RatingRange, RatingsFile, RelationFile, SchemaDecl};

/// A network with users `U`, items `B` and `C` topic types `T1..TC`. Every
/// user and item links to every topic of every component with a random
/// integer multiplicity, so the metagraph `Mc: U - Tc - B` counts
/// `Σ_t a_ut b_it`. Ratings are `3 + Σ_c β_c z_c + noise`, with `z_c` the
/// standardized count of component `c`, clipped to `[1, 5]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedHin {
    pub users: usize,
    pub items: usize,
    pub topics: usize,
    /// Largest edge multiplicity; multiplicities are uniform on `0..=max`.
    pub max_weight: u32,
    pub ratings_per_user: usize,
    /// One weight per component; zero marks an irrelevant metagraph.
    pub betas: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedHin {
    fn default() -> Self {
        PlantedHin {
            users: 300,
            items: 200,
            topics: 3,
            max_weight: 3,
            ratings_per_user: 10,
            betas: vec![0.8, 0.8, 0.0, 0.0],
            noise: 0.2,
            seed: 0,
        }
    }
}

/// `(relation, head type, tail type, weighted edges)`.
pub type PlantedRelation = (String, String, String, Vec<(usize, usize, u32)>);

/// Generated network in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedData {
    pub relations: Vec<PlantedRelation>,
    pub ratings: Vec<(usize, usize, f64)>,
    pub metagraphs: String,
    /// Names of metagraphs with nonzero weight.
    pub relevant: Vec<String>,
}

pub fn metagraph_name(c: usize) -> String {
    format!("M{}", c + 1)
}

impl PlantedHin {
    pub fn components(&self) -> usize {
        self.betas.len()
    }

    fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.topics == 0 || self.betas.is_empty() {
            return Err(Error::Argument(
                "planted network needs users, items, topics and components".into(),
            ));
        }
        if self.ratings_per_user > self.items {
            return Err(Error::Argument(format!(
                "{} ratings per user but only {} items",
                self.ratings_per_user, self.items
            )));
        }
        if self.max_weight == 0 || !(self.noise >= 0.0) {
            return Err(Error::Argument(
                "max weight must be positive and noise nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<PlantedData> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let t = self.topics;
        let mut relations = Vec::new();
        let mut weights: Vec<(Vec<u32>, Vec<u32>)> = Vec::new();
        let mut metagraphs = String::new();
        for c in 0..self.components() {
            let topic = format!("T{}", c + 1);
            let a: Vec<u32> = (0..self.users * t)
                .map(|_| rng.random_range(0..=self.max_weight))
                .collect();
            let b: Vec<u32> = (0..self.items * t)
                .map(|_| rng.random_range(0..=self.max_weight))
                .collect();
            let edges = |w: &[u32]| -> Vec<(usize, usize, u32)> {
                w.iter()
                    .enumerate()
                    .filter(|(_, &x)| x > 0)
                    .map(|(k, &x)| (k / t, k % t, x))
                    .collect()
            };
            relations.push((format!("ut{}", c + 1), "U".into(), topic.clone(), edges(&a)));
            relations.push((format!("bt{}", c + 1), "B".into(), topic.clone(), edges(&b)));
            metagraphs.push_str(&format!(
                "{}: U -[ut{c1}]- {topic} -[bt{c1}~]- B\n",
                metagraph_name(c),
                c1 = c + 1
            ));
            weights.push((a, b));
        }

        // standardization constants of each component's count over all pairs
        let count = |c: usize, u: usize, i: usize| -> f64 {
            let (a, b) = &weights[c];
            (0..t).map(|k| (a[u * t + k] * b[i * t + k]) as f64).sum()
        };
        let stats: Vec<(f64, f64)> = (0..self.components())
            .map(|c| {
                let (mut s, mut ss) = (0.0, 0.0);
                for u in 0..self.users {
                    for i in 0..self.items {
                        let v = count(c, u, i);
                        s += v;
                        ss += v * v;
                    }
                }
                let n = (self.users * self.items) as f64;
                let mean = s / n;
                (mean, (ss / n - mean * mean).max(1e-12).sqrt())
            })
            .collect();

        let noise = Normal::new(0.0, self.noise).unwrap();
        let mut ratings = Vec::with_capacity(self.users * self.ratings_per_user);
        for u in 0..self.users {
            let mut items = index::sample(&mut rng, self.items, self.ratings_per_user).into_vec();
            items.sort_unstable();
            for i in items {
                let signal: f64 = (0..self.components())
                    .map(|c| self.betas[c] * (count(c, u, i) - stats[c].0) / stats[c].1)
                    .sum();
                let r = (3.0 + signal + noise.sample(&mut rng)).clamp(1.0, 5.0);
                ratings.push((u, i, r));
            }
        }
        let relevant = (0..self.components())
            .filter(|&c| self.betas[c] != 0.0)
            .map(metagraph_name)
            .collect();
        Ok(PlantedData {
            relations,
            ratings,
            metagraphs,
            relevant,
        })
    }
}

/// Paths of a planted network written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFiles {
    pub schema: PathBuf,
    pub metagraphs: PathBuf,
    pub relevant: Vec<String>,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes `schema.json`, one edge file per relation, `ratings.tsv` and
/// `metagraphs.dsl` into `dir`. Entity ids are `u<i>`, `b<j>`, `t<c>_<k>`.
pub fn write_planted_hin(cfg: &PlantedHin, dir: &Path) -> Result<PlantedFiles> {
    let data = cfg.generate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rel_files = Vec::new();
    for (name, head, tail, edges) in &data.relations {
        let file = format!("{name}.tsv");
        let path = dir.join(&file);
        let mut w = create(&path)?;
        let prefix = tail.to_lowercase();
        let hp = if head == "U" { "u" } else { "b" };
        for &(h, t, x) in edges {
            writeln!(w, "{hp}{h}\t{prefix}_{t}\t{x}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        rel_files.push(RelationFile {
            name: name.clone(),
            head: head.clone(),
            tail: tail.clone(),
            path: PathBuf::from(file),
        });
    }
    let ratings_path = dir.join("ratings.tsv");
    let mut w = create(&ratings_path)?;
    for &(u, i, r) in &data.ratings {
        writeln!(w, "u{u}\tb{i}\t{r}").map_err(|e| Error::io(&ratings_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&ratings_path, e))?;

    let mut entities = vec!["U".to_string(), "B".to_string()];
    entities.extend((0..cfg.components()).map(|c| format!("T{}", c + 1)));
    let schema = SchemaDecl {
        entities,
        relations: rel_files,
        ratings: RatingsFile {
            path: PathBuf::from("ratings.tsv"),
            relation: "rate".into(),
            user_type: "U".into(),
            item_type: "B".into(),
            range: RatingRange { min: 1.0, max: 5.0 },
            binarize: true,
        },
    };
    let schema_path = dir.join("schema.json");
    fs::write(&schema_path, serde_json::to_string_pretty(&schema)?).map_err(|e| Error::io(&schema_path, e))?;
    let mg_path = dir.join("metagraphs.dsl");
    fs::write(&mg_path, &data.metagraphs).map_err(|e| Error::io(&mg_path, e))?;
    Ok(PlantedFiles {
        schema: schema_path,
        metagraphs: mg_path,
        relevant: data.relevant,
    })
}

/// A factorization machine problem drawn directly in feature space: `L`
/// metagraphs with rank `F` each (so `d = 2LF`), Gaussian features, and
/// labels from a planted model whose nonzero groups belong to the first
/// `relevant` metagraphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedFm {
    pub n: usize,
    pub metagraphs: usize,
    pub rank: usize,
    pub k: usize,
    pub relevant: usize,
    /// Standard deviation of the planted signal.
    pub signal: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedFm {
    fn default() -> Self {
        PlantedFm {
            n: 10_000,
            metagraphs: 4,
            rank: 10,
            k: 10,
            relevant: 2,
            signal: 1.0,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl PlantedFm {
    pub fn layout(&self) -> GroupLayout {
        GroupLayout::from_ranks(
            &(0..self.metagraphs)
                .map(|c| (metagraph_name(c), self.rank))
                .collect::<Vec<_>>(),
        )
    }

    /// Features, their layout and the planted parameters (labels are the
    /// planted prediction plus Gaussian noise).
    pub fn generate(&self) -> Result<(FeatureTable, GroupLayout, FmParams)> {
        if self.relevant > self.metagraphs || self.k == 0 {
            return Err(Error::Argument(
                "relevant metagraphs exceed the total, or K is zero".into(),
            ));
        }
        let layout = self.layout();
        let d = layout.d();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut planted = FmParams::zeros(d, self.k);
        for g in layout.groups() {
            let c: usize = g.metagraph[1..].parse::<usize>().unwrap() - 1;
            if c >= self.relevant {
                continue;
            }
            for i in g.range() {
                planted.w[i] = rng.sample::<f64, _>(StandardNormal) * 0.3;
                for f in 0..self.k {
                    planted.v[i * self.k + f] = rng.sample::<f64, _>(StandardNormal) * 0.3;
                }
            }
        }
        let scale = 1.0 / (self.rank as f64).sqrt();
        let rows: Vec<f64> = (0..self.n * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        let raw: Vec<f64> = (0..self.n)
            .map(|r| predict(&planted, &rows[r * d..(r + 1) * d]))
            .collect();
        let mean = raw.iter().sum::<f64>() / self.n.max(1) as f64;
        let sd = (raw.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / self.n.max(1) as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        // rescale so the planted prediction has mean 3 and the requested spread
        let a = self.signal / sd;
        planted.w.iter_mut().for_each(|x| *x *= a);
        planted.v.iter_mut().for_each(|x| *x *= a.sqrt());
        planted.b = 3.0 - a * mean;
        let noise = Normal::new(0.0, self.noise).unwrap();
        let labels: Vec<f64> = (0..self.n)
            .map(|r| predict(&planted, &rows[r * d..(r + 1) * d]) + noise.sample(&mut rng))
            .collect();
        let pairs = (0..self.n).map(|r| (r, r)).collect();
        let table = FeatureTable::from_dense(d, &rows, labels, pairs)?;
        Ok((table, layout, planted))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hin::{ingest, SchemaDecl};
    use crate::metagraph::parse_metagraph_file;

    #[test]
    fn planted_hin_round_trips_through_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PlantedHin {
            users: 20,
            items: 15,
            ratings_per_user: 4,
            ..Default::default()
        };
        let files = write_planted_hin(&cfg, dir.path()).unwrap();
        let schema = SchemaDecl::load(&files.schema).unwrap();
        let ing = ingest(&schema).unwrap();
        assert_eq!(ing.ratings.len(), 80);
        assert!(ing.ratings.triples.iter().all(|r| (1.0..=5.0).contains(&r.value)));
        let specs = parse_metagraph_file(&fs::read_to_string(&files.metagraphs).unwrap()).unwrap();
        assert_eq!(specs.len(), 4);
        assert_eq!(files.relevant, ["M1", "M2"]);
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = PlantedHin {
            users: 10,
            items: 10,
            ratings_per_user: 3,
            ..Default::default()
        };
        assert_eq!(cfg.generate().unwrap(), cfg.generate().unwrap());
        let other = PlantedHin { seed: 1, ..cfg.clone() };
        assert_ne!(cfg.generate().unwrap().ratings, other.generate().unwrap().ratings);
    }

    #[test]
    fn planted_fm_has_requested_shape_and_spread() {
        let cfg = PlantedFm {
            n: 2000,
            metagraphs: 3,
            rank: 2,
            k: 3,
            relevant: 1,
            noise: 0.0,
            ..Default::default()
        };
        let (t, layout, planted) = cfg.generate().unwrap();
        assert_eq!(layout.d(), 12);
        assert_eq!(t.len(), 2000);
        let mean = t.label_mean();
        let sd = (t.labels().iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 2000.0).sqrt();
        assert!((mean - 3.0).abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
        // only the first metagraph's groups are planted
        for g in layout.groups() {
            let nz = g.range().any(|i| planted.w[i] != 0.0);
            assert_eq!(nz, g.metagraph == "M1");
        }
    }
}
