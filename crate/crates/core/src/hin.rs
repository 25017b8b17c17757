//! Heterogeneous information network storage: typed entity sets, one sparse
//! adjacency per declared relation, rating triples and their splits.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Dense 0-based indices for the external ids of one entity type, assigned in
/// order of first appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntitySet {
    pub type_name: String,
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl EntitySet {
    pub fn new(type_name: impl Into<String>) -> Self {
        EntitySet {
            type_name: type_name.into(),
            ids: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// An entity set with `count` anonymous members named `0..count`.
    pub fn with_count(type_name: impl Into<String>, count: usize) -> Self {
        let mut set = EntitySet::new(type_name);
        for i in 0..count {
            set.intern(&i.to_string());
        }
        set
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id_of(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }

    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }
}

pub type EntityRegistry = BTreeMap<String, EntitySet>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationDecl {
    pub name: String,
    pub head_type: String,
    pub tail_type: String,
}

impl RelationDecl {
    pub fn new(name: &str, head_type: &str, tail_type: &str) -> Self {
        RelationDecl {
            name: name.into(),
            head_type: head_type.into(),
            tail_type: tail_type.into(),
        }
    }
}

/// Weighted head x tail adjacency of a single relation.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    matrix: CsrMatrix,
}

impl SparseAdjacency {
    pub fn from_entries(
        rows: usize,
        cols: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let entries: Vec<_> = entries.into_iter().collect();
        if let Some(&(r, c, w)) = entries.iter().find(|e| !(e.2 >= 0.0)) {
            return Err(Error::Validation(format!(
                "negative or non-finite weight {w} at ({r}, {c})"
            )));
        }
        Ok(SparseAdjacency {
            matrix: CsrMatrix::from_triplets(rows, cols, entries)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols()
    }

    pub fn nnz(&self) -> usize {
        self.matrix.nnz()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.matrix.iter()
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn is_binary(&self) -> bool {
        self.matrix.values().iter().all(|&v| v == 1.0)
    }

    /// Pads with empty rows/columns up to the given shape.
    fn grow(&mut self, rows: usize, cols: usize) -> Result<()> {
        if rows == self.rows() && cols == self.cols() {
            return Ok(());
        }
        self.matrix = CsrMatrix::from_triplets(rows, cols, self.matrix.iter())?;
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        msg: msg.into(),
    }
}

/// Parses tab-separated edge lines `head<TAB>tail[<TAB>weight]`.
pub fn parse_edges(
    text: &str,
    path: &Path,
    decl: &RelationDecl,
    entities: &mut EntityRegistry,
) -> Result<SparseAdjacency> {
    for ty in [&decl.head_type, &decl.tail_type] {
        if !entities.contains_key(ty) {
            return Err(Error::UnknownEntity(ty.clone()));
        }
    }
    let mut triplets = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err(
                path,
                lineno,
                format!("expected `head<TAB>tail[<TAB>weight]`, got {line:?}"),
            ));
        }
        let weight = match fields.get(2) {
            Some(w) => w
                .trim()
                .parse::<f64>()
                .map_err(|_| parse_err(path, lineno, format!("bad weight {w:?}")))?,
            None => 1.0,
        };
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::Validation(format!(
                "{}:{lineno}: weight must be finite and nonnegative, got {weight}",
                path.display()
            )));
        }
        let head = entities.get_mut(&decl.head_type).unwrap().intern(fields[0]);
        let tail = entities.get_mut(&decl.tail_type).unwrap().intern(fields[1]);
        triplets.push((head, tail, weight));
    }
    let rows = entities[&decl.head_type].count();
    let cols = entities[&decl.tail_type].count();
    SparseAdjacency::from_entries(rows, cols, triplets)
}

/// Loads one relation's edge file. Duplicate pairs have their weights summed,
/// and unseen external ids extend the entity id maps.
pub fn load_edges(path: &Path, decl: &RelationDecl, entities: &mut EntityRegistry) -> Result<SparseAdjacency> {
    parse_edges(&read_text(path)?, path, decl, entities)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    All,
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSet {
    pub triples: Vec<Rating>,
    pub role: SplitRole,
}

impl RatingSet {
    pub fn new(triples: Vec<Rating>, role: SplitRole) -> Self {
        RatingSet { triples, role }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.triples.is_empty() {
            return 0.0;
        }
        self.triples.iter().map(|r| r.value).sum::<f64>() / self.triples.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingRange {
    pub min: f64,
    pub max: f64,
}

impl Default for RatingRange {
    fn default() -> Self {
        RatingRange { min: 1.0, max: 5.0 }
    }
}

impl RatingRange {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn clip(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }
}

pub fn parse_ratings(
    text: &str,
    path: &Path,
    user_type: &str,
    item_type: &str,
    range: RatingRange,
    entities: &mut EntityRegistry,
) -> Result<RatingSet> {
    for ty in [user_type, item_type] {
        if !entities.contains_key(ty) {
            return Err(Error::UnknownEntity(ty.to_owned()));
        }
    }
    let mut triples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err(
                path,
                lineno,
                format!("expected `user<TAB>item<TAB>rating`, got {line:?}"),
            ));
        }
        let value: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad rating {:?}", fields[2])))?;
        if !range.contains(value) {
            return Err(Error::Validation(format!(
                "{}:{lineno}: rating {value} outside [{}, {}]",
                path.display(),
                range.min,
                range.max
            )));
        }
        let user = entities.get_mut(user_type).unwrap().intern(fields[0]);
        let item = entities.get_mut(item_type).unwrap().intern(fields[1]);
        triples.push(Rating { user, item, value });
    }
    Ok(RatingSet::new(triples, SplitRole::All))
}

pub fn load_ratings(
    path: &Path,
    user_type: &str,
    item_type: &str,
    range: RatingRange,
    entities: &mut EntityRegistry,
) -> Result<RatingSet> {
    parse_ratings(&read_text(path)?, path, user_type, item_type, range, entities)
}

/// Seeded shuffle-and-cut. Validation and test receive `floor(f * N)` triples;
/// train receives the rest.
pub fn split_ratings(
    ratings: &RatingSet,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(RatingSet, RatingSet, RatingSet)> {
    let (ft, fv, fs) = fractions;
    if ft < 0.0 || fv < 0.0 || fs < 0.0 {
        return Err(Error::Argument(format!(
            "split fractions must be nonnegative, got {fractions:?}"
        )));
    }
    if ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }
    let n = ratings.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_valid = (fv * n as f64).floor() as usize;
    let n_test = (fs * n as f64).floor() as usize;
    let n_train = n - n_valid - n_test;
    let take = |idx: &[usize], role| RatingSet::new(idx.iter().map(|&i| ratings.triples[i]).collect(), role);
    Ok((
        take(&order[..n_train], SplitRole::Train),
        take(&order[n_train..n_train + n_valid], SplitRole::Valid),
        take(&order[n_train + n_valid..], SplitRole::Test),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    pub decl: RelationDecl,
    pub adjacency: SparseAdjacency,
}

/// Typed entities plus one adjacency per relation. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct HinStore {
    entities: EntityRegistry,
    relations: BTreeMap<String, Relation>,
}

impl HinStore {
    /// Assembles a store without checking invariants; see [`validate`].
    pub fn from_parts(entities: EntityRegistry, relations: Vec<Relation>) -> Self {
        HinStore {
            entities,
            relations: relations.into_iter().map(|r| (r.decl.name.clone(), r)).collect(),
        }
    }

    pub fn entities(&self) -> &EntityRegistry {
        &self.entities
    }

    pub fn entity(&self, type_name: &str) -> Option<&EntitySet> {
        self.entities.get(type_name)
    }

    pub fn entity_count(&self, type_name: &str) -> Result<usize> {
        self.entities
            .get(type_name)
            .map(EntitySet::count)
            .ok_or_else(|| Error::UnknownEntity(type_name.to_owned()))
    }

    pub fn relation(&self, name: &str) -> Option<&Relation> {
        self.relations.get(name)
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.values()
    }
}

/// Accumulates entity sets and relations, then pads every adjacency to the
/// final entity counts.
#[derive(Debug, Clone, Default)]
pub struct HinBuilder {
    entities: EntityRegistry,
    relations: Vec<Relation>,
}

impl HinBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare_entity(&mut self, type_name: &str) -> &mut Self {
        self.entities
            .entry(type_name.to_owned())
            .or_insert_with(|| EntitySet::new(type_name));
        self
    }

    pub fn entities(&self) -> &EntityRegistry {
        &self.entities
    }

    pub fn entities_mut(&mut self) -> &mut EntityRegistry {
        &mut self.entities
    }

    pub fn add_relation(&mut self, decl: RelationDecl, adjacency: SparseAdjacency) -> Result<()> {
        if self.relations.iter().any(|r| r.decl.name == decl.name) {
            return Err(Error::Validation(format!("relation `{}` declared twice", decl.name)));
        }
        self.relations.push(Relation { decl, adjacency });
        Ok(())
    }

    pub fn load_relation(&mut self, path: &Path, decl: RelationDecl) -> Result<()> {
        let adj = load_edges(path, &decl, &mut self.entities)?;
        self.add_relation(decl, adj)
    }

    /// Adds the user-item rating relation built from `ratings`. With
    /// `binarize`, every rated pair gets weight 1; otherwise the rating value
    /// is kept (repeated pairs summed).
    pub fn add_rating_relation(&mut self, decl: RelationDecl, ratings: &RatingSet, binarize: bool) -> Result<()> {
        let rows = self.entities.get(&decl.head_type).map(EntitySet::count);
        let cols = self.entities.get(&decl.tail_type).map(EntitySet::count);
        let (rows, cols) = match (rows, cols) {
            (Some(r), Some(c)) => (r, c),
            (None, _) => return Err(Error::UnknownEntity(decl.head_type)),
            (_, None) => return Err(Error::UnknownEntity(decl.tail_type)),
        };
        let adj = if binarize {
            let mut pairs: Vec<(usize, usize)> = ratings.triples.iter().map(|r| (r.user, r.item)).collect();
            pairs.sort_unstable();
            pairs.dedup();
            SparseAdjacency::from_entries(rows, cols, pairs.into_iter().map(|(u, b)| (u, b, 1.0)))?
        } else {
            SparseAdjacency::from_entries(rows, cols, ratings.triples.iter().map(|r| (r.user, r.item, r.value)))?
        };
        self.add_relation(decl, adj)
    }

    pub fn build(mut self) -> Result<HinStore> {
        for rel in &mut self.relations {
            let rows = self
                .entities
                .get(&rel.decl.head_type)
                .ok_or_else(|| Error::UnknownEntity(rel.decl.head_type.clone()))?
                .count();
            let cols = self
                .entities
                .get(&rel.decl.tail_type)
                .ok_or_else(|| Error::UnknownEntity(rel.decl.tail_type.clone()))?
                .count();
            rel.adjacency.grow(rows, cols)?;
        }
        Ok(HinStore::from_parts(self.entities, self.relations))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    UnknownType {
        relation: String,
        type_name: String,
    },
    DimensionMismatch {
        relation: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    EmptyRelation {
        relation: String,
    },
    OrphanEntityType {
        type_name: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Report-only consistency check of a store.
pub fn validate(hin: &HinStore) -> ValidationReport {
    let mut issues = Vec::new();
    for rel in hin.relations() {
        let mut expected = (0, 0);
        let mut known = true;
        for (ty, slot) in [
            (&rel.decl.head_type, &mut expected.0),
            (&rel.decl.tail_type, &mut expected.1),
        ] {
            match hin.entity(ty) {
                Some(set) => *slot = set.count(),
                None => {
                    known = false;
                    issues.push(ValidationIssue::UnknownType {
                        relation: rel.decl.name.clone(),
                        type_name: ty.clone(),
                    });
                }
            }
        }
        let found = (rel.adjacency.rows(), rel.adjacency.cols());
        if known && found != expected {
            issues.push(ValidationIssue::DimensionMismatch {
                relation: rel.decl.name.clone(),
                expected,
                found,
            });
        }
        if rel.adjacency.nnz() == 0 {
            issues.push(ValidationIssue::EmptyRelation {
                relation: rel.decl.name.clone(),
            });
        }
    }
    for ty in hin.entities().keys() {
        let used = hin
            .relations()
            .any(|r| &r.decl.head_type == ty || &r.decl.tail_type == ty);
        if !used {
            issues.push(ValidationIssue::OrphanEntityType { type_name: ty.clone() });
        }
    }
    ValidationReport { issues }
}

/// Schema document: entity types, relation declarations with their edge
/// files, and the rating file. Relative paths resolve against the document's
/// directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaDecl {
    pub entities: Vec<String>,
    pub relations: Vec<RelationFile>,
    pub ratings: RatingsFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationFile {
    pub name: String,
    pub head: String,
    pub tail: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatingsFile {
    pub path: PathBuf,
    /// Name under which the rating relation is exposed to metagraphs.
    #[serde(default = "default_rating_relation")]
    pub relation: String,
    pub user_type: String,
    pub item_type: String,
    #[serde(default)]
    pub range: RatingRange,
    /// Store rated pairs with weight 1 instead of the rating value.
    #[serde(default = "default_true")]
    pub binarize: bool,
}

fn default_rating_relation() -> String {
    "rate".into()
}

fn default_true() -> bool {
    true
}

impl SchemaDecl {
    pub fn load(path: &Path) -> Result<SchemaDecl> {
        let text = read_text(path)?;
        let mut schema: SchemaDecl = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for rel in &mut schema.relations {
            if rel.path.is_relative() {
                rel.path = base.join(&rel.path);
            }
        }
        if schema.ratings.path.is_relative() {
            schema.ratings.path = base.join(&schema.ratings.path);
        }
        Ok(schema)
    }

    pub fn rating_decl(&self) -> RelationDecl {
        RelationDecl::new(&self.ratings.relation, &self.ratings.user_type, &self.ratings.item_type)
    }

    pub fn input_files(&self) -> Vec<&Path> {
        let mut files: Vec<&Path> = self.relations.iter().map(|r| r.path.as_path()).collect();
        files.push(&self.ratings.path);
        files
    }
}

/// Result of ingesting a schema: side-information relations are loaded, the
/// rating relation is held back so it can be built from the training split.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub builder: HinBuilder,
    pub ratings: RatingSet,
    pub rating_decl: RelationDecl,
    pub binarize: bool,
    pub range: RatingRange,
}

impl Ingested {
    /// Finishes the store with the rating relation built from `train` only.
    pub fn into_store(&self, train: &RatingSet) -> Result<HinStore> {
        let mut b = self.builder.clone();
        b.add_rating_relation(self.rating_decl.clone(), train, self.binarize)?;
        b.build()
    }
}

pub fn ingest(schema: &SchemaDecl) -> Result<Ingested> {
    let mut builder = HinBuilder::new();
    for ty in &schema.entities {
        builder.declare_entity(ty);
    }
    // Ratings first so user and item indices follow rating-file order.
    let ratings = load_ratings(
        &schema.ratings.path,
        &schema.ratings.user_type,
        &schema.ratings.item_type,
        schema.ratings.range,
        builder.entities_mut(),
    )?;
    for rel in &schema.relations {
        builder.load_relation(&rel.path, RelationDecl::new(&rel.name, &rel.head, &rel.tail))?;
    }
    Ok(Ingested {
        builder,
        ratings,
        rating_decl: schema.rating_decl(),
        binarize: schema.ratings.binarize,
        range: schema.ratings.range,
    })
}
