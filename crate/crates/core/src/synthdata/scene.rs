use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::oracle::OracleConfig;
use super::{rng_for, AttributeVocabulary, SynthError};

const CLASS_STREAM: u64 = 0x636c_6173;
const SCENE_STREAM: u64 = 0x7363_656e;
const MAX_CLASS_ATTEMPTS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceConfig {
    pub size_min: f64,
    pub size_max: f64,
    pub material_min: f64,
    pub material_max: f64,
    /// Sub-cell offsets are drawn from `[-offset_max, offset_max]²` (cell units).
    pub offset_max: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            size_min: 0.7,
            size_max: 1.3,
            material_min: 0.0,
            material_max: 1.0,
            offset_max: 0.25,
        }
    }
}

impl NuisanceConfig {
    /// Unit size, neutral material, centred objects.
    pub fn fixed() -> Self {
        Self {
            size_min: 1.0,
            size_max: 1.0,
            material_min: 0.5,
            material_max: 0.5,
            offset_max: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub attributes_per_class: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Fraction of classes on the seen side of the GZSL split.
    pub seen_class_fraction: f64,
    /// Fractions of seen-side classes used for ZSLA training and validation;
    /// the remainder forms the isolated-novel split.
    pub zsla_train_fraction: f64,
    pub zsla_val_fraction: f64,
    pub nuisance: NuisanceConfig,
    pub oracle: OracleConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_classes: 160,
            images_per_class: 30,
            width: 6,
            height: 6,
            channels: 64,
            attributes_per_class: 3,
            min_objects: 3,
            max_objects: 3,
            seen_class_fraction: 0.5,
            zsla_train_fraction: 39.0 / 80.0,
            zsla_val_fraction: 11.0 / 80.0,
            nuisance: NuisanceConfig::default(),
            oracle: OracleConfig::default(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_classes == 0 || self.images_per_class == 0 {
            return bad("n_classes and images_per_class must be positive".into());
        }
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return bad("grid and channel sizes must be positive".into());
        }
        if self.attributes_per_class == 0 {
            return bad("attributes_per_class must be positive".into());
        }
        if self.min_objects < self.attributes_per_class || self.max_objects < self.min_objects {
            return bad(format!(
                "object range [{}, {}] must start at attributes_per_class={}",
                self.min_objects, self.max_objects, self.attributes_per_class
            ));
        }
        if self.max_objects > self.width * self.height {
            return bad(format!(
                "{} objects do not fit a {}x{} grid",
                self.max_objects, self.width, self.height
            ));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.seen_class_fraction)
            || !unit(self.zsla_train_fraction)
            || !unit(self.zsla_val_fraction)
            || self.zsla_train_fraction + self.zsla_val_fraction > 1.0 + 1e-12
        {
            return bad("split fractions must lie in [0,1] and train+val <= 1".into());
        }
        let n = &self.nuisance;
        if !(n.size_min > 0.0 && n.size_min <= n.size_max)
            || n.material_min > n.material_max
            || !(0.0..0.5).contains(&n.offset_max)
        {
            return bad("nuisance ranges are inverted or out of bounds".into());
        }
        self.oracle.validate()
    }

    /// Number of classes in each split leaf, in the order
    /// (zsla_train, zsla_val, isolated_novel, gzsl_unseen).
    pub fn split_sizes(&self) -> [usize; 4] {
        let n = self.n_classes;
        let seen = ((n as f64 * self.seen_class_fraction).round() as usize).clamp(1, n);
        let mut train = (seen as f64 * self.zsla_train_fraction).round() as usize;
        let val = ((seen as f64 * self.zsla_val_fraction).round() as usize).min(seen - train.min(seen));
        train = train.clamp(1, seen - val);
        [train, val, seen - train - val, n - seen]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    ZslaTrain,
    ZslaVal,
    IsolatedNovel,
    GzslUnseen,
}

impl SplitRole {
    pub fn is_gzsl_seen(self) -> bool {
        !matches!(self, SplitRole::GzslUnseen)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: usize,
    /// Sorted, distinct attribute ids.
    pub attributes: Vec<usize>,
    pub role: SplitRole,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub zsla_train: Vec<usize>,
    pub zsla_val: Vec<usize>,
    pub isolated_novel: Vec<usize>,
    pub gzsl_seen: Vec<usize>,
    pub gzsl_unseen: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub size: f64,
    pub material: f64,
    pub offset: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub attribute: usize,
    pub adjective: usize,
    pub part: usize,
    pub cell: (usize, usize),
    pub nuisance: Nuisance,
}

/// Objects are kept in placement order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub class_id: usize,
    pub objects: Vec<Object>,
}

impl Scene {
    /// Row-major `width × height` occupancy view.
    pub fn grid(&self, width: usize, height: usize) -> Vec<Option<&Object>> {
        let mut g = vec![None; width * height];
        for o in &self.objects {
            g[o.cell.0 * height + o.cell.1] = Some(o);
        }
        g
    }
}

/// Binary attribute presence with one ground-truth cell per positive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub phi: Vec<bool>,
    pub locations: Vec<Option<(usize, usize)>>,
}

impl LabelSet {
    /// Labels for objects carrying the given attributes, in placement order;
    /// the first object with an attribute fixes its location.
    pub fn from_assignments(
        n_attributes: usize,
        objects: impl IntoIterator<Item = (usize, (usize, usize))>,
    ) -> Self {
        let mut phi = vec![false; n_attributes];
        let mut locations = vec![None; n_attributes];
        for (attr, cell) in objects {
            if !phi[attr] {
                phi[attr] = true;
                locations[attr] = Some(cell);
            }
        }
        Self { phi, locations }
    }

    pub fn from_objects<'a>(n_attributes: usize, objects: impl IntoIterator<Item = &'a Object>) -> Self {
        Self::from_assignments(n_attributes, objects.into_iter().map(|o| (o.attribute, o.cell)))
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.phi.iter().enumerate().filter(|(_, p)| **p).map(|(k, _)| k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub vocab: AttributeVocabulary,
    pub classes: Vec<ClassDef>,
    pub splits: SplitSpec,
    pub scenes: Vec<Scene>,
    #[serde(skip)]
    pub labels: Vec<LabelSet>,
}

impl Dataset {
    pub fn role_of_scene(&self, scene: usize) -> SplitRole {
        self.classes[self.scenes[scene].class_id].role
    }

    /// Scene ids whose class has one of `roles`, ascending.
    pub fn scenes_with_roles(&self, roles: &[SplitRole]) -> Vec<usize> {
        self.scenes
            .iter()
            .filter(|s| roles.contains(&self.classes[s.class_id].role))
            .map(|s| s.id)
            .collect()
    }

    /// Recomputes labels from scene objects (used after deserialization).
    pub fn relabel(&mut self) {
        let n = self.vocab.len();
        self.labels = self
            .scenes
            .iter()
            .map(|s| LabelSet::from_objects(n, &s.objects))
            .collect();
    }

    pub fn n_attributes(&self) -> usize {
        self.vocab.len()
    }
}

pub fn generate_dataset(vocab: &AttributeVocabulary, config: &DatasetConfig) -> Result<Dataset, SynthError> {
    config.validate()?;
    let classes = generate_classes(vocab, config)?;
    let mut splits = SplitSpec::default();
    for c in &classes {
        match c.role {
            SplitRole::ZslaTrain => splits.zsla_train.push(c.id),
            SplitRole::ZslaVal => splits.zsla_val.push(c.id),
            SplitRole::IsolatedNovel => splits.isolated_novel.push(c.id),
            SplitRole::GzslUnseen => splits.gzsl_unseen.push(c.id),
        }
        if c.role.is_gzsl_seen() {
            splits.gzsl_seen.push(c.id);
        }
    }

    let total = config.n_classes * config.images_per_class;
    let scenes: Vec<Scene> = (0..total)
        .map(|id| generate_scene(id, &classes[id / config.images_per_class], vocab, config))
        .collect();
    let mut ds = Dataset {
        config: config.clone(),
        vocab: vocab.clone(),
        classes,
        splits,
        scenes,
        labels: Vec::new(),
    };
    ds.relabel();
    Ok(ds)
}

fn generate_classes(vocab: &AttributeVocabulary, config: &DatasetConfig) -> Result<Vec<ClassDef>, SynthError> {
    let k = config.attributes_per_class;
    let [train, val, iso, unseen] = config.split_sizes();
    let all: Vec<usize> = (0..vocab.len()).collect();
    if train + val > 0 && vocab.seen().len() < k {
        return Err(SynthError::Exhausted(format!(
            "{} seen attributes cannot form classes of {k}",
            vocab.seen().len()
        )));
    }
    if iso > 0 && vocab.unseen().is_empty() {
        return Err(SynthError::Exhausted(
            "isolated-novel classes need at least one unseen attribute".into(),
        ));
    }
    if all.len() < k {
        return Err(SynthError::Exhausted(format!("{} attributes cannot form classes of {k}", all.len())));
    }

    let mut rng = rng_for(config.seed, CLASS_STREAM);
    let mut taken: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut classes = Vec::with_capacity(config.n_classes);
    let plan = [
        (SplitRole::ZslaTrain, train),
        (SplitRole::ZslaVal, val),
        (SplitRole::IsolatedNovel, iso),
        (SplitRole::GzslUnseen, unseen),
    ];
    for (role, count) in plan {
        let pool: &[usize] = match role {
            SplitRole::ZslaTrain | SplitRole::ZslaVal => vocab.seen(),
            _ => &all,
        };
        for _ in 0..count {
            let mut attempts = 0;
            let attrs = loop {
                attempts += 1;
                if attempts > MAX_CLASS_ATTEMPTS {
                    return Err(SynthError::Exhausted(format!(
                        "could not find a new {role:?} class after {MAX_CLASS_ATTEMPTS} draws"
                    )));
                }
                let mut a: Vec<usize> = pool.choose_multiple(&mut rng, k).copied().collect();
                a.sort_unstable();
                if role == SplitRole::IsolatedNovel && a.iter().all(|&x| vocab.attribute(x).seen) {
                    continue;
                }
                if taken.insert(a.clone()) {
                    break a;
                }
            };
            classes.push(ClassDef {
                id: classes.len(),
                attributes: attrs,
                role,
            });
        }
    }
    Ok(classes)
}

fn generate_scene(id: usize, class: &ClassDef, vocab: &AttributeVocabulary, config: &DatasetConfig) -> Scene {
    let mut rng = rng_for(config.seed ^ id as u64, SCENE_STREAM);
    let n_objects = rng.random_range(config.min_objects..=config.max_objects);
    let mut attrs = class.attributes.clone();
    attrs.shuffle(&mut rng);
    while attrs.len() < n_objects {
        attrs.push(*class.attributes.choose(&mut rng).expect("class has attributes"));
    }
    let cells: Vec<usize> = rand::seq::index::sample(&mut rng, config.width * config.height, n_objects).into_vec();
    let n = &config.nuisance;
    let objects = attrs
        .into_iter()
        .zip(cells)
        .map(|(attribute, cell)| {
            let a = vocab.attribute(attribute);
            let mut draw = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let nuisance = Nuisance {
                size: draw(n.size_min, n.size_max),
                material: draw(n.material_min, n.material_max),
                offset: (draw(-n.offset_max, n.offset_max), draw(-n.offset_max, n.offset_max)),
            };
            Object {
                attribute,
                adjective: a.adjective,
                part: a.part,
                cell: (cell / config.height, cell % config.height),
                nuisance,
            }
        })
        .collect();
    Scene {
        id,
        class_id: class.id,
        objects,
    }
}
