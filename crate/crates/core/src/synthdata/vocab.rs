use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::SynthError;

const COLORS: [&str; 8] = ["gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow"];
const SHAPES: [&str; 3] = ["cube", "sphere", "cylinder"];

/// Which of the two base-attribute families a base attribute belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaseKind {
    Adjective,
    Part,
}

/// A base attribute: an adjective or a part, by index within its family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BaseId {
    pub kind: BaseKind,
    pub index: usize,
}

impl BaseId {
    pub fn adjective(index: usize) -> Self {
        Self {
            kind: BaseKind::Adjective,
            index,
        }
    }
    pub fn part(index: usize) -> Self {
        Self {
            kind: BaseKind::Part,
            index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub adjective: usize,
    pub part: usize,
    /// 1-based group number.
    pub group: usize,
    pub seen: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub n_adjectives: usize,
    pub n_parts: usize,
    pub n_groups: usize,
    pub seen_groups: Vec<usize>,
    /// (adjective, part) pairs left out of the attribute set.
    #[serde(default)]
    pub exclusions: Vec<(usize, usize)>,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            n_adjectives: 8,
            n_parts: 3,
            n_groups: 3,
            seen_groups: vec![1, 2],
            exclusions: Vec::new(),
        }
    }
}

/// Attribute set `adjectives × parts` with group and seen/unseen tables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "VocabSpec", try_from = "VocabSpec")]
pub struct AttributeVocabulary {
    spec: VocabSpec,
    adjectives: Vec<String>,
    parts: Vec<String>,
    attributes: Vec<Attribute>,
    index: HashMap<(usize, usize), usize>,
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

impl From<AttributeVocabulary> for VocabSpec {
    fn from(v: AttributeVocabulary) -> Self {
        v.spec
    }
}

impl TryFrom<VocabSpec> for AttributeVocabulary {
    type Error = SynthError;
    fn try_from(spec: VocabSpec) -> Result<Self, SynthError> {
        build_vocabulary_with(&spec)
    }
}

/// Group of attribute (adjective `i`, part `j`). The diagonal offset between
/// `i` and `j` (modulo the smaller family size) is folded onto the groups, so
/// every group contains a full set of diagonals and thus touches every
/// adjective and every part.
fn group_of(i: usize, j: usize, n_adj: usize, n_parts: usize, n_groups: usize) -> usize {
    let d = if n_parts <= n_adj {
        (j + n_parts - i % n_parts) % n_parts
    } else {
        (i + n_adj - j % n_adj) % n_adj
    };
    d % n_groups + 1
}

pub fn build_vocabulary(
    n_adjectives: usize,
    n_parts: usize,
    n_groups: usize,
    seen_groups: &[usize],
) -> Result<AttributeVocabulary, SynthError> {
    build_vocabulary_with(&VocabSpec {
        n_adjectives,
        n_parts,
        n_groups,
        seen_groups: seen_groups.to_vec(),
        exclusions: Vec::new(),
    })
}

pub fn build_vocabulary_with(spec: &VocabSpec) -> Result<AttributeVocabulary, SynthError> {
    let (na, np, ng) = (spec.n_adjectives, spec.n_parts, spec.n_groups);
    let infeasible = |why: String| Err(SynthError::Vocabulary(why));
    if na == 0 || np == 0 || ng == 0 {
        return infeasible("adjective, part and group counts must be positive".into());
    }
    if (na * np) % ng != 0 {
        return infeasible(format!("{ng} groups do not divide {na}x{np} attributes"));
    }
    let short = na.min(np);
    if ng > short {
        return infeasible(format!(
            "{ng} groups cannot each cover all adjectives and parts when one family has only {short} members"
        ));
    }
    let seen_groups: BTreeSet<usize> = spec.seen_groups.iter().copied().collect();
    if let Some(g) = seen_groups.iter().find(|g| **g == 0 || **g > ng) {
        return infeasible(format!("seen group {g} outside 1..={ng}"));
    }
    let excluded: BTreeSet<(usize, usize)> = spec.exclusions.iter().copied().collect();
    for &(i, j) in &excluded {
        if i >= na || j >= np {
            return infeasible(format!("exclusion ({i},{j}) outside the vocabulary"));
        }
        if seen_groups.contains(&group_of(i, j, na, np, ng)) {
            return infeasible(format!("exclusion ({i},{j}) falls in a seen group"));
        }
    }

    let mut attributes = Vec::new();
    let mut index = HashMap::new();
    let (mut seen, mut unseen) = (Vec::new(), Vec::new());
    for i in 0..na {
        for j in 0..np {
            if excluded.contains(&(i, j)) {
                continue;
            }
            let group = group_of(i, j, na, np, ng);
            let is_seen = seen_groups.contains(&group);
            let id = attributes.len();
            index.insert((i, j), id);
            if is_seen {
                seen.push(id);
            } else {
                unseen.push(id);
            }
            attributes.push(Attribute {
                adjective: i,
                part: j,
                group,
                seen: is_seen,
            });
        }
    }
    let name = |pool: &[&str], n: usize, prefix: &str| -> Vec<String> {
        if n <= pool.len() {
            pool[..n].iter().map(|s| s.to_string()).collect()
        } else {
            (0..n).map(|k| format!("{prefix}{k}")).collect()
        }
    };
    Ok(AttributeVocabulary {
        spec: VocabSpec {
            seen_groups: seen_groups.into_iter().collect(),
            exclusions: excluded.into_iter().collect(),
            ..spec.clone()
        },
        adjectives: name(&COLORS, na, "adj"),
        parts: name(&SHAPES, np, "part"),
        attributes,
        index,
        seen,
        unseen,
    })
}

impl AttributeVocabulary {
    pub fn spec(&self) -> &VocabSpec {
        &self.spec
    }
    pub fn n_adjectives(&self) -> usize {
        self.spec.n_adjectives
    }
    pub fn n_parts(&self) -> usize {
        self.spec.n_parts
    }
    pub fn n_groups(&self) -> usize {
        self.spec.n_groups
    }
    pub fn len(&self) -> usize {
        self.attributes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }
    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }
    pub fn attribute(&self, id: usize) -> &Attribute {
        &self.attributes[id]
    }
    pub fn lookup(&self, adjective: usize, part: usize) -> Option<usize> {
        self.index.get(&(adjective, part)).copied()
    }
    /// Seen attribute ids in ascending order.
    pub fn seen(&self) -> &[usize] {
        &self.seen
    }
    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }
    pub fn adjective_name(&self, i: usize) -> &str {
        &self.adjectives[i]
    }
    pub fn part_name(&self, j: usize) -> &str {
        &self.parts[j]
    }
    pub fn attribute_name(&self, id: usize) -> String {
        let a = &self.attributes[id];
        format!("{}-{}", self.adjectives[a.adjective], self.parts[a.part])
    }

    pub fn bases_of(&self, id: usize) -> (BaseId, BaseId) {
        let a = &self.attributes[id];
        (BaseId::adjective(a.adjective), BaseId::part(a.part))
    }

    /// Base attributes that occur in at least one seen attribute.
    pub fn seen_bases(&self) -> BTreeSet<BaseId> {
        self.seen
            .iter()
            .flat_map(|&id| {
                let (c, p) = self.bases_of(id);
                [c, p]
            })
            .collect()
    }

    /// Attributes in `group` (1-based).
    pub fn group(&self, group: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&id| self.attributes[id].group == group)
            .collect()
    }

    /// Stable 64-bit fingerprint of the vocabulary definition.
    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(&self.spec).expect("spec serializes");
        fnv1a(text.as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
