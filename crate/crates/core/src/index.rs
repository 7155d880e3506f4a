//! The search forest: `N / n1` binary trees of fused templates whose leaves
//! are the enrolled reference templates.

use crate::error::{Error, Result};
use crate::fusion::{Fuser, FusionMethod, TrainingStats};
use crate::model::{level_count, CascadeSchedule, EmbeddingVector, Gallery, SubjectId};
use crate::pairing::{pair_hierarchy, PairHierarchy, PairingConfig, PairingMethod};

/// A tree node holding a template (fused, reference, or protected) and the
/// subjects below it. Level 1 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode<T> {
    pub level: u32,
    pub template: T,
    /// Covered subjects in leaf order, left subtree first.
    pub covered: Vec<SubjectId>,
    pub children: Option<Box<[TreeNode<T>; 2]>>,
}

impl<T> TreeNode<T> {
    pub fn leaf(level: u32, template: T, subject: SubjectId) -> Self {
        Self { level, template, covered: vec![subject], children: None }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn leaf_subject(&self) -> Option<SubjectId> {
        self.is_leaf().then(|| self.covered[0])
    }

    /// Same shape with every template mapped through `f`.
    pub fn try_map<U, E>(&self, f: &mut impl FnMut(&T) -> Result<U, E>) -> Result<TreeNode<U>, E> {
        let children = match &self.children {
            Some(c) => Some(Box::new([c[0].try_map(f)?, c[1].try_map(f)?])),
            None => None,
        };
        Ok(TreeNode {
            level: self.level,
            template: f(&self.template)?,
            covered: self.covered.clone(),
            children,
        })
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<&TreeNode<T>> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            match &node.children {
                Some(c) => {
                    stack.push(&c[1]);
                    stack.push(&c[0]);
                }
                None => out.push(node),
            }
        }
        out
    }

    /// Checks level numbering, coverage sizes and the union rule below this
    /// node for a tree with `levels` levels.
    pub fn check_structure(&self, levels: usize) -> std::result::Result<(), String> {
        let expected = 1usize << (levels - self.level as usize);
        if self.covered.len() != expected {
            return Err(format!(
                "node at level {} covers {} subjects, expected {expected}",
                self.level,
                self.covered.len()
            ));
        }
        match &self.children {
            None if self.level as usize != levels => {
                Err(format!("leaf at level {} of {levels}", self.level))
            }
            None => Ok(()),
            Some(c) => {
                for child in c.iter() {
                    if child.level != self.level + 1 {
                        return Err("child level is not parent level + 1".into());
                    }
                    child.check_structure(levels)?;
                }
                let union = [c[0].covered.as_slice(), c[1].covered.as_slice()].concat();
                if union != self.covered {
                    return Err("covered subjects are not the union of the children".into());
                }
                Ok(())
            }
        }
    }
}

pub type FusionNode = TreeNode<EmbeddingVector>;

/// The plaintext search structure.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexForest {
    pub trees: Vec<FusionNode>,
    pub n1: usize,
    pub dim: usize,
    pub fusion: FusionMethod,
    pub pairing: PairingMethod,
    pub training_stats: Option<TrainingStats>,
    /// Whether fused templates were rescaled to unit length.
    pub renormalized: bool,
    /// Schedule recommended at build time, if any.
    pub schedule: Option<CascadeSchedule>,
}

impl IndexForest {
    pub fn levels(&self) -> usize {
        level_count(self.n1)
    }

    pub fn gallery_size(&self) -> usize {
        self.trees.len() * self.n1
    }

    /// Every enrolled subject with its reference template, in leaf order.
    pub fn leaf_templates(&self) -> Vec<(SubjectId, &EmbeddingVector)> {
        self.trees
            .iter()
            .flat_map(|t| t.leaves())
            .map(|leaf| (leaf.covered[0], &leaf.template))
            .collect()
    }

    /// All templates rounded through `f32`, i.e. what a persisted copy holds.
    pub fn to_stored_precision(&self) -> Self {
        let mut round = |v: &EmbeddingVector| Ok::<_, Error>(v.to_stored_precision());
        Self {
            trees: self
                .trees
                .iter()
                .map(|t| t.try_map(&mut round))
                .collect::<Result<_>>()
                .expect("infallible"),
            training_stats: self.training_stats.as_ref().map(|s| TrainingStats {
                mu: s.mu.to_stored_precision(),
                source_count: s.source_count,
            }),
            ..self.clone()
        }
    }

    /// Structural invariants: tree count, per-node coverage, and that the
    /// leaves partition the enrolled subjects.
    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        let mut seen = std::collections::HashSet::new();
        for tree in &self.trees {
            if tree.level != 1 {
                return Err(Error::Corrupt("tree root is not at level 1".into()));
            }
            tree.check_structure(levels).map_err(Error::Corrupt)?;
            for leaf in tree.leaves() {
                if leaf.template.dim() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        found: leaf.template.dim(),
                    });
                }
                if !seen.insert(leaf.covered[0]) {
                    return Err(Error::Corrupt(format!(
                        "subject {} appears in more than one leaf",
                        leaf.covered[0]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexConfig {
    pub n1: usize,
    pub fusion: FusionMethod,
    pub pairing: PairingConfig,
    pub renormalize_fused: bool,
}

impl IndexConfig {
    pub fn new(n1: usize, fusion: FusionMethod, pairing: PairingMethod) -> Self {
        Self { n1, fusion, pairing: PairingConfig::new(pairing), renormalize_fused: false }
    }
}

/// Pairs, fuses, and assembles the forest over a reference gallery.
pub fn build_index(
    gallery: &Gallery,
    config: &IndexConfig,
    stats: Option<&TrainingStats>,
) -> Result<IndexForest> {
    if !gallery.len().is_multiple_of(config.n1) {
        return Err(Error::Divisibility { size: gallery.len(), n1: config.n1 });
    }
    let fuser = Fuser::new(config.fusion, stats)?.with_renormalize(config.renormalize_fused);
    let hierarchy = pair_hierarchy(gallery, &config.pairing, config.n1, &fuser)?;
    let trees = assemble(gallery, &hierarchy);
    let forest = IndexForest {
        trees,
        n1: config.n1,
        dim: gallery.dim(),
        fusion: config.fusion,
        pairing: config.pairing.method,
        training_stats: stats.cloned(),
        renormalized: config.renormalize_fused,
        schedule: None,
    };
    debug_assert!(forest.validate().is_ok());
    Ok(forest)
}

/// Turns the bottom-up merge lists into trees, reusing the fused vectors
/// computed during pairing.
fn assemble(gallery: &Gallery, hierarchy: &PairHierarchy) -> Vec<FusionNode> {
    let leaf_level = hierarchy.levels.len() as u32 + 1;
    let mut layer: Vec<FusionNode> = gallery
        .subject_ids
        .iter()
        .zip(&gallery.templates)
        .map(|(&id, t)| TreeNode::leaf(leaf_level, t.clone(), id))
        .collect();
    for (k, level) in hierarchy.levels.iter().enumerate() {
        let node_level = leaf_level - 1 - k as u32;
        let mut slots: Vec<Option<FusionNode>> = layer.into_iter().map(Some).collect();
        layer = level
            .merges
            .iter()
            .zip(&level.fused)
            .map(|(&(a, b), fused)| {
                let left = slots[a].take().expect("each group merged once");
                let right = slots[b].take().expect("each group merged once");
                TreeNode {
                    level: node_level,
                    template: fused.clone(),
                    covered: [left.covered.as_slice(), right.covered.as_slice()].concat(),
                    children: Some(Box::new([left, right])),
                }
            })
            .collect();
    }
    layer
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn gallery(n: usize, dim: usize, seed: u64) -> Gallery {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let templates = (0..n)
            .map(|_| {
                EmbeddingVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let mut g = Gallery::from_templates(templates).unwrap();
        g.subject_ids = (0..n as u64).map(|i| 100 + i).collect();
        g
    }

    #[test]
    fn two_subjects_one_tree() {
        let g = gallery(2, 4, 1);
        let f = build_index(
            &g,
            &IndexConfig::new(2, FusionMethod::Average1, PairingMethod::SimilarityScore),
            None,
        )
        .unwrap();
        assert_eq!(f.trees.len(), 1);
        assert_eq!(f.levels(), 2);
        let root = &f.trees[0];
        let children = root.children.as_ref().unwrap();
        let expected = crate::fusion::fuse(
            &children[0].template,
            &children[1].template,
            FusionMethod::Average1,
            None,
        )
        .unwrap();
        assert_eq!(root.template, expected);
        assert_eq!(root.covered.len(), 2);
        assert!(children.iter().all(|c| c.is_leaf() && c.level == 2));
    }

    #[test]
    fn sixteen_subjects_n1_4() {
        let g = gallery(16, 4, 2);
        let f = build_index(
            &g,
            &IndexConfig::new(4, FusionMethod::Index2, PairingMethod::Random),
            None,
        )
        .unwrap();
        assert_eq!(f.trees.len(), 4);
        assert_eq!(f.levels(), 3);
        f.validate().unwrap();
        let per_level = |l: u32| -> usize {
            fn count<T>(n: &TreeNode<T>, l: u32) -> usize {
                (n.level == l) as usize
                    + n.children.as_ref().map_or(0, |c| count(&c[0], l) + count(&c[1], l))
            }
            f.trees.iter().map(|t| count(t, l)).sum()
        };
        assert_eq!((per_level(1), per_level(2), per_level(3)), (4, 8, 16));
        let mut leaves: Vec<u64> = f.leaf_templates().into_iter().map(|(id, _)| id).collect();
        leaves.sort_unstable();
        assert_eq!(leaves, (100..116).collect::<Vec<_>>());
    }

    #[test]
    fn errors() {
        let g = gallery(6, 4, 3);
        assert!(matches!(
            build_index(
                &g,
                &IndexConfig::new(4, FusionMethod::Average1, PairingMethod::Random),
                None
            ),
            Err(Error::Divisibility { size: 6, n1: 4 })
        ));
        let g = gallery(4, 4, 3);
        assert!(matches!(
            build_index(
                &g,
                &IndexConfig::new(2, FusionMethod::Average2, PairingMethod::Random),
                None
            ),
            Err(Error::MissingStats("avg2"))
        ));
    }

    #[test]
    fn rebuild_is_identical() {
        let g = gallery(32, 8, 4);
        let cfg = IndexConfig::new(8, FusionMethod::Average1, PairingMethod::SimilarityScore);
        assert_eq!(build_index(&g, &cfg, None).unwrap(), build_index(&g, &cfg, None).unwrap());
    }

    #[test]
    fn structure_check_catches_bad_union() {
        let g = gallery(4, 2, 5);
        let mut f = build_index(
            &g,
            &IndexConfig::new(4, FusionMethod::Average1, PairingMethod::Random),
            None,
        )
        .unwrap();
        f.trees[0].covered.swap(0, 3);
        assert!(f.validate().is_err());
    }
}
