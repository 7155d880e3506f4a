//! Encrypted search forests, protected probes, and key rotation.

use rand::RngCore;

use super::{
    compare_protected, decrypt, decrypt_score, encrypt, KeyMaterial, ProtectedTemplate, Scheme,
    SecurityLevel, TemplateEncoding,
};
use crate::error::{Error, Result};
use crate::fusion::FusionMethod;
use crate::index::{IndexForest, TreeNode};
use crate::model::{level_count, CascadeSchedule, EmbeddingVector, SubjectId};
use crate::pairing::PairingMethod;
use crate::retrieval::{Comparator, SearchIndex};

pub type ProtectedNode = TreeNode<ProtectedTemplate>;

/// A search forest whose fused and reference templates are all encrypted.
/// Carries the public encoding parameters a client needs to protect probes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtectedIndex {
    pub trees: Vec<ProtectedNode>,
    pub n1: usize,
    pub dim: usize,
    pub fusion: FusionMethod,
    pub pairing: PairingMethod,
    pub schedule: Option<CascadeSchedule>,
    pub scheme: Scheme,
    pub security_level: SecurityLevel,
    pub params_id: u16,
    pub key_id: u64,
    pub encoding: TemplateEncoding,
}

impl ProtectedIndex {
    pub fn levels(&self) -> usize {
        level_count(self.n1)
    }

    /// Every enrolled subject with its protected reference, in leaf order.
    pub fn leaf_templates(&self) -> Vec<(SubjectId, &ProtectedTemplate)> {
        self.trees
            .iter()
            .flat_map(|t| t.leaves())
            .map(|leaf| (leaf.covered[0], &leaf.template))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.encoding.suits(self.scheme) {
            return Err(Error::Corrupt(format!("encoding does not suit scheme {}", self.scheme)));
        }
        let levels = self.levels();
        let mut seen = std::collections::HashSet::new();
        for tree in &self.trees {
            tree.check_structure(levels).map_err(Error::Corrupt)?;
            let mut stack = vec![tree];
            while let Some(node) = stack.pop() {
                let t = &node.template;
                if t.scheme() != self.scheme || t.key_id() != self.key_id {
                    return Err(Error::Corrupt(
                        "template scheme or key differs from the header".into(),
                    ));
                }
                if t.len() != self.dim {
                    return Err(Error::dims(self.dim, t.len()));
                }
                if let Some(c) = &node.children {
                    stack.extend(c.iter());
                } else if !seen.insert(node.covered[0]) {
                    return Err(Error::Corrupt(format!(
                        "subject {} appears in more than one leaf",
                        node.covered[0]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Re-encrypts every template under `new`. Requires the old secret.
    pub fn rekey(
        &self,
        old: &KeyMaterial,
        new: &KeyMaterial,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        check_rekey(self.key_id, old, new)?;
        let trees = self
            .trees
            .iter()
            .map(|t| t.try_map(&mut |c: &ProtectedTemplate| reencrypt(c, old, new, &mut *rng)))
            .collect::<Result<_>>()?;
        Ok(Self {
            trees,
            key_id: new.key_id,
            security_level: new.security_level,
            params_id: new.params_id,
            ..self.clone()
        })
    }
}

impl SearchIndex for ProtectedIndex {
    type Template = ProtectedTemplate;

    fn trees(&self) -> &[ProtectedNode] {
        &self.trees
    }

    fn n1(&self) -> usize {
        self.n1
    }
}

/// Encodes and encrypts every template of `forest`.
pub fn protect_index(
    forest: &IndexForest,
    encoding: &TemplateEncoding,
    keys: &KeyMaterial,
    rng: &mut dyn RngCore,
) -> Result<ProtectedIndex> {
    if !encoding.suits(keys.scheme) {
        return Err(Error::Representation(keys.scheme.to_string()));
    }
    let trees = forest
        .trees
        .iter()
        .map(|t| {
            t.try_map(&mut |v: &EmbeddingVector| encrypt(&encoding.encode(v)?, keys, &mut *rng))
        })
        .collect::<Result<_>>()?;
    Ok(ProtectedIndex {
        trees,
        n1: forest.n1,
        dim: forest.dim,
        fusion: forest.fusion,
        pairing: forest.pairing,
        schedule: forest.schedule.clone(),
        scheme: keys.scheme,
        security_level: keys.security_level,
        params_id: keys.params_id,
        key_id: keys.key_id,
        encoding: encoding.clone(),
    })
}

/// Protects a probe for searching `index`.
pub fn encrypt_probe(
    probe: &EmbeddingVector,
    index: &ProtectedIndex,
    keys: &KeyMaterial,
    rng: &mut dyn RngCore,
) -> Result<ProtectedTemplate> {
    if keys.key_id != index.key_id {
        return Err(Error::KeyMismatch { template: index.key_id, supplied: keys.key_id });
    }
    if probe.dim() != index.dim {
        return Err(Error::dims(index.dim, probe.dim()));
    }
    encrypt(&index.encoding.encode(probe)?, keys, rng)
}

/// Compares protected templates and decrypts only the score.
#[derive(Clone, Copy, Debug)]
pub struct ProtectedComparator<'k> {
    pub keys: &'k KeyMaterial,
}

impl Comparator<ProtectedTemplate> for ProtectedComparator<'_> {
    type Probe = ProtectedTemplate;

    fn score(&self, probe: &ProtectedTemplate, reference: &ProtectedTemplate) -> Result<f64> {
        decrypt_score(&compare_protected(probe, reference)?, self.keys)
    }
}

fn check_rekey(current: u64, old: &KeyMaterial, new: &KeyMaterial) -> Result<()> {
    if old.key_id != current {
        return Err(Error::KeyMismatch { template: current, supplied: old.key_id });
    }
    old.secret()?;
    if new.scheme != old.scheme {
        return Err(Error::SchemeMismatch {
            expected: old.scheme.to_string(),
            found: new.scheme.to_string(),
        });
    }
    if new.key_id == old.key_id {
        return Err(Error::InvalidParameter("new key has the same key id as the old key".into()));
    }
    Ok(())
}

fn reencrypt(
    t: &ProtectedTemplate,
    old: &KeyMaterial,
    new: &KeyMaterial,
    rng: &mut dyn RngCore,
) -> Result<ProtectedTemplate> {
    encrypt(&decrypt(t, old)?, new, rng)
}

/// Re-encrypts a protected gallery under `new`.
pub fn rekey(
    templates: &[ProtectedTemplate],
    old: &KeyMaterial,
    new: &KeyMaterial,
    rng: &mut dyn RngCore,
) -> Result<Vec<ProtectedTemplate>> {
    templates
        .iter()
        .map(|t| {
            check_rekey(t.key_id(), old, new)?;
            reencrypt(t, old, new, &mut *rng)
        })
        .collect()
}
