//! Molecular graphs, the ternary label matrix, file formats and the
//! planted-correlation synthetic generator.

mod io;
mod synthetic;

pub use io::{load_dataset, read_similarity, save_dataset, write_similarity};
pub use synthetic::{cosine_matrix, generate_synthetic, SyntheticDataset, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One molecule: atom-type indices and undirected typed bonds `(u, v, type)`
/// with `u < v`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoleculeGraph {
    pub id: String,
    pub atoms: Vec<usize>,
    pub bonds: Vec<(usize, usize, usize)>,
}

impl MoleculeGraph {
    pub fn validate(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(Error::Ingestion(format!("molecule `{}` has no atoms", self.id)));
        }
        let mut seen = std::collections::HashSet::new();
        for &(u, v, _) in &self.bonds {
            if u == v {
                return Err(Error::Ingestion(format!(
                    "molecule `{}`: self-loop bond on atom {u}",
                    self.id
                )));
            }
            if u > v {
                return Err(Error::Ingestion(format!(
                    "molecule `{}`: bond ({u}, {v}) must satisfy u < v",
                    self.id
                )));
            }
            if v >= self.atoms.len() {
                return Err(Error::Ingestion(format!(
                    "molecule `{}`: bond ({u}, {v}) references missing atom",
                    self.id
                )));
            }
            if !seen.insert((u, v)) {
                return Err(Error::Ingestion(format!(
                    "molecule `{}`: duplicate bond ({u}, {v})",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    /// Atoms renumbered so that old atom `i` becomes `perm[i]`.
    pub fn relabeled(&self, perm: &[usize]) -> MoleculeGraph {
        let mut atoms = vec![0; self.atoms.len()];
        for (i, &a) in self.atoms.iter().enumerate() {
            atoms[perm[i]] = a;
        }
        let bonds = self
            .bonds
            .iter()
            .map(|&(u, v, t)| {
                let (a, b) = (perm[u], perm[v]);
                (a.min(b), a.max(b), t)
            })
            .collect();
        MoleculeGraph { id: self.id.clone(), atoms, bonds }
    }
}

/// Ternary label state of one (molecule, property) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Active,
    Inactive,
    Unknown,
}

impl Label {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Label::Active
        } else {
            Label::Inactive
        }
    }

    /// `Some(1.0)` / `Some(0.0)` for known labels.
    pub fn value(self) -> Option<f64> {
        match self {
            Label::Active => Some(1.0),
            Label::Inactive => Some(0.0),
            Label::Unknown => None,
        }
    }

    pub fn is_known(self) -> bool {
        self != Label::Unknown
    }
}

/// Molecules x properties label table, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    molecule_ids: Vec<String>,
    property_ids: Vec<String>,
    entries: Vec<Label>,
}

impl LabelMatrix {
    pub fn new(molecule_ids: Vec<String>, property_ids: Vec<String>, entries: Vec<Label>) -> Result<Self> {
        if entries.len() != molecule_ids.len() * property_ids.len() {
            return Err(Error::Ingestion(format!(
                "label matrix needs {}x{} entries, got {}",
                molecule_ids.len(),
                property_ids.len(),
                entries.len()
            )));
        }
        Ok(Self { molecule_ids, property_ids, entries })
    }

    pub fn num_molecules(&self) -> usize {
        self.molecule_ids.len()
    }

    pub fn num_properties(&self) -> usize {
        self.property_ids.len()
    }

    pub fn molecule_ids(&self) -> &[String] {
        &self.molecule_ids
    }

    pub fn property_ids(&self) -> &[String] {
        &self.property_ids
    }

    pub fn get(&self, molecule: usize, property: usize) -> Label {
        self.entries[molecule * self.property_ids.len() + property]
    }

    pub fn set(&mut self, molecule: usize, property: usize, label: Label) {
        let p = self.property_ids.len();
        self.entries[molecule * p + property] = label;
    }

    pub fn property_index(&self, id: &str) -> Option<usize> {
        self.property_ids.iter().position(|p| p == id)
    }

    /// Molecule indices carrying `label` for `property`.
    pub fn molecules_with(&self, property: usize, label: Label) -> Vec<usize> {
        (0..self.num_molecules())
            .filter(|&m| self.get(m, property) == label)
            .collect()
    }

    /// (actives, inactives) for a property.
    pub fn class_counts(&self, property: usize) -> (usize, usize) {
        let mut a = 0;
        let mut i = 0;
        for m in 0..self.num_molecules() {
            match self.get(m, property) {
                Label::Active => a += 1,
                Label::Inactive => i += 1,
                Label::Unknown => {}
            }
        }
        (a, i)
    }

    /// A property can host a K-shot episode when both classes have K labels.
    pub fn is_eligible(&self, property: usize, k: usize) -> bool {
        let (a, i) = self.class_counts(property);
        a >= k && i >= k
    }

    pub fn unknown_fraction(&self) -> f64 {
        let u = self.entries.iter().filter(|l| !l.is_known()).count();
        u as f64 / self.entries.len().max(1) as f64
    }

    /// Cosine similarity of {+1, -1, 0}-coded label columns. Unknown cells
    /// code as 0, so only co-labeled molecules contribute to the dot product.
    pub fn label_cosine_similarity(&self) -> Vec<Vec<f64>> {
        let p = self.num_properties();
        let code = |l: Label| match l {
            Label::Active => 1.0,
            Label::Inactive => -1.0,
            Label::Unknown => 0.0,
        };
        let cols: Vec<Vec<f64>> = (0..p)
            .map(|j| (0..self.num_molecules()).map(|m| code(self.get(m, j))).collect())
            .collect();
        cosine_matrix(&cols)
    }
}

/// Molecules aligned with the rows of their label matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub molecules: Vec<MoleculeGraph>,
    pub labels: LabelMatrix,
}

impl Dataset {
    pub fn new(molecules: Vec<MoleculeGraph>, labels: LabelMatrix) -> Result<Self> {
        if molecules.len() != labels.num_molecules() {
            return Err(Error::Ingestion("molecule/label row count mismatch".into()));
        }
        for (m, id) in molecules.iter().zip(labels.molecule_ids()) {
            if &m.id != id {
                return Err(Error::Ingestion(format!(
                    "molecule `{}` misaligned with label row `{id}`",
                    m.id
                )));
            }
            m.validate()?;
        }
        Ok(Self { molecules, labels })
    }

    pub fn max_atom_type(&self) -> usize {
        self.molecules
            .iter()
            .flat_map(|m| m.atoms.iter().copied())
            .max()
            .unwrap_or(0)
    }

    pub fn max_bond_type(&self) -> usize {
        self.molecules
            .iter()
            .flat_map(|m| m.bonds.iter().map(|b| b.2))
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_loop_rejected() {
        let m = MoleculeGraph { id: "m".into(), atoms: vec![0, 1], bonds: vec![(1, 1, 0)] };
        assert!(matches!(m.validate(), Err(Error::Ingestion(_))));
    }

    #[test]
    fn duplicate_and_dangling_bonds_rejected() {
        let dup = MoleculeGraph { id: "m".into(), atoms: vec![0, 1], bonds: vec![(0, 1, 0), (0, 1, 1)] };
        assert!(dup.validate().is_err());
        let dangling = MoleculeGraph { id: "m".into(), atoms: vec![0, 1], bonds: vec![(0, 2, 0)] };
        assert!(dangling.validate().is_err());
    }

    #[test]
    fn eligibility_counts() {
        let l = LabelMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["p".into()],
            vec![Label::Active, Label::Inactive, Label::Unknown],
        )
        .unwrap();
        assert_eq!(l.class_counts(0), (1, 1));
        assert!(l.is_eligible(0, 1));
        assert!(!l.is_eligible(0, 2));
    }
}
