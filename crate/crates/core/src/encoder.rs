//! GIN-style molecular encoder.
//!
//! Each layer computes `h_v <- MLP((1 + eps) h_v + sum_{u in N(v)} (h_u + e_bond(u, v)))`
//! with a learned scalar `eps`, a per-layer bond embedding table and a
//! two-layer ReLU MLP. Molecules are batched into one disjoint graph so a
//! layer is a handful of dense ops regardless of batch size.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MoleculeGraph;
use crate::error::{config_err, Error, Result};
use crate::nn;
use crate::tensor::{ParamView, ParameterSet, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub num_atom_types: usize,
    pub num_bond_types: usize,
    pub readout: Readout,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            dim: 32,
            num_atom_types: 8,
            num_bond_types: 3,
            readout: Readout::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 {
            return Err(config_err!("encoder needs at least one layer and width >= 1"));
        }
        if self.num_atom_types == 0 || self.num_bond_types == 0 {
            return Err(config_err!("encoder vocabularies must be nonempty"));
        }
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) -> Result<()> {
        self.validate()?;
        let d = self.dim;
        params.insert("enc.atom", nn::uniform(&[self.num_atom_types, d], 1.0, rng))?;
        for l in 0..self.layers {
            params.insert(format!("enc.l{l}.eps"), Tensor::zeros(&[1]))?;
            params.insert(
                format!("enc.l{l}.bond"),
                nn::uniform(&[self.num_bond_types, d], 1.0 / (d as f64).sqrt(), rng),
            )?;
            nn::init_mlp2(params, &format!("enc.l{l}.mlp"), (d, d, d), rng)?;
        }
        Ok(())
    }
}

/// Several molecules flattened into one disjoint graph. Every bond appears
/// as two directed messages.
#[derive(Debug, Clone)]
pub struct MoleculeBatch {
    atom_types: Rc<[usize]>,
    src: Rc<[usize]>,
    dst: Rc<[usize]>,
    bond_types: Rc<[usize]>,
    mol_of_atom: Rc<[usize]>,
    inv_counts: Tensor,
    num_molecules: usize,
}

impl MoleculeBatch {
    pub fn new(mols: &[&MoleculeGraph], cfg: &EncoderConfig) -> Result<Self> {
        if mols.is_empty() {
            return Err(config_err!("empty molecule batch"));
        }
        let mut atom_types = Vec::new();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut bond_types = Vec::new();
        let mut mol_of_atom = Vec::new();
        let mut inv = Vec::with_capacity(mols.len());
        for (mi, m) in mols.iter().enumerate() {
            let off = atom_types.len();
            for &a in &m.atoms {
                if a >= cfg.num_atom_types {
                    return Err(Error::Ingestion(format!(
                        "molecule `{}`: atom type {a} outside vocabulary of {}",
                        m.id, cfg.num_atom_types
                    )));
                }
                atom_types.push(a);
                mol_of_atom.push(mi);
            }
            for &(u, v, t) in &m.bonds {
                if t >= cfg.num_bond_types {
                    return Err(Error::Ingestion(format!(
                        "molecule `{}`: bond type {t} outside vocabulary of {}",
                        m.id, cfg.num_bond_types
                    )));
                }
                src.extend([off + u, off + v]);
                dst.extend([off + v, off + u]);
                bond_types.extend([t, t]);
            }
            inv.push(1.0 / m.atoms.len() as f64);
        }
        let n = mols.len();
        Ok(Self {
            atom_types: atom_types.into(),
            src: src.into(),
            dst: dst.into(),
            bond_types: bond_types.into(),
            mol_of_atom: mol_of_atom.into(),
            inv_counts: Tensor::new(vec![n, 1], inv)?,
            num_molecules: n,
        })
    }

    pub fn num_molecules(&self) -> usize {
        self.num_molecules
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_types.len()
    }
}

/// Embeddings for every molecule in the batch, shape `[n_mol, dim]`.
pub fn encode_batch<'t>(view: &ParamView<'t>, cfg: &EncoderConfig, batch: &MoleculeBatch) -> Result<Var<'t>> {
    let n_atoms = batch.num_atoms();
    let mut h = view.get("enc.atom")?.gather_rows(Rc::clone(&batch.atom_types))?;
    for l in 0..cfg.layers {
        let eps = view.get(&format!("enc.l{l}.eps"))?;
        let mut pre = h.mul(eps.add_scalar(1.0))?;
        if !batch.src.is_empty() {
            let bond = view
                .get(&format!("enc.l{l}.bond"))?
                .gather_rows(Rc::clone(&batch.bond_types))?;
            let msg = h.gather_rows(Rc::clone(&batch.src))?.add(bond)?;
            pre = pre.add(msg.scatter_add_rows(Rc::clone(&batch.dst), n_atoms)?)?;
        }
        h = nn::mlp2(view, &format!("enc.l{l}.mlp"), pre)?;
        if l + 1 < cfg.layers {
            h = h.relu();
        }
    }
    let pooled = h.scatter_add_rows(Rc::clone(&batch.mol_of_atom), batch.num_molecules)?;
    match cfg.readout {
        Readout::Sum => Ok(pooled),
        Readout::Mean => pooled.mul(view.tape().constant(batch.inv_counts.clone())),
    }
}

/// Embedding of a single molecule, shape `[dim]`.
pub fn encode_molecule<'t>(view: &ParamView<'t>, cfg: &EncoderConfig, m: &MoleculeGraph) -> Result<Var<'t>> {
    let batch = MoleculeBatch::new(&[m], cfg)?;
    encode_batch(view, cfg, &batch)?.reshape(&[cfg.dim])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(readout: Readout) -> (EncoderConfig, ParameterSet) {
        let cfg = EncoderConfig { layers: 2, dim: 6, num_atom_types: 4, num_bond_types: 2, readout };
        let mut p = ParameterSet::new();
        cfg.init(&mut p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (cfg, p)
    }

    #[test]
    fn single_atom_mean_equals_node_embedding() {
        let (cfg, p) = setup(Readout::Mean);
        let tape = Tape::new();
        let view = ParamView::leaves(&tape, &p);
        let m = MoleculeGraph { id: "a".into(), atoms: vec![2], bonds: vec![] };
        let mean = encode_molecule(&view, &cfg, &m).unwrap();
        let (cfg_s, _) = setup(Readout::Sum);
        let sum = encode_molecule(&view, &cfg_s, &m).unwrap();
        assert_eq!(mean.value().data(), sum.value().data());
        assert_eq!(mean.shape(), vec![6]);
    }

    #[test]
    fn out_of_vocabulary_is_ingestion_error() {
        let (cfg, _) = setup(Readout::Mean);
        let m = MoleculeGraph { id: "bad".into(), atoms: vec![9], bonds: vec![] };
        assert!(matches!(MoleculeBatch::new(&[&m], &cfg), Err(Error::Ingestion(_))));
        let m = MoleculeGraph { id: "bad".into(), atoms: vec![0, 1], bonds: vec![(0, 1, 5)] };
        assert!(matches!(MoleculeBatch::new(&[&m], &cfg), Err(Error::Ingestion(_))));
    }

    #[test]
    fn path_graph_relabeling_invariant() {
        let (cfg, p) = setup(Readout::Mean);
        let tape = Tape::new();
        let view = ParamView::constants(&tape, &p);
        let m = MoleculeGraph { id: "p".into(), atoms: vec![0, 1, 2, 3], bonds: vec![(0, 1, 0), (1, 2, 1), (2, 3, 0)] };
        let r = m.relabeled(&[2, 0, 3, 1]);
        let a = encode_molecule(&view, &cfg, &m).unwrap().value();
        let b = encode_molecule(&view, &cfg, &r).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn gradients_reach_only_used_embedding_rows() {
        let (cfg, p) = setup(Readout::Mean);
        let tape = Tape::new();
        let view = ParamView::leaves(&tape, &p);
        let m = MoleculeGraph { id: "p".into(), atoms: vec![0, 2, 2], bonds: vec![(0, 1, 1), (1, 2, 1)] };
        let loss = encode_molecule(&view, &cfg, &m).unwrap().square().sum();
        let g = view.gradient_values(loss).unwrap();
        let atom = &g["enc.atom"];
        for (row, used) in [(0, true), (1, false), (2, true), (3, false)] {
            let nz = atom.row(row).iter().any(|&x| x != 0.0);
            assert_eq!(nz, used, "atom row {row}");
        }
        let bond = &g["enc.l0.bond"];
        assert!(bond.row(0).iter().all(|&x| x == 0.0));
        assert!(bond.row(1).iter().any(|&x| x != 0.0));
    }
}
