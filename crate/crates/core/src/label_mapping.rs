//! Downstream-to-pretrained class correspondence for backbones whose head
//! predicts a fixed pretrained label set.
//!
//! The frequency mapping feeds each downstream class's images through the
//! frozen model (no prompt), counts argmax predictions, and assigns the most
//! frequent pretrained class. The assignment is built once and then fixed for
//! the whole training run.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::backbone::{FrozenBackbone, PeLayout, TokenPrompts};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionPolicy {
    /// Downstream classes claim pretrained classes in descending order of
    /// their top frequency; a contested class falls back to its next-most
    /// frequent unclaimed pretrained class. Keeps the assignment injective.
    ClaimBest,
    /// Per-class argmax, duplicates allowed (fidelity mode).
    AllowDuplicates,
}

/// A collision over one pretrained class: which downstream classes wanted it
/// and who won.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collision {
    pub pretrained: usize,
    pub winner: usize,
    pub displaced: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMapping {
    /// downstream class index -> pretrained class index
    pub assignment: Vec<usize>,
    /// counts per (downstream, pretrained) pair
    pub frequency_table: Vec<Vec<usize>>,
    pub collision_log: Vec<Collision>,
}

impl LabelMapping {
    pub fn num_downstream(&self) -> usize {
        self.assignment.len()
    }

    /// Checksum over the assignment; constant throughout prompt training.
    pub fn checksum(&self) -> String {
        let data: Vec<f64> = self.assignment.iter().map(|&v| v as f64).collect();
        util::hash_named_tensors(vec![("assignment", vec![data.len()], data)])
    }

    pub fn identity(num_classes: usize) -> Self {
        LabelMapping {
            assignment: (0..num_classes).collect(),
            frequency_table: Vec::new(),
            collision_log: Vec::new(),
        }
    }
}

/// Assigns pretrained classes from a frequency table under the given policy.
/// Ties inside one row break toward the lower pretrained index; the claim
/// order sorts rows by top frequency (descending), then by downstream index.
pub fn assign_from_frequencies(freq: &[Vec<usize>], num_pretrained: usize, policy: CollisionPolicy) -> Result<LabelMapping> {
    let nd = freq.len();
    if nd == 0 {
        return Err(Error::InvalidInput("empty frequency table".into()));
    }
    for row in freq {
        if row.len() != num_pretrained {
            return Err(Error::ShapeMismatch(format!(
                "frequency row has {} entries, expected {num_pretrained}",
                row.len()
            )));
        }
    }
    let best_of = |row: &[usize]| -> (usize, usize) {
        let mut bi = 0;
        let mut bv = row[0];
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > bv {
                bi = i;
                bv = v;
            }
        }
        (bi, bv)
    };

    match policy {
        CollisionPolicy::AllowDuplicates => {
            let assignment = freq.iter().map(|row| best_of(row).0).collect();
            Ok(LabelMapping { assignment, frequency_table: freq.to_vec(), collision_log: Vec::new() })
        }
        CollisionPolicy::ClaimBest => {
            if nd > num_pretrained {
                return Err(Error::InvalidConfig(format!(
                    "{nd} downstream classes cannot map injectively onto {num_pretrained} pretrained classes"
                )));
            }
            let mut order: Vec<usize> = (0..nd).collect();
            order.sort_by(|&a, &b| {
                let fa = best_of(&freq[a]).1;
                let fb = best_of(&freq[b]).1;
                fb.cmp(&fa).then(a.cmp(&b))
            });
            let mut claimed = vec![false; num_pretrained];
            let mut assignment = vec![usize::MAX; nd];
            let mut collisions = Vec::new();
            for &c in &order {
                // preference order: frequency descending, index ascending
                let mut prefs: Vec<usize> = (0..num_pretrained).collect();
                prefs.sort_by(|&a, &b| freq[c][b].cmp(&freq[c][a]).then(a.cmp(&b)));
                let first_choice = prefs[0];
                let pick = prefs.iter().copied().find(|&p| !claimed[p]);
                let pick = pick.ok_or_else(|| {
                    Error::InvalidConfig("no unclaimed pretrained class left".into())
                })?;
                if pick != first_choice {
                    let winner = assignment
                        .iter()
                        .position(|&a| a == first_choice)
                        .expect("contested class was claimed");
                    collisions.push(Collision { pretrained: first_choice, winner, displaced: c });
                }
                claimed[pick] = true;
                assignment[c] = pick;
            }
            Ok(LabelMapping { assignment, frequency_table: freq.to_vec(), collision_log: collisions })
        }
    }
}

/// Counts argmax predictions of the frozen, promptless backbone per
/// downstream class and assigns the most frequent pretrained class.
pub fn build_mapping(backbone: &FrozenBackbone, dataset: &Dataset, policy: CollisionPolicy) -> Result<LabelMapping> {
    let nd = dataset.num_classes;
    let np = backbone.cfg.num_outputs;
    if nd == 0 || dataset.images.is_empty() {
        return Err(Error::Dataset("label mapping needs a non-empty dataset".into()));
    }
    let mut freq = vec![vec![0usize; np]; nd];
    let mut seen = vec![0usize; nd];
    let none = TokenPrompts::none();
    for (img, &label) in dataset.images.iter().zip(&dataset.labels) {
        if label >= nd {
            return Err(Error::Dataset(format!("label {label} outside {nd} classes")));
        }
        let native = util::resize_image(img, backbone.cfg.native_size, util::Interpolation::Bilinear)?;
        let logits = backbone.forward(&native, &none, PeLayout::Native)?;
        freq[label][argmax(&logits)] += 1;
        seen[label] += 1;
    }
    if let Some(empty) = seen.iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!("downstream class {empty} has no images")));
    }
    assign_from_frequencies(&freq, np, policy)
}

/// Seeded injective random assignment (the arbitrary-mapping baseline).
pub fn arbitrary_mapping(num_downstream: usize, num_pretrained: usize, seed: u64) -> Result<LabelMapping> {
    if num_downstream == 0 {
        return Err(Error::InvalidConfig("need at least one downstream class".into()));
    }
    if num_downstream > num_pretrained {
        return Err(Error::InvalidConfig(format!(
            "{num_downstream} downstream classes exceed {num_pretrained} pretrained classes"
        )));
    }
    let mut pool: Vec<usize> = (0..num_pretrained).collect();
    let mut rng = util::seeded_rng(seed, "arbitrary_mapping", &[]);
    // partial Fisher-Yates: the first num_downstream entries
    for i in 0..num_downstream {
        let j = i + rand::Rng::random_range(&mut rng, 0..pool.len() - i);
        pool.swap(i, j);
    }
    Ok(LabelMapping {
        assignment: pool[..num_downstream].to_vec(),
        frequency_table: Vec::new(),
        collision_log: Vec::new(),
    })
}

/// Selects the assigned pretrained logit for every downstream class.
pub fn remap_logits(pretrained_logits: &Array1<f64>, mapping: &LabelMapping) -> Result<Array1<f64>> {
    let mut out = Array1::zeros(mapping.assignment.len());
    for (c, &p) in mapping.assignment.iter().enumerate() {
        if p >= pretrained_logits.len() {
            return Err(Error::InvalidConfig(format!(
                "class {c} maps to pretrained index {p}, but the head has {} outputs",
                pretrained_logits.len()
            )));
        }
        out[c] = pretrained_logits[p];
    }
    Ok(out)
}

/// Scatters downstream logit gradients back onto the pretrained logits.
pub fn scatter_logit_grad(d_downstream: &Array1<f64>, mapping: &LabelMapping, num_pretrained: usize) -> Array1<f64> {
    let mut d = Array1::zeros(num_pretrained);
    for (c, &p) in mapping.assignment.iter().enumerate() {
        d[p] += d_downstream[c];
    }
    d
}

pub fn argmax(v: &Array1<f64>) -> usize {
    let mut bi = 0;
    let mut bv = f64::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if x > bv {
            bi = i;
            bv = x;
        }
    }
    bi
}

// ---- plain-text persistence -----------------------------------------

/// Writes the mapping as an auditable text table:
/// `downstream <tab> pretrained <tab> top_frequency` per line.
pub fn mapping_to_string(mapping: &LabelMapping) -> String {
    let mut s = String::from("# label mapping v1\n# downstream\tpretrained\ttop_frequency\n");
    for (c, &p) in mapping.assignment.iter().enumerate() {
        let top = mapping.frequency_table.get(c).map_or(0, |row| row.get(p).copied().unwrap_or(0));
        s.push_str(&format!("{c}\t{p}\t{top}\n"));
    }
    for col in &mapping.collision_log {
        s.push_str(&format!(
            "# collision: pretrained {} won by {} (displaced {})\n",
            col.pretrained, col.winner, col.displaced
        ));
    }
    s
}

pub fn mapping_from_string(text: &str) -> Result<LabelMapping> {
    let mut assignment = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(Error::Format(format!("bad mapping line: {line}")));
        }
        let c: usize = fields[0].parse().map_err(|_| Error::Format(format!("bad index in: {line}")))?;
        let p: usize = fields[1].parse().map_err(|_| Error::Format(format!("bad index in: {line}")))?;
        if c != assignment.len() {
            return Err(Error::Format(format!("mapping lines out of order at class {c}")));
        }
        assignment.push(p);
    }
    if assignment.is_empty() {
        return Err(Error::Format("mapping file has no entries".into()));
    }
    Ok(LabelMapping { assignment, frequency_table: Vec::new(), collision_log: Vec::new() })
}
