//! Discretization of trained parameters into final artifacts: a genotype
//! (the discrete cell wiring) and a policy distribution (the enumerated
//! augmentation table). Both serialize to versioned JSON and are the
//! contract between the search and evaluate commands.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugOpKind, AugParams, Policy, PolicySlot};
use crate::error::{Error, Result};
use crate::supernet::{
    softmax_f64, ArchOpKind, ArchParams, CellArch, CellKind, CELL_NODES, EDGE_OFFSETS,
};

pub const GENOTYPE_SCHEMA_VERSION: u32 = 1;
pub const POLICY_SCHEMA_VERSION: u32 = 1;

pub const GENOTYPE_KIND: &str = "genotype";
pub const POLICY_KIND: &str = "policy-distribution";

/// One kept connection: the source state index (0 and 1 are the two cell
/// inputs, 2.. are earlier intermediate nodes) and the operation on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeEdge {
    pub source: usize,
    pub op: String,
}

/// Discrete wiring of one cell kind: per intermediate node, exactly two
/// incoming edges, listed by ascending source index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGenotype {
    pub nodes: Vec<[GenotypeEdge; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub kind: String,
    pub schema_version: u32,
    pub normal: CellGenotype,
    pub reduce: CellGenotype,
}

/// Top-2 source indices by edge score for one node group. Scores tie-break
/// to the lower source index; the returned pair is ascending.
fn top2_sources(scores: &[f64]) -> [usize; 2] {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut pair = [order[0], order[1]];
    pair.sort_unstable();
    pair
}

/// Best operation on one edge, excluding the zero op. Ties break to the
/// lower op index. Softmax is monotone, so the argmax over logits equals
/// the argmax over softmax weights.
fn best_op(alpha_row: &[f64]) -> ArchOpKind {
    let zero = ArchOpKind::Zero.id();
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (o, &v) in alpha_row.iter().enumerate() {
        if o == zero {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = o;
        }
    }
    ArchOpKind::from_id(best).expect("op id in range")
}

fn derive_cell(cell: &CellArch) -> CellGenotype {
    let mut nodes = Vec::with_capacity(CELL_NODES);
    for node in 0..CELL_NODES {
        let weights = softmax_f64(cell.beta_group(node));
        let pair = top2_sources(&weights);
        let make = |source: usize| {
            let edge = EDGE_OFFSETS[node] + source;
            GenotypeEdge {
                source,
                op: best_op(cell.alpha_row(edge)).name().to_string(),
            }
        };
        nodes.push([make(pair[0]), make(pair[1])]);
    }
    CellGenotype { nodes }
}

/// Read the discrete architecture out of trained logits: per node, the two
/// incoming edges with the largest softmax edge weight; per kept edge, the
/// strongest operation excluding zero.
pub fn derive_architecture(arch: &ArchParams) -> Genotype {
    Genotype {
        kind: GENOTYPE_KIND.to_string(),
        schema_version: GENOTYPE_SCHEMA_VERSION,
        normal: derive_cell(arch.cell(CellKind::Normal)),
        reduce: derive_cell(arch.cell(CellKind::Reduction)),
    }
}

impl Genotype {
    pub fn cell(&self, kind: CellKind) -> &CellGenotype {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduce,
        }
    }

    /// Structural invariants: four nodes per cell, two distinct ascending
    /// sources per node each earlier than the node, ops real and non-zero.
    pub fn validate(&self) -> Result<()> {
        for (label, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if cell.nodes.len() != CELL_NODES {
                return Err(Error::invalid(
                    "genotype",
                    format!("{label} cell has {} nodes", cell.nodes.len()),
                ));
            }
            for (node, pair) in cell.nodes.iter().enumerate() {
                if pair[0].source >= pair[1].source {
                    return Err(Error::invalid(
                        "genotype",
                        format!("{label} node {node} sources not ascending and distinct"),
                    ));
                }
                for e in pair {
                    if e.source >= node + 2 {
                        return Err(Error::invalid(
                            "genotype",
                            format!("{label} node {node} source {} is not earlier", e.source),
                        ));
                    }
                    match ArchOpKind::from_name(&e.op) {
                        None => {
                            return Err(Error::invalid(
                                "genotype",
                                format!("unknown op {:?}", e.op),
                            ))
                        }
                        Some(ArchOpKind::Zero) => {
                            return Err(Error::invalid(
                                "genotype",
                                format!("{label} node {node} kept a zero op"),
                            ))
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: Genotype = parse_artifact(s, GENOTYPE_KIND, GENOTYPE_SCHEMA_VERSION, None)?;
        g.validate()?;
        Ok(g)
    }
}

/// One enumerated operation sequence with everything evaluation needs:
/// sampling probability, per-slot application probability, and the fixed
/// (argmax) magnitude as both bin index and mapped value. Operations
/// without a magnitude carry a null value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub ops: Vec<usize>,
    pub op_names: Vec<String>,
    pub probability: f64,
    pub apply_probs: Vec<f64>,
    pub magnitude_bins: Vec<usize>,
    pub magnitude_values: Vec<Option<f64>>,
}

/// The full enumerated policy table, in lexicographic op order with slot 0
/// most significant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDistribution {
    pub kind: String,
    pub schema_version: u32,
    pub slots: usize,
    pub num_ops: usize,
    pub num_bins: usize,
    pub entries: Vec<PolicyEntry>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn op_name(id: usize) -> String {
    match AugOpKind::from_id(id) {
        Some(k) => k.name().to_string(),
        None => format!("op{id}"),
    }
}

/// Argmax bin of one magnitude block; ties break to the lower bin.
fn best_bin(block: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (b, &v) in block.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = b;
        }
    }
    best
}

/// Enumerate every operation sequence with its sampling probability
/// (product of per-slot softmax weights) and the per-slot apply
/// probability and argmax magnitude.
pub fn derive_policy_distribution(aug: &AugParams, cap: u128) -> Result<PolicyDistribution> {
    let mut cardinality: u128 = 1;
    for _ in 0..aug.slots {
        cardinality = cardinality.saturating_mul(aug.num_ops as u128);
    }
    if cardinality > cap {
        return Err(Error::PolicySpaceTooLarge { cardinality, cap });
    }

    let weights: Vec<Vec<f64>> = (0..aug.slots).map(|k| softmax_f64(aug.pi_row(k))).collect();
    let count = cardinality as usize;
    let mut entries = Vec::with_capacity(count);
    for index in 0..count {
        let mut rem = index;
        let mut ops = vec![0usize; aug.slots];
        for k in (0..aug.slots).rev() {
            ops[k] = rem % aug.num_ops;
            rem /= aug.num_ops;
        }
        let mut probability = 1.0;
        let mut apply_probs = Vec::with_capacity(aug.slots);
        let mut magnitude_bins = Vec::with_capacity(aug.slots);
        let mut magnitude_values = Vec::with_capacity(aug.slots);
        for (k, &o) in ops.iter().enumerate() {
            probability *= weights[k][o];
            apply_probs.push(sigmoid(aug.prob_logit(k, o)));
            let bin = best_bin(aug.delta_block(k, o));
            magnitude_bins.push(bin);
            magnitude_values.push(
                AugOpKind::from_id(o)
                    .filter(|kind| kind.uses_magnitude())
                    .map(|kind| kind.bin_value(bin, aug.num_bins)),
            );
        }
        entries.push(PolicyEntry {
            op_names: ops.iter().map(|&o| op_name(o)).collect(),
            ops,
            probability,
            apply_probs,
            magnitude_bins,
            magnitude_values,
        });
    }
    Ok(PolicyDistribution {
        kind: POLICY_KIND.to_string(),
        schema_version: POLICY_SCHEMA_VERSION,
        slots: aug.slots,
        num_ops: aug.num_ops,
        num_bins: aug.num_bins,
        entries,
    })
}

impl PolicyDistribution {
    /// Structural invariants: entry count matches the space, per-entry
    /// vectors match the slot count, probabilities are a distribution.
    pub fn validate(&self) -> Result<()> {
        let expect = (self.num_ops as u128).pow(self.slots as u32);
        if self.entries.len() as u128 != expect {
            return Err(Error::invalid(
                "policy distribution",
                format!("{} entries for a space of {expect}", self.entries.len()),
            ));
        }
        let mut sum = 0.0;
        for e in &self.entries {
            if e.ops.len() != self.slots
                || e.op_names.len() != self.slots
                || e.apply_probs.len() != self.slots
                || e.magnitude_bins.len() != self.slots
                || e.magnitude_values.len() != self.slots
            {
                return Err(Error::invalid(
                    "policy distribution",
                    "entry vectors do not match slot count",
                ));
            }
            if !(e.probability >= 0.0) {
                return Err(Error::invalid(
                    "policy distribution",
                    format!("negative or non-finite probability {}", e.probability),
                ));
            }
            sum += e.probability;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "policy distribution",
                format!("probabilities sum to {sum}"),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy distribution serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: PolicyDistribution = parse_artifact(s, POLICY_KIND, POLICY_SCHEMA_VERSION, None)?;
        d.validate()?;
        Ok(d)
    }
}

/// Draw one concrete policy from the table: the sequence by its sampling
/// probability, then one Bernoulli per slot for the apply flag. Magnitude
/// bins are the table's fixed argmax bins. The rng is consumed in that
/// order (one uniform for the sequence, then one per slot).
pub fn sample_final_policy(dist: &PolicyDistribution, rng_: &mut impl Rng) -> Policy {
    let u: f64 = rng_.gen();
    let mut acc = 0.0;
    let mut chosen = dist.entries.len() - 1;
    for (i, e) in dist.entries.iter().enumerate() {
        acc += e.probability;
        if u < acc {
            chosen = i;
            break;
        }
    }
    let entry = &dist.entries[chosen];
    let slots = (0..dist.slots)
        .map(|k| PolicySlot {
            op: entry.ops[k],
            apply: rng_.gen::<f64>() < entry.apply_probs[k],
            bin: entry.magnitude_bins[k],
        })
        .collect();
    Policy { slots }
}

/// Parse a JSON artifact after checking its kind tag and schema version.
/// `path` is used in errors when reading from disk.
fn parse_artifact<T: serde::de::DeserializeOwned>(
    s: &str,
    kind: &str,
    version: u32,
    path: Option<&str>,
) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(s)?;
    let found = value.get("kind").and_then(|v| v.as_str());
    if found != Some(kind) {
        return Err(Error::WrongArtifactKind {
            path: path.unwrap_or("<string>").to_string(),
            expected: kind.to_string(),
            found: found.map(|s| s.to_string()),
        });
    }
    let v = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if v != version {
        return Err(Error::SchemaVersion {
            kind: kind.to_string(),
            found: v,
            supported: version,
        });
    }
    Ok(serde_json::from_value(value)?)
}

fn read_artifact<T: serde::de::DeserializeOwned>(
    path: &Path,
    kind: &str,
    version: u32,
) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_artifact(&s, kind, version, Some(&path.display().to_string()))
}

fn write_artifact(path: &Path, json: String) -> Result<()> {
    fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_genotype(path: &Path, g: &Genotype) -> Result<()> {
    write_artifact(path, g.to_json())
}

pub fn read_genotype(path: &Path) -> Result<Genotype> {
    let g: Genotype = read_artifact(path, GENOTYPE_KIND, GENOTYPE_SCHEMA_VERSION)?;
    g.validate()?;
    Ok(g)
}

pub fn write_policy_distribution(path: &Path, d: &PolicyDistribution) -> Result<()> {
    write_artifact(path, d.to_json())
}

pub fn read_policy_distribution(path: &Path) -> Result<PolicyDistribution> {
    let d: PolicyDistribution = read_artifact(path, POLICY_KIND, POLICY_SCHEMA_VERSION)?;
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, tag};
    use crate::supernet::NUM_ARCH_OPS;

    fn random_arch(rng_: &mut impl Rng) -> ArchParams {
        let mut arch = ArchParams::new();
        let mut flat = arch.flat();
        for v in flat.iter_mut() {
            *v = 3.0 * rng::normal(rng_);
        }
        arch.set_flat(&flat);
        arch
    }

    #[test]
    fn all_tied_logits_pick_lowest_indices() {
        let g = derive_architecture(&ArchParams::new());
        g.validate().unwrap();
        for cell in [&g.normal, &g.reduce] {
            for (node, pair) in cell.nodes.iter().enumerate() {
                assert_eq!(pair[0].source, 0, "node {node}");
                assert_eq!(pair[1].source, 1, "node {node}");
                for e in pair {
                    assert_eq!(e.op, ArchOpKind::from_id(0).unwrap().name());
                }
            }
        }
    }

    #[test]
    fn zero_op_never_survives_derivation() {
        let mut arch = ArchParams::new();
        let zero = ArchOpKind::Zero.id();
        let mut flat = arch.flat();
        // make zero the runaway argmax on every edge of both cells
        for cell in 0..2 {
            for e in 0..crate::supernet::CELL_EDGES {
                flat[cell * 126 + e * NUM_ARCH_OPS + zero] = 50.0;
                flat[cell * 126 + e * NUM_ARCH_OPS + 3] = 1.0;
            }
        }
        arch.set_flat(&flat);
        let g = derive_architecture(&arch);
        g.validate().unwrap();
        for cell in [&g.normal, &g.reduce] {
            for pair in &cell.nodes {
                for e in pair {
                    assert_eq!(e.op, ArchOpKind::from_id(3).unwrap().name());
                }
            }
        }
    }

    #[test]
    fn genotype_invariants_hold_for_random_params() {
        let mut r = rng::stream(31, &[tag::ORACLE, 1]);
        for _ in 0..10_000 {
            let arch = random_arch(&mut r);
            derive_architecture(&arch).validate().unwrap();
        }
    }

    #[test]
    fn raising_a_kept_edge_logit_never_drops_it() {
        let mut r = rng::stream(37, &[tag::ORACLE, 2]);
        for _ in 0..300 {
            let mut arch = random_arch(&mut r);
            let g = derive_architecture(&arch);
            for kind in [CellKind::Normal, CellKind::Reduction] {
                for (node, pair) in g.cell(kind).nodes.iter().enumerate() {
                    let keep = pair[0].source;
                    let cell = match kind {
                        CellKind::Normal => &mut arch.normal,
                        CellKind::Reduction => &mut arch.reduce,
                    };
                    cell.beta[EDGE_OFFSETS[node] + keep] += 1.0;
                }
            }
            let g2 = derive_architecture(&arch);
            for kind in [CellKind::Normal, CellKind::Reduction] {
                for (node, pair) in g.cell(kind).nodes.iter().enumerate() {
                    let sources = [
                        g2.cell(kind).nodes[node][0].source,
                        g2.cell(kind).nodes[node][1].source,
                    ];
                    assert!(
                        sources.contains(&pair[0].source),
                        "{kind:?} node {node} lost its boosted edge"
                    );
                }
            }
        }
    }

    #[test]
    fn genotype_roundtrips_bit_exactly() {
        let mut r = rng::stream(41, &[tag::ORACLE, 3]);
        let g = derive_architecture(&random_arch(&mut r));
        let parsed = Genotype::from_json(&g.to_json()).unwrap();
        assert_eq!(g, parsed);
    }

    #[test]
    fn artifact_readers_reject_wrong_kind_and_version() {
        let g = derive_architecture(&ArchParams::new());
        let swapped = g.to_json().replace("\"genotype\"", "\"policy-distribution\"");
        assert!(matches!(
            Genotype::from_json(&swapped),
            Err(Error::WrongArtifactKind { .. })
        ));
        let bumped = g.to_json().replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(
            Genotype::from_json(&bumped),
            Err(Error::SchemaVersion { found: 9, .. })
        ));
    }

    #[test]
    fn uniform_single_slot_table_is_flat() {
        let aug = AugParams::with_dims(1, 15, 10);
        let d = derive_policy_distribution(&aug, 225).unwrap();
        d.validate().unwrap();
        assert_eq!(d.entries.len(), 15);
        for e in &d.entries {
            assert!((e.probability - 1.0 / 15.0).abs() < 1e-15);
            assert!((e.apply_probs[0] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_two_slot_table_sums_to_one() {
        let aug = AugParams::new_uniform(2);
        let d = derive_policy_distribution(&aug, 225).unwrap();
        d.validate().unwrap();
        assert_eq!(d.entries.len(), 225);
        let sum: f64 = d.entries.iter().map(|e| e.probability).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cap_violation_reports_cardinality() {
        let aug = AugParams::with_dims(3, 15, 10);
        match derive_policy_distribution(&aug, 225) {
            Err(Error::PolicySpaceTooLarge { cardinality, cap }) => {
                assert_eq!(cardinality, 3375);
                assert_eq!(cap, 225);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn magnitude_is_argmax_bin_mapped_linearly() {
        let mut aug = AugParams::new_uniform(1);
        aug.set_delta(0, 0, 7, 5.0);
        let d = derive_policy_distribution(&aug, 225).unwrap();
        let entry = &d.entries[0];
        assert_eq!(entry.ops[0], 0);
        assert_eq!(entry.magnitude_bins[0], 7);
        let (lo, hi) = AugOpKind::from_id(0).unwrap().magnitude_range().unwrap();
        let expect = lo + (hi - lo) * 7.0 / 9.0;
        assert!((entry.magnitude_values[0].unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn policy_table_roundtrips_bit_exactly() {
        let mut aug = AugParams::new_uniform(2);
        let mut r = rng::stream(43, &[tag::ORACLE, 4]);
        for idx in 0..aug.dim() {
            aug.data_mut()[idx] = rng::normal(&mut r);
        }
        let d = derive_policy_distribution(&aug, 225).unwrap();
        let parsed = PolicyDistribution::from_json(&d.to_json()).unwrap();
        assert_eq!(d, parsed);
    }

    #[test]
    fn files_roundtrip_through_disk() {
        let dir = std::env::temp_dir().join(format!("daas-derive-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let g = derive_architecture(&ArchParams::new());
        let gp = dir.join("genotype.json");
        write_genotype(&gp, &g).unwrap();
        assert_eq!(read_genotype(&gp).unwrap(), g);

        let d = derive_policy_distribution(&AugParams::new_uniform(2), 225).unwrap();
        let dp = dir.join("policy.json");
        write_policy_distribution(&dp, &d).unwrap();
        assert_eq!(read_policy_distribution(&dp).unwrap(), d);
        // reading one artifact as the other names both kinds
        match read_genotype(&dp) {
            Err(Error::WrongArtifactKind {
                expected, found, ..
            }) => {
                assert_eq!(expected, "genotype");
                assert_eq!(found.as_deref(), Some("policy-distribution"));
            }
            other => panic!("expected kind error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn saturated_table_always_yields_its_policy() {
        let mut aug = AugParams::new_uniform(1);
        aug.set_pi(0, 3, 50.0);
        aug.set_prob_logit(0, 3, 50.0);
        let d = derive_policy_distribution(&aug, 225).unwrap();
        let mut r = rng::stream(47, &[tag::ORACLE, 5]);
        for _ in 0..200 {
            let p = sample_final_policy(&d, &mut r);
            assert_eq!(p.slots[0].op, 3);
            assert!(p.slots[0].apply);
        }
    }

    #[test]
    fn sequence_frequencies_match_the_table() {
        let mut aug = AugParams::with_dims(1, 15, 10);
        for o in 0..15 {
            aug.set_pi(0, o, 0.2 * o as f64);
        }
        let d = derive_policy_distribution(&aug, 225).unwrap();
        let mut counts = vec![0usize; 15];
        let draws = 1_000_000;
        let mut r = rng::stream(53, &[tag::ORACLE, 6]);
        for _ in 0..draws {
            let p = sample_final_policy(&d, &mut r);
            counts[p.slots[0].op] += 1;
        }
        for (o, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            let expect = d.entries[o].probability;
            assert!(
                (freq - expect).abs() < 0.01,
                "op {o}: freq {freq} table {expect}"
            );
        }
    }
}
