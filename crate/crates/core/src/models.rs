//! Scoring functions and their analytic gradients.
//!
//! All three models follow one convention: a higher score means a more
//! plausible triple. TransE reports `margin - ||h + r - t||` so that it can
//! share ranking and loss code with the bilinear models.
//!
//! Complex rows are stored interleaved, `[re_0, im_0, re_1, im_1, ...]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::store::{EntityId, RelationId, Triple};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    TransE { norm: Norm, margin: f64 },
    DistMult,
    ComplEx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Real,
    Complex,
}

impl Dtype {
    /// Reals stored per embedding coordinate.
    pub fn lanes(self) -> usize {
        match self {
            Dtype::Real => 1,
            Dtype::Complex => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::Real => "real",
            Dtype::Complex => "complex",
        }
    }
}

impl ModelKind {
    pub fn dtype(&self) -> Dtype {
        match self {
            ModelKind::ComplEx => Dtype::Complex,
            _ => Dtype::Real,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::TransE { .. } => "transe",
            ModelKind::DistMult => "distmult",
            ModelKind::ComplEx => "complex",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelKind::TransE { margin, .. } if !(margin > 0.0 && margin.is_finite()) => Err(
                Error::InvalidConfig(format!("TransE margin must be positive, got {margin}")),
            ),
            _ => Ok(()),
        }
    }

    fn check_table(&self, table: &EmbeddingTable) -> Result<()> {
        if table.dtype != self.dtype() {
            return Err(Error::DtypeMismatch {
                model: self.name(),
                expected: self.dtype().name(),
                found: table.dtype.name(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            other => Err(Error::InvalidConfig(format!("unknown norm {other:?}"))),
        }
    }
}

/// Dense entity and relation embeddings, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dtype: Dtype,
    dim: usize,
    entities: Vec<f64>,
    relations: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(dtype: Dtype, num_entities: usize, num_relations: usize, dim: usize) -> Self {
        let width = dim * dtype.lanes();
        EmbeddingTable {
            dtype,
            dim,
            entities: vec![0.0; num_entities * width],
            relations: vec![0.0; num_relations * width],
        }
    }

    pub fn from_parts(dtype: Dtype, dim: usize, entities: Vec<f64>, relations: Vec<f64>) -> Result<Self> {
        let width = dim * dtype.lanes();
        if width == 0 || !entities.len().is_multiple_of(width) || !relations.len().is_multiple_of(width) {
            return Err(Error::InvalidConfig(format!(
                "matrix sizes {}/{} are not multiples of row width {width}",
                entities.len(),
                relations.len()
            )));
        }
        Ok(EmbeddingTable { dtype, dim, entities, relations })
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    /// Embedding dimension `d` (complex coordinates count once).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Reals per row.
    pub fn width(&self) -> usize {
        self.dim * self.dtype.lanes()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len() / self.width()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len() / self.width()
    }

    pub fn entity(&self, id: EntityId) -> &[f64] {
        let w = self.width();
        &self.entities[id as usize * w..(id as usize + 1) * w]
    }

    pub fn entity_mut(&mut self, id: EntityId) -> &mut [f64] {
        let w = self.width();
        &mut self.entities[id as usize * w..(id as usize + 1) * w]
    }

    pub fn relation(&self, id: RelationId) -> &[f64] {
        let w = self.width();
        &self.relations[id as usize * w..(id as usize + 1) * w]
    }

    pub fn relation_mut(&mut self, id: RelationId) -> &mut [f64] {
        let w = self.width();
        &mut self.relations[id as usize * w..(id as usize + 1) * w]
    }

    pub fn entity_matrix(&self) -> &[f64] {
        &self.entities
    }

    pub fn relation_matrix(&self) -> &[f64] {
        &self.relations
    }

    pub fn entity_matrix_mut(&mut self) -> &mut [f64] {
        &mut self.entities
    }

    pub fn relation_matrix_mut(&mut self) -> &mut [f64] {
        &mut self.relations
    }

    pub fn is_finite(&self) -> bool {
        self.entities.iter().chain(&self.relations).all(|v| v.is_finite())
    }

    pub fn check_ids(&self, t: Triple) -> Result<()> {
        let (ne, nr) = (self.num_entities() as u64, self.num_relations() as u64);
        for id in [t.head, t.tail] {
            if id as u64 >= ne {
                return Err(Error::OutOfRange { kind: "entity", id: id as u64, size: ne });
            }
        }
        if t.relation as u64 >= nr {
            return Err(Error::OutOfRange { kind: "relation", id: t.relation as u64, size: nr });
        }
        Ok(())
    }

    /// Mean squared L2 norm over entity rows.
    pub fn mean_sq_entity_norm(&self) -> f64 {
        let n = self.num_entities();
        if n == 0 {
            return 0.0;
        }
        self.entities.iter().map(|v| v * v).sum::<f64>() / n as f64
    }
}

/// Score of one triple given its three rows.
#[inline]
pub fn score_rows(model: &ModelKind, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    match *model {
        ModelKind::TransE { norm, margin } => {
            let mut acc = 0.0;
            for i in 0..h.len() {
                let d = (h[i] + r[i]) - t[i];
                acc += match norm {
                    Norm::L1 => d.abs(),
                    Norm::L2 => d * d,
                };
            }
            match norm {
                Norm::L1 => margin - acc,
                Norm::L2 => margin - acc.sqrt(),
            }
        }
        ModelKind::DistMult => {
            let mut acc = 0.0;
            for i in 0..h.len() {
                acc += (h[i] * r[i]) * t[i];
            }
            acc
        }
        ModelKind::ComplEx => {
            let mut acc = 0.0;
            for i in (0..h.len()).step_by(2) {
                let (qr, qi) = cmul(h[i], h[i + 1], r[i], r[i + 1]);
                acc += qr * t[i] + qi * t[i + 1];
            }
            acc
        }
    }
}

#[inline]
fn cmul(ar: f64, ai: f64, br: f64, bi: f64) -> (f64, f64) {
    (ar * br - ai * bi, ar * bi + ai * br)
}

/// Writes the partial derivatives of the score with respect to each of the
/// three rows. For TransE the subgradient takes `sign(0) = 0`, and the L2
/// gradient is zero where the distance vanishes.
pub fn grad_rows(
    model: &ModelKind,
    h: &[f64],
    r: &[f64],
    t: &[f64],
    gh: &mut [f64],
    gr: &mut [f64],
    gt: &mut [f64],
) {
    match *model {
        ModelKind::TransE { norm, .. } => {
            let scale = match norm {
                Norm::L1 => 1.0,
                Norm::L2 => {
                    let dist = h
                        .iter()
                        .zip(r)
                        .zip(t)
                        .map(|((h, r), t)| {
                            let d = (h + r) - t;
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt();
                    if dist > 0.0 {
                        1.0 / dist
                    } else {
                        0.0
                    }
                }
            };
            for i in 0..h.len() {
                let d = (h[i] + r[i]) - t[i];
                let g = match norm {
                    Norm::L1 => sign(d),
                    Norm::L2 => d * scale,
                };
                gh[i] = -g;
                gr[i] = -g;
                gt[i] = g;
            }
        }
        ModelKind::DistMult => {
            for i in 0..h.len() {
                gh[i] = r[i] * t[i];
                gr[i] = h[i] * t[i];
                gt[i] = h[i] * r[i];
            }
        }
        ModelKind::ComplEx => {
            for i in (0..h.len()).step_by(2) {
                let (hr, hi, rr, ri, tr, ti) = (h[i], h[i + 1], r[i], r[i + 1], t[i], t[i + 1]);
                gh[i] = rr * tr + ri * ti;
                gh[i + 1] = rr * ti - ri * tr;
                gr[i] = hr * tr + hi * ti;
                gr[i + 1] = hr * ti - hi * tr;
                gt[i] = hr * rr - hi * ri;
                gt[i + 1] = hr * ri + hi * rr;
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn score(model: &ModelKind, table: &EmbeddingTable, t: Triple) -> Result<f64> {
    model.check_table(table)?;
    table.check_ids(t)?;
    Ok(score_rows(model, table.entity(t.head), table.relation(t.relation), table.entity(t.tail)))
}

/// Gradient of one triple's score, keyed by row id. When head and tail are
/// the same entity their contributions are summed into one row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseGrad {
    pub entities: BTreeMap<EntityId, Vec<f64>>,
    pub relations: BTreeMap<RelationId, Vec<f64>>,
}

pub fn grad(model: &ModelKind, table: &EmbeddingTable, t: Triple) -> Result<SparseGrad> {
    model.check_table(table)?;
    table.check_ids(t)?;
    let w = table.width();
    let (mut gh, mut gr, mut gt) = (vec![0.0; w], vec![0.0; w], vec![0.0; w]);
    grad_rows(
        model,
        table.entity(t.head),
        table.relation(t.relation),
        table.entity(t.tail),
        &mut gh,
        &mut gr,
        &mut gt,
    );
    let mut out = SparseGrad::default();
    out.entities.insert(t.head, gh);
    let tail_row = out.entities.entry(t.tail).or_insert_with(|| vec![0.0; w]);
    for (a, b) in tail_row.iter_mut().zip(&gt) {
        *a += b;
    }
    out.relations.insert(t.relation, gr);
    Ok(out)
}

/// Uniform initialisation in `[-6/sqrt(d), 6/sqrt(d)]`; TransE relation rows
/// are then scaled to unit L2 norm.
pub fn init_table(
    kind: &ModelKind,
    num_entities: usize,
    num_relations: usize,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::InvalidConfig("embedding dimension must be at least 1".into()));
    }
    let mut table = EmbeddingTable::zeros(kind.dtype(), num_entities, num_relations, dim);
    let bound = 6.0 / (dim as f64).sqrt();
    let mut rng = rng::seeded(seed);
    for v in table.entities.iter_mut().chain(table.relations.iter_mut()) {
        *v = bound * (2.0 * rng::unit_f64(&mut rng) - 1.0);
    }
    if matches!(kind, ModelKind::TransE { .. }) {
        for rel in table.relations.chunks_mut(dim) {
            let norm = rel.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                rel.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    Ok(table)
}

/// Scores `(h, r, e)` for every entity `e` into `out`.
pub fn score_tails(model: &ModelKind, table: &EmbeddingTable, h: EntityId, r: RelationId, out: &mut [f64]) {
    let w = table.width();
    let (hv, rv) = (table.entity(h), table.relation(r));
    let ents = table.entity_matrix();
    match *model {
        ModelKind::TransE { .. } => {
            for (e, o) in out.iter_mut().enumerate() {
                *o = score_rows(model, hv, rv, &ents[e * w..(e + 1) * w]);
            }
        }
        ModelKind::DistMult => {
            let q: Vec<f64> = hv.iter().zip(rv).map(|(a, b)| a * b).collect();
            for (e, o) in out.iter_mut().enumerate() {
                *o = dot(&q, &ents[e * w..(e + 1) * w]);
            }
        }
        ModelKind::ComplEx => {
            let mut q = vec![0.0; w];
            for i in (0..w).step_by(2) {
                let (a, b) = cmul(hv[i], hv[i + 1], rv[i], rv[i + 1]);
                q[i] = a;
                q[i + 1] = b;
            }
            for (e, o) in out.iter_mut().enumerate() {
                *o = dot(&q, &ents[e * w..(e + 1) * w]);
            }
        }
    }
}

/// Scores `(e, r, t)` for every entity `e` into `out`.
pub fn score_heads(model: &ModelKind, table: &EmbeddingTable, r: RelationId, t: EntityId, out: &mut [f64]) {
    let w = table.width();
    let (rv, tv) = (table.relation(r), table.entity(t));
    let ents = table.entity_matrix();
    match *model {
        ModelKind::TransE { .. } => {
            for (e, o) in out.iter_mut().enumerate() {
                *o = score_rows(model, &ents[e * w..(e + 1) * w], rv, tv);
            }
        }
        ModelKind::DistMult => {
            let q: Vec<f64> = rv.iter().zip(tv).map(|(a, b)| a * b).collect();
            for (e, o) in out.iter_mut().enumerate() {
                *o = dot(&ents[e * w..(e + 1) * w], &q);
            }
        }
        ModelKind::ComplEx => {
            // Re(h * u) with u = r * conj(t).
            let mut u = vec![0.0; w];
            for i in (0..w).step_by(2) {
                u[i] = rv[i] * tv[i] + rv[i + 1] * tv[i + 1];
                u[i + 1] = -(rv[i + 1] * tv[i] - rv[i] * tv[i + 1]);
            }
            for (e, o) in out.iter_mut().enumerate() {
                *o = dot(&ents[e * w..(e + 1) * w], &u);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_with(dtype: Dtype, dim: usize, ents: &[&[f64]], rels: &[&[f64]]) -> EmbeddingTable {
        EmbeddingTable::from_parts(dtype, dim, ents.concat(), rels.concat()).unwrap()
    }

    const TRANSE_L2: ModelKind = ModelKind::TransE { norm: Norm::L2, margin: 1.0 };

    #[test]
    fn transe_zero_distance_scores_margin() {
        let table = table_with(Dtype::Real, 3, &[&[0.0; 3], &[0.0; 3]], &[&[0.0; 3]]);
        assert_eq!(score(&TRANSE_L2, &table, Triple::new(0, 0, 1)).unwrap(), 1.0);
    }

    #[test]
    fn distmult_hand_example() {
        let table = table_with(Dtype::Real, 2, &[&[1.0, 2.0], &[5.0, 6.0]], &[&[3.0, 4.0]]);
        // Independent scalar loop.
        let (h, r, t) = ([1.0, 2.0], [3.0, 4.0], [5.0, 6.0]);
        let mut expected = 0.0;
        for i in 0..2 {
            expected += h[i] * r[i] * t[i];
        }
        assert_eq!(expected, 63.0);
        assert_eq!(score(&ModelKind::DistMult, &table, Triple::new(0, 0, 1)).unwrap(), 63.0);
        let g = grad(&ModelKind::DistMult, &table, Triple::new(0, 0, 1)).unwrap();
        assert_eq!(g.entities[&0], vec![15.0, 24.0]);
    }

    #[test]
    fn complex_hand_example() {
        // h = 1, r = i, t = i: Re(1 * i * conj(i)) = 1.
        let table = table_with(Dtype::Complex, 1, &[&[1.0, 0.0], &[0.0, 1.0]], &[&[0.0, 1.0]]);
        assert_eq!(score(&ModelKind::ComplEx, &table, Triple::new(0, 0, 1)).unwrap(), 1.0);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let table = EmbeddingTable::zeros(Dtype::Real, 2, 1, 2);
        assert!(matches!(
            score(&ModelKind::ComplEx, &table, Triple::new(0, 0, 1)),
            Err(Error::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn transe_gradient_vanishes_at_translation() {
        let table = table_with(Dtype::Real, 2, &[&[0.5, -1.0], &[1.0, 1.0]], &[&[0.5, 2.0]]);
        for norm in [Norm::L1, Norm::L2] {
            let m = ModelKind::TransE { norm, margin: 2.0 };
            assert_eq!(score(&m, &table, Triple::new(0, 0, 1)).unwrap(), 2.0);
            let g = grad(&m, &table, Triple::new(0, 0, 1)).unwrap();
            assert!(g.entities.values().chain(g.relations.values()).flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shared_head_and_tail_gradients_are_summed() {
        let table = table_with(Dtype::Real, 2, &[&[1.0, 2.0]], &[&[3.0, 4.0]]);
        let g = grad(&ModelKind::DistMult, &table, Triple::new(0, 0, 0)).unwrap();
        // d/dx sum x_i r_i x_i = 2 r_i x_i
        assert_eq!(g.entities[&0], vec![6.0, 16.0]);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let m = ModelKind::DistMult;
        let a = init_table(&m, 20, 3, 400, 7).unwrap();
        let b = init_table(&m, 20, 3, 400, 7).unwrap();
        let c = init_table(&m, 20, 3, 400, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 6.0 / 20.0;
        assert!(a.entity_matrix().iter().chain(a.relation_matrix()).all(|v| v.abs() <= bound));
        let checksum: f64 = a.entity_matrix().iter().sum();
        assert_eq!(checksum, init_table(&m, 20, 3, 400, 7).unwrap().entity_matrix().iter().sum::<f64>());
    }

    #[test]
    fn init_transe_normalises_relations() {
        let m = ModelKind::TransE { norm: Norm::L1, margin: 1.0 };
        let t = init_table(&m, 4, 3, 16, 1).unwrap();
        for r in 0..3 {
            let n: f64 = t.relation(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(init_table(&m, 4, 3, 0, 1).is_err());
    }

    #[test]
    fn batched_scores_match_single_scores() {
        for model in [TRANSE_L2, ModelKind::DistMult, ModelKind::ComplEx] {
            let table = init_table(&model, 9, 2, 5, 11).unwrap();
            let mut tails = vec![0.0; 9];
            let mut heads = vec![0.0; 9];
            score_tails(&model, &table, 3, 1, &mut tails);
            score_heads(&model, &table, 1, 4, &mut heads);
            for e in 0..9u32 {
                let st = score(&model, &table, Triple::new(3, 1, e)).unwrap();
                let sh = score(&model, &table, Triple::new(e, 1, 4)).unwrap();
                assert!((tails[e as usize] - st).abs() < 1e-12);
                assert!((heads[e as usize] - sh).abs() < 1e-12);
            }
        }
    }
}
