//! Brute-force Vietoris–Rips persistence for small clouds.
//!
//! Reference implementation used to validate the sparsified engine: the full
//! complex (every edge and triangle within the clip radius, no k-NN
//! sparsification) is reduced with the textbook left-to-right boundary-matrix
//! algorithm over Z/2, one global column order, no optimizations. Truncation
//! and zero-persistence rules match the engine.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{PersistenceDiagram, PersistencePair};

/// Largest cloud the oracle accepts.
pub const ORACLE_MAX_POINTS: usize = 16;

#[derive(Debug, Clone)]
struct Simplex {
    /// Ascending vertex list; length 1, 2 or 3.
    vertices: Vec<u32>,
    filtration: f64,
}

fn distance(points: &[f64], dim: usize, a: usize, b: usize) -> f64 {
    let pa = &points[a * dim..(a + 1) * dim];
    let pb = &points[b * dim..(b + 1) * dim];
    let mut acc = 0.0;
    for (x, y) in pa.iter().zip(pb) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Full Vietoris–Rips persistence (degrees 0 and 1) of a flat row-major
/// `n × dim` point matrix, truncated at `clip_radius`.
pub fn oracle_vr_persistence(
    points: &[f64],
    dim: usize,
    clip_radius: f64,
) -> Result<PersistenceDiagram> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Config(format!(
            "point buffer length {} is not a multiple of dim {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if n > ORACLE_MAX_POINTS {
        return Err(Error::OracleTooLarge {
            n,
            max: ORACLE_MAX_POINTS,
        });
    }
    if n == 0 {
        return Err(Error::DegenerateCloud { n: 0 });
    }

    // Enumerate the full complex up to triangles, keeping simplices whose
    // filtration value (longest pairwise distance) fits inside the radius.
    let mut simplices: Vec<Simplex> = Vec::new();
    for v in 0..n as u32 {
        simplices.push(Simplex {
            vertices: vec![v],
            filtration: 0.0,
        });
    }
    for a in 0..n {
        for b in (a + 1)..n {
            let d = distance(points, dim, a, b);
            if d <= clip_radius {
                simplices.push(Simplex {
                    vertices: vec![a as u32, b as u32],
                    filtration: d,
                });
            }
        }
    }
    for a in 0..n {
        for b in (a + 1)..n {
            let dab = distance(points, dim, a, b);
            if dab > clip_radius {
                continue;
            }
            for c in (b + 1)..n {
                let dac = distance(points, dim, a, c);
                let dbc = distance(points, dim, b, c);
                let filt = dab.max(dac).max(dbc);
                if filt <= clip_radius {
                    simplices.push(Simplex {
                        vertices: vec![a as u32, b as u32, c as u32],
                        filtration: filt,
                    });
                }
            }
        }
    }

    // One global filtration order: by value, then dimension (faces precede
    // cofaces at equal value), then vertex tuple for determinism.
    let mut order: Vec<usize> = (0..simplices.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = &simplices[a];
        let sb = &simplices[b];
        sa.filtration
            .total_cmp(&sb.filtration)
            .then(sa.vertices.len().cmp(&sb.vertices.len()))
            .then(sa.vertices.cmp(&sb.vertices))
    });
    let position: HashMap<Vec<u32>, usize> = order
        .iter()
        .enumerate()
        .map(|(pos, &idx)| (simplices[idx].vertices.clone(), pos))
        .collect();

    // Boundary columns as sorted row-position lists.
    let mut columns: Vec<Vec<usize>> = Vec::with_capacity(order.len());
    for &idx in &order {
        let verts = &simplices[idx].vertices;
        let mut rows: Vec<usize> = match verts.len() {
            1 => Vec::new(),
            len => (0..len)
                .map(|skip| {
                    let face: Vec<u32> = verts
                        .iter()
                        .enumerate()
                        .filter(|&(i, _)| i != skip)
                        .map(|(_, &v)| v)
                        .collect();
                    position[&face]
                })
                .collect(),
        };
        rows.sort_unstable();
        columns.push(rows);
    }

    // Textbook reduction: repeatedly add the column owning our pivot.
    let mut pivot_of: Vec<Option<usize>> = vec![None; order.len()];
    let mut paired = vec![false; order.len()];
    let mut pairs: Vec<PersistencePair> = Vec::new();
    for j in 0..columns.len() {
        loop {
            let Some(&p) = columns[j].last() else { break };
            match pivot_of[p] {
                None => {
                    pivot_of[p] = Some(j);
                    paired[p] = true;
                    paired[j] = true;
                    let birth_s = &simplices[order[p]];
                    let death_s = &simplices[order[j]];
                    let pair_dim = (birth_s.vertices.len() - 1) as u8;
                    if pair_dim <= 1 && birth_s.filtration < death_s.filtration {
                        pairs.push(PersistencePair {
                            birth: birth_s.filtration,
                            death: death_s.filtration,
                            dim: pair_dim,
                        });
                    }
                    break;
                }
                Some(owner) => {
                    // Z/2 addition of the owner's reduced column.
                    let merged = symmetric_difference(&columns[j], &columns[owner]);
                    columns[j] = merged;
                }
            }
        }
    }

    // Unpaired positive simplices of degree 0 or 1 are essential classes,
    // truncated at the clip radius.
    for (pos, col) in columns.iter().enumerate() {
        if col.is_empty() && !paired[pos] {
            let s = &simplices[order[pos]];
            let sdim = (s.vertices.len() - 1) as u8;
            if sdim <= 1 && s.filtration < clip_radius {
                pairs.push(PersistencePair {
                    birth: s.filtration,
                    death: clip_radius,
                    dim: sdim,
                });
            }
        }
    }

    let mut diagram = PersistenceDiagram {
        pairs,
        clip_radius,
    };
    diagram.sort_pairs();
    Ok(diagram)
}

fn symmetric_difference(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}
