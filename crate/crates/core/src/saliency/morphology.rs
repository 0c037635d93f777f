//! Binary morphology and connected-component labeling on [`Mask3`].

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::volume::Mask3;

/// Radius-1 structuring element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuringElement {
    /// Center plus its 6 face neighbours.
    #[default]
    Cross6,
    /// Full 3x3x3 block.
    Cube26,
}

impl StructuringElement {
    fn offsets(self) -> Vec<[i64; 3]> {
        match self {
            StructuringElement::Cross6 => neighbor_offsets(6),
            StructuringElement::Cube26 => neighbor_offsets(26),
        }
    }
}

/// Neighbour offsets for 6-, 18- or 26-connectivity (center excluded).
pub fn neighbor_offsets(connectivity: u8) -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                let keep = match connectivity {
                    6 => manhattan == 1,
                    18 => manhattan == 1 || manhattan == 2,
                    _ => manhattan >= 1,
                };
                if keep {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

// Out-of-bounds neighbours are ignored by both operators, so the grid border
// neither grows nor erodes structures.
fn apply(m: &Mask3, se: StructuringElement, dilate: bool) -> Mask3 {
    let g = *m.geometry();
    let offsets = se.offsets();
    let mut out = m.clone();
    let [nx, ny, nz] = g.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let here = m.get(x, y, z);
                if dilate == here {
                    continue;
                }
                let hit = offsets.iter().any(|o| {
                    let p = [x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]];
                    g.contains(p) && m.get(p[0] as usize, p[1] as usize, p[2] as usize) == dilate
                });
                if hit {
                    out.set(x, y, z, dilate);
                }
            }
        }
    }
    out
}

pub fn dilate(m: &Mask3, se: StructuringElement) -> Mask3 {
    apply(m, se, true)
}

pub fn erode(m: &Mask3, se: StructuringElement) -> Mask3 {
    apply(m, se, false)
}

pub fn closing(m: &Mask3, se: StructuringElement) -> Mask3 {
    erode(&dilate(m, se), se)
}

pub fn opening(m: &Mask3, se: StructuringElement) -> Mask3 {
    dilate(&erode(m, se), se)
}

/// One closing followed by one opening.
pub fn morph_refine(m: &Mask3, se: StructuringElement) -> Mask3 {
    opening(&closing(m, se), se)
}

/// Maximal connected components of a mask. Components are numbered in scan
/// order of their first voxel; voxel lists are in scan order too.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CueComponents {
    pub dims: [usize; 3],
    pub components: Vec<Vec<[usize; 3]>>,
}

impl CueComponents {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Indices of components ordered by size (largest first), ties in scan
    /// order.
    pub fn order_by_size(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.components.len()).collect();
        idx.sort_by(|&a, &b| self.components[b].len().cmp(&self.components[a].len()).then(a.cmp(&b)));
        idx
    }

    /// Voxel-count-weighted centroid of each component.
    pub fn centroids(&self) -> Vec<[f64; 3]> {
        self.components
            .iter()
            .map(|c| {
                let mut s = [0.0; 3];
                for v in c {
                    for a in 0..3 {
                        s[a] += v[a] as f64;
                    }
                }
                s.map(|x| x / c.len() as f64)
            })
            .collect()
    }
}

pub fn connected_components(m: &Mask3, connectivity: u8) -> CueComponents {
    let g = *m.geometry();
    let offsets = neighbor_offsets(connectivity);
    let mut label = vec![usize::MAX; g.len()];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..g.len() {
        if !m.get_flat(start) || label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut voxels = Vec::new();
        label[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let c = g.coords(i);
            voxels.push(c);
            for o in &offsets {
                let p = [c[0] as i64 + o[0], c[1] as i64 + o[1], c[2] as i64 + o[2]];
                if !g.contains(p) {
                    continue;
                }
                let j = g.index(p[0] as usize, p[1] as usize, p[2] as usize);
                if m.get_flat(j) && label[j] == usize::MAX {
                    label[j] = id;
                    queue.push_back(j);
                }
            }
        }
        voxels.sort_by_key(|v| g.index(v[0], v[1], v[2]));
        components.push(voxels);
    }
    CueComponents {
        dims: g.dims,
        components,
    }
}
