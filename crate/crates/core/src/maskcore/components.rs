use std::collections::VecDeque;

use super::BinaryMask;

/// Pixel adjacency used when grouping foreground into components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Component labels of a mask. Label `0` is background; component `k`
/// (zero-based, in row-major discovery order) carries label `k + 1`.
#[derive(Debug, Clone)]
pub struct Labeling {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub areas: Vec<usize>,
    /// Row-major index of each component's first pixel; strictly increasing.
    pub first_pixel: Vec<usize>,
}

impl Labeling {
    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    /// Index of the largest component; earliest first pixel wins ties.
    pub fn largest(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (k, &a) in self.areas.iter().enumerate() {
            if best.is_none_or(|b| a > self.areas[b]) {
                best = Some(k);
            }
        }
        best
    }

    pub fn component_mask(&self, k: usize) -> BinaryMask {
        let label = k as u32 + 1;
        let data = self.labels.iter().map(|&l| l == label).collect();
        BinaryMask::from_vec(self.height, self.width, data).expect("dims carried over")
    }
}

/// Breadth-first labeling of the foreground of `m`.
pub fn label_components(m: &BinaryMask, connectivity: Connectivity) -> Labeling {
    let (h, w) = m.dims();
    let mut labels = vec![0u32; h * w];
    let mut areas = Vec::new();
    let mut first_pixel = Vec::new();
    let mut queue = VecDeque::new();
    let offsets = connectivity.offsets();

    for start in 0..h * w {
        if !m.data()[start] || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut area = 0;
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for &(dr, dc) in offsets {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if m.data()[j] && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        areas.push(area);
        first_pixel.push(start);
    }

    Labeling {
        height: h,
        width: w,
        labels,
        areas,
        first_pixel,
    }
}

/// Connected components sorted by area (descending), ties by first pixel.
pub fn connected_components(m: &BinaryMask, connectivity: Connectivity) -> Vec<BinaryMask> {
    let lab = label_components(m, connectivity);
    let mut order: Vec<usize> = (0..lab.len()).collect();
    // Stable sort keeps discovery order, which is first-pixel order, on ties.
    order.sort_by(|&a, &b| lab.areas[b].cmp(&lab.areas[a]));
    order.into_iter().map(|k| lab.component_mask(k)).collect()
}
