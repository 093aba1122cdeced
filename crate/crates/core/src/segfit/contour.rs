//! Boundary tracing and box fitting on binary masks.

use crate::model::{MaskGrid, PixelBox};

/// Moore neighborhood, clockwise on screen (y grows downward), from west.
const DIRS: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

fn dir_index(dx: i64, dy: i64) -> usize {
    DIRS.iter()
        .position(|&d| d == (dx, dy))
        .expect("backtrack pixel is a Moore neighbor")
}

/// Foreground pixels grouped into 8-connected components, largest first.
/// Equal sizes keep raster order of their first pixel.
pub fn components(mask: &MaskGrid) -> Vec<Vec<(u32, u32)>> {
    let g = mask.geometry();
    let w = g.width_px() as usize;
    let mut seen = vec![false; g.pixel_count()];
    let mut out: Vec<Vec<(u32, u32)>> = Vec::new();
    for (x, y) in mask.iter_set() {
        let i = y as usize * w + x as usize;
        if seen[i] {
            continue;
        }
        seen[i] = true;
        let mut comp = vec![(x, y)];
        let mut head = 0;
        while head < comp.len() {
            let (cx, cy) = comp[head];
            head += 1;
            for (dx, dy) in DIRS {
                let (nx, ny) = (i64::from(cx) + dx, i64::from(cy) + dy);
                if !mask.get(nx, ny) {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !seen[j] {
                    seen[j] = true;
                    comp.push((nx as u32, ny as u32));
                }
            }
        }
        out.push(comp);
    }
    out.sort_by(|a, b| b.len().cmp(&a.len()));
    out
}

/// Clockwise Moore-neighbor trace of the component containing `start`,
/// which must be its first pixel in raster order. Tracing stops when the
/// first move is about to repeat.
pub fn trace_from(mask: &MaskGrid, start: (u32, u32)) -> Vec<(u32, u32)> {
    let at = |p: (i64, i64), d: usize| (p.0 + DIRS[d].0, p.1 + DIRS[d].1);
    let s = (i64::from(start.0), i64::from(start.1));
    // Returns the next pixel and the backtrack direction seen from it.
    let step = |cur: (i64, i64), back: usize| -> Option<((i64, i64), usize)> {
        (1..=8).find_map(|k| {
            let d = (back + k) % 8;
            let n = at(cur, d);
            mask.get(n.0, n.1).then(|| {
                let b = at(cur, (back + k - 1) % 8);
                (n, dir_index(b.0 - n.0, b.1 - n.1))
            })
        })
    };
    let mut ring = vec![start];
    let Some(first) = step(s, 0) else {
        return ring;
    };
    let (mut cur, mut back) = first;
    let limit = 4 * mask.count() + 8;
    for _ in 0..limit {
        ring.push((cur.0 as u32, cur.1 as u32));
        let next = step(cur, back).expect("a traced pixel keeps its neighbor");
        if next == first && cur == s {
            ring.pop();
            return ring;
        }
        (cur, back) = next;
    }
    unreachable!("boundary trace did not close");
}

/// Outer boundary of the largest 8-connected component, clockwise from its
/// first raster pixel. `None` for an empty mask.
pub fn extract_contour(mask: &MaskGrid) -> Option<Vec<(u32, u32)>> {
    let comps = components(mask);
    let largest = comps.first()?;
    let start = *largest.iter().min_by_key(|&&(x, y)| (y, x))?;
    Some(trace_from(mask, start))
}

/// Smallest axis-aligned box holding every pixel; max edges are exclusive.
pub fn min_bounding_box(pixels: impl IntoIterator<Item = (u32, u32)>) -> Option<PixelBox> {
    let mut it = pixels.into_iter();
    let (x, y) = it.next()?;
    let (mut x0, mut y0, mut x1, mut y1) = (x, y, x, y);
    for (x, y) in it {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    Some(PixelBox {
        x_min: f64::from(x0),
        y_min: f64::from(y0),
        x_max: f64::from(x1) + 1.0,
        y_max: f64::from(y1) + 1.0,
    })
}

fn seg_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return (p.0 - a.0).hypot(p.1 - a.1);
    }
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

fn dp_keep(pts: &[(f64, f64)], lo: usize, hi: usize, tol: f64, keep: &mut [bool]) {
    let mut stack = vec![(lo, hi)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let (far, dist) = (lo + 1..hi)
            .map(|i| (i, seg_distance(pts[i], pts[lo], pts[hi])))
            .fold((lo, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
        if dist > tol {
            keep[far] = true;
            stack.push((lo, far));
            stack.push((far, hi));
        }
    }
}

/// Douglas-Peucker on a closed ring. The ring is split at its first point
/// and the point farthest from it; both halves are simplified.
pub fn simplify_ring(ring: &[(u32, u32)], tol: f64) -> Vec<(u32, u32)> {
    if ring.len() <= 3 {
        return ring.to_vec();
    }
    let pts: Vec<(f64, f64)> = ring.iter().map(|&(x, y)| (f64::from(x), f64::from(y))).collect();
    let far = (1..pts.len())
        .max_by(|&a, &b| {
            let da = (pts[a].0 - pts[0].0).hypot(pts[a].1 - pts[0].1);
            let db = (pts[b].0 - pts[0].0).hypot(pts[b].1 - pts[0].1);
            da.total_cmp(&db).then(b.cmp(&a))
        })
        .expect("ring has more than one point");
    let mut closed = pts.clone();
    closed.push(pts[0]);
    let mut keep = vec![false; closed.len()];
    keep[0] = true;
    keep[far] = true;
    dp_keep(&closed, 0, far, tol, &mut keep);
    dp_keep(&closed, far, pts.len(), tol, &mut keep);
    ring.iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&p, _)| p)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ImageGeometry;
    use proptest::prelude::*;

    fn mask(w: u32, h: u32, on: &[(u32, u32)]) -> MaskGrid {
        let mut m = MaskGrid::new(ImageGeometry::new(w, h).unwrap());
        for &(x, y) in on {
            m.set(x, y, true);
        }
        m
    }

    fn square(x0: u32, y0: u32, n: u32) -> Vec<(u32, u32)> {
        (y0..y0 + n)
            .flat_map(|y| (x0..x0 + n).map(move |x| (x, y)))
            .collect()
    }

    fn is_boundary(m: &MaskGrid, (x, y): (u32, u32)) -> bool {
        let (x, y) = (i64::from(x), i64::from(y));
        m.get(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !m.get(x + dx, y + dy))
    }

    #[test]
    fn square_ring() {
        let m = mask(10, 10, &square(0, 0, 3));
        let ring = extract_contour(&m).unwrap();
        assert_eq!(
            ring,
            vec![(0, 0), (1, 0), (2, 0), (2, 1), (2, 2), (1, 2), (0, 2), (0, 1)]
        );
    }

    #[test]
    fn single_and_pair() {
        assert_eq!(extract_contour(&mask(5, 5, &[(2, 3)])).unwrap(), vec![(2, 3)]);
        assert_eq!(
            extract_contour(&mask(5, 5, &[(1, 1), (2, 1)])).unwrap(),
            vec![(1, 1), (2, 1)]
        );
        assert!(extract_contour(&mask(5, 5, &[])).is_none());
    }

    #[test]
    fn largest_component_only() {
        let mut on = square(20, 20, 8);
        on.truncate(50);
        on.extend([(2, 2), (3, 2), (2, 3)]);
        let m = mask(40, 40, &on);
        let ring = extract_contour(&m).unwrap();
        assert!(ring.iter().all(|&(x, y)| x >= 20 && y >= 20));
        assert_eq!(components(&m)[0].len(), 50);
    }

    #[test]
    fn bounding_box_examples() {
        let b = min_bounding_box([(3, 7), (5, 2)]).unwrap();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (3.0, 2.0, 6.0, 8.0));
        let b = min_bounding_box([(4, 4)]).unwrap();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (4.0, 4.0, 5.0, 5.0));
        let full = MaskGrid::from_fn(ImageGeometry::new(16, 9).unwrap(), |_, _| true);
        let b = min_bounding_box(extract_contour(&full).unwrap()).unwrap();
        assert_eq!(b, full.geometry().full_box());
        assert!(min_bounding_box(std::iter::empty()).is_none());
    }

    #[test]
    fn filled_square_fits_exactly() {
        let m = mask(64, 64, &square(20, 40, 10));
        let b = min_bounding_box(extract_contour(&m).unwrap()).unwrap();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (20.0, 40.0, 30.0, 50.0));
    }

    #[test]
    fn simplify_keeps_rectangle_corners() {
        let m = mask(30, 30, &square(5, 5, 12));
        let ring = extract_contour(&m).unwrap();
        let s = simplify_ring(&ring, 1.5);
        let mut corners = s.clone();
        corners.sort();
        assert_eq!(corners, vec![(5, 5), (5, 16), (16, 5), (16, 16)]);
    }

    proptest! {
        #[test]
        fn ring_is_boundary_and_box_is_exact(
            bits in proptest::collection::vec(any::<bool>(), 144),
        ) {
            let on: Vec<(u32, u32)> = bits.iter().enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| ((i % 12) as u32, (i / 12) as u32))
                .collect();
            let m = mask(12, 12, &on);
            match extract_contour(&m) {
                None => prop_assert!(on.is_empty()),
                Some(ring) => {
                    let comp = &components(&m)[0];
                    for p in &ring {
                        prop_assert!(is_boundary(&m, *p));
                        prop_assert!(comp.contains(p));
                    }
                    prop_assert_eq!(
                        min_bounding_box(ring.iter().copied()),
                        min_bounding_box(comp.iter().copied())
                    );
                    let s = simplify_ring(&ring, 1.5);
                    prop_assert!(s.iter().all(|p| ring.contains(p)));
                }
            }
        }
    }
}
