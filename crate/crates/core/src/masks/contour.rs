//! Raster → polygon helpers: connected regions, boundary tracing and corner
//! simplification.

use nalgebra::Vector2;

use super::MaskError;

/// Polygons with an absolute area below this are rejected.
pub const MIN_CONTOUR_AREA: f64 = 4.0;

/// Starting simplification tolerance in pixels; grown by
/// [`TOLERANCE_GROWTH`] until the corner cap is met.
pub const INITIAL_TOLERANCE: f64 = 1.0;
pub const TOLERANCE_GROWTH: f64 = 1.5;

/// Shoelace signed area; positive for counter-clockwise in (x, y) order.
pub fn signed_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

fn dedup_closed(contour: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut out: Vec<Vector2<f64>> = Vec::with_capacity(contour.len());
    for p in contour {
        if out.last() != Some(p) {
            out.push(*p);
        }
    }
    while out.len() > 1 && out.first() == out.last() {
        out.pop();
    }
    out
}

fn segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Farthest-point (Ramer–Douglas–Peucker) simplification of an open chain;
/// marks kept interior vertices in `keep`.
fn simplify_chain(chain: &[Vector2<f64>], tol: f64, keep: &mut [bool], offset: usize) {
    let mut stack = vec![(0usize, chain.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let (mut best, mut best_d) = (lo, -1.0);
        for i in lo + 1..hi {
            let d = segment_distance(&chain[i], &chain[lo], &chain[hi]);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        if best_d > tol {
            keep[offset + best] = true;
            stack.push((lo, best));
            stack.push((best, hi));
        }
    }
}

/// Simplifies a closed contour to at most `cap` corners.
///
/// The result starts at the lexicographically smallest contour point and keeps
/// the input winding, so it does not depend on where the contour starts.
pub fn extract_corners(contour: &[Vector2<f64>], cap: usize) -> Result<Vec<Vector2<f64>>, MaskError> {
    assert!(cap >= 3, "corner cap must be at least 3");
    let pts = dedup_closed(contour);
    if pts.len() < 3 {
        return Err(MaskError::DegenerateContour {
            area: 0.0,
            points: pts.len(),
        });
    }
    let area = signed_area(&pts).abs();
    if area < MIN_CONTOUR_AREA {
        return Err(MaskError::DegenerateContour {
            area,
            points: pts.len(),
        });
    }

    let n = pts.len();
    let anchor = (0..n)
        .min_by(|&i, &j| {
            pts[i]
                .x
                .total_cmp(&pts[j].x)
                .then(pts[i].y.total_cmp(&pts[j].y))
        })
        .unwrap();
    let ring: Vec<Vector2<f64>> = (0..n).map(|i| pts[(anchor + i) % n]).collect();
    let far = (1..n)
        .max_by(|&i, &j| {
            let di = (ring[i] - ring[0]).norm_squared();
            let dj = (ring[j] - ring[0]).norm_squared();
            // earliest index wins ties
            di.total_cmp(&dj).then(j.cmp(&i))
        })
        .unwrap();

    // closed second chain: far .. n-1, back to the anchor
    let mut second: Vec<Vector2<f64>> = ring[far..].to_vec();
    second.push(ring[0]);

    let mut tol = INITIAL_TOLERANCE;
    loop {
        let mut keep = vec![false; n];
        keep[0] = true;
        keep[far] = true;
        simplify_chain(&ring[..=far], tol, &mut keep, 0);
        let mut keep_second = vec![false; second.len()];
        simplify_chain(&second, tol, &mut keep_second, 0);
        for (i, k) in keep_second.iter().enumerate().take(second.len() - 1) {
            if *k {
                keep[far + i] = true;
            }
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count < 3 {
            // thin shape: add the point farthest from the anchor-far chord
            let extra = (1..n)
                .filter(|&i| i != far)
                .max_by(|&i, &j| {
                    let di = segment_distance(&ring[i], &ring[0], &ring[far]);
                    let dj = segment_distance(&ring[j], &ring[0], &ring[far]);
                    di.total_cmp(&dj).then(j.cmp(&i))
                })
                .unwrap();
            keep[extra] = true;
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count <= cap {
            return Ok(ring
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(p, _)| *p)
                .collect());
        }
        tol *= TOLERANCE_GROWTH;
    }
}

/// Reverses `poly` in place if needed so its signed area is positive, keeping
/// the first vertex first.
pub fn make_ccw(poly: &mut [Vector2<f64>]) {
    if signed_area(poly) < 0.0 && poly.len() > 2 {
        poly[1..].reverse();
    }
}

/// 8-connected components of `true` cells. Returns a label per cell
/// (`u32::MAX` for background) and per-component pixel counts.
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> (Vec<u32>, Vec<usize>) {
    let mut labels = vec![u32::MAX; mask.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != u32::MAX {
            continue;
        }
        let label = sizes.len() as u32;
        let mut size = 0;
        labels[start] = label;
        stack.push(start);
        while let Some(o) = stack.pop() {
            size += 1;
            let (x, y) = ((o % width) as i64, (o / width) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                        continue;
                    }
                    let no = ny as usize * width + nx as usize;
                    if mask[no] && labels[no] == u32::MAX {
                        labels[no] = label;
                        stack.push(no);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Moore-neighbour tracing of the outer boundary of the 8-connected region
/// containing the first (row-major) set cell. Returns pixel centres in
/// screen-clockwise order, which is positive in shoelace terms for y-down
/// coordinates.
pub fn trace_boundary(mask: &[bool], width: usize, height: usize) -> Vec<Vector2<f64>> {
    // screen-clockwise (y down), starting west
    const DIRS: [(i64, i64); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];
    let Some(start) = mask.iter().position(|&m| m) else {
        return Vec::new();
    };
    let at = |x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && x < width as i64 && y < height as i64 && mask[y as usize * width + x as usize]
    };
    let scan = |cell: (i64, i64), from: usize| -> Option<usize> {
        (0..8)
            .map(|k| (from + k) % 8)
            .find(|&d| at(cell.0 + DIRS[d].0, cell.1 + DIRS[d].1))
    };
    let s = ((start % width) as i64, (start / width) as i64);
    let mut out = vec![Vector2::new(s.0 as f64, s.1 as f64)];
    // the start is the first cell in raster order, so its west neighbour is empty
    let Some(first) = scan(s, 0) else {
        return out;
    };
    let (mut cur, mut dir) = (s, first);
    for _ in 0..4 * mask.len() + 8 {
        cur = (cur.0 + DIRS[dir].0, cur.1 + DIRS[dir].1);
        let next = scan(cur, (dir + 5) % 8).expect("predecessor is always a neighbour");
        if cur == s && next == first {
            break;
        }
        out.push(Vector2::new(cur.0 as f64, cur.1 as f64));
        dir = next;
    }
    out
}
