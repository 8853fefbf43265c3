//! GJK distance and EPA penetration depth between the convex hulls of two
//! point sets. Rounded shapes are handled by the caller, which subtracts the
//! radii from the core distance.

use nalgebra::Vector3;

use super::GeometryError;

type V3 = Vector3<f64>;

pub(crate) const MAX_ITERATIONS: usize = 256;

#[derive(Debug, Clone, Copy)]
struct Support {
    w: V3,
    a: V3,
    b: V3,
}

fn support(a: &[V3], b: &[V3], dir: &V3) -> Support {
    let pa = extreme(a, dir);
    let pb = extreme(b, &-dir);
    Support { w: pa - pb, a: pa, b: pb }
}

fn extreme(points: &[V3], dir: &V3) -> V3 {
    let mut best = points[0];
    let mut best_dot = best.dot(dir);
    for p in &points[1..] {
        let d = p.dot(dir);
        if d > best_dot {
            best_dot = d;
            best = *p;
        }
    }
    best
}

/// Up to four support points with barycentric weights of the current closest
/// point.
#[derive(Debug, Clone, Copy)]
struct Simplex {
    pts: [Support; 4],
    bary: [f64; 4],
    len: usize,
}

impl Simplex {
    fn single(s: Support) -> Self {
        Self {
            pts: [s; 4],
            bary: [1.0, 0.0, 0.0, 0.0],
            len: 1,
        }
    }

    fn closest(&self) -> V3 {
        (0..self.len).fold(V3::zeros(), |acc, k| acc + self.pts[k].w * self.bary[k])
    }

    fn witnesses(&self) -> (V3, V3) {
        let mut pa = V3::zeros();
        let mut pb = V3::zeros();
        for k in 0..self.len {
            pa += self.pts[k].a * self.bary[k];
            pb += self.pts[k].b * self.bary[k];
        }
        (pa, pb)
    }

    fn contains(&self, w: &V3) -> bool {
        (0..self.len).any(|k| (self.pts[k].w - w).norm_squared() < 1e-24)
    }

    fn push(&mut self, s: Support) {
        self.pts[self.len] = s;
        self.len += 1;
    }

    /// Replaces the simplex by the smallest sub-simplex containing the point
    /// closest to the origin.
    fn reduce(&mut self) {
        match self.len {
            1 => self.bary[0] = 1.0,
            2 => {
                let (i, l) = closest_segment(&self.pts[0].w, &self.pts[1].w);
                self.apply([0, 1, 0], &i, &l);
            }
            3 => {
                let (i, l) = closest_triangle(&self.pts[0].w, &self.pts[1].w, &self.pts[2].w);
                self.apply([0, 1, 2], &i, &l);
            }
            4 => self.reduce_tetrahedron(),
            _ => unreachable!(),
        }
    }

    fn apply(&mut self, map: [usize; 3], idx: &Sub, bary: &Bary) {
        let old = self.pts;
        for k in 0..idx.len {
            self.pts[k] = old[map[idx.idx[k]]];
            self.bary[k] = bary.l[k];
        }
        self.len = idx.len;
    }

    fn reduce_tetrahedron(&mut self) {
        let p = [self.pts[0].w, self.pts[1].w, self.pts[2].w, self.pts[3].w];
        const FACES: [[usize; 4]; 4] = [[0, 1, 2, 3], [0, 1, 3, 2], [0, 2, 3, 1], [1, 2, 3, 0]];
        let mut inside = true;
        let mut best: Option<(f64, [usize; 3], Sub, Bary)> = None;
        for f in FACES {
            let (a, b, c, d) = (p[f[0]], p[f[1]], p[f[2]], p[f[3]]);
            let n = (b - a).cross(&(c - a));
            let side_origin = -a.dot(&n);
            let side_d = (d - a).dot(&n);
            let degenerate = side_d.abs() <= 1e-14 * n.norm() * (d - a).norm().max(1e-300);
            if degenerate || side_origin * side_d < 0.0 {
                inside = false;
                let (i, l) = closest_triangle(&a, &b, &c);
                let v = combine(&[a, b, c], &i, &l);
                let dist = v.norm_squared();
                if best.as_ref().is_none_or(|(bd, ..)| dist < *bd) {
                    best = Some((dist, [f[0], f[1], f[2]], i, l));
                }
            }
        }
        if inside {
            // barycentric coordinates of the origin by signed volumes
            let vol = |a: &V3, b: &V3, c: &V3, d: &V3| (b - a).dot(&(c - a).cross(&(d - a)));
            let o = V3::zeros();
            let total = vol(&p[0], &p[1], &p[2], &p[3]);
            self.bary = [
                vol(&o, &p[1], &p[2], &p[3]) / total,
                vol(&p[0], &o, &p[2], &p[3]) / total,
                vol(&p[0], &p[1], &o, &p[3]) / total,
                vol(&p[0], &p[1], &p[2], &o) / total,
            ];
            return;
        }
        let (_, map, i, l) = best.expect("at least one face is visible from an outside origin");
        self.apply(map, &i, &l);
    }
}

#[derive(Debug, Clone, Copy)]
struct Sub {
    idx: [usize; 3],
    len: usize,
}

impl Sub {
    fn as_slice(&self) -> &[usize] {
        &self.idx[..self.len]
    }
}

#[derive(Debug, Clone, Copy)]
struct Bary {
    l: [f64; 3],
    len: usize,
}

impl Bary {
    fn as_slice(&self) -> &[f64] {
        &self.l[..self.len]
    }
}

fn sub1(i: usize) -> (Sub, Bary) {
    (Sub { idx: [i, 0, 0], len: 1 }, Bary { l: [1.0, 0.0, 0.0], len: 1 })
}

fn sub2(i: usize, j: usize, t: f64) -> (Sub, Bary) {
    (Sub { idx: [i, j, 0], len: 2 }, Bary { l: [1.0 - t, t, 0.0], len: 2 })
}

fn combine(p: &[V3], idx: &Sub, bary: &Bary) -> V3 {
    idx.as_slice()
        .iter()
        .zip(bary.as_slice())
        .fold(V3::zeros(), |acc, (&i, &l)| acc + p[i] * l)
}

fn closest_segment(a: &V3, b: &V3) -> (Sub, Bary) {
    let ab = b - a;
    let denom = ab.norm_squared();
    if denom <= 0.0 {
        return sub1(0);
    }
    let t = -a.dot(&ab) / denom;
    if t <= 0.0 {
        sub1(0)
    } else if t >= 1.0 {
        sub1(1)
    } else {
        sub2(0, 1, t)
    }
}

/// Closest point of triangle `abc` to the origin, by Voronoi regions.
fn closest_triangle(a: &V3, b: &V3, c: &V3) -> (Sub, Bary) {
    let ab = b - a;
    let ac = c - a;
    let d1 = -ab.dot(a);
    let d2 = -ac.dot(a);
    if d1 <= 0.0 && d2 <= 0.0 {
        return sub1(0);
    }
    let d3 = -ab.dot(b);
    let d4 = -ac.dot(b);
    if d3 >= 0.0 && d4 <= d3 {
        return sub1(1);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return sub2(0, 1, d1 / (d1 - d3));
    }
    let d5 = -ab.dot(c);
    let d6 = -ac.dot(c);
    if d6 >= 0.0 && d5 <= d6 {
        return sub1(2);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return sub2(0, 2, d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return sub2(1, 2, (d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let sum = va + vb + vc;
    if sum.abs() < 1e-300 {
        // collinear: best of the three edges
        let cands = [(0, 1, a, b), (0, 2, a, c), (1, 2, b, c)];
        let mut best = sub1(0);
        let mut best_d = f64::INFINITY;
        for (i, j, p, q) in cands {
            let (s, l) = closest_segment(p, q);
            let v = combine(&[*p, *q], &s, &l);
            if v.norm_squared() < best_d {
                best_d = v.norm_squared();
                let map = [i, j];
                let mut idx = s;
                for k in 0..idx.len {
                    idx.idx[k] = map[idx.idx[k]];
                }
                best = (idx, l);
            }
        }
        return best;
    }
    let v = vb / sum;
    let w = vc / sum;
    (
        Sub { idx: [0, 1, 2], len: 3 },
        Bary { l: [1.0 - v - w, v, w], len: 3 },
    )
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct CoreQuery {
    /// Distance between the hulls, or minus the penetration depth.
    pub distance: f64,
    pub point_a: V3,
    pub point_b: V3,
    /// Unit direction along which moving `b` increases the distance.
    pub normal: V3,
}

pub(crate) enum Gjk {
    Separated(CoreQuery),
    Overlapping(Terminal),
}

#[derive(Debug, Clone)]
pub(crate) struct Terminal(Vec<Support>);

pub(crate) fn gjk(a: &[V3], b: &[V3]) -> Result<Gjk, GeometryError> {
    let mut dir = a[0] - b[0];
    if dir.norm_squared() < 1e-24 {
        dir = V3::x();
    }
    let mut simplex = Simplex::single(support(a, b, &-dir));
    simplex.bary[0] = 1.0;
    let mut v = simplex.pts[0].w;
    let scale = v.norm().max(1.0);
    let touch = 1e-10 * scale;
    for _ in 0..MAX_ITERATIONS {
        let vv = v.norm_squared();
        if vv <= touch * touch {
            return Ok(Gjk::Overlapping(Terminal(simplex.pts[..simplex.len].to_vec())));
        }
        let w = support(a, b, &-v);
        if vv - v.dot(&w.w) <= 1e-12 * vv || simplex.contains(&w.w) {
            return Ok(Gjk::Separated(finish(&simplex, v)));
        }
        simplex.push(w);
        simplex.reduce();
        let nv = simplex.closest();
        if nv.norm_squared() >= vv {
            // no progress: numerical floor reached
            return Ok(Gjk::Separated(finish(&simplex, nv)));
        }
        v = nv;
    }
    Err(GeometryError::IterationCap {
        algorithm: "GJK",
        iterations: MAX_ITERATIONS,
    })
}

fn finish(simplex: &Simplex, v: V3) -> CoreQuery {
    let (pa, pb) = simplex.witnesses();
    let dist = v.norm();
    CoreQuery {
        distance: dist,
        point_a: pa,
        point_b: pb,
        normal: -v / dist,
    }
}

#[derive(Debug, Clone, Copy)]
struct Face {
    v: [usize; 3],
    normal: V3,
    dist: f64,
}

fn make_face(pts: &[Support], v: [usize; 3], interior: &V3) -> Option<Face> {
    let (a, b, c) = (pts[v[0]].w, pts[v[1]].w, pts[v[2]].w);
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len < 1e-14 {
        return None;
    }
    let mut n = n / len;
    let mut v = v;
    if n.dot(&(a - interior)) < 0.0 {
        n = -n;
        v.swap(1, 2);
    }
    Some(Face {
        v,
        normal: n,
        dist: n.dot(&a),
    })
}

/// Expands the terminal GJK simplex into a tetrahedron enclosing the origin.
fn blow_up(a: &[V3], b: &[V3], mut pts: Vec<Support>) -> Option<Vec<Support>> {
    let axes = [V3::x(), V3::y(), V3::z(), -V3::x(), -V3::y(), -V3::z()];
    if pts.len() == 1 {
        let p0 = pts[0].w;
        let best = axes
            .iter()
            .map(|d| support(a, b, d))
            .max_by(|s, t| (s.w - p0).norm_squared().total_cmp(&(t.w - p0).norm_squared()))?;
        if (best.w - p0).norm() < 1e-12 {
            return None;
        }
        pts.push(best);
    }
    if pts.len() == 2 {
        let d = pts[1].w - pts[0].w;
        let least = axes[..3]
            .iter()
            .min_by(|x, y| x.dot(&d).abs().total_cmp(&y.dot(&d).abs()))
            .unwrap();
        let n1 = d.cross(least).normalize();
        let n2 = d.cross(&n1).normalize();
        let line_dist = |s: &Support| {
            let r = s.w - pts[0].w;
            (r - d * (r.dot(&d) / d.norm_squared())).norm()
        };
        let best = [n1, -n1, n2, -n2]
            .iter()
            .map(|n| support(a, b, n))
            .max_by(|s, t| line_dist(s).total_cmp(&line_dist(t)))?;
        if line_dist(&best) < 1e-12 {
            return None;
        }
        pts.push(best);
    }
    if pts.len() == 3 {
        let n = (pts[1].w - pts[0].w).cross(&(pts[2].w - pts[0].w));
        if n.norm() < 1e-14 {
            return None;
        }
        let n = n.normalize();
        let s1 = support(a, b, &n);
        let s2 = support(a, b, &-n);
        let h1 = (s1.w - pts[0].w).dot(&n).abs();
        let h2 = (s2.w - pts[0].w).dot(&n).abs();
        let (best, h) = if h1 >= h2 { (s1, h1) } else { (s2, h2) };
        if h < 1e-12 {
            return None;
        }
        pts.push(best);
    }
    Some(pts)
}

/// Penetration depth of overlapping hulls by polytope expansion, starting
/// from the GJK terminal simplex.
pub(crate) fn epa(a: &[V3], b: &[V3], start: Terminal) -> Result<CoreQuery, GeometryError> {
    let Some(mut pts) = blow_up(a, b, start.0) else {
        // flat Minkowski difference: touching contact
        return Ok(CoreQuery {
            distance: 0.0,
            point_a: a[0],
            point_b: a[0],
            normal: V3::x(),
        });
    };
    let interior = pts.iter().fold(V3::zeros(), |acc, s| acc + s.w) / 4.0;
    let mut faces: Vec<Face> = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]]
        .iter()
        .filter_map(|v| make_face(&pts, *v, &interior))
        .collect();
    if faces.len() < 4 {
        return Ok(CoreQuery {
            distance: 0.0,
            point_a: a[0],
            point_b: a[0],
            normal: V3::x(),
        });
    }
    let scale = pts.iter().map(|s| s.w.norm()).fold(1.0, f64::max);
    let tol = 1e-10 * scale;
    for _ in 0..MAX_ITERATIONS {
        let face = *faces
            .iter()
            .min_by(|x, y| x.dist.total_cmp(&y.dist))
            .expect("polytope has faces");
        let s = support(a, b, &face.normal);
        let gap = s.w.dot(&face.normal) - face.dist;
        if gap <= tol || pts.iter().any(|p| (p.w - s.w).norm_squared() < 1e-24) {
            return Ok(epa_result(&pts, &face));
        }
        let new = pts.len();
        pts.push(s);
        let mut edges: Vec<(usize, usize)> = Vec::new();
        let mut keep = Vec::with_capacity(faces.len() + 4);
        for f in faces.drain(..) {
            if f.normal.dot(&(s.w - pts[f.v[0]].w)) > 1e-14 * scale {
                for (p, q) in [(f.v[0], f.v[1]), (f.v[1], f.v[2]), (f.v[2], f.v[0])] {
                    if let Some(k) = edges.iter().position(|&(x, y)| x == q && y == p) {
                        edges.swap_remove(k);
                    } else {
                        edges.push((p, q));
                    }
                }
            } else {
                keep.push(f);
            }
        }
        if edges.is_empty() {
            return Ok(epa_result(&pts, &faces_or(&keep, face)));
        }
        faces = keep;
        for (p, q) in edges {
            if let Some(f) = make_face(&pts, [p, q, new], &interior) {
                faces.push(f);
            }
        }
        if faces.is_empty() {
            return Ok(epa_result(&pts, &face));
        }
    }
    Err(GeometryError::IterationCap {
        algorithm: "EPA",
        iterations: MAX_ITERATIONS,
    })
}

fn faces_or(faces: &[Face], fallback: Face) -> Face {
    faces
        .iter()
        .min_by(|x, y| x.dist.total_cmp(&y.dist))
        .copied()
        .unwrap_or(fallback)
}

fn epa_result(pts: &[Support], face: &Face) -> CoreQuery {
    let p = face.normal * face.dist;
    let (a, b, c) = (pts[face.v[0]], pts[face.v[1]], pts[face.v[2]]);
    // barycentric coordinates of p in the face triangle
    let v0 = b.w - a.w;
    let v1 = c.w - a.w;
    let v2 = p - a.w;
    let d00 = v0.dot(&v0);
    let d01 = v0.dot(&v1);
    let d11 = v1.dot(&v1);
    let d20 = v2.dot(&v0);
    let d21 = v2.dot(&v1);
    let denom = d00 * d11 - d01 * d01;
    let (l1, l2) = if denom.abs() > 1e-300 {
        ((d11 * d20 - d01 * d21) / denom, (d00 * d21 - d01 * d20) / denom)
    } else {
        (0.0, 0.0)
    };
    let l0 = 1.0 - l1 - l2;
    CoreQuery {
        distance: -face.dist.max(0.0),
        point_a: a.a * l0 + b.a * l1 + c.a * l2,
        point_b: a.b * l0 + b.b * l1 + c.b * l2,
        normal: face.normal,
    }
}
