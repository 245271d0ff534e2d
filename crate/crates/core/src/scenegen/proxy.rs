//! Axis-aligned geometric stand-ins for the indoor object classes.

use rand::Rng;

/// Number of object classes with a geometric proxy.
pub const NUM_PROXY_CLASSES: usize = 6;

pub const CLASS_NAMES: [&str; NUM_PROXY_CLASSES] = ["floor", "wall", "table", "chair", "sofa", "shelf"];

const WOOD: [f64; 3] = [0.55, 0.40, 0.25];
const WHITE: [f64; 3] = [0.85, 0.85, 0.82];
const GRAY: [f64; 3] = [0.45, 0.45, 0.47];
const BLACK: [f64; 3] = [0.15, 0.15, 0.16];
const BEIGE: [f64; 3] = [0.80, 0.72, 0.58];
const BLUE: [f64; 3] = [0.25, 0.35, 0.65];
const RED: [f64; 3] = [0.65, 0.25, 0.30];

/// Finishes an object of each class may have; every object draws one
/// uniformly before per-object jitter. Palettes overlap across classes.
pub const CLASS_PALETTES: [[[f64; 3]; 2]; NUM_PROXY_CLASSES] = [
    [WOOD, GRAY],
    [WHITE, BEIGE],
    [WOOD, WHITE],
    [BLACK, BLUE],
    [RED, GRAY],
    [WOOD, BLACK],
];

/// Per-object color jitter (standard deviation, per channel).
pub const COLOR_JITTER: f64 = 0.05;

pub const TABLE_HEIGHT: f64 = 0.7;

/// A closed axis-aligned box `[lo, hi]`. Degenerate extents model planes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cuboid {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Cuboid {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Self {
        Cuboid { lo, hi }
    }

    fn extent(&self) -> [f64; 3] {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]]
    }

    /// Areas of the visible faces, ordered (-x, +x, -y, +y, -z, +z). The
    /// underside of a solid box resting on the floor is hidden.
    fn face_areas(&self) -> [f64; 6] {
        let [dx, dy, dz] = self.extent();
        let bottom = if dz > 0.0 && self.lo[2] <= 0.0 { 0.0 } else { dx * dy };
        [dy * dz, dy * dz, dx * dz, dx * dz, bottom, dx * dy]
    }

    pub fn area(&self) -> f64 {
        let a = self.face_areas();
        if self.extent().iter().any(|&e| e == 0.0) {
            // A flat box has two coincident faces; count the sheet once.
            a.iter().sum::<f64>() / 2.0
        } else {
            a.iter().sum()
        }
    }

    /// Uniform sample on the boundary surface.
    pub fn sample_surface<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        let areas = self.face_areas();
        let total: f64 = areas.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut face = 5;
        for (i, &a) in areas.iter().enumerate() {
            if pick < a {
                face = i;
                break;
            }
            pick -= a;
        }
        let axis = face / 2;
        let mut p = [0.0; 3];
        for (d, v) in p.iter_mut().enumerate() {
            *v = if d == axis {
                if face % 2 == 0 {
                    self.lo[d]
                } else {
                    self.hi[d]
                }
            } else {
                self.lo[d] + rng.random::<f64>() * (self.hi[d] - self.lo[d])
            };
        }
        p
    }

    /// Distance from `p` to the boundary surface of the box.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        let mut outside = 0.0;
        let mut inside_gap = f64::INFINITY;
        for d in 0..3 {
            let below = self.lo[d] - p[d];
            let above = p[d] - self.hi[d];
            let out = below.max(above).max(0.0);
            outside += out * out;
            inside_gap = inside_gap.min((p[d] - self.lo[d]).abs()).min((self.hi[d] - p[d]).abs());
        }
        if outside > 0.0 {
            outside.sqrt()
        } else {
            inside_gap
        }
    }
}

/// A placed object: one or more cuboids sharing a class label.
#[derive(Debug, Clone)]
pub struct Proxy {
    pub class: usize,
    pub parts: Vec<Cuboid>,
}

impl Proxy {
    /// Places a proxy of `class` uniformly inside a room of the given extent.
    pub fn place<R: Rng>(class: usize, room: [f64; 3], rng: &mut R) -> Proxy {
        fn at<R: Rng>(rng: &mut R, size: f64, room_len: f64) -> f64 {
            let free = (room_len - size).max(0.0);
            rng.random::<f64>() * free
        }
        let parts = match class {
            0 => {
                let (w, d) = (room[0] * 0.6, room[1] * 0.6);
                let (x, y) = (at(rng, w, room[0]), at(rng, d, room[1]));
                vec![Cuboid::new([x, y, 0.0], [x + w, y + d, 0.0])]
            }
            1 => {
                let len = 3.0_f64.min(room[0]).min(room[1]);
                let h = 2.5_f64.min(room[2]);
                let side = rng.random_range(0..4);
                match side {
                    0 | 1 => {
                        let x = if side == 0 { 0.0 } else { room[0] };
                        let y = at(rng, len, room[1]);
                        vec![Cuboid::new([x, y, 0.0], [x, y + len, h])]
                    }
                    _ => {
                        let y = if side == 2 { 0.0 } else { room[1] };
                        let x = at(rng, len, room[0]);
                        vec![Cuboid::new([x, y, 0.0], [x + len, y, h])]
                    }
                }
            }
            2 => {
                let (w, d, t) = (1.2, 0.8, 0.05);
                let (x, y) = (at(rng, w, room[0]), at(rng, d, room[1]));
                vec![Cuboid::new(
                    [x, y, TABLE_HEIGHT - t / 2.0],
                    [x + w, y + d, TABLE_HEIGHT + t / 2.0],
                )]
            }
            3 => {
                let s = 0.45;
                let (x, y) = (at(rng, s, room[0]), at(rng, s, room[1]));
                vec![
                    Cuboid::new([x, y, 0.42], [x + s, y + s, 0.47]),
                    Cuboid::new([x, y + s - 0.05, 0.47], [x + s, y + s, 0.95]),
                ]
            }
            4 => {
                let (w, d, h) = (2.0, 0.9, 0.8);
                let (x, y) = (at(rng, w, room[0]), at(rng, d, room[1]));
                vec![Cuboid::new([x, y, 0.0], [x + w, y + d, h])]
            }
            _ => {
                let (w, d, h) = (0.8, 0.35, 1.8);
                let (x, y) = (at(rng, w, room[0]), at(rng, d, room[1]));
                vec![Cuboid::new([x, y, 0.0], [x + w, y + d, h])]
            }
        };
        Proxy { class, parts }
    }

    /// Furniture sits on the floor and occupies floor area; floors and walls
    /// do not.
    pub fn is_furniture(&self) -> bool {
        self.class >= 2
    }

    /// Axis-aligned XY bounding box `(lo, hi)` of all parts.
    pub fn footprint(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for part in &self.parts {
            for d in 0..2 {
                lo[d] = lo[d].min(part.lo[d]);
                hi[d] = hi[d].max(part.hi[d]);
            }
        }
        (lo, hi)
    }

    /// True when the XY footprints, each grown by `margin`, intersect.
    pub fn footprints_overlap(&self, other: &Proxy, margin: f64) -> bool {
        let (a_lo, a_hi) = self.footprint();
        let (b_lo, b_hi) = other.footprint();
        (0..2).all(|d| a_lo[d] < b_hi[d] + margin && b_lo[d] < a_hi[d] + margin)
    }

    pub fn sample_surface<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        if self.parts.len() == 1 {
            return self.parts[0].sample_surface(rng);
        }
        let total: f64 = self.parts.iter().map(Cuboid::area).sum();
        let mut pick = rng.random::<f64>() * total;
        for part in &self.parts {
            let a = part.area();
            if pick < a {
                return part.sample_surface(rng);
            }
            pick -= a;
        }
        self.parts[self.parts.len() - 1].sample_surface(rng)
    }

    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        self.parts
            .iter()
            .map(|c| c.surface_distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn surface_samples_lie_on_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Cuboid::new([0.0, 0.0, 0.0], [1.0, 2.0, 0.5]);
        for _ in 0..200 {
            let p = c.sample_surface(&mut rng);
            assert!(c.surface_distance(p) < 1e-12);
        }
    }

    #[test]
    fn flat_cuboid_area_counts_sheet_once() {
        let c = Cuboid::new([0.0, 0.0, 0.0], [2.0, 3.0, 0.0]);
        assert_eq!(c.area(), 6.0);
    }

    #[test]
    fn floor_resting_box_hides_its_underside() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Cuboid::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        assert_eq!(c.area(), 5.0);
        for _ in 0..500 {
            let p = c.sample_surface(&mut rng);
            assert!(p[2] > 0.0 || p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0);
        }
        let raised = Cuboid::new([0.0, 0.0, 0.5], [1.0, 1.0, 1.5]);
        assert_eq!(raised.area(), 6.0);
    }

    #[test]
    fn footprint_overlap_respects_margin() {
        let a = Proxy { class: 2, parts: vec![Cuboid::new([0.0, 0.0, 0.7], [1.0, 1.0, 0.8])] };
        let b = Proxy { class: 4, parts: vec![Cuboid::new([1.05, 0.0, 0.0], [2.0, 1.0, 0.8])] };
        assert!(!a.footprints_overlap(&b, 0.0));
        assert!(a.footprints_overlap(&b, 0.1));
        assert!(b.footprints_overlap(&a, 0.1));
    }

    #[test]
    fn proxies_fit_inside_room() {
        let room = [6.0, 5.0, 3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for class in 0..NUM_PROXY_CLASSES {
            for _ in 0..20 {
                let proxy = Proxy::place(class, room, &mut rng);
                for part in &proxy.parts {
                    for d in 0..3 {
                        assert!(part.lo[d] >= 0.0 && part.hi[d] <= room[d] + 1e-12);
                    }
                }
            }
        }
    }
}
