//! Exact N-adic box geometry.
//!
//! A box at level `n` with integer coordinates `(i, j)` is the closed square
//! `[i/Nⁿ, (i+1)/Nⁿ] × [j/Nⁿ, (j+1)/Nⁿ]`. Nothing in this module touches
//! floating point: coordinates are exact rationals and all comparisons reduce
//! to integer comparisons.

use std::fmt;

use num_rational::Ratio;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact rational number used for all box geometry.
pub type Rational = Ratio<i128>;

/// `base^exp`, or `None` on overflow.
pub fn checked_pow(base: u32, exp: u32) -> Option<u64> {
    (base as u64).checked_pow(exp)
}

/// `N^{-k}` as an exact rational.
pub fn inv_pow(base: u32, k: u32) -> Rational {
    Rational::new(1, i128::from(base).pow(k))
}

/// Renders a rational as `"num/den"` (always with a denominator).
pub fn rational_to_string(r: &Rational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// Parses `"num/den"` or a bare integer.
pub fn parse_rational(s: &str) -> Option<Rational> {
    match s.split_once('/') {
        Some((n, d)) => {
            let n: i128 = n.trim().parse().ok()?;
            let d: i128 = d.trim().parse().ok()?;
            (d != 0).then(|| Rational::new(n, d))
        }
        None => s.trim().parse::<i128>().ok().map(Rational::from_integer),
    }
}

/// Serde adapter writing rationals as `"num/den"` strings.
pub mod rational_str {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&rational_to_string(r))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Rational, D::Error> {
        let s = String::deserialize(d)?;
        parse_rational(&s).ok_or_else(|| serde::de::Error::custom(format!("bad rational {s:?}")))
    }
}

pub mod rational_opt_str {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        r: &Option<Rational>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        match r {
            Some(r) => s.serialize_some(&rational_to_string(r)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Option<Rational>, D::Error> {
        match Option::<String>::deserialize(d)? {
            None => Ok(None),
            Some(s) => parse_rational(&s)
                .map(Some)
                .ok_or_else(|| serde::de::Error::custom(format!("bad rational {s:?}"))),
        }
    }
}

pub mod rational_vec_str {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Rational], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(rational_to_string))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<Rational>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| {
                parse_rational(s)
                    .ok_or_else(|| serde::de::Error::custom(format!("bad rational {s:?}")))
            })
            .collect()
    }
}

/// Identifier of one box of the N-adic hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoxAddress {
    pub base: u32,
    pub level: u32,
    pub i: u64,
    pub j: u64,
}

impl BoxAddress {
    pub fn root(base: u32) -> Self {
        BoxAddress {
            base,
            level: 0,
            i: 0,
            j: 0,
        }
    }

    pub fn new(base: u32, level: u32, i: u64, j: u64) -> Result<Self> {
        if base < 2 {
            return Err(Error::OutOfRange(format!("base {base} < 2")));
        }
        let side = checked_pow(base, level)
            .ok_or_else(|| Error::OutOfRange(format!("{base}^{level} overflows")))?;
        if i >= side || j >= side {
            return Err(Error::OutOfRange(format!(
                "({i}, {j}) outside level-{level} grid of side {side}"
            )));
        }
        Ok(BoxAddress { base, level, i, j })
    }

    /// Number of boxes per side at this level, `N^level`.
    pub fn grid_side(&self) -> u64 {
        checked_pow(self.base, self.level).expect("address constructed with valid level")
    }

    pub fn rect(&self) -> Rect {
        let d = self.grid_side() as i128;
        let (i, j) = (self.i as i128, self.j as i128);
        Rect {
            x0: Rational::new(i, d),
            y0: Rational::new(j, d),
            x1: Rational::new(i + 1, d),
            y1: Rational::new(j + 1, d),
        }
    }

    /// The `N²` children at the next level, row-major: `y` outer, `x` inner.
    pub fn subdivide(&self) -> Vec<BoxAddress> {
        let n = self.base as u64;
        let mut out = Vec::with_capacity((n * n) as usize);
        for dj in 0..n {
            for di in 0..n {
                out.push(BoxAddress {
                    base: self.base,
                    level: self.level + 1,
                    i: self.i * n + di,
                    j: self.j * n + dj,
                });
            }
        }
        out
    }

    pub fn parent(&self) -> Option<BoxAddress> {
        (self.level > 0).then(|| BoxAddress {
            base: self.base,
            level: self.level - 1,
            i: self.i / self.base as u64,
            j: self.j / self.base as u64,
        })
    }

    /// Row-major position of this box among its parent's children.
    pub fn child_index(&self) -> u32 {
        let n = self.base as u64;
        ((self.j % n) * n + (self.i % n)) as u32
    }

    /// The ancestor at `level` (or `self` when `level == self.level`).
    pub fn ancestor(&self, level: u32) -> Option<BoxAddress> {
        if level > self.level {
            return None;
        }
        let scale = checked_pow(self.base, self.level - level)?;
        Some(BoxAddress {
            base: self.base,
            level,
            i: self.i / scale,
            j: self.j / scale,
        })
    }

    /// True when `other` is this box or one of its descendants.
    pub fn contains(&self, other: &BoxAddress) -> bool {
        other.base == self.base
            && other.level >= self.level
            && other.ancestor(self.level).as_ref() == Some(self)
    }

    /// Breadth-first index of this box in the full N-ary tree. Unique per
    /// address; `None` when it does not fit in 64 bits.
    pub fn canonical_code(&self) -> Option<u64> {
        let n2 = (self.base as u64).checked_mul(self.base as u64)?;
        let mut offset: u64 = 0;
        let mut layer: u64 = 1;
        for _ in 0..self.level {
            offset = offset.checked_add(layer)?;
            layer = layer.checked_mul(n2)?;
        }
        let side = checked_pow(self.base, self.level)?;
        offset.checked_add(self.j.checked_mul(side)?.checked_add(self.i)?)
    }

    /// Integer rectangle `[x0, x1) × [y0, y1)` of this box measured in
    /// cells of level `fine` (which must be ≥ `self.level`).
    pub fn cells_at(&self, fine: u32) -> (u64, u64, u64, u64) {
        let s = checked_pow(self.base, fine - self.level).expect("fine level overflow");
        (self.i * s, self.j * s, (self.i + 1) * s, (self.j + 1) * s)
    }
}

impl fmt::Display for BoxAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{}]", self.level, self.i, self.j)
    }
}

/// Closed axis-aligned rectangle with exact rational corners.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    #[serde(with = "rational_str")]
    pub x0: Rational,
    #[serde(with = "rational_str")]
    pub y0: Rational,
    #[serde(with = "rational_str")]
    pub x1: Rational,
    #[serde(with = "rational_str")]
    pub y1: Rational,
}

impl Rect {
    pub fn new(x0: Rational, y0: Rational, x1: Rational, y1: Rational) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::OutOfRange(format!(
                "degenerate rectangle ({x0},{y0})-({x1},{y1})"
            )));
        }
        Ok(Rect { x0, y0, x1, y1 })
    }

    pub fn from_ints(x0: i128, y0: i128, x1: i128, y1: i128) -> Result<Self> {
        Rect::new(x0.into(), y0.into(), x1.into(), y1.into())
    }

    pub fn unit() -> Self {
        Rect {
            x0: Rational::zero(),
            y0: Rational::zero(),
            x1: Rational::one(),
            y1: Rational::one(),
        }
    }

    pub fn width(&self) -> Rational {
        self.x1 - self.x0
    }

    pub fn height(&self) -> Rational {
        self.y1 - self.y0
    }

    pub fn area(&self) -> Rational {
        self.width() * self.height()
    }

    pub fn closed_intersects(&self, other: &Rect) -> bool {
        linf_distance(self, other).is_zero()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.x0 <= other.x0 && other.x1 <= self.x1 && self.y0 <= other.y0 && other.y1 <= self.y1
    }
}

/// Exact L∞ distance between two closed rectangles; zero iff they meet.
pub fn linf_distance(a: &Rect, b: &Rect) -> Rational {
    let zero = Rational::zero();
    let gx = (b.x0 - a.x1).max(a.x0 - b.x1).max(zero);
    let gy = (b.y0 - a.y1).max(a.y0 - b.y1).max(zero);
    gx.max(gy)
}

/// L∞ diameter of a union of rectangles.
pub fn diameter<'a, I>(rects: I) -> Result<Rational>
where
    I: IntoIterator<Item = &'a Rect>,
{
    let mut it = rects.into_iter();
    let first = it
        .next()
        .ok_or(Error::EmptyRegion("diameter of empty set"))?;
    let (mut x0, mut y0, mut x1, mut y1) = (first.x0, first.y0, first.x1, first.y1);
    for r in it {
        x0 = x0.min(r.x0);
        y0 = y0.min(r.y0);
        x1 = x1.max(r.x1);
        y1 = y1.max(r.y1);
    }
    Ok((x1 - x0).max(y1 - y0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::Signed;
    use proptest::prelude::*;

    fn r(n: i128, d: i128) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn root_of_base_three_has_nine_children() {
        let kids = BoxAddress::root(3).subdivide();
        assert_eq!(kids.len(), 9);
        assert!(kids.iter().all(|k| k.level == 1));
        assert_eq!(kids[0], BoxAddress::new(3, 1, 0, 0).unwrap());
        assert_eq!(kids[1], BoxAddress::new(3, 1, 1, 0).unwrap());
        assert_eq!(kids[3], BoxAddress::new(3, 1, 0, 1).unwrap());
    }

    #[test]
    fn dyadic_children_at_level_six() {
        let b = BoxAddress::new(2, 5, 0, 0).unwrap();
        let kids = b.subdivide();
        assert_eq!(kids.len(), 4);
        for k in &kids {
            assert_eq!(k.level, 6);
            assert!(k.i <= 1 && k.j <= 1);
            assert_eq!(k.parent(), Some(b));
        }
    }

    #[test]
    fn distance_examples() {
        let unit = Rect::unit();
        assert_eq!(linf_distance(&unit, &unit), Rational::zero());
        let shifted = Rect::from_ints(2, 0, 3, 1).unwrap();
        assert_eq!(linf_distance(&unit, &shifted), Rational::one());

        // corner-sharing level-1 boxes of the N = 6 grid
        let a = BoxAddress::new(6, 1, 2, 2).unwrap().rect();
        let b = BoxAddress::new(6, 1, 3, 3).unwrap().rect();
        assert_eq!((a.x1, a.y1), (b.x0, b.y0));
        assert_eq!(linf_distance(&a, &b), Rational::zero());
    }

    #[test]
    fn diameter_examples() {
        assert_eq!(diameter([&Rect::unit()]).unwrap(), Rational::one());
        let a = Rect::unit();
        let b = Rect::from_ints(3, 0, 4, 1).unwrap();
        // brute force over corner pairs
        let corners = |q: &Rect| vec![(q.x0, q.y0), (q.x0, q.y1), (q.x1, q.y0), (q.x1, q.y1)];
        let mut brute = Rational::zero();
        for p in corners(&a).into_iter().chain(corners(&b)) {
            for q in corners(&a).into_iter().chain(corners(&b)) {
                let d = (p.0 - q.0).abs().max((p.1 - q.1).abs());
                brute = brute.max(d);
            }
        }
        assert_eq!(brute, Rational::from_integer(4));
        assert_eq!(diameter([&a, &b]).unwrap(), brute);

        let parent = BoxAddress::new(5, 2, 7, 3).unwrap();
        let kids: Vec<Rect> = parent.subdivide().iter().map(|k| k.rect()).collect();
        assert_eq!(diameter(kids.iter()).unwrap(), parent.rect().width());
        assert!(matches!(
            diameter(std::iter::empty::<&Rect>()),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn canonical_codes_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        let mut frontier = vec![BoxAddress::root(3)];
        for _ in 0..4 {
            let mut next = vec![];
            for b in &frontier {
                assert!(seen.insert(b.canonical_code().unwrap()));
                next.extend(b.subdivide());
            }
            frontier = next;
        }
        assert_eq!(BoxAddress::root(3).canonical_code(), Some(0));
        assert_eq!(
            BoxAddress::new(3, 1, 0, 0).unwrap().canonical_code(),
            Some(1)
        );
    }

    #[test]
    fn rational_strings_round_trip() {
        let x = r(-6, 36);
        assert_eq!(rational_to_string(&x), "-1/6");
        assert_eq!(parse_rational("-1/6"), Some(x));
        assert_eq!(parse_rational("3"), Some(Rational::from_integer(3)));
        assert_eq!(parse_rational("1/0"), None);
    }

    fn arb_address() -> impl Strategy<Value = BoxAddress> {
        (2u32..7, 0u32..5).prop_flat_map(|(n, lvl)| {
            let side = (n as u64).pow(lvl);
            (Just(n), Just(lvl), 0..side, 0..side)
                .prop_map(|(n, l, i, j)| BoxAddress::new(n, l, i, j).unwrap())
        })
    }

    fn arb_rect() -> impl Strategy<Value = Rect> {
        (-20i128..20, -20i128..20, 1i128..10, 1i128..10, 1i128..5).prop_map(|(x, y, w, h, d)| {
            Rect::new(r(x, d), r(y, d), r(x + w, d), r(y + h, d)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn children_tile_parent(b in arb_address()) {
            let kids = b.subdivide();
            let parent = b.rect();
            let area: Rational = kids.iter().map(|k| k.rect().area()).sum();
            prop_assert_eq!(area, parent.area());
            for k in &kids {
                prop_assert!(parent.contains_rect(&k.rect()));
                prop_assert!(b.contains(k));
            }
            // pairwise interiors disjoint: overlap area is zero
            for (a, c) in kids.iter().zip(kids.iter().skip(1)) {
                let (ra, rc) = (a.rect(), c.rect());
                let ox = (ra.x1.min(rc.x1) - ra.x0.max(rc.x0)).max(Rational::zero());
                let oy = (ra.y1.min(rc.y1) - ra.y0.max(rc.y0)).max(Rational::zero());
                prop_assert_eq!(ox * oy, Rational::zero());
            }
            let rects: Vec<Rect> = kids.iter().map(|k| k.rect()).collect();
            prop_assert_eq!(diameter(rects.iter()).unwrap(), parent.width());
        }

        #[test]
        fn distance_is_symmetric_and_triangular(a in arb_rect(), b in arb_rect(), c in arb_rect()) {
            prop_assert_eq!(linf_distance(&a, &b), linf_distance(&b, &a));
            // closed sets: d(a,c) ≤ d(a,b) + diam(b) + d(b,c)
            let db = b.width().max(b.height());
            prop_assert!(linf_distance(&a, &c) <= linf_distance(&a, &b) + db + linf_distance(&b, &c));
            prop_assert!(linf_distance(&a, &b) >= Rational::zero());
        }
    }
}
