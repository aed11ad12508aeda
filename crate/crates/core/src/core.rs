//! Foundational domain types and 2D geometry shared by all modules.
//!
//! Coordinate convention: `x` is the column index, `y` the row index, and the
//! center of pixel (0, 0) sits at coordinate (0.0, 0.0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D point in pixel coordinates (sub-pixel allowed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Row-major 2D scalar field. After `standardize()` all values lie in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "data length must be width*height");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Interleaved RGB image with channel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 3 * width * height, "data length must be 3*width*height");
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64, f64) {
        let i = 3 * (y * self.width + x);
        (self.data[i], self.data[i + 1], self.data[i + 2])
    }
}

/// Either image flavour; the pipeline converts to gray on entry.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageData {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl ImageData {
    pub fn width(&self) -> usize {
        match self {
            ImageData::Gray(g) => g.width,
            ImageData::Rgb(c) => c.width,
        }
    }

    pub fn height(&self) -> usize {
        match self {
            ImageData::Gray(g) => g.height,
            ImageData::Rgb(c) => c.height,
        }
    }
}

/// Ordered landmark list; index i in a source set corresponds to index i in
/// the paired target set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / n, sy / n)
    }
}

/// FIRE category or synthetic origin of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    A,
    P,
    S,
    Synthetic,
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Category::A => write!(f, "A"),
            Category::P => write!(f, "P"),
            Category::S => write!(f, "S"),
            Category::Synthetic => write!(f, "X"),
        }
    }
}

/// A source/target image pair with homologous landmarks.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub id: String,
    pub category: Category,
    pub source: ImageData,
    pub target: ImageData,
    pub source_landmarks: LandmarkSet,
    pub target_landmarks: LandmarkSet,
}

impl ImagePair {
    pub fn validate(&self) -> Result<()> {
        if self.source_landmarks.len() != self.target_landmarks.len() {
            return Err(Error::CountMismatch(
                self.source_landmarks.len(),
                self.target_landmarks.len(),
            ));
        }
        Ok(())
    }
}

/// Per-landmark displacement vectors in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Displacements {
    pub vectors: Vec<(f64, f64)>,
}

impl Displacements {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

const SINGULAR_DET_THRESHOLD: f64 = 1e-12;

/// 2x3 affine transform: x' = a11*x + a12*y + tx, y' = a21*x + a22*y + ty.
/// Stored as [a11, a12, tx, a21, a22, ty].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2D {
    pub m: [f64; 6],
}

impl Affine2D {
    pub fn new(m: [f64; 6]) -> Self {
        Self { m }
    }

    pub fn identity() -> Self {
        Self {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [1.0, 0.0, tx, 0.0, 1.0, ty],
        }
    }

    /// Rotation by `theta` radians about the origin, counter-clockwise in
    /// (x right, y down) index space.
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            m: [c, -s, 0.0, s, c, 0.0],
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self {
            m: [sx, 0.0, 0.0, 0.0, sy, 0.0],
        }
    }

    /// Horizontal shear: x' = x + h*y.
    pub fn shear(h: f64) -> Self {
        Self {
            m: [1.0, h, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn det(&self) -> f64 {
        self.m[0] * self.m[4] - self.m[1] * self.m[3]
    }

    pub fn apply(&self, p: Point) -> Point {
        Point::new(
            self.m[0] * p.x + self.m[1] * p.y + self.m[2],
            self.m[3] * p.x + self.m[4] * p.y + self.m[5],
        )
    }

    pub fn apply_set(&self, pts: &LandmarkSet) -> LandmarkSet {
        LandmarkSet::new(pts.points.iter().map(|&p| self.apply(p)).collect())
    }

    /// self ∘ other: the returned transform applies `other` first.
    pub fn compose(&self, other: &Affine2D) -> Affine2D {
        let a = &self.m;
        let b = &other.m;
        Affine2D::new([
            a[0] * b[0] + a[1] * b[3],
            a[0] * b[1] + a[1] * b[4],
            a[0] * b[2] + a[1] * b[5] + a[2],
            a[3] * b[0] + a[4] * b[3],
            a[3] * b[1] + a[4] * b[4],
            a[3] * b[2] + a[4] * b[5] + a[5],
        ])
    }

    pub fn invert(&self) -> Result<Affine2D> {
        let det = self.det();
        if det.abs() <= SINGULAR_DET_THRESHOLD {
            return Err(Error::SingularTransform { det });
        }
        let [a, b, tx, c, d, ty] = self.m;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Ok(Affine2D::new([
            ia,
            ib,
            -(ia * tx + ib * ty),
            ic,
            id,
            -(ic * tx + id * ty),
        ]))
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn apply_identity() {
        let p = Affine2D::identity().apply(Point::new(5.0, 7.0));
        assert_eq!(p, Point::new(5.0, 7.0));
    }

    #[test]
    fn apply_translation_of_origin() {
        let t = Affine2D::translation(3.0, -2.0);
        assert_eq!(t.apply(Point::new(0.0, 0.0)), Point::new(3.0, -2.0));
    }

    #[test]
    fn apply_quarter_rotation() {
        let r = Affine2D::new([0.0, -1.0, 0.0, 1.0, 0.0, 0.0]);
        let p = r.apply(Point::new(1.0, 0.0));
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn invert_identity_and_translation() {
        let i = Affine2D::identity().invert().unwrap();
        assert_eq!(i, Affine2D::identity());
        let t = Affine2D::translation(3.0, -2.0).invert().unwrap();
        assert_eq!(t, Affine2D::translation(-3.0, 2.0));
    }

    #[test]
    fn invert_uniform_scale() {
        let inv = Affine2D::scaling(2.0, 2.0).invert().unwrap();
        for (got, want) in inv.m.iter().zip(Affine2D::scaling(0.5, 0.5).m.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn invert_singular_rejected() {
        let s = Affine2D::new([1.0, 2.0, 0.0, 2.0, 4.0, 0.0]);
        assert!(matches!(
            s.invert(),
            Err(crate::error::Error::SingularTransform { .. })
        ));
    }

    #[test]
    fn compose_identity_and_translations() {
        let x = Affine2D::new([2.0, 0.5, 1.0, -0.5, 3.0, -4.0]);
        assert_eq!(Affine2D::identity().compose(&x), x);
        let t = Affine2D::translation(1.0, 0.0).compose(&Affine2D::translation(0.0, 1.0));
        assert_eq!(t, Affine2D::translation(1.0, 1.0));
    }

    #[test]
    fn compose_two_quarter_rotations() {
        let r = Affine2D::new([0.0, -1.0, 0.0, 1.0, 0.0, 0.0]);
        let rr = r.compose(&r);
        let want = [-1.0, 0.0, 0.0, 0.0, -1.0, 0.0];
        for (got, want) in rr.m.iter().zip(want.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    fn arb_transform() -> impl Strategy<Value = Affine2D> {
        (
            -2.0f64..2.0,
            -2.0f64..2.0,
            -100.0f64..100.0,
            -2.0f64..2.0,
            -2.0f64..2.0,
            -100.0f64..100.0,
        )
            .prop_map(|(a, b, tx, c, d, ty)| Affine2D::new([a, b, tx, c, d, ty]))
    }

    fn arb_point() -> impl Strategy<Value = Point> {
        (-500.0f64..500.0, -500.0f64..500.0).prop_map(|(x, y)| Point::new(x, y))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn compose_matches_sequential_application(a in arb_transform(), b in arb_transform(), p in arb_point()) {
            let via_compose = a.compose(&b).apply(p);
            let sequential = a.apply(b.apply(p));
            prop_assert!((via_compose.x - sequential.x).abs() < 1e-9);
            prop_assert!((via_compose.y - sequential.y).abs() < 1e-9);
        }

        #[test]
        fn invert_round_trips_points(a in arb_transform(), p in arb_point()) {
            prop_assume!(a.det().abs() > 1e-3);
            let q = a.invert().unwrap().apply(a.apply(p));
            prop_assert!((q.x - p.x).abs() < 1e-6);
            prop_assert!((q.y - p.y).abs() < 1e-6);
        }
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let t = Affine2D::new([1.2, 0.3, 5.0, -0.2, 0.9, -7.0]);
        let round = t.compose(&t.invert().unwrap());
        for (got, want) in round.m.iter().zip(Affine2D::identity().m.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-9);
        }
    }
}
