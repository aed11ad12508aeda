//! Dataset ingestion and on-disk formats: binary PGM/PPM images,
//! whitespace-separated landmark files, and the paired-directory layout
//! used both for converted FIRE data and for generated synthetic datasets.
//!
//! Layout: `<images_dir>/<id>_1.<ext>` and `<id>_2.<ext>` for the source and
//! target image, `<ground_truth_dir>/control_points_<id>_1_2.txt` with one
//! `x_src y_src x_tgt y_tgt` row per landmark. The category is parsed from
//! the id's leading letter (A/P/S, X for synthetic).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::core::{
    Category, GrayImage, ImageData, ImagePair, LandmarkSet, Point, RgbImage,
};
use crate::error::{Error, Result};

/// Landmark coordinate origin convention of the ground-truth files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordinateOrigin {
    ZeroBased,
    OneBased,
}

/// Column order of the four-number ground-truth rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnOrder {
    SourceFirst,
    TargetFirst,
}

#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub images_dir: PathBuf,
    pub ground_truth_dir: PathBuf,
    pub coordinate_origin: CoordinateOrigin,
    pub column_order: ColumnOrder,
}

impl DatasetLayout {
    pub fn new(images_dir: impl Into<PathBuf>, ground_truth_dir: impl Into<PathBuf>) -> Self {
        Self {
            images_dir: images_dir.into(),
            ground_truth_dir: ground_truth_dir.into(),
            coordinate_origin: CoordinateOrigin::ZeroBased,
            column_order: ColumnOrder::SourceFirst,
        }
    }

    /// Conventional layout rooted at one directory.
    pub fn rooted(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref();
        Self::new(root.join("images"), root.join("ground_truth"))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::IoFailure {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Read one whitespace-delimited token from a PNM header, skipping comments.
fn read_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() {
        let b = bytes[*pos];
        if b == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    } else {
        None
    }
}

/// Decode a binary PGM (P5) or PPM (P6) file; 8-bit samples map to [0, 1]
/// via sample/maxval.
pub fn load_image(path: &Path) -> Result<ImageData> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;

    let corrupt = |reason: &str| Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let magic = read_token(&bytes, &mut pos).ok_or_else(|| corrupt("empty file"))?;
    let channels = match magic.as_str() {
        "P5" => 1usize,
        "P6" => 3usize,
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("magic {other:?}, only binary P5/P6 supported"),
            })
        }
    };
    let parse_dim = |tok: Option<String>| -> Result<usize> {
        tok.and_then(|t| t.parse::<usize>().ok())
            .filter(|&v| v >= 1)
            .ok_or_else(|| corrupt("bad header field"))
    };
    let width = parse_dim(read_token(&bytes, &mut pos))?;
    let height = parse_dim(read_token(&bytes, &mut pos))?;
    let maxval = parse_dim(read_token(&bytes, &mut pos))?;
    if maxval > 255 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "16-bit samples not supported".into(),
        });
    }
    // Single whitespace byte after maxval, then the raster.
    pos += 1;
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(corrupt("truncated pixel stream"));
    }
    let data: Vec<f64> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok(if channels == 1 {
        ImageData::Gray(GrayImage::new(width, height, data))
    } else {
        ImageData::Rgb(RgbImage::new(width, height, data))
    })
}

/// Write a gray image as binary PGM, mapping [-1, 1] linearly to [0, 255].
pub fn save_image(img: &GrayImage, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(32 + img.data.len());
    out.extend_from_slice(format!("P5\n{} {}\n255\n", img.width, img.height).as_bytes());
    for &v in &img.data {
        let byte = ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8;
        out.push(byte);
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// One "x y" row per landmark, full round-trip decimal precision.
pub fn save_points(pts: &LandmarkSet, path: &Path) -> Result<()> {
    let mut text = String::new();
    for p in &pts.points {
        text.push_str(&format!("{} {}\n", p.x, p.y));
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn load_points(path: &Path) -> Result<LandmarkSet> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut points = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::MalformedGroundTruth {
                path: path.to_path_buf(),
                line: ln + 1,
                reason: format!("expected 2 numeric fields, found {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::MalformedGroundTruth {
                path: path.to_path_buf(),
                line: ln + 1,
                reason: format!("not a number: {s:?}"),
            })
        };
        points.push(Point::new(parse(fields[0])?, parse(fields[1])?));
    }
    Ok(LandmarkSet::new(points))
}

/// Parse one ground-truth correspondence file: four numbers per row.
fn load_ground_truth(
    path: &Path,
    layout: &DatasetLayout,
) -> Result<(LandmarkSet, LandmarkSet)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let offset = match layout.coordinate_origin {
        CoordinateOrigin::ZeroBased => 0.0,
        CoordinateOrigin::OneBased => -1.0,
    };
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::MalformedGroundTruth {
                path: path.to_path_buf(),
                line: ln + 1,
                reason: format!("expected 4 numeric fields, found {}", fields.len()),
            });
        }
        let mut nums = [0.0f64; 4];
        for (i, f) in fields.iter().enumerate() {
            nums[i] = f.parse().map_err(|_| Error::MalformedGroundTruth {
                path: path.to_path_buf(),
                line: ln + 1,
                reason: format!("not a number: {f:?}"),
            })?;
        }
        let (a, b) = (
            Point::new(nums[0] + offset, nums[1] + offset),
            Point::new(nums[2] + offset, nums[3] + offset),
        );
        match layout.column_order {
            ColumnOrder::SourceFirst => {
                src.push(a);
                tgt.push(b);
            }
            ColumnOrder::TargetFirst => {
                src.push(b);
                tgt.push(a);
            }
        }
    }
    Ok((LandmarkSet::new(src), LandmarkSet::new(tgt)))
}

fn category_of(id: &str) -> Result<Category> {
    let prefix = id.chars().next().unwrap_or('?');
    match prefix {
        'A' => Ok(Category::A),
        'P' => Ok(Category::P),
        'S' => Ok(Category::S),
        'X' => Ok(Category::Synthetic),
        _ => Err(Error::UnknownCategory {
            id: id.to_string(),
            prefix,
        }),
    }
}

fn ground_truth_path(layout: &DatasetLayout, id: &str) -> PathBuf {
    layout
        .ground_truth_dir
        .join(format!("control_points_{id}_1_2.txt"))
}

fn load_one_pair(layout: &DatasetLayout, id: &str, source_path: &Path) -> Result<ImagePair> {
    let category = category_of(id)?;
    let ext = source_path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("pgm");
    let target_path = layout.images_dir.join(format!("{id}_2.{ext}"));
    if !target_path.exists() {
        return Err(Error::MissingFile(target_path));
    }
    let source = load_image(source_path)?;
    let target = load_image(&target_path)?;
    let (source_landmarks, target_landmarks) =
        load_ground_truth(&ground_truth_path(layout, id), layout)?;
    let pair = ImagePair {
        id: id.to_string(),
        category,
        source,
        target,
        source_landmarks,
        target_landmarks,
    };
    pair.validate()?;
    Ok(pair)
}

fn scan_ids(layout: &DatasetLayout) -> Result<BTreeMap<String, PathBuf>> {
    if !layout.images_dir.is_dir() {
        return Err(Error::MissingFile(layout.images_dir.clone()));
    }
    let mut ids = BTreeMap::new();
    for entry in std::fs::read_dir(&layout.images_dir).map_err(io_err(&layout.images_dir))? {
        let entry = entry.map_err(io_err(&layout.images_dir))?;
        let path = entry.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(id) = stem.strip_suffix("_1") {
            ids.insert(id.to_string(), path);
        }
    }
    Ok(ids)
}

/// Load every pair, failing on the first error. Pairs are returned sorted
/// by id.
pub fn load_fire(layout: &DatasetLayout) -> Result<Vec<ImagePair>> {
    scan_ids(layout)?
        .iter()
        .map(|(id, path)| load_one_pair(layout, id, path))
        .collect()
}

/// Lenient variant: returns every loadable pair plus the per-pair errors,
/// never a silently truncated dataset.
pub fn load_fire_lenient(layout: &DatasetLayout) -> Result<(Vec<ImagePair>, Vec<Error>)> {
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (id, path) in scan_ids(layout)? {
        match load_one_pair(layout, &id, &path) {
            Ok(p) => pairs.push(p),
            Err(e) => errors.push(e),
        }
    }
    Ok((pairs, errors))
}

fn gray_for_save(img: &ImageData) -> GrayImage {
    match img {
        ImageData::Gray(g) => g.clone(),
        ImageData::Rgb(c) => crate::imageops::to_gray(c, crate::imageops::GrayMode::GreenChannel),
    }
}

/// Write one pair (plus optional ground-truth transform) in the dataset
/// layout, creating directories as needed.
pub fn save_pair(
    layout: &DatasetLayout,
    pair: &ImagePair,
    truth: Option<&crate::core::Affine2D>,
) -> Result<()> {
    std::fs::create_dir_all(&layout.images_dir).map_err(io_err(&layout.images_dir))?;
    std::fs::create_dir_all(&layout.ground_truth_dir).map_err(io_err(&layout.ground_truth_dir))?;
    let id = &pair.id;
    save_image(
        &gray_for_save(&pair.source),
        &layout.images_dir.join(format!("{id}_1.pgm")),
    )?;
    save_image(
        &gray_for_save(&pair.target),
        &layout.images_dir.join(format!("{id}_2.pgm")),
    )?;

    let gt_path = ground_truth_path(layout, id);
    let mut text = String::new();
    for (s, t) in pair
        .source_landmarks
        .points
        .iter()
        .zip(pair.target_landmarks.points.iter())
    {
        text.push_str(&format!("{} {} {} {}\n", s.x, s.y, t.x, t.y));
    }
    std::fs::write(&gt_path, text).map_err(io_err(&gt_path))?;

    if let Some(t) = truth {
        let dir = layout
            .ground_truth_dir
            .parent()
            .unwrap_or(&layout.ground_truth_dir)
            .join("transforms");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(format!("{id}.txt"));
        let m = t.m;
        let text = format!("{} {} {} {} {} {}\n", m[0], m[1], m[2], m[3], m[4], m[5]);
        std::fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Affine2D;

    #[test]
    fn pgm_endpoint_mapping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n2 1\n255\n\x00\xff").unwrap();
        let ImageData::Gray(img) = load_image(&path).unwrap() else {
            panic!("expected gray");
        };
        assert_eq!(img.data, vec![0.0, 1.0]);
    }

    #[test]
    fn ppm_with_nonstandard_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        std::fs::write(&path, b"P6\n1 1\n100\n\x64\x00\x32").unwrap();
        let ImageData::Rgb(img) = load_image(&path).unwrap() else {
            panic!("expected rgb");
        };
        assert_eq!(img.get(0, 0), (1.0, 0.0, 0.5));
    }

    #[test]
    fn truncated_stream_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(
            load_image(&path),
            Err(Error::CorruptFile { .. })
        ));
    }

    #[test]
    fn unsupported_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pbm");
        std::fs::write(&path, b"P1\n1 1\n1").unwrap();
        assert!(matches!(
            load_image(&path),
            Err(Error::UnsupportedFormat { .. })
        ));
    }

    #[test]
    fn image_save_endpoints_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lo = GrayImage::filled(2, 2, -1.0);
        let hi = GrayImage::filled(2, 2, 1.0);
        let p = dir.path().join("lo.pgm");
        save_image(&lo, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.ends_with(&[0, 0, 0, 0]));
        let p = dir.path().join("hi.pgm");
        save_image(&hi, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.ends_with(&[255, 255, 255, 255]));

        // Round trip within 1/255 quantization (load maps to [0,1]).
        let img = GrayImage::new(4, 1, vec![-1.0, -0.5, 0.25, 1.0]);
        let p = dir.path().join("rt.pgm");
        save_image(&img, &p).unwrap();
        let ImageData::Gray(back) = load_image(&p).unwrap() else {
            panic!();
        };
        for (orig, got) in img.data.iter().zip(back.data.iter()) {
            let expected = (orig + 1.0) / 2.0;
            assert!((expected - got).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn points_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let pts = LandmarkSet::new(vec![
            Point::new(1.234567890123456, -9.87654321e-3),
            Point::new(0.1 + 0.2, 1e17),
        ]);
        let p = dir.path().join("pts.txt");
        save_points(&pts, &p).unwrap();
        let back = load_points(&p).unwrap();
        assert_eq!(back, pts);
    }

    fn write_pair(dir: &Path, id: &str) -> DatasetLayout {
        let layout = DatasetLayout::rooted(dir);
        std::fs::create_dir_all(&layout.images_dir).unwrap();
        std::fs::create_dir_all(&layout.ground_truth_dir).unwrap();
        let img = b"P5\n4 4\n255\n0123456789abcdef";
        std::fs::write(layout.images_dir.join(format!("{id}_1.pgm")), img).unwrap();
        std::fs::write(layout.images_dir.join(format!("{id}_2.pgm")), img).unwrap();
        let mut gt = String::new();
        for i in 0..10 {
            gt.push_str(&format!("{} {} {} {}\n", i, i + 1, i + 2, i + 3));
        }
        std::fs::write(
            layout
                .ground_truth_dir
                .join(format!("control_points_{id}_1_2.txt")),
            gt,
        )
        .unwrap();
        layout
    }

    #[test]
    fn load_single_complete_pair() {
        let dir = tempfile::tempdir().unwrap();
        let layout = write_pair(dir.path(), "A01");
        let pairs = load_fire(&layout).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].category, Category::A);
        assert_eq!(pairs[0].source_landmarks.len(), 10);
        assert_eq!(pairs[0].source_landmarks.points[0], Point::new(0.0, 1.0));
        assert_eq!(pairs[0].target_landmarks.points[0], Point::new(2.0, 3.0));
    }

    #[test]
    fn column_order_and_origin_switches() {
        let dir = tempfile::tempdir().unwrap();
        let mut layout = write_pair(dir.path(), "S05");
        layout.column_order = ColumnOrder::TargetFirst;
        layout.coordinate_origin = CoordinateOrigin::OneBased;
        let pairs = load_fire(&layout).unwrap();
        assert_eq!(pairs[0].source_landmarks.points[0], Point::new(1.0, 2.0));
        assert_eq!(pairs[0].target_landmarks.points[0], Point::new(-1.0, 0.0));
    }

    #[test]
    fn malformed_ground_truth_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let layout = write_pair(dir.path(), "P02");
        let gt = layout.ground_truth_dir.join("control_points_P02_1_2.txt");
        std::fs::write(&gt, "1 2 3 4\n5 6 7\n").unwrap();
        match load_fire(&layout) {
            Err(Error::MalformedGroundTruth { path, line, .. }) => {
                assert_eq!(path, gt);
                assert_eq!(line, 2);
            }
            other => panic!("expected MalformedGroundTruth, got {other:?}"),
        }
    }

    #[test]
    fn unknown_category_rejected_strict_but_collected_lenient() {
        let dir = tempfile::tempdir().unwrap();
        let layout = write_pair(dir.path(), "Q01");
        assert!(matches!(
            load_fire(&layout),
            Err(Error::UnknownCategory { .. })
        ));
        let (pairs, errors) = load_fire_lenient(&layout).unwrap();
        assert!(pairs.is_empty());
        assert_eq!(errors.len(), 1);
    }

    #[test]
    fn load_is_sorted_by_id() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "S02");
        write_pair(dir.path(), "A01");
        let layout = write_pair(dir.path(), "P09");
        let pairs = load_fire(&layout).unwrap();
        let ids: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, vec!["A01", "P09", "S02"]);
    }

    #[test]
    fn save_pair_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let layout = DatasetLayout::rooted(dir.path());
        let img = GrayImage::new(8, 8, (0..64).map(|i| i as f64 / 63.0 * 2.0 - 1.0).collect());
        let pair = ImagePair {
            id: "X000".into(),
            category: Category::Synthetic,
            source: ImageData::Gray(img.clone()),
            target: ImageData::Gray(img),
            source_landmarks: LandmarkSet::new(vec![
                Point::new(1.0, 2.0),
                Point::new(3.0, 4.0),
                Point::new(5.0, 6.0),
            ]),
            target_landmarks: LandmarkSet::new(vec![
                Point::new(1.5, 2.5),
                Point::new(3.5, 4.5),
                Point::new(5.5, 6.5),
            ]),
        };
        save_pair(&layout, &pair, Some(&Affine2D::translation(0.5, 0.5))).unwrap();
        let pairs = load_fire(&layout).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].source_landmarks, pair.source_landmarks);
        assert_eq!(pairs[0].target_landmarks, pair.target_landmarks);
    }
}
