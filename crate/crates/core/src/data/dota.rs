//! DOTA-style annotations: one object per line,
//! `x1 y1 x2 y2 x3 y3 x4 y4 category difficulty`, pixel corners with the
//! image origin at the top-left corner of the first pixel.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{min_area_rect, wrap_half_turn, OrientedBox};

/// Quadrilaterals whose edges stray further than this from the fitted
/// rectangle are accepted with a warning.
pub const SKEW_TOLERANCE_DEG: f64 = 2.0;

/// The fifteen DOTA-v1.0 categories.
pub const DOTA_V1_CLASSES: [&str; 15] = [
    "plane",
    "ship",
    "storage-tank",
    "baseball-diamond",
    "tennis-court",
    "basketball-court",
    "ground-track-field",
    "harbor",
    "bridge",
    "large-vehicle",
    "small-vehicle",
    "helicopter",
    "roundabout",
    "soccer-ball-field",
    "swimming-pool",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("label map is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("label {:?} must be a non-empty word", n)));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate label {:?}", n)));
            }
        }
        Ok(LabelMap { names })
    }

    pub fn dota_v1() -> Self {
        LabelMap {
            names: DOTA_V1_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// `class0`, `class1`, ...
    pub fn numbered(n: usize) -> Self {
        LabelMap {
            names: (0..n).map(|i| format!("class{}", i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// One name per line; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        LabelMap::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        LabelMap::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.names.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class: usize,
    pub bbox: OrientedBox,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedAnnotation {
    pub instances: Vec<Instance>,
    /// One entry per skipped or suspicious line, prefixed with its number.
    pub warnings: Vec<String>,
}

/// Largest angle between an edge of `quad` and the nearest axis of `bbox`.
fn skew_degrees(quad: &[[f64; 2]; 4], bbox: &OrientedBox) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..4 {
        let (p, q) = (quad[i], quad[(i + 1) % 4]);
        let a = (q[1] - p[1]).atan2(q[0] - p[0]) - bbox.theta;
        let off = (a + FRAC_PI_2 / 2.0).rem_euclid(FRAC_PI_2) - FRAC_PI_2 / 2.0;
        worst = worst.max(off.abs());
    }
    worst.to_degrees()
}

/// Minimal enclosing rectangle of four corners, with `w` the longer side and
/// `theta` its direction in `[-π/2, π/2)`.
pub fn quad_to_box(quad: &[[f64; 2]; 4]) -> Result<OrientedBox> {
    let r = min_area_rect(quad)?;
    let (w, h, angle) = if r.extent_u >= r.extent_v {
        (r.extent_u, r.extent_v, r.angle)
    } else {
        (r.extent_v, r.extent_u, r.angle + FRAC_PI_2)
    };
    OrientedBox::new(r.center[0], r.center[1], w, h, wrap_half_turn(angle))
}

/// Parses annotation text. Lines `imagesource:` and `gsd:` are metadata.
/// A line with fewer than nine fields is an error; other malformed lines are
/// skipped with a warning.
pub fn parse_dota_annotation(text: &str, labels: &LabelMap) -> Result<ParsedAnnotation> {
    let mut out = ParsedAnnotation::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with("imagesource:") || trimmed.starts_with("gsd:") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 9 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 8 coordinates and a category, got {} fields", fields.len()),
            });
        }
        let mut skip = |msg: String| {
            let m = format!("line {}: {}", line, msg);
            warn!("{}", m);
            out.warnings.push(m);
        };
        let coords: std::result::Result<Vec<f64>, _> = fields[..8].iter().map(|s| s.parse::<f64>()).collect();
        let coords = match coords {
            Ok(c) if c.iter().all(|v| v.is_finite()) => c,
            _ => {
                skip(format!("bad coordinates in {:?}", trimmed));
                continue;
            }
        };
        let Some(class) = labels.index(fields[8]) else {
            skip(format!("unknown category {:?}", fields[8]));
            continue;
        };
        let difficult = match fields.get(9) {
            None | Some(&"0") => false,
            Some(&"1") => true,
            Some(other) => {
                skip(format!("difficulty must be 0 or 1, got {:?}", other));
                continue;
            }
        };
        if fields.len() > 10 {
            skip(format!("{} trailing fields", fields.len() - 10));
            continue;
        }
        let quad: [[f64; 2]; 4] = std::array::from_fn(|i| [coords[2 * i], coords[2 * i + 1]]);
        let bbox = match quad_to_box(&quad) {
            Ok(b) => b,
            Err(e) => {
                skip(format!("degenerate polygon: {}", e));
                continue;
            }
        };
        let skew = skew_degrees(&quad, &bbox);
        if skew > SKEW_TOLERANCE_DEG {
            let m = format!("line {}: quadrilateral is {:.2} degrees from rectangular", line, skew);
            warn!("{}", m);
            out.warnings.push(m);
        }
        out.instances.push(Instance { class, bbox, difficult });
    }
    Ok(out)
}

pub fn read_dota_annotation(path: &Path, labels: &LabelMap) -> Result<ParsedAnnotation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dota_annotation(&text, labels).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {}", path.display(), msg),
        },
        other => other,
    })
}

/// Writes corners in [`OrientedBox::corners`] order, which runs clockwise on
/// screen, with shortest round-trip number formatting.
pub fn format_dota_annotation(instances: &[Instance], labels: &LabelMap) -> Result<String> {
    let mut out = String::new();
    for inst in instances {
        let name = labels
            .name(inst.class)
            .ok_or_else(|| Error::InvalidArgument(format!("class {} not in label map", inst.class)))?;
        for c in inst.bbox.corners() {
            write!(out, "{} {} ", c[0], c[1]).expect("string write");
        }
        writeln!(out, "{} {}", name, u8::from(inst.difficult)).expect("string write");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn labels() -> LabelMap {
        LabelMap::numbered(3)
    }

    #[test]
    fn unit_square() {
        let a = parse_dota_annotation("0 0 1 0 1 1 0 1 class1 0\n", &labels()).unwrap();
        assert_eq!(a.instances.len(), 1);
        let b = a.instances[0].bbox;
        assert!((b.cx - 0.5).abs() < 1e-12 && (b.cy - 0.5).abs() < 1e-12);
        assert!((b.w - 1.0).abs() < 1e-12 && (b.h - 1.0).abs() < 1e-12);
        assert!(b.theta.abs() < 1e-12);
        assert_eq!(a.instances[0].class, 1);
        assert!(a.warnings.is_empty());
    }

    #[test]
    fn rotated_rectangle_round_trip() {
        let truth = OrientedBox::new(30.0, 20.0, 4.0, 2.0, PI / 6.0).unwrap();
        let inst = Instance {
            class: 2,
            bbox: truth,
            difficult: true,
        };
        let text = format_dota_annotation(&[inst], &labels()).unwrap();
        let parsed = parse_dota_annotation(&text, &labels()).unwrap().instances[0];
        let b = parsed.bbox;
        assert!((b.w - 4.0).abs() < 1e-6 && (b.h - 2.0).abs() < 1e-6 && (b.theta - PI / 6.0).abs() < 1e-6);
        assert!(parsed.difficult);
        let dev = truth
            .corners()
            .iter()
            .map(|c| {
                b.corners()
                    .iter()
                    .map(|d| (c[0] - d[0]).hypot(c[1] - d[1]))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        assert!(dev <= 1e-4);
    }

    #[test]
    fn metadata_and_malformed_lines() {
        let text = "imagesource:synthetic\ngsd:0.5\n\
                    0 0 4 0 4 2 0 2 class0 0\n\
                    0 0 x 0 4 2 0 2 class0 0\n\
                    0 0 4 0 4 2 0 2 boat 0\n\
                    0 0 4 0 4 2 0 2 class0 7\n\
                    0 0 1 1 2 2 3 3 class0 0\n\
                    0 0 4 0 4 2 0 2 class2\n";
        let a = parse_dota_annotation(text, &labels()).unwrap();
        assert_eq!(a.instances.len(), 2);
        assert_eq!(a.warnings.len(), 4);
        assert!(a.warnings[0].starts_with("line 4:"));
        assert!(!a.instances[1].difficult);
    }

    #[test]
    fn short_line_is_an_error() {
        match parse_dota_annotation("0 0 4 0 4 2 0 class0\n", &labels()) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn skewed_quad_warns() {
        let a = parse_dota_annotation("0 0 10 0 10.6 5 0 5 class0 0\n", &labels()).unwrap();
        assert_eq!(a.instances.len(), 1);
        assert_eq!(a.warnings.len(), 1);
        let b = parse_dota_annotation("0 0 10 0 10.1 5 0 5 class0 0\n", &labels()).unwrap();
        assert!(b.warnings.is_empty());
    }

    #[test]
    fn label_map_checks() {
        assert!(LabelMap::new(vec![]).is_err());
        assert!(LabelMap::new(vec!["a".into(), "a".into()]).is_err());
        assert!(LabelMap::new(vec!["two words".into()]).is_err());
        let m = LabelMap::parse("a\n\nb\n").unwrap();
        assert_eq!(m.index("b"), Some(1));
        assert_eq!(LabelMap::dota_v1().len(), 15);
    }
}
