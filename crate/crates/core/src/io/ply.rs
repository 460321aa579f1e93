use std::fmt::Write as _;
use std::path::Path;

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};

use super::{read_bytes, write_bytes};

const SCALAR_TYPES: &[&str] = &[
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double", "int8", "uint8", "int16", "uint16",
    "int32", "uint32", "float32", "float64",
];

/// ASCII PLY with a single `vertex` element of double x, y, z. Values are
/// printed with the shortest digits that parse back to the same f64.
pub fn format_ply(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(64 + cloud.len() * 48);
    s.push_str("ply\nformat ascii 1.0\ncomment units cm\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in cloud.points() {
        let _ = writeln!(s, "{:e} {:e} {:e}", p.x, p.y, p.z);
    }
    s
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_bytes(path, format_ply(cloud).as_bytes())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
        line: 1,
        msg: "not an ASCII PLY file".into(),
    })?;
    parse_ply(&text)
}

struct Element {
    name: String,
    count: usize,
    props: Vec<String>,
    has_list: bool,
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Parses an ASCII PLY document. Elements other than `vertex` are skipped and
/// vertex properties other than x, y, z are ignored.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(err(n, "missing 'ply' magic")),
        None => return Err(err(1, "empty file")),
    }

    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                if tok.get(1) != Some(&"ascii") {
                    return Err(err(n, format!("unsupported format '{}'", tok[1..].join(" "))));
                }
                saw_format = true;
            }
            Some("element") => {
                let (Some(name), Some(count), None) = (tok.get(1), tok.get(2), tok.get(3)) else {
                    return Err(err(n, "malformed element line"));
                };
                let count = count.parse().map_err(|_| err(n, format!("bad element count '{count}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| err(n, "property before any element"))?;
                match tok.as_slice() {
                    ["property", "list", _, _, name] => {
                        el.has_list = true;
                        el.props.push(name.to_string());
                    }
                    ["property", ty, name] if SCALAR_TYPES.contains(ty) => el.props.push(name.to_string()),
                    _ => return Err(err(n, format!("malformed property line '{line}'"))),
                }
            }
            Some("end_header") => {
                header_end = Some(n);
                break;
            }
            Some(other) => return Err(err(n, format!("unexpected header keyword '{other}'"))),
        }
    }
    let header_end = header_end.ok_or_else(|| err(text.lines().count().max(1), "missing end_header"))?;
    if !saw_format {
        return Err(err(header_end, "missing format line"));
    }
    let Some(vi) = elements.iter().position(|e| e.name == "vertex") else {
        return Err(err(header_end, "no vertex element"));
    };
    let vertex = &elements[vi];
    if vertex.has_list {
        return Err(err(header_end, "list properties on vertex are not supported"));
    }
    if vertex.count == 0 {
        return Err(err(header_end, "vertex element is empty"));
    }
    let col = |axis: &str| {
        vertex
            .props
            .iter()
            .position(|p| p == axis)
            .ok_or_else(|| err(header_end, format!("vertex has no '{axis}' property")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);

    // Skip the bodies of elements declared before `vertex`; each is one line per item.
    let skip: usize = elements[..vi].iter().map(|e| e.count).sum();
    let mut body = lines.filter(|(_, l)| !l.is_empty()).skip(skip);
    let mut points = Vec::with_capacity(vertex.count);
    for k in 0..vertex.count {
        let Some((n, line)) = body.next() else {
            return Err(err(header_end + skip + k + 1, format!("expected {} vertices, found {k}", vertex.count)));
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != vertex.props.len() {
            return Err(err(n, format!("expected {} values, found {}", vertex.props.len(), tok.len())));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = tok[i].parse().map_err(|_| err(n, format!("bad number '{}'", tok[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(n, format!("non-finite coordinate '{}'", tok[i])))
            }
        };
        points.push(Point::new(num(cx)?, num(cy)?, num(cz)?));
    }
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_err_line(text: &str) -> usize {
        match parse_ply(text) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn extra_properties_are_ignored() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float nx\nproperty float x\n\
                    property float y\nproperty float z\nproperty uchar red\nend_header\n\
                    0 1 2 3 255\n1 -4 5.5 6 0\n";
        let c = parse_ply(text).unwrap();
        assert_eq!(c.points(), &[Point::new(1.0, 2.0, 3.0), Point::new(-4.0, 5.5, 6.0)]);
    }

    #[test]
    fn elements_before_vertex_are_skipped() {
        let text = "ply\nformat ascii 1.0\nelement camera 1\nproperty float f\nelement vertex 1\n\
                    property double x\nproperty double y\nproperty double z\n\
                    element face 1\nproperty list uchar int vertex_indices\nend_header\n\
                    42\n1 2 3\n3 0 0 0\n";
        assert_eq!(parse_ply(text).unwrap().points(), &[Point::new(1.0, 2.0, 3.0)]);
    }

    #[test]
    fn empty_vertex_element_is_an_error() {
        let text = "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\n\
                    property float z\nend_header\n";
        assert_eq!(parse_err_line(text), 7);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(parse_err_line("plx\n"), 1);
        assert_eq!(parse_err_line("ply\nformat binary_little_endian 1.0\n"), 2);
        let bad_value = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n\
                         property float z\nend_header\n1 2 3\n1 nan 3\n";
        assert_eq!(parse_err_line(bad_value), 9);
        let short = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
                     property float z\nend_header\n1 2\n";
        assert_eq!(parse_err_line(short), 8);
        let no_z = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n";
        assert_eq!(parse_err_line(no_z), 6);
        let no_vertex = "ply\nformat ascii 1.0\nelement face 0\nend_header\n";
        assert_eq!(parse_err_line(no_vertex), 4);
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = crate::rng::Rng::new(3);
        let pts: Vec<Point> = (0..1024)
            .map(|_| Point::new(rng.range(-600.0, 600.0), rng.range(-1e-3, 1e-3), rng.normal() * 1e4))
            .collect();
        let c = PointCloud::new(pts).unwrap();
        let back = parse_ply(&format_ply(&c)).unwrap();
        let worst = back
            .points()
            .iter()
            .zip(c.points())
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "max delta {worst}");
        assert_eq!(back, c);
    }
}
