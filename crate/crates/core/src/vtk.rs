//! Legacy ASCII VTK output, one STRUCTURED_POINTS file per leaf block.
//!
//! Cell-centred values are written as point data located at the cell
//! centres, so ORIGIN is the centre of the first interior cell. Floats use
//! Rust's shortest round-trip formatting, which makes the files byte-stable
//! and lets [`read_block`] recover the arrays exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dgrid::{Array3, BlockGeometry, Var};
use crate::error::{Error, Result};
use crate::runtime::Block;
use crate::scalar::Real;

/// Fields of one block as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct VtkBlock {
    pub title: String,
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub scalars: Vec<(String, Vec<f64>)>,
    pub vectors: Vec<(String, Vec<[f64; 3]>)>,
}

impl VtkBlock {
    pub fn scalar(&self, name: &str) -> Option<&[f64]> {
        self.scalars.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

fn interior<T: Real>(a: &Array3<T>) -> impl Iterator<Item = f64> + '_ {
    a.interior().map(move |c| a.at(c).as_f64())
}

/// Text of one block: velocity as a vector, `p` and `T` as scalars.
pub fn block_text<T: Real>(title: &str, b: &Block<T>) -> String {
    let g: &BlockGeometry = &b.geom;
    let n: usize = g.size.iter().product();
    let mut s = String::with_capacity(64 * n);
    let origin = g.centre([0, 0, 0]);
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "{}", title.replace('\n', " "));
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(s, "DIMENSIONS {} {} {}", g.size[0], g.size[1], g.size[2]);
    let _ = writeln!(s, "ORIGIN {:?} {:?} {:?}", origin[0], origin[1], origin[2]);
    let _ = writeln!(s, "SPACING {:?} {:?} {:?}", g.spacing[0], g.spacing[1], g.spacing[2]);
    let _ = writeln!(s, "POINT_DATA {n}");
    let _ = writeln!(s, "VECTORS u double");
    let u = Var::VELOCITY.map(|v| &b.fields[v]);
    for c in u[0].interior() {
        let _ = writeln!(s, "{:?} {:?} {:?}", u[0].at(c).as_f64(), u[1].at(c).as_f64(), u[2].at(c).as_f64());
    }
    for (name, var) in [("p", Var::P), ("T", Var::T)] {
        let _ = writeln!(s, "SCALARS {name} double 1");
        let _ = writeln!(s, "LOOKUP_TABLE default");
        for v in interior(&b.fields[var]) {
            let _ = writeln!(s, "{v:?}");
        }
    }
    s
}

pub fn write_block<T: Real>(path: &Path, title: &str, b: &Block<T>) -> Result<()> {
    fs::write(path, block_text(title, b)).map_err(|e| Error::io(path, e))
}

/// Writes one file per leaf as `<stem>_g<id>.vtk` in `dir` plus the index
/// `<stem>.visit` listing them. Returns the index path.
pub fn write_leaves<'a, T: Real + 'a>(dir: &Path, stem: &str, leaves: impl IntoIterator<Item = &'a Block<T>>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for b in leaves {
        let name = format!("{stem}_g{}.vtk", b.geom.id.0);
        write_block(&dir.join(&name), &format!("{stem} grid {} depth {}", b.geom.id.0, b.geom.depth), b)?;
        names.push(name);
    }
    let mut index = format!("!NBLOCKS {}\n", names.len());
    for n in &names {
        index.push_str(n);
        index.push('\n');
    }
    let path = dir.join(format!("{stem}.visit"));
    fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// File names listed in a `.visit` index.
pub fn read_index(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let bad = |m: &str| Error::Parse { path: path.to_path_buf(), message: m.to_string() };
    let n: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("!NBLOCKS "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad("missing !NBLOCKS header"))?;
    let names: Vec<String> = lines.filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
    if names.len() != n {
        return Err(bad(&format!("header announces {n} blocks, found {}", names.len())));
    }
    Ok(names)
}

/// Parses a file written by [`write_block`] (and any structured-points file
/// restricted to ASCII double scalars and vectors).
pub fn read_block(path: &Path) -> Result<VtkBlock> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_block(&text).map_err(|(line, m)| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {m}"),
    })
}

fn parse_block(text: &str) -> std::result::Result<VtkBlock, (usize, String)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| lines.next().ok_or((0, format!("unexpected end of file, expected {what}")));
    let (n, l) = next("header")?;
    if !l.starts_with("# vtk DataFile Version") {
        return Err((n, "not a legacy VTK file".into()));
    }
    let (_, title) = next("title")?;
    let (n, l) = next("ASCII")?;
    if l.trim() != "ASCII" {
        return Err((n, format!("only ASCII files are supported, found `{l}`")));
    }
    let (n, l) = next("DATASET")?;
    if l.trim() != "DATASET STRUCTURED_POINTS" {
        return Err((n, format!("expected STRUCTURED_POINTS, found `{l}`")));
    }
    fn triple<V: std::str::FromStr>(n: usize, l: &str, key: &str) -> std::result::Result<[V; 3], (usize, String)> {
        let rest = l.strip_prefix(key).ok_or((n, format!("expected {key}")))?;
        let v: Vec<V> = rest.split_whitespace().map(|t| t.parse().map_err(|_| (n, format!("bad number `{t}`")))).collect::<std::result::Result<_, _>>()?;
        v.try_into().map_err(|_| (n, format!("{key} needs three values")))
    }
    let (n, l) = next("DIMENSIONS")?;
    let dims: [usize; 3] = triple(n, l, "DIMENSIONS")?;
    let (n, l) = next("ORIGIN")?;
    let origin: [f64; 3] = triple(n, l, "ORIGIN")?;
    let (n, l) = next("SPACING")?;
    let spacing: [f64; 3] = triple(n, l, "SPACING")?;
    let count: usize = dims.iter().product();
    let (n, l) = next("POINT_DATA")?;
    if l.trim() != format!("POINT_DATA {count}") {
        return Err((n, format!("POINT_DATA must equal {count}")));
    }
    let mut out = VtkBlock {
        title: title.to_string(),
        dims,
        origin,
        spacing,
        scalars: Vec::new(),
        vectors: Vec::new(),
    };
    let number = |n: usize, t: &str| t.parse::<f64>().map_err(|_| (n, format!("bad number `{t}`")));
    while let Some((n, l)) = lines.next() {
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            [] => continue,
            ["SCALARS", name, "double", rest @ ..] => {
                if !(rest.is_empty() || rest == ["1"]) {
                    return Err((n, "only one-component scalars are supported".into()));
                }
                let (m, lt) = lines.next().ok_or((n, "missing LOOKUP_TABLE".to_string()))?;
                if !lt.starts_with("LOOKUP_TABLE") {
                    return Err((m, "expected LOOKUP_TABLE".into()));
                }
                let mut v = Vec::with_capacity(count);
                while v.len() < count {
                    let (m, row) = lines.next().ok_or((m, format!("scalars `{name}` truncated")))?;
                    for t in row.split_whitespace() {
                        v.push(number(m, t)?);
                    }
                }
                out.scalars.push((name.to_string(), v));
            }
            ["VECTORS", name, "double"] => {
                let mut v = Vec::with_capacity(count);
                let mut flat = Vec::with_capacity(3);
                while v.len() < count {
                    let (m, row) = lines.next().ok_or((n, format!("vectors `{name}` truncated")))?;
                    for t in row.split_whitespace() {
                        flat.push(number(m, t)?);
                        if flat.len() == 3 {
                            v.push([flat[0], flat[1], flat[2]]);
                            flat.clear();
                        }
                    }
                }
                out.vectors.push((name.to_string(), v));
            }
            _ => return Err((n, format!("unsupported section `{l}`"))),
        }
    }
    Ok(out)
}
