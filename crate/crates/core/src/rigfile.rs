//! Plain-text rig format.
//!
//! ```text
//! meshsplat-rig v1
//! vertices <N>
//! <x> <y> <z>                      N lines
//! faces <F>
//! <i0> <i1> <i2>                   F lines
//! blendshapes <K>
//! <dx> <dy> <dz>                   K blocks of N lines
//! joints <J>
//! <parent|-1> <r00> … <r22> <tx> <ty> <tz>   J lines, rest transform
//! skin <N>
//! <count> <joint> <weight> …       N lines
//! ```
//!
//! Blank lines and `#` comments are ignored. Numbers are written in their
//! shortest round-trip form, so save → load is exact.

use crate::error::{Error, Result};
use crate::math::{Mat3, RigidTransform, Vec3};
use crate::rig::{Joint, ParamRig};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

pub const RIG_HEADER: &str = "meshsplat-rig v1";

pub fn rig_to_string(rig: &ParamRig) -> String {
    let mut s = String::new();
    let v3 = |s: &mut String, v: &Vec3| writeln!(s, "{} {} {}", v.x, v.y, v.z).unwrap();
    writeln!(s, "{RIG_HEADER}").unwrap();
    writeln!(s, "vertices {}", rig.template_vertices.len()).unwrap();
    for v in &rig.template_vertices {
        v3(&mut s, v);
    }
    writeln!(s, "faces {}", rig.faces.len()).unwrap();
    for f in &rig.faces {
        writeln!(s, "{} {} {}", f[0], f[1], f[2]).unwrap();
    }
    writeln!(s, "blendshapes {}", rig.blendshapes.len()).unwrap();
    for (k, bs) in rig.blendshapes.iter().enumerate() {
        writeln!(s, "# blendshape {k}").unwrap();
        for d in bs {
            v3(&mut s, d);
        }
    }
    writeln!(s, "joints {}", rig.joints.len()).unwrap();
    for j in &rig.joints {
        let parent = j.parent.map_or(-1, |p| p as i64);
        write!(s, "{parent}").unwrap();
        for r in 0..3 {
            for c in 0..3 {
                write!(s, " {}", j.rest.rotation[(r, c)]).unwrap();
            }
        }
        let t = &j.rest.translation;
        writeln!(s, " {} {} {}", t.x, t.y, t.z).unwrap();
    }
    writeln!(s, "skin {}", rig.skin_weights.len()).unwrap();
    for row in &rig.skin_weights {
        write!(s, "{}", row.len()).unwrap();
        for (j, w) in row {
            write!(s, " {j} {w}").unwrap();
        }
        s.push('\n');
    }
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next_tokens(&mut self) -> Result<Vec<&'a str>> {
        for (i, raw) in self.inner.by_ref() {
            let content = raw.split('#').next().unwrap_or("").trim();
            if !content.is_empty() {
                self.line = i + 1;
                return Ok(content.split_whitespace().collect());
            }
        }
        Err(Error::Parse {
            line: self.line + 1,
            message: "unexpected end of file".into(),
        })
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn parse<T: FromStr>(&self, tok: &str) -> Result<T> {
        tok.parse().map_err(|_| self.err(format!("invalid number '{tok}'")))
    }

    fn section(&mut self, name: &str) -> Result<usize> {
        let t = self.next_tokens()?;
        if t.len() != 2 || t[0] != name {
            return Err(self.err(format!("expected '{name} <count>'")));
        }
        self.parse(t[1])
    }

    fn numbers(&mut self, n: usize) -> Result<Vec<f64>> {
        let t = self.next_tokens()?;
        if t.len() != n {
            return Err(self.err(format!("expected {n} values, found {}", t.len())));
        }
        t.iter().map(|x| self.parse(x)).collect()
    }

    fn vec3(&mut self) -> Result<Vec3> {
        let v = self.numbers(3)?;
        Ok(Vec3::new(v[0], v[1], v[2]))
    }
}

pub fn parse_rig(text: &str) -> Result<ParamRig> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    let header = lines.next_tokens()?.join(" ");
    if header != RIG_HEADER {
        return Err(lines.err(format!("unrecognized header '{header}'")));
    }
    let n = lines.section("vertices")?;
    let vertices = (0..n).map(|_| lines.vec3()).collect::<Result<Vec<_>>>()?;
    let nf = lines.section("faces")?;
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let t = lines.next_tokens()?;
        if t.len() != 3 {
            return Err(lines.err("a face needs three vertex indices"));
        }
        faces.push([lines.parse(t[0])?, lines.parse(t[1])?, lines.parse(t[2])?]);
    }
    let nb = lines.section("blendshapes")?;
    let blendshapes = (0..nb)
        .map(|_| (0..n).map(|_| lines.vec3()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let nj = lines.section("joints")?;
    let mut joints = Vec::with_capacity(nj);
    for _ in 0..nj {
        let t = lines.next_tokens()?;
        if t.len() != 13 {
            return Err(lines.err("a joint needs a parent, 9 rotation entries and 3 translation entries"));
        }
        let parent: i64 = lines.parse(t[0])?;
        let v = t[1..].iter().map(|x| lines.parse(x)).collect::<Result<Vec<f64>>>()?;
        joints.push(Joint {
            parent: if parent < 0 { None } else { Some(parent as usize) },
            rest: RigidTransform::new(Mat3::from_row_slice(&v[..9]), Vec3::new(v[9], v[10], v[11])),
        });
    }
    let ns = lines.section("skin")?;
    let mut skin = Vec::with_capacity(ns);
    for _ in 0..ns {
        let t = lines.next_tokens()?;
        let count: usize = lines.parse(t.first().copied().unwrap_or(""))?;
        if t.len() != 1 + 2 * count {
            return Err(lines.err(format!("expected {count} joint/weight pairs")));
        }
        let mut row = Vec::with_capacity(count);
        for k in 0..count {
            row.push((lines.parse(t[1 + 2 * k])?, lines.parse(t[2 + 2 * k])?));
        }
        skin.push(row);
    }
    ParamRig::new(vertices, faces, blendshapes, joints, skin)
}

pub fn save_rig(rig: &ParamRig, path: &Path) -> Result<()> {
    std::fs::write(path, rig_to_string(rig))?;
    Ok(())
}

pub fn load_rig(path: &Path) -> Result<ParamRig> {
    parse_rig(&std::fs::read_to_string(path)?)
}
