//! Binary checkpoints.
//!
//! Layout, little-endian throughout: the 8-byte magic `MSPLCKPT`, a `u32`
//! format version, a `u32` section count, then sections of
//! `[tag: 4 bytes][length: u64][payload]`. Floats are stored as raw `f64`
//! bits, so a reload reproduces the saved state exactly.

use crate::adjuster::{EncodingMode, Mlp, MorphAdjuster, TriPlane};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gaussian::LocalGaussian;
use crate::math::{Quat, Vec3};
use crate::optim::{AdamGroup, OptimState};
use crate::pipeline::Model;
use crate::rig::ParamRig;
use crate::rigfile::{parse_rig, rig_to_string};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MSPLCKPT";
pub const FORMAT_VERSION: u32 = 1;

const SECTIONS: [&[u8; 4]; 9] = [b"CONF", b"RIGT", b"BGND", b"ITER", b"GAUS", b"ADJM", b"BNET", b"LNET", b"OPTM"];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Number of completed iterations.
    pub iteration: u64,
    pub config: TrainConfig,
    pub rig: ParamRig,
    pub background: [f64; 3],
    pub model: Model,
    pub optim: OptimState,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }
    fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        for &x in v {
            self.f64(x);
        }
    }
    fn vec3(&mut self, v: &Vec3) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8], section: &'static str) -> Self {
        Self { data, pos: 0, section }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("section {} is truncated", self.section)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint(format!("section {} holds an oversized value", self.section)))
    }
    /// A length prefix, which can never exceed the bytes left.
    fn len(&mut self) -> Result<usize> {
        let n = self.usize()?;
        if n > self.data.len() - self.pos {
            return Err(Error::Checkpoint(format!("section {} declares an impossible length", self.section)));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Checkpoint(format!("section {} has trailing bytes", self.section)));
        }
        Ok(())
    }
}

fn write_mlp(w: &mut Writer, m: &Mlp) {
    w.len(m.sizes.len());
    m.sizes.iter().for_each(|&s| w.len(s));
    w.f64s(&m.params);
}

fn read_mlp(r: &mut Reader) -> Result<Mlp> {
    let n = r.len()?;
    let sizes = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let params = r.f64s()?;
    let expected: usize = sizes.windows(2).map(|p| (p[0] + 1) * p[1]).sum();
    if sizes.len() < 2 || params.len() != expected {
        return Err(Error::Checkpoint("network sizes and parameters disagree".into()));
    }
    Ok(Mlp { sizes, params })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Writer::default();
        out.0.extend_from_slice(MAGIC);
        out.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.0.extend_from_slice(&(SECTIONS.len() as u32).to_le_bytes());
        for tag in SECTIONS {
            let mut w = Writer::default();
            self.write_section(tag, &mut w);
            out.0.extend_from_slice(tag);
            out.bytes(&w.0);
        }
        out.0
    }

    fn write_section(&self, tag: &[u8; 4], w: &mut Writer) {
        let adj = &self.model.adjuster;
        match tag {
            b"CONF" => w.0.extend_from_slice(self.config.to_toml_string().as_bytes()),
            b"RIGT" => w.0.extend_from_slice(rig_to_string(&self.rig).as_bytes()),
            b"BGND" => self.background.iter().for_each(|&c| w.f64(c)),
            b"ITER" => w.u64(self.iteration),
            b"GAUS" => {
                let gs = &self.model.gaussians;
                w.len(gs.len());
                w.len(gs.first().map_or(0, |g| g.sh.len()));
                for g in gs {
                    w.vec3(&g.mu0);
                    g.r0_raw.iter().for_each(|&x| w.f64(x));
                    w.vec3(&g.s0_raw);
                    w.f64(g.o_raw);
                    g.sh.iter().flatten().for_each(|&x| w.f64(x));
                    w.len(g.parent_tri);
                }
            }
            b"ADJM" => {
                w.u8(match adj.mode {
                    EncodingMode::Triplane => 0,
                    EncodingMode::Fourier => 1,
                });
                w.len(adj.fourier_bands);
                w.f64(adj.scale_floor);
                let tp = &adj.triplane;
                w.len(tp.resolutions.len());
                tp.resolutions.iter().for_each(|&r| w.len(r));
                w.len(tp.channels);
                w.vec3(&tp.domain_min);
                w.vec3(&tp.domain_max);
                w.f64s(&tp.params);
            }
            b"BNET" => write_mlp(w, &adj.basis_net),
            b"LNET" => write_mlp(w, &adj.latent_net),
            b"OPTM" => {
                for g in self.optim.groups() {
                    w.len(g.row_len);
                    w.u64(g.step);
                    w.f64s(&g.m);
                    w.f64s(&g.v);
                }
            }
            _ => unreachable!("unknown section tag"),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let mut outer = Reader::new(&bytes[16..], "header");
        let mut sections: Vec<Option<&[u8]>> = vec![None; SECTIONS.len()];
        for _ in 0..count {
            let tag = outer.take(4)?;
            let body = outer.bytes()?;
            let idx = SECTIONS
                .iter()
                .position(|t| &t[..] == tag)
                .ok_or_else(|| Error::Checkpoint(format!("unknown section {}", String::from_utf8_lossy(tag))))?;
            sections[idx] = Some(body);
        }
        outer.finish()?;
        let get = |i: usize, name: &'static str| -> Result<Reader> {
            sections[i]
                .map(|d| Reader::new(d, name))
                .ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))
        };
        let text = |i: usize, name: &'static str| -> Result<&str> {
            let r = get(i, name)?;
            std::str::from_utf8(r.data).map_err(|_| Error::Checkpoint(format!("section {name} is not UTF-8")))
        };

        let config = TrainConfig::from_toml_str(text(0, "CONF")?)?;
        let rig = parse_rig(text(1, "RIGT")?)?;

        let mut r = get(2, "BGND")?;
        let background = [r.f64()?, r.f64()?, r.f64()?];
        r.finish()?;

        let mut r = get(3, "ITER")?;
        let iteration = r.u64()?;
        r.finish()?;

        let mut r = get(4, "GAUS")?;
        let n = r.len()?;
        let sh_len = r.usize()?;
        let mut gaussians = Vec::with_capacity(n);
        for _ in 0..n {
            let mu0 = r.vec3()?;
            let r0_raw = Quat::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let s0_raw = r.vec3()?;
            let o_raw = r.f64()?;
            let sh = (0..sh_len).map(|_| Ok([r.f64()?, r.f64()?, r.f64()?])).collect::<Result<Vec<_>>>()?;
            let parent_tri = r.usize()?;
            if parent_tri >= rig.faces.len() {
                return Err(Error::Checkpoint(format!("Gaussian bound to missing triangle {parent_tri}")));
            }
            gaussians.push(LocalGaussian {
                mu0,
                r0_raw,
                s0_raw,
                o_raw,
                sh,
                parent_tri,
            });
        }
        r.finish()?;

        let mut r = get(5, "ADJM")?;
        let mode = match r.u8()? {
            0 => EncodingMode::Triplane,
            1 => EncodingMode::Fourier,
            m => return Err(Error::Checkpoint(format!("unknown encoding mode {m}"))),
        };
        let fourier_bands = r.usize()?;
        let scale_floor = r.f64()?;
        let levels = r.len()?;
        let resolutions = (0..levels).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let channels = r.usize()?;
        let (lo, hi) = (r.vec3()?, r.vec3()?);
        let mut triplane = TriPlane::new(resolutions, channels, lo, hi);
        let params = r.f64s()?;
        if params.len() != triplane.params.len() {
            return Err(Error::Checkpoint("tri-plane size disagrees with its resolutions".into()));
        }
        triplane.params = params;
        r.finish()?;

        let mut r = get(6, "BNET")?;
        let basis_net = read_mlp(&mut r)?;
        r.finish()?;
        let mut r = get(7, "LNET")?;
        let latent_net = read_mlp(&mut r)?;
        r.finish()?;

        let mut r = get(8, "OPTM")?;
        let mut groups = Vec::with_capacity(8);
        for _ in 0..8 {
            let row_len = r.usize()?;
            let step = r.u64()?;
            let m = r.f64s()?;
            let v = r.f64s()?;
            if m.len() != v.len() || (row_len > 0 && m.len() % row_len != 0) {
                return Err(Error::Checkpoint("optimizer moments have inconsistent shapes".into()));
            }
            groups.push(AdamGroup { row_len, m, v, step });
        }
        r.finish()?;
        let optim = OptimState::from_groups(groups.try_into().unwrap());
        for (g, rows) in optim.groups().iter().take(5).zip(std::iter::repeat(n)) {
            if g.rows() != rows && g.row_len > 0 {
                return Err(Error::Checkpoint("optimizer state does not match the Gaussian count".into()));
            }
        }

        Ok(Checkpoint {
            iteration,
            config,
            rig,
            background,
            model: Model {
                gaussians,
                adjuster: MorphAdjuster {
                    mode,
                    fourier_bands,
                    scale_floor,
                    triplane,
                    basis_net,
                    latent_net,
                },
            },
            optim,
        })
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
