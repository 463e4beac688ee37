//! `LFTR` binary terrain files.
//!
//! Layout (little-endian): magic `LFTR`, version `u16`, kind `u8`, pad `u8`,
//! `nx: u32`, `ny: u32`, `cell_size: f32`, `origin: [f32; 2]`,
//! `terrain_factor: f64`, then heights, friction and conveyor grids as
//! row-major `f32` (conveyor cells store `vx, vy` pairs).

use std::io::{Read, Write};

use super::{Terrain, TerrainKind};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LFTR";
const VERSION: u16 = 1;

pub fn write_terrain<W: Write>(t: &Terrain, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(40 + t.nx * t.ny * 16);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(t.kind.code());
    buf.push(0);
    buf.extend_from_slice(&(t.nx as u32).to_le_bytes());
    buf.extend_from_slice(&(t.ny as u32).to_le_bytes());
    buf.extend_from_slice(&t.cell_size.to_le_bytes());
    buf.extend_from_slice(&t.origin[0].to_le_bytes());
    buf.extend_from_slice(&t.origin[1].to_le_bytes());
    buf.extend_from_slice(&t.terrain_factor.to_le_bytes());
    for h in &t.heights {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    for f in &t.friction {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    for [vx, vy] in &t.conveyor {
        buf.extend_from_slice(&vx.to_le_bytes());
        buf.extend_from_slice(&vy.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .data
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("truncated terrain file".into()))?;
        self.pos = end;
        Ok(slice.try_into().unwrap())
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

pub fn read_terrain<R: Read>(mut r: R) -> Result<Terrain> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut c = Cursor { data: &data, pos: 0 };
    if &c.take::<4>()? != MAGIC {
        return Err(Error::Format("bad terrain magic".into()));
    }
    let version = u16::from_le_bytes(c.take()?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported terrain version {version}")));
    }
    let kind = TerrainKind::from_code(c.take::<1>()?[0])?;
    c.take::<1>()?;
    let nx = u32::from_le_bytes(c.take()?) as usize;
    let ny = u32::from_le_bytes(c.take()?) as usize;
    if nx == 0 || ny == 0 {
        return Err(Error::Format("empty terrain grid".into()));
    }
    let cell_size = c.f32()?;
    let origin = [c.f32()?, c.f32()?];
    let terrain_factor = f64::from_le_bytes(c.take()?);
    let n = nx * ny;
    let expected = c.pos + n * 16;
    if data.len() != expected {
        return Err(Error::Format(format!(
            "terrain payload is {} bytes, expected {expected}",
            data.len()
        )));
    }
    let heights = (0..n).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
    let friction = (0..n).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
    let conveyor = (0..n)
        .map(|_| Ok([c.f32()?, c.f32()?]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Terrain {
        kind,
        terrain_factor,
        cell_size,
        origin,
        nx,
        ny,
        heights,
        friction,
        conveyor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::generate;

    #[test]
    fn round_trip_is_exact() {
        for kind in [TerrainKind::Rough, TerrainKind::Conveyor, TerrainKind::Slippery] {
            let t = generate(kind, 0.37, 12).unwrap();
            let mut bytes = Vec::new();
            write_terrain(&t, &mut bytes).unwrap();
            assert_eq!(&bytes[..4], b"LFTR");
            let back = read_terrain(bytes.as_slice()).unwrap();
            assert_eq!(t, back);
        }
    }

    #[test]
    fn rejects_corruption() {
        let t = generate(TerrainKind::Flat, 0.0, 0).unwrap();
        let mut bytes = Vec::new();
        write_terrain(&t, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_terrain(bad.as_slice()).is_err());
        bytes.pop();
        assert!(read_terrain(bytes.as_slice()).is_err());
    }
}
