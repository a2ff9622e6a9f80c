//! Binary clip container shared by videos, masks, latents and identity caches.
//!
//! Layout (little-endian): `"VPCL"`, `u16` version, `u8` kind, `u8` rank,
//! `rank × u32` extents, a 4-byte `f32` fps slot, the payload (`f32` values, or
//! `u8` for masks), and the CRC-32 of the payload. For identity caches the fps
//! slot holds the clip id's raw bits and the extents are `[layers, 2, Lid, d]`.

use std::path::Path;

use dualpaint_autograd::Tensor;

use crate::error::{Error, Result};
use crate::resample::IdCache;
use crate::video::{LatentClip, MaskClip, VideoClip};

pub const MAGIC: &[u8; 4] = b"VPCL";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Video = 0,
    Mask = 1,
    Latent = 2,
    IdCache = 3,
}

impl Kind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Kind::Video,
            1 => Kind::Mask,
            2 => Kind::Latent,
            3 => Kind::IdCache,
            _ => return Err(Error::Data(format!("unknown container kind {v}"))),
        })
    }

    fn elem_size(self) -> usize {
        if self == Kind::Mask {
            1
        } else {
            4
        }
    }
}

/// Parsed container: header fields plus the raw payload bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub dims: Vec<usize>,
    pub fps_bits: u32,
    pub payload: Vec<u8>,
}

impl Container {
    pub fn fps(&self) -> f32 {
        f32::from_bits(self.fps_bits)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n: usize = self.dims.iter().product();
        if self.payload.len() != n * self.kind.elem_size() {
            return Err(Error::Data(format!(
                "payload of {} bytes does not match extents {:?}",
                self.payload.len(),
                self.dims
            )));
        }
        let rank = u8::try_from(self.dims.len()).map_err(|_| Error::Data("rank above 255".into()))?;
        let mut out = Vec::with_capacity(16 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(rank);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Data(format!("extent {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.fps_bits.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&crc32fast::hash(&self.payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data("bad container magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Data(format!("unsupported container version {version}")));
        }
        let kind = Kind::from_u8(r.take(1)?[0])?;
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank)
            .map(|_| r.array().map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let fps_bits = u32::from_le_bytes(r.array()?);
        let n = dims
            .iter()
            .try_fold(kind.elem_size(), |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Data("extents overflow".into()))?;
        let payload = r.take(n)?.to_vec();
        let crc = u32::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after container".into()));
        }
        if crc32fast::hash(&payload) != crc {
            return Err(Error::Data("container CRC mismatch".into()));
        }
        Ok(Self {
            kind,
            dims,
            fps_bits,
            payload,
        })
    }

    fn expect(&self, kind: Kind, rank: usize) -> Result<()> {
        if self.kind != kind || self.dims.len() != rank {
            return Err(Error::Data(format!(
                "expected {kind:?} container of rank {rank}, found {:?} of rank {}",
                self.kind,
                self.dims.len()
            )));
        }
        Ok(())
    }

    fn f32s(&self) -> Vec<f32> {
        self.payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data("container truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

fn f32_payload(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn video_container(v: &VideoClip) -> Container {
    Container {
        kind: Kind::Video,
        dims: v.dims().to_vec(),
        fps_bits: v.fps.to_bits(),
        payload: f32_payload(v.data()),
    }
}

pub fn mask_container(m: &MaskClip, fps: f32) -> Container {
    Container {
        kind: Kind::Mask,
        dims: vec![m.frames(), m.height(), m.width()],
        fps_bits: fps.to_bits(),
        payload: m.data().to_vec(),
    }
}

pub fn latent_container(z: &LatentClip, fps: f32) -> Container {
    Container {
        kind: Kind::Latent,
        dims: z.dims().to_vec(),
        fps_bits: fps.to_bits(),
        payload: f32_payload(&z.data),
    }
}

pub fn idcache_container(c: &IdCache) -> Container {
    let (lid, d) = (c.token_count(), c.d_model());
    let mut payload = Vec::with_capacity(c.n_layers() * 2 * lid * d * 4);
    for (k, v) in &c.layers {
        payload.extend(f32_payload(k.data()));
        payload.extend(f32_payload(v.data()));
    }
    Container {
        kind: Kind::IdCache,
        dims: vec![c.n_layers(), 2, lid, d],
        fps_bits: c.clip_id,
        payload,
    }
}

impl TryFrom<&Container> for VideoClip {
    type Error = Error;
    fn try_from(c: &Container) -> Result<Self> {
        c.expect(Kind::Video, 4)?;
        if c.dims[1] != 3 {
            return Err(Error::Data(format!("video must have 3 channels, found {}", c.dims[1])));
        }
        VideoClip::new(c.dims[0], c.dims[2], c.dims[3], c.fps(), c.f32s())
    }
}

impl TryFrom<&Container> for MaskClip {
    type Error = Error;
    fn try_from(c: &Container) -> Result<Self> {
        c.expect(Kind::Mask, 3)?;
        MaskClip::new(c.dims[0], c.dims[1], c.dims[2], c.payload.clone())
    }
}

impl TryFrom<&Container> for LatentClip {
    type Error = Error;
    fn try_from(c: &Container) -> Result<Self> {
        c.expect(Kind::Latent, 4)?;
        LatentClip::from_data([c.dims[0], c.dims[1], c.dims[2], c.dims[3]], c.f32s())
    }
}

impl TryFrom<&Container> for IdCache {
    type Error = Error;
    fn try_from(c: &Container) -> Result<Self> {
        c.expect(Kind::IdCache, 4)?;
        let [n, two, lid, d] = [c.dims[0], c.dims[1], c.dims[2], c.dims[3]];
        if two != 2 {
            return Err(Error::Data("identity cache must store keys and values".into()));
        }
        let data = c.f32s();
        let block = lid * d;
        let layers = (0..n)
            .map(|i| {
                let k = Tensor::from_vec(data[2 * i * block..(2 * i + 1) * block].to_vec(), &[lid, d])?;
                let v = Tensor::from_vec(data[(2 * i + 1) * block..(2 * i + 2) * block].to_vec(), &[lid, d])?;
                Ok((k, v))
            })
            .collect::<Result<Vec<_>>>()?;
        IdCache::new(c.fps_bits, layers)
    }
}

pub fn write(path: &Path, c: &Container) -> Result<()> {
    std::fs::write(path, c.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::from_bytes(&bytes)
}

pub fn write_video(path: &Path, v: &VideoClip) -> Result<()> {
    write(path, &video_container(v))
}

pub fn read_video(path: &Path) -> Result<VideoClip> {
    VideoClip::try_from(&read(path)?)
}

pub fn write_mask(path: &Path, m: &MaskClip, fps: f32) -> Result<()> {
    write(path, &mask_container(m, fps))
}

pub fn read_mask(path: &Path) -> Result<MaskClip> {
    MaskClip::try_from(&read(path)?)
}

/// Writes frames as binary PPM images `prefix_0000.ppm`, … for viewing.
pub fn export_ppm(dir: &Path, prefix: &str, v: &VideoClip) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..v.frames() {
        let mut buf = format!("P6\n{} {}\n255\n", v.width(), v.height()).into_bytes();
        for y in 0..v.height() {
            for x in 0..v.width() {
                for c in 0..3 {
                    buf.push((v.get(t, c, y, x) * 255.0).round() as u8);
                }
            }
        }
        let path = dir.join(format!("{prefix}_{t:04}.ppm"));
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{latent, mask, rng, video};
    use proptest::prelude::*;
    use rand::Rng;

    fn cache() -> IdCache {
        let mut r = rng(4);
        let layers = (0..3)
            .map(|_| {
                let k: Vec<f32> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
                let v: Vec<f32> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
                (Tensor::from_vec(k, &[2, 5]).unwrap(), Tensor::from_vec(v, &[2, 5]).unwrap())
            })
            .collect();
        IdCache::new(7, layers).unwrap()
    }

    #[test]
    fn every_kind_roundtrips() {
        let v = video(3, 5, 6, 1);
        let back = VideoClip::try_from(&Container::from_bytes(&video_container(&v).to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, v);
        let m = mask(3, 5, 6, 0.5, 2);
        let c = Container::from_bytes(&mask_container(&m, 12.0).to_bytes().unwrap()).unwrap();
        assert_eq!(c.fps(), 12.0);
        assert_eq!(MaskClip::try_from(&c).unwrap(), m);
        let z = latent([2, 4, 3, 3], 3);
        let back = LatentClip::try_from(&Container::from_bytes(&latent_container(&z, 8.0).to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.data, z.data);
        let ic = cache();
        let back = IdCache::try_from(&Container::from_bytes(&idcache_container(&ic).to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.clip_id, 7);
        assert_eq!(back.layers, ic.layers);
    }

    #[test]
    fn header_layout() {
        let m = MaskClip::filled(1, 1, 2, 1);
        let b = mask_container(&m, 8.0).to_bytes().unwrap();
        assert_eq!(&b[..4], b"VPCL");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], Kind::Mask as u8);
        assert_eq!(b[7], 3);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[20..24], &8.0f32.to_bits().to_le_bytes());
        assert_eq!(&b[24..26], &[1, 1]);
        assert_eq!(&b[26..], &crc32fast::hash(&[1, 1]).to_le_bytes());
    }

    #[test]
    fn corruption_is_rejected() {
        let good = video_container(&video(2, 3, 3, 1)).to_bytes().unwrap();
        let mut flipped = good.clone();
        flipped[30] ^= 0x40;
        assert!(Container::from_bytes(&flipped).unwrap_err().to_string().contains("CRC"));
        assert!(Container::from_bytes(&good[..good.len() - 1]).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(Container::from_bytes(&trailing).is_err());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(Container::from_bytes(&magic).is_err());
        let mut kind = good;
        kind[6] = 9;
        assert!(Container::from_bytes(&kind).is_err());
    }

    #[test]
    fn kind_and_rank_are_checked() {
        let c = mask_container(&MaskClip::filled(1, 2, 2, 0), 8.0);
        assert!(VideoClip::try_from(&c).is_err());
        let bad = Container { kind: Kind::Video, dims: vec![1, 3, 2], fps_bits: 0, payload: vec![0; 24] };
        assert!(bad.to_bytes().is_ok());
        assert!(VideoClip::try_from(&bad).is_err());
        let short = Container { kind: Kind::Video, dims: vec![1, 3, 2, 2], fps_bits: 0, payload: vec![0; 8] };
        assert!(short.to_bytes().is_err());
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let v = video(2, 4, 4, 9);
        write_video(&dir.path().join("v.vpcl"), &v).unwrap();
        assert_eq!(read_video(&dir.path().join("v.vpcl")).unwrap(), v);
        assert!(read(&dir.path().join("nope.vpcl")).is_err());
        export_ppm(dir.path(), "f", &v).unwrap();
        let ppm = std::fs::read(dir.path().join("f_0000.ppm")).unwrap();
        assert!(ppm.starts_with(b"P6\n4 4\n255\n"));
        assert_eq!(ppm.len(), 11 + 48);
    }

    proptest! {
        #[test]
        fn arbitrary_payloads_roundtrip(dims in proptest::collection::vec(1usize..5, 1..5), fps in 0.0f32..120.0, seed: u64) {
            let n: usize = dims.iter().product();
            let mut r = rng(seed);
            let payload: Vec<u8> = (0..4 * n).map(|_| r.random()).collect();
            let c = Container { kind: Kind::Latent, dims, fps_bits: fps.to_bits(), payload };
            prop_assert_eq!(Container::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
        }
    }
}
