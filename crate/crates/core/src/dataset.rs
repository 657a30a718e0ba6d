//! Episode collections and their on-disk form.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! b"CPMDATA1"  u32 header_len  header JSON
//! per episode: u64 seed  u32 steps
//!   per step:  image s_t  u8 target  u8 dir  u8 pairs  (u8 pusher, u8 pushed)*  image s_t+1
//! ```
//!
//! Images are `height * width * 3` values, either bytes or `f32`, as the
//! header's `encoding` says.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sample_episode, Direction, EnvAction, EnvConfig, Episode, Image};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CPMDATA1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    U8,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: EnvConfig,
    pub seed: u64,
    pub episodes: usize,
    pub encoding: Encoding,
    pub image_shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: EnvConfig,
    pub seed: u64,
    pub encoding: Encoding,
    pub episodes: Vec<Episode>,
}

/// Address of one transition `(s_t, a_t, s_t+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StepRef {
    pub episode: usize,
    pub t: usize,
}

impl Dataset {
    /// Generates `episodes` episodes; episode seeds are drawn from `seed`.
    ///
    /// With [`Encoding::U8`] frames are held in quantized form so a file
    /// round trip reproduces them exactly.
    pub fn generate(config: &EnvConfig, episodes: usize, seed: u64, encoding: Encoding) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let mut ep = sample_episode(config, rng.gen())?;
            if encoding == Encoding::U8 {
                for f in &mut ep.frames {
                    *f = Image::from_quantized(f.height, f.width, &f.quantize())?;
                }
            }
            out.push(ep);
        }
        Ok(Dataset {
            config: config.clone(),
            seed,
            encoding,
            episodes: out,
        })
    }

    pub fn transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = StepRef> + '_ {
        self.episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.len()).map(move |t| StepRef { episode: e, t }))
    }

    pub fn frame(&self, episode: usize, t: usize) -> &Image {
        &self.episodes[episode].frames[t]
    }

    pub fn action(&self, s: StepRef) -> EnvAction {
        self.episodes[s.episode].actions[s.t]
    }

    pub fn header(&self) -> Header {
        Header {
            config: self.config.clone(),
            seed: self.seed,
            episodes: self.episodes.len(),
            encoding: self.encoding,
            image_shape: self.config.image_shape(),
        }
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header())?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::new();
        for ep in &self.episodes {
            buf.clear();
            buf.extend_from_slice(&ep.seed.to_le_bytes());
            buf.extend_from_slice(&(ep.len() as u32).to_le_bytes());
            for t in 0..ep.len() {
                self.put_image(&mut buf, &ep.frames[t]);
                let a = ep.actions[t];
                buf.push(a.target as u8);
                buf.push(a.dir.index() as u8);
                buf.push(ep.interactions[t].len() as u8);
                for &(i, j) in &ep.interactions[t] {
                    buf.push(i as u8);
                    buf.push(j as u8);
                }
                self.put_image(&mut buf, &ep.frames[t + 1]);
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    fn put_image(&self, buf: &mut Vec<u8>, img: &Image) {
        match self.encoding {
            Encoding::U8 => buf.extend_from_slice(&img.quantize()),
            Encoding::F32 => img.data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let header_len = read_u32(&mut r)? as usize;
        if header_len > 1 << 20 {
            return Err(Error::Format("dataset header is implausibly large".into()));
        }
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        header.config.validate()?;
        if header.image_shape != header.config.image_shape() {
            return Err(Error::Format("image shape disagrees with the grid config".into()));
        }
        let [h, w, _] = header.image_shape;
        let read_image = |r: &mut dyn Read| -> Result<Image> {
            match header.encoding {
                Encoding::U8 => {
                    let mut b = vec![0u8; h * w * 3];
                    r.read_exact(&mut b)?;
                    Image::from_quantized(h, w, &b)
                }
                Encoding::F32 => {
                    let mut b = vec![0u8; h * w * 12];
                    r.read_exact(&mut b)?;
                    let data = b
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Ok(Image { height: h, width: w, data })
                }
            }
        };
        let mut episodes = Vec::with_capacity(header.episodes);
        for _ in 0..header.episodes {
            let mut seed = [0u8; 8];
            r.read_exact(&mut seed)?;
            let steps = read_u32(&mut r)? as usize;
            let mut ep = Episode {
                seed: u64::from_le_bytes(seed),
                frames: Vec::with_capacity(steps + 1),
                actions: Vec::with_capacity(steps),
                interactions: Vec::with_capacity(steps),
            };
            for t in 0..steps {
                let before = read_image(&mut r)?;
                if t == 0 {
                    ep.frames.push(before);
                } else if ep.frames[t] != before {
                    return Err(Error::Format("consecutive steps disagree on a shared frame".into()));
                }
                let mut b = [0u8; 3];
                r.read_exact(&mut b)?;
                let target = b[0] as usize;
                if target >= header.config.objects {
                    return Err(Error::Format(format!("action target {target} out of range")));
                }
                let dir = Direction::from_index(b[1] as usize).map_err(|_| Error::Format("bad direction byte".into()))?;
                let mut pairs = Vec::with_capacity(b[2] as usize);
                for _ in 0..b[2] {
                    let mut p = [0u8; 2];
                    r.read_exact(&mut p)?;
                    pairs.push((p[0] as usize, p[1] as usize));
                }
                ep.actions.push(EnvAction::new(target, dir));
                ep.interactions.push(pairs);
                ep.frames.push(read_image(&mut r)?);
            }
            episodes.push(ep);
        }
        Ok(Dataset {
            config: header.config,
            seed: header.seed,
            encoding: header.encoding,
            episodes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
