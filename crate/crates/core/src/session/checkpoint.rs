//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic "CLGCKPT\0" | version u32 | library sha256 [32]
//! step u64 | tournaments u64
//! 3 x rng { seed [32] | stream u64 | word_pos u128 }    init, mutation, tournament
//! members u64 | patches u64
//! per member: last_loss (flag u8, f64)
//!   per patch: patch_id u64 | params 10 x f64 | m 10 x f64 | v 10 x f64 | t u64
//! trace rows u64 | per row: step u64 | genome_id u64 | loss f64
//! sha256 of everything above [32]
//! ```

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::genome::PARAMS_PER_PATCH;
use crate::optimizer::{Moments, RngStreams, TraceRow};

pub const MAGIC: &[u8; 8] = b"CLGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub patch_id: usize,
    pub params: [f64; PARAMS_PER_PATCH],
    pub moments: Moments,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemberRecord {
    pub last_loss: Option<f64>,
    pub patches: Vec<PatchRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub library_hash: [u8; 32],
    pub step: usize,
    pub tournaments: usize,
    pub rngs: RngStreams,
    pub members: Vec<MemberRecord>,
    pub trace: Vec<TraceRow>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn rng(&mut self, r: &ChaCha8Rng) {
        self.bytes(&r.get_seed());
        self.u64(r.get_stream());
        self.bytes(&r.get_word_pos().to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::ChecksumError("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::ChecksumError("count out of range".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f64s<const N: usize>(&mut self) -> Result<[f64; N]> {
        let mut out = [0.0; N];
        for v in &mut out {
            *v = self.f64()?;
        }
        Ok(out)
    }
    fn rng(&mut self) -> Result<ChaCha8Rng> {
        let mut r = ChaCha8Rng::from_seed(self.array()?);
        r.set_stream(self.u64()?);
        r.set_word_pos(u128::from_le_bytes(self.array()?));
        Ok(r)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.bytes(&VERSION.to_le_bytes());
        w.bytes(&self.library_hash);
        w.u64(self.step as u64);
        w.u64(self.tournaments as u64);
        w.rng(&self.rngs.init);
        w.rng(&self.rngs.mutation);
        w.rng(&self.rngs.tournament);
        let patches = self.members.first().map_or(0, |m| m.patches.len());
        w.u64(self.members.len() as u64);
        w.u64(patches as u64);
        for m in &self.members {
            debug_assert_eq!(m.patches.len(), patches);
            w.bytes(&[u8::from(m.last_loss.is_some())]);
            w.f64(m.last_loss.unwrap_or(0.0));
            for p in &m.patches {
                w.u64(p.patch_id as u64);
                p.params.iter().for_each(|&v| w.f64(v));
                p.moments.m.iter().for_each(|&v| w.f64(v));
                p.moments.v.iter().for_each(|&v| w.f64(v));
                w.u64(p.moments.t);
            }
        }
        w.u64(self.trace.len() as u64);
        for r in &self.trace {
            w.u64(r.step as u64);
            w.u64(r.genome_id as u64);
            w.f64(r.loss);
        }
        let digest = Sha256::digest(&w.0);
        w.bytes(&digest);
        w.0
    }

    /// Verifies the trailing checksum before interpreting anything else.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 + 32 {
            return Err(Error::ChecksumError("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::ChecksumError("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::ChecksumError("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::ChecksumError(format!("unsupported checkpoint version {version}")));
        }
        let library_hash = r.array()?;
        let step = r.usize()?;
        let tournaments = r.usize()?;
        let rngs = RngStreams {
            init: r.rng()?,
            mutation: r.rng()?,
            tournament: r.rng()?,
        };
        let (n_members, n_patches) = (r.usize()?, r.usize()?);
        let mut members = Vec::new();
        for _ in 0..n_members {
            let has_loss = r.take(1)?[0] != 0;
            let loss = r.f64()?;
            let mut patches = Vec::new();
            for _ in 0..n_patches {
                patches.push(PatchRecord {
                    patch_id: r.usize()?,
                    params: r.f64s()?,
                    moments: Moments {
                        m: r.f64s()?,
                        v: r.f64s()?,
                        t: r.u64()?,
                    },
                });
            }
            members.push(MemberRecord {
                last_loss: has_loss.then_some(loss),
                patches,
            });
        }
        let n_rows = r.usize()?;
        let mut trace = Vec::new();
        for _ in 0..n_rows {
            trace.push(TraceRow {
                step: r.usize()?,
                genome_id: r.usize()?,
                loss: r.f64()?,
            });
        }
        if r.pos != body.len() {
            return Err(Error::ChecksumError("trailing bytes".into()));
        }
        Ok(Self {
            library_hash,
            step,
            tournaments,
            rngs,
            members,
            trace,
        })
    }
}
