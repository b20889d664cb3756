//! Binary checkpoint:
//!
//! ```text
//! magic "RDAINRCK" | version u32 | config-json len u64 + bytes | epoch u64
//! | sections (tag [u8; 4], count u64, count × f64) | adam steps 3 × u64
//! | SHA-256 of everything before it
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{zero_model, AdamState, LatentTable, TrainConfig, TrainState};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RDAINRCK";
const DIGEST_LEN: usize = 32;
const TAGS: [&[u8; 4]; 9] = [
    b"TMPL", b"VELO", b"LATN", b"AZ_M", b"AZ_V", b"AT_M", b"AT_V", b"AV_M", b"AV_V",
];

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], data: &[f64]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&state.config).expect("config serialises");
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    let [az, at, av] = &state.adam;
    let sections: [&[f64]; 9] = [
        &state.model.template.params,
        &state.model.velocity.params,
        &state.latents.codes,
        &az.m,
        &az.v,
        &at.m,
        &at.v,
        &av.m,
        &av.v,
    ];
    for (tag, data) in TAGS.iter().zip(sections) {
        put_section(&mut out, tag, data);
    }
    for a in &state.adam {
        out.extend_from_slice(&a.step.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn section(&mut self, tag: &[u8; 4], expect: usize) -> Result<Vec<f64>> {
        let name = String::from_utf8_lossy(tag).into_owned();
        if self.take(4, &name)? != tag {
            return Err(Error::Checkpoint(format!("expected section {name}")));
        }
        let count = self.u64(&name)?;
        if count != expect as u64 {
            return Err(Error::Checkpoint(format!(
                "section {name} holds {count} values, architecture needs {expect}"
            )));
        }
        let bytes = self.take(
            expect
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            &name,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Checkpoint("file too short".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint(
            "checksum mismatch (truncated or corrupted)".into(),
        ));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let cfg_len = usize::try_from(r.u64("config length")?)
        .map_err(|_| Error::Checkpoint("config too large".into()))?;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config: TrainConfig =
        serde_json::from_str(cfg_text).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let epoch = usize::try_from(r.u64("epoch")?)
        .map_err(|_| Error::Checkpoint("epoch overflows".into()))?;
    let mut model = zero_model(&config)?;
    let n_t = model.template.param_count();
    let n_v = model.velocity.param_count();
    model.template.params = r.section(TAGS[0], n_t)?;
    model.velocity.params = r.section(TAGS[1], n_v)?;
    // the latent count is whatever the file says, as long as it is whole rows
    let lat_tag = String::from_utf8_lossy(TAGS[2]).into_owned();
    let save = r.pos;
    r.take(4, &lat_tag)?;
    let n_z = usize::try_from(r.u64(&lat_tag)?)
        .map_err(|_| Error::Checkpoint("latent count overflows".into()))?;
    r.pos = save;
    if n_z == 0 || n_z % config.d_z != 0 {
        return Err(Error::Checkpoint(format!(
            "latent section of {n_z} values is not whole rows"
        )));
    }
    let codes = r.section(TAGS[2], n_z)?;
    let mut adam = [
        AdamState::new(n_z),
        AdamState::new(n_t),
        AdamState::new(n_v),
    ];
    for (i, a) in adam.iter_mut().enumerate() {
        a.m = r.section(TAGS[3 + 2 * i], a.len())?;
        a.v = r.section(TAGS[4 + 2 * i], a.len())?;
    }
    for a in adam.iter_mut() {
        a.step = r.u64("adam step")?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(TrainState {
        config: config.clone(),
        model,
        latents: LatentTable {
            d_z: config.d_z,
            codes,
        },
        adam,
        epoch,
    })
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&std::fs::read(path)?)
}
