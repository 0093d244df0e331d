// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary trace container. All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "OCRHTRC\0"
//! version      u32
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (TraceHeader)
//! fidelity     u8       0 = argmax_only, 1 = dense
//! num_steps    u32
//! step record  x num_steps:
//!   step       u32
//!   token_len  u32, then token_len bytes of UTF-8
//!   has_id     u8, then i64 token id when has_id == 1
//!   argmax     L*H x (u32 index, 0xFFFFFFFF = masked; f32 value)
//!   dense      L*H x context_len x f32   (dense fidelity only)
//! ```

use super::{AttentionTrace, Fidelity, HeadArgmax, StepRecord, TraceError, TraceHeader, SCHEMA_VERSION};

pub const MAGIC: &[u8; 8] = b"OCRHTRC\0";

const MASKED_INDEX: u32 = u32::MAX;

pub fn encode_binary(trace: &AttentionTrace) -> Vec<u8> {
    let header = serde_json::to_vec(&trace.header).expect("trace header serializes");
    let mut out = Vec::with_capacity(header.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.push(match trace.fidelity {
        Fidelity::ArgmaxOnly => 0,
        Fidelity::Dense => 1,
    });
    out.extend_from_slice(&(trace.steps.len() as u32).to_le_bytes());
    for rec in &trace.steps {
        out.extend_from_slice(&(rec.step as u32).to_le_bytes());
        out.extend_from_slice(&(rec.token.len() as u32).to_le_bytes());
        out.extend_from_slice(rec.token.as_bytes());
        match rec.token_id {
            Some(id) => {
                out.push(1);
                out.extend_from_slice(&id.to_le_bytes());
            }
            None => out.push(0),
        }
        for a in &rec.heads {
            out.extend_from_slice(&a.index.unwrap_or(MASKED_INDEX).to_le_bytes());
            out.extend_from_slice(&a.value.to_le_bytes());
        }
        if let Some(dense) = &rec.dense {
            for v in dense {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, path: &str) -> Result<&'a [u8], TraceError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                TraceError::violation(
                    path,
                    format!(
                        "truncated: need {n} bytes at offset {}, file has {}",
                        self.pos,
                        self.bytes.len()
                    ),
                )
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, path: &str) -> Result<u8, TraceError> {
        Ok(self.take(1, path)?[0])
    }

    fn u32(&mut self, path: &str) -> Result<u32, TraceError> {
        Ok(u32::from_le_bytes(self.take(4, path)?.try_into().unwrap()))
    }

    fn i64(&mut self, path: &str) -> Result<i64, TraceError> {
        Ok(i64::from_le_bytes(self.take(8, path)?.try_into().unwrap()))
    }

    fn f32(&mut self, path: &str) -> Result<f32, TraceError> {
        Ok(f32::from_le_bytes(self.take(4, path)?.try_into().unwrap()))
    }
}

/// Parses the binary container. Structural checks beyond framing are left
/// to [`super::validate`].
pub fn decode_binary(bytes: &[u8]) -> Result<AttentionTrace, TraceError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(TraceError::violation("magic", "not an ocrhead binary trace"));
    }
    let version = r.u32("version")?;
    if version != SCHEMA_VERSION {
        return Err(TraceError::VersionMismatch {
            found: version,
            supported: SCHEMA_VERSION,
        });
    }
    let header_len = r.u32("header_len")? as usize;
    let header_bytes = r.take(header_len, "header")?;
    let header: TraceHeader =
        serde_json::from_slice(header_bytes).map_err(|e| TraceError::violation("header", e.to_string()))?;
    if header.num_layers == 0 || header.num_heads == 0 {
        return Err(TraceError::violation(
            "header.num_layers",
            "layer and head counts must be >= 1",
        ));
    }
    let fidelity = match r.u8("fidelity")? {
        0 => Fidelity::ArgmaxOnly,
        1 => Fidelity::Dense,
        other => return Err(TraceError::violation("fidelity", format!("unknown code {other}"))),
    };
    let num_steps = r.u32("num_steps")? as usize;
    let heads = header.head_count();

    let mut steps = Vec::with_capacity(num_steps.min(1 << 16));
    for s in 0..num_steps {
        let path = format!("steps[{s}]");
        let step = r.u32(&format!("{path}.step"))? as usize;
        let token_len = r.u32(&format!("{path}.token"))? as usize;
        let token = std::str::from_utf8(r.take(token_len, &format!("{path}.token"))?)
            .map_err(|e| TraceError::violation(format!("{path}.token"), e.to_string()))?
            .to_string();
        let token_id = match r.u8(&format!("{path}.token_id"))? {
            0 => None,
            1 => Some(r.i64(&format!("{path}.token_id"))?),
            other => {
                return Err(TraceError::violation(
                    format!("{path}.token_id"),
                    format!("bad presence flag {other}"),
                ))
            }
        };
        let mut argmax = Vec::with_capacity(heads);
        for i in 0..heads {
            let p = format!("{path}.argmax[{i}]");
            let index = r.u32(&p)?;
            let value = r.f32(&p)?;
            argmax.push(HeadArgmax {
                index: (index != MASKED_INDEX).then_some(index),
                value,
            });
        }
        let dense = match fidelity {
            Fidelity::ArgmaxOnly => None,
            Fidelity::Dense => {
                let n = heads * header.context_len(s);
                let raw = r.take(n * 4, &format!("{path}.dense"))?;
                Some(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
        };
        steps.push(StepRecord {
            step,
            token,
            token_id,
            heads: argmax,
            dense,
        });
    }
    if r.pos != bytes.len() {
        return Err(TraceError::violation(
            "trailer",
            format!("{} unexpected bytes after the last step", bytes.len() - r.pos),
        ));
    }
    Ok(AttentionTrace {
        header,
        fidelity,
        steps,
    })
}
