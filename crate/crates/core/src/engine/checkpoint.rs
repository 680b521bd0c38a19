//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "CBSL" | u32 format_version | u64 dimension | u64 task_fingerprint
//! f64 × dimension                      params
//! u8 optimizer kind (0 = sgd, 1 = adam)
//!   adam: f64 beta1 | f64 beta2 | f64 eps
//! u64 step_count
//!   adam: f64 × dimension first moment | f64 × dimension second moment
//! [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! u64 tokens_seen | u64 schedule_cursor
//! u8 has_smoothed_loss | f64 smoothed_loss
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{AdamHyper, OptimizerKind, OptimizerState};
use crate::rng::{RngState, RngStream};
use crate::tasks::Task;

pub const MAGIC: &[u8; 4] = b"CBSL";
pub const FORMAT_VERSION: u32 = 1;

/// All state needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<f64>,
    pub optimizer: OptimizerState,
    pub rng: RngStream,
    pub tokens_seen: u64,
    pub schedule_cursor: usize,
    /// EMA of the raw loss; `None` before the first step.
    pub smoothed_loss: Option<f64>,
    pub task_fingerprint: u64,
}

impl Checkpoint {
    /// Step-zero state for `seed`: parameters come from the seed's `init`
    /// child stream and data from its `data` child stream.
    pub fn fresh(task: &dyn Task, optimizer: OptimizerKind, seed: u64) -> Result<Self> {
        let root = RngStream::from_seed(seed);
        let params = task.init_params(&mut root.child(b"init"));
        Ok(Self {
            optimizer: OptimizerState::new(optimizer, params.len())?,
            params,
            rng: root.child(b"data"),
            tokens_seen: 0,
            schedule_cursor: 0,
            smoothed_loss: None,
            task_fingerprint: task.fingerprint(),
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step_count
    }

    pub fn check_task(&self, task: &dyn Task) -> Result<()> {
        if self.task_fingerprint != task.fingerprint() {
            return Err(Error::invalid(format!(
                "checkpoint belongs to task {:016x}, not {:016x}",
                self.task_fingerprint,
                task.fingerprint()
            )));
        }
        if self.params.len() != task.dimension() {
            return Err(Error::invalid("checkpoint dimension does not match the task"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.params.len();
        let mut out = Vec::with_capacity(96 + 24 * d);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&self.task_fingerprint.to_le_bytes());
        put_f64s(&mut out, &self.params);
        match self.optimizer.kind {
            OptimizerKind::Sgd => out.push(0),
            OptimizerKind::Adam(h) => {
                out.push(1);
                put_f64s(&mut out, &[h.beta1, h.beta2, h.eps]);
            }
        }
        out.extend_from_slice(&self.optimizer.step_count.to_le_bytes());
        if let OptimizerKind::Adam(_) = self.optimizer.kind {
            put_f64s(&mut out, &self.optimizer.first_moment);
            put_f64s(&mut out, &self.optimizer.second_moment);
        }
        let rng = self.rng.state();
        out.extend_from_slice(&rng.seed);
        out.extend_from_slice(&rng.stream.to_le_bytes());
        out.extend_from_slice(&rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.tokens_seen.to_le_bytes());
        out.extend_from_slice(&(self.schedule_cursor as u64).to_le_bytes());
        match self.smoothed_loss {
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.to_le_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&0f64.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "missing CBSL magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedFormat {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let dim_offset = r.offset;
        let d = r.u64()?;
        // Guard the allocation before trusting the header.
        if d.saturating_mul(8) > bytes.len() as u64 {
            return Err(r.error_at(dim_offset, "dimension larger than the file"));
        }
        let d = d as usize;
        let task_fingerprint = r.u64()?;
        let params = r.f64s(d)?;
        let kind_offset = r.offset;
        let kind = match r.u8()? {
            0 => OptimizerKind::Sgd,
            1 => {
                let h = r.f64s(3)?;
                OptimizerKind::Adam(AdamHyper {
                    beta1: h[0],
                    beta2: h[1],
                    eps: h[2],
                })
            }
            other => return Err(r.error_at(kind_offset, &format!("unknown optimizer tag {other}"))),
        };
        let step_count = r.u64()?;
        let (first_moment, second_moment) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam(_) => (r.f64s(d)?, r.f64s(d)?),
        };
        let seed: [u8; 32] = r.take(32)?.try_into().expect("took 32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("took 16 bytes"));
        let tokens_seen = r.u64()?;
        let schedule_cursor = r.u64()? as usize;
        let flag_offset = r.offset;
        let has_smoothed = r.u8()?;
        let smoothed = r.f64()?;
        let smoothed_loss = match has_smoothed {
            0 => None,
            1 => Some(smoothed),
            other => return Err(r.error_at(flag_offset, &format!("bad smoothed-loss flag {other}"))),
        };
        if r.offset != bytes.len() {
            return Err(r.error_at(r.offset as u64, "trailing bytes after checkpoint"));
        }
        Ok(Self {
            params,
            optimizer: OptimizerState {
                kind,
                step_count,
                first_moment,
                second_moment,
            },
            rng: RngStream::from_state(RngState {
                seed,
                stream,
                word_pos,
            }),
            tokens_seen,
            schedule_cursor,
            smoothed_loss,
            task_fingerprint,
        })
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: impl TryInto<u64>, message: &str) -> Error {
        Error::Parse {
            offset: offset.try_into().unwrap_or(u64::MAX),
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error_at(
                self.offset,
                &format!("unexpected end of file, needed {n} more bytes"),
            ));
        };
        let out = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.saturating_mul(8))?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Writes via a temporary sibling and an atomic rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
