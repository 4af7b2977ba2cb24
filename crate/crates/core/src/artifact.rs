//! The `.d3m` container and its byte accounting. Layout: see docs/FORMAT.md.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bytes::Reader;
use crate::data::{ClassId, GenerationRecord, LabelPrecision, PromptEmbedding, SoftLabelSet};
use crate::diffusion::PromptTemplate;
use crate::error::{Error, Result};
use crate::trainer::LabelMode;

pub const MAGIC: &[u8; 4] = b"D3M\0";
pub const VERSION: u16 = 1;
const FLAG_SOFT: u16 = 1;
const FLAG_F16: u16 = 2;
/// Fixed-size part of the header, before the template string.
pub const FIXED_HEADER_BYTES: usize = 4 + 2 + 2 + 4 + 4 + 2 + 2 + 4 + 4 + 4 + 32;
pub const CHECKSUM_BYTES: usize = 32;
pub const CLASS_FRAMING_BYTES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactHeader {
    pub version: u16,
    pub mode: LabelMode,
    pub precision: LabelPrecision,
    /// Prompt width.
    pub d: usize,
    /// Class count of the label space.
    pub classes: usize,
    pub grid: (usize, usize),
    pub image_dims: (usize, usize),
    pub temperature: f32,
    pub backend_fingerprint: [u8; 32],
    pub template: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry {
    pub prompt: PromptEmbedding,
    pub records: Vec<GenerationRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistilledArtifact {
    pub header: ArtifactHeader,
    pub classes: Vec<ClassEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClassBytes {
    pub class_id: ClassId,
    pub records: usize,
    pub prompt: usize,
    pub seeds: usize,
    pub labels: usize,
    pub framing: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SizeBreakdown {
    pub per_class: Vec<ClassBytes>,
    pub prompt: usize,
    pub seeds: usize,
    pub labels: usize,
    /// Fixed header, template, class count, per-class framing and checksum.
    pub header: usize,
    pub total: usize,
}

impl DistilledArtifact {
    pub fn template(&self) -> Result<PromptTemplate> {
        PromptTemplate::parse(&self.header.template)
    }

    pub fn cells(&self) -> usize {
        self.header.grid.0 * self.header.grid.1
    }

    pub fn class(&self, class_id: ClassId) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.prompt.class_id == class_id)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        let bad = |m: String| Err(Error::MalformedArtifact(m));
        if h.grid.0 == 0 || h.grid.1 == 0 || h.image_dims.0 % h.grid.0 != 0 || h.image_dims.1 % h.grid.1 != 0 {
            return Err(Error::IndivisibleGrid {
                dims: h.image_dims,
                grid: h.grid,
            });
        }
        if !(h.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        self.template()?;
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            let id = c.prompt.class_id;
            if !seen.insert(id) {
                return bad(format!("duplicate class id {id}"));
            }
            if id as usize >= h.classes {
                return Err(Error::LabelOutOfRange(id as usize));
            }
            if c.prompt.dim() != h.d {
                return bad(format!("class {id}: prompt has {} entries, header says {}", c.prompt.dim(), h.d));
            }
            for r in &c.records {
                match (&r.soft_labels, h.mode) {
                    (None, LabelMode::OneHot) => {}
                    (Some(s), LabelMode::Soft) => {
                        if s.rows() != self.cells()
                            || s.classes() != h.classes
                            || s.precision() != h.precision
                            || s.temperature().to_bits() != h.temperature.to_bits()
                        {
                            return bad(format!("class {id}: soft labels disagree with header"));
                        }
                    }
                    _ => return bad(format!("class {id}: record label mode disagrees with header")),
                }
            }
        }
        Ok(())
    }

    fn flags(&self) -> u16 {
        let mut f = 0;
        if self.header.mode == LabelMode::Soft {
            f |= FLAG_SOFT;
        }
        if self.header.precision == LabelPrecision::F16 {
            f |= FLAG_F16;
        }
        f
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let h = &self.header;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&h.version.to_le_bytes());
        out.extend_from_slice(&self.flags().to_le_bytes());
        out.extend_from_slice(&(h.d as u32).to_le_bytes());
        out.extend_from_slice(&(h.classes as u32).to_le_bytes());
        out.extend_from_slice(&(h.grid.0 as u16).to_le_bytes());
        out.extend_from_slice(&(h.grid.1 as u16).to_le_bytes());
        out.extend_from_slice(&(h.image_dims.0 as u32).to_le_bytes());
        out.extend_from_slice(&(h.image_dims.1 as u32).to_le_bytes());
        out.extend_from_slice(&h.temperature.to_le_bytes());
        out.extend_from_slice(&h.backend_fingerprint);
        out.extend_from_slice(&(h.template.len() as u16).to_le_bytes());
        out.extend_from_slice(h.template.as_bytes());
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&c.prompt.class_id.to_le_bytes());
            out.extend_from_slice(&(c.records.len() as u32).to_le_bytes());
            for v in &c.prompt.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for r in &c.records {
                out.extend_from_slice(&r.seed.to_le_bytes());
                if let Some(s) = &r.soft_labels {
                    s.encode(&mut out);
                }
            }
        }
        let sum: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&sum);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKSUM_BYTES {
            return Err(Error::ChecksumMismatch);
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_BYTES);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::ChecksumMismatch);
        }
        let mut r = Reader::new(body);
        if r.take(4)? != MAGIC {
            return Err(Error::MalformedArtifact("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let flags = r.u16()?;
        let mode = if flags & FLAG_SOFT != 0 { LabelMode::Soft } else { LabelMode::OneHot };
        let precision = if flags & FLAG_F16 != 0 { LabelPrecision::F16 } else { LabelPrecision::F32 };
        let d = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let grid = (r.u16()? as usize, r.u16()? as usize);
        let image_dims = (r.u32()? as usize, r.u32()? as usize);
        let temperature = r.f32()?;
        let backend_fingerprint = r.bytes32()?;
        let tlen = r.u16()? as usize;
        let template = String::from_utf8(r.take(tlen)?.to_vec())
            .map_err(|_| Error::MalformedArtifact("template is not UTF-8".into()))?;
        let header = ArtifactHeader {
            version,
            mode,
            precision,
            d,
            classes,
            grid,
            image_dims,
            temperature,
            backend_fingerprint,
            template,
        };
        let cells = grid.0 * grid.1;
        let n_classes = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let class_id = r.u32()?;
            let n_records = r.u32()? as usize;
            let vector = (0..d).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            let mut records = Vec::with_capacity(n_records);
            for _ in 0..n_records {
                let seed = r.u64()?;
                let soft_labels = match mode {
                    LabelMode::OneHot => None,
                    LabelMode::Soft => {
                        let n = cells * classes;
                        Some(match precision {
                            LabelPrecision::F32 => SoftLabelSet::from_raw_f32(
                                cells,
                                classes,
                                temperature,
                                (0..n).map(|_| r.f32()).collect::<Result<_>>()?,
                            ),
                            LabelPrecision::F16 => SoftLabelSet::from_raw_f16(
                                cells,
                                classes,
                                temperature,
                                (0..n).map(|_| r.u16()).collect::<Result<_>>()?,
                            ),
                        })
                    }
                };
                records.push(GenerationRecord { seed, soft_labels });
            }
            entries.push(ClassEntry {
                prompt: PromptEmbedding::new(class_id, vector)?,
                records,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::MalformedArtifact("trailing bytes before checksum".into()));
        }
        let a = DistilledArtifact { header, classes: entries };
        a.validate()?;
        Ok(a)
    }

    /// Writes the artifact and returns the byte count.
    pub fn save(&self, path: &Path) -> Result<u64> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::audit::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// SHA-256 of the serialized artifact.
    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_bytes()?).into())
    }

    pub fn account(&self) -> SizeBreakdown {
        let h = &self.header;
        let label_bytes = match h.mode {
            LabelMode::OneHot => 0,
            LabelMode::Soft => self.cells() * h.classes * h.precision.bytes(),
        };
        let mut b = SizeBreakdown {
            header: FIXED_HEADER_BYTES + 2 + h.template.len() + 4 + CHECKSUM_BYTES,
            ..Default::default()
        };
        for c in &self.classes {
            let n = c.records.len();
            let cb = ClassBytes {
                class_id: c.prompt.class_id,
                records: n,
                prompt: 4 * c.prompt.dim(),
                seeds: 8 * n,
                labels: label_bytes * n,
                framing: CLASS_FRAMING_BYTES,
            };
            b.prompt += cb.prompt;
            b.seeds += cb.seeds;
            b.labels += cb.labels;
            b.header += cb.framing;
            b.per_class.push(cb);
        }
        b.total = b.prompt + b.seeds + b.labels + b.header;
        b
    }

    /// Header fields and accounting as JSON.
    pub fn inspect(&self) -> serde_json::Value {
        let h = &self.header;
        serde_json::json!({
            "header": {
                "version": h.version,
                "mode": h.mode.name(),
                "label_precision": h.precision,
                "d": h.d,
                "classes": h.classes,
                "grid": [h.grid.0, h.grid.1],
                "image_dims": [h.image_dims.0, h.image_dims.1],
                "temperature": h.temperature,
                "backend_fingerprint": hex::encode(h.backend_fingerprint),
                "template": h.template,
                "class_ids": self.classes.iter().map(|c| c.prompt.class_id).collect::<Vec<_>>(),
                "records": self.classes.iter().map(|c| c.records.len()).sum::<usize>(),
            },
            "size": self.account(),
        })
    }
}
