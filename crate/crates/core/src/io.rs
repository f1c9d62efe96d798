//! Tensor container files and image dumps.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "PLF1" | rank: u8 | dims: rank x u32 | dtype: u8 | payload (row-major)
//! ```
//!
//! dtype tags: `0` = f32, `1` = f64, `2` = u16.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{argmax_f32, HardLabelMap, ProbabilityMap, Tensor3, IGNORE_LABEL};

pub const MAGIC: &[u8; 4] = b"PLF1";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U16(Vec<u16>),
}

impl TensorData {
    pub fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U16(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn element_size(tag: u8) -> Option<usize> {
        match tag {
            0 => Some(4),
            1 => Some(8),
            2 => Some(2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Container {
    pub fn encode(&self) -> std::result::Result<Vec<u8>, String> {
        if self.dims.len() > u8::MAX as usize {
            return Err(format!("rank {} too large", self.dims.len()));
        }
        let count: usize = self.dims.iter().product();
        if count != self.data.len() {
            return Err(format!(
                "dims {:?} describe {count} elements but payload has {}",
                self.dims,
                self.data.len()
            ));
        }
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + count * 8);
        out.extend_from_slice(MAGIC);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| format!("dimension {d} exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(self.data.tag());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err("bad magic bytes (not a PLF1 tensor file)".into());
        }
        let rank = bytes[4] as usize;
        let header = 5 + 4 * rank + 1;
        if bytes.len() < header {
            return Err("truncated header".into());
        }
        let dims: Vec<usize> = bytes[5..5 + 4 * rank]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        let tag = bytes[header - 1];
        let size = TensorData::element_size(tag).ok_or_else(|| format!("unknown dtype tag {tag}"))?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("dimension product overflows")?;
        let payload = &bytes[header..];
        if Some(payload.len()) != count.checked_mul(size) {
            return Err(format!(
                "payload is {} bytes, expected {count} x {size}",
                payload.len()
            ));
        }
        let data = match tag {
            0 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            1 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            _ => TensorData::U16(
                payload
                    .chunks_exact(2)
                    .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|message| Error::Format {
            path: path.to_owned(),
            message,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode().map_err(|message| Error::Format {
            path: path.to_owned(),
            message,
        })?;
        write_atomic(path, &bytes)
    }

    pub fn from_tensor(t: &Tensor3) -> Self {
        Self {
            dims: vec![t.height(), t.width(), t.channels()],
            data: TensorData::F32(t.data().to_vec()),
        }
    }

    pub fn from_labels(l: &HardLabelMap) -> Self {
        Self {
            dims: vec![l.height(), l.width()],
            data: TensorData::U16(l.labels().to_vec()),
        }
    }

    pub fn to_tensor(&self) -> std::result::Result<Tensor3, String> {
        match (&self.data, self.dims.as_slice()) {
            (TensorData::F32(v), &[h, w, c]) => {
                Tensor3::new(h, w, c, v.clone()).map_err(|e| e.to_string())
            }
            _ => Err(format!(
                "expected a rank-3 f32 tensor, found rank {} tag {}",
                self.dims.len(),
                self.data.tag()
            )),
        }
    }

    pub fn to_labels(&self, classes: usize) -> std::result::Result<HardLabelMap, String> {
        match (&self.data, self.dims.as_slice()) {
            (TensorData::U16(v), &[h, w]) => {
                HardLabelMap::new(h, w, v.clone(), classes).map_err(|e| e.to_string())
            }
            _ => Err(format!(
                "expected a rank-2 u16 label map, found rank {} tag {}",
                self.dims.len(),
                self.data.tag()
            )),
        }
    }
}

fn format_err(path: &Path, message: String) -> Error {
    Error::Format {
        path: path.to_owned(),
        message,
    }
}

pub fn write_tensor(path: &Path, t: &Tensor3) -> Result<()> {
    Container::from_tensor(t).write(path)
}

pub fn read_tensor(path: &Path) -> Result<Tensor3> {
    Container::read(path)?
        .to_tensor()
        .map_err(|m| format_err(path, m))
}

pub fn read_probability(path: &Path) -> Result<ProbabilityMap> {
    ProbabilityMap::new(read_tensor(path)?).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_labels(path: &Path, l: &HardLabelMap) -> Result<()> {
    Container::from_labels(l).write(path)
}

pub fn read_labels(path: &Path, classes: usize) -> Result<HardLabelMap> {
    Container::read(path)?
        .to_labels(classes)
        .map_err(|m| format_err(path, m))
}

/// Reads either a label map or a probability map (reduced by argmax).
pub fn read_predictions(path: &Path, classes: usize) -> Result<HardLabelMap> {
    let c = Container::read(path)?;
    match c.data {
        TensorData::U16(_) => c.to_labels(classes).map_err(|m| format_err(path, m)),
        _ => {
            let t = c.to_tensor().map_err(|m| format_err(path, m))?;
            if t.channels() != classes {
                return Err(format_err(
                    path,
                    format!("expected {classes} channels, found {}", t.channels()),
                ));
            }
            let labels = t.pixels().map(|px| argmax_f32(px) as u16).collect();
            HardLabelMap::new(t.height(), t.width(), labels, classes)
        }
    }
}

/// Writes `bytes` through a sibling temporary file and a rename, so a failed
/// write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_owned(),
        source: e,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_owned(),
        source: e,
    })
}

/// Fixed class palette; classes beyond it cycle.
pub const PALETTE: [[u8; 3]; 8] = [
    [34, 139, 34],
    [160, 110, 60],
    [200, 60, 60],
    [150, 230, 90],
    [70, 70, 200],
    [230, 200, 40],
    [150, 60, 180],
    [40, 200, 200],
];

/// Binary PPM (P6) of the per-pixel argmax; ignored pixels are black.
pub fn encode_label_ppm(labels: &HardLabelMap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    for &l in labels.labels() {
        if l == IGNORE_LABEL {
            out.extend_from_slice(&[0, 0, 0]);
        } else {
            out.extend_from_slice(&PALETTE[l as usize % PALETTE.len()]);
        }
    }
    out
}

/// Binary PGM (P5) of a one-channel map in `[0, 1]`; darker = lower.
pub fn encode_gray_pgm(map: &Tensor3) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(
        map.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}
