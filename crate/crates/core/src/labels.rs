//! Label spaces and the max-then-normalize conversion of source-space
//! distributions into the target label space.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ProbabilityMap, Tensor3};

/// Ordered, unique class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::Mapping(format!(
                "a label space needs at least 2 classes, got {}",
                names.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Mapping(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        LabelSpace::new(names)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(space: LabelSpace) -> Self {
        space.names
    }
}

/// Many-to-one partial map from source classes to target classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMapping {
    source: LabelSpace,
    target: LabelSpace,
    map: Vec<Option<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MappingFile {
    source_space: Vec<String>,
    target_space: Vec<String>,
    map: BTreeMap<String, Option<String>>,
}

impl LabelMapping {
    pub fn new(source: LabelSpace, target: LabelSpace, map: Vec<Option<usize>>) -> Result<Self> {
        if map.len() != source.len() {
            return Err(Error::shape("LabelMapping::new", source.len(), map.len()));
        }
        if let Some(bad) = map.iter().flatten().find(|&&t| t >= target.len()) {
            return Err(Error::Mapping(format!(
                "target index {bad} out of range for {} target classes",
                target.len()
            )));
        }
        if map.iter().all(Option::is_none) {
            return Err(Error::Mapping("no source class is mapped".into()));
        }
        Ok(Self {
            source,
            target,
            map,
        })
    }

    /// Maps every class to the same-named class; both spaces must agree.
    pub fn identity(space: LabelSpace) -> Self {
        let map = (0..space.len()).map(Some).collect();
        Self {
            source: space.clone(),
            target: space,
            map,
        }
    }

    /// Builds a mapping from `(source name, target name or None)` pairs.
    /// Source classes not listed are unmapped.
    pub fn from_names(
        source: LabelSpace,
        target: LabelSpace,
        pairs: &[(&str, Option<&str>)],
    ) -> Result<Self> {
        let mut map = vec![None; source.len()];
        for (s, t) in pairs {
            let si = source
                .index_of(s)
                .ok_or_else(|| Error::Mapping(format!("unknown source class {s:?}")))?;
            map[si] = match t {
                Some(t) => Some(
                    target
                        .index_of(t)
                        .ok_or_else(|| Error::Mapping(format!("unknown target class {t:?}")))?,
                ),
                None => None,
            };
        }
        Self::new(source, target, map)
    }

    pub fn source(&self) -> &LabelSpace {
        &self.source
    }

    pub fn target(&self) -> &LabelSpace {
        &self.target
    }

    /// Target index for each source class.
    pub fn targets(&self) -> &[Option<usize>] {
        &self.map
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: MappingFile = serde_json::from_str(text)
            .map_err(|e| Error::Mapping(format!("malformed mapping JSON: {e}")))?;
        let source = LabelSpace::new(file.source_space)?;
        let target = LabelSpace::new(file.target_space)?;
        let mut map = vec![None; source.len()];
        let mut seen = vec![false; source.len()];
        for (key, value) in &file.map {
            let si = source
                .index_of(key)
                .ok_or_else(|| Error::Mapping(format!("unknown source class {key:?}")))?;
            seen[si] = true;
            if let Some(t) = value {
                let ti = target.index_of(t).ok_or_else(|| {
                    Error::Mapping(format!("unknown target class {t:?} (key {key:?})"))
                })?;
                map[si] = Some(ti);
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Mapping(format!(
                "source class {:?} has no entry (use null for unmapped)",
                source.names[missing]
            )));
        }
        Self::new(source, target, map)
    }

    pub fn to_json_string(&self) -> String {
        let map = self
            .source
            .names
            .iter()
            .zip(&self.map)
            .map(|(s, t)| (s.clone(), t.map(|t| self.target.names[t].clone())))
            .collect();
        let file = MappingFile {
            source_space: self.source.names.clone(),
            target_space: self.target.names.clone(),
            map,
        };
        serde_json::to_string_pretty(&file).expect("mapping serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| Error::Format {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    /// Converts one source distribution. Returns `false` when every target
    /// score was zero and the uniform distribution was substituted.
    pub fn convert_pixel(&self, src: &[f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&p, t) in src.iter().zip(&self.map) {
            if let Some(t) = *t {
                if p > out[t] {
                    out[t] = p;
                }
            }
        }
        let sum: f64 = out.iter().sum();
        if sum > 0.0 {
            out.iter_mut().for_each(|o| *o /= sum);
            true
        } else {
            let u = 1.0 / out.len() as f64;
            out.iter_mut().for_each(|o| *o = u);
            false
        }
    }
}

/// Result of [`convert_distribution`].
#[derive(Debug, Clone, PartialEq)]
pub struct Converted {
    pub map: ProbabilityMap,
    /// Pixels whose mapped mass was zero and were replaced by uniform.
    pub degenerate_pixels: usize,
}

/// Converts a source-space probability map into the target label space:
/// each target class takes the maximum over its source classes, then the
/// pixel is renormalized.
pub fn convert_distribution(p_src: &ProbabilityMap, m: &LabelMapping) -> Result<Converted> {
    if p_src.classes() != m.source.len() {
        return Err(Error::shape(
            "convert_distribution",
            m.source.len(),
            p_src.classes(),
        ));
    }
    let ct = m.target.len();
    // Second channel block carries a degenerate flag per pixel.
    let out = p_src.tensor().map_pixels(ct + 1, |px, out| {
        let src: Vec<f64> = px.iter().map(|&v| v as f64).collect();
        let mut t = vec![0.0; ct];
        let ok = m.convert_pixel(&src, &mut t);
        for (o, v) in out.iter_mut().zip(t) {
            *o = v as f32;
        }
        out[ct] = if ok { 0.0 } else { 1.0 };
    });
    let mut data = Vec::with_capacity(p_src.pixel_count() * ct);
    let mut degenerate_pixels = 0;
    for px in out.pixels() {
        data.extend_from_slice(&px[..ct]);
        if px[ct] != 0.0 {
            degenerate_pixels += 1;
        }
    }
    let tensor = Tensor3::from_raw(p_src.height(), p_src.width(), ct, data);
    Ok(Converted {
        map: ProbabilityMap::from_tensor_unchecked(tensor),
        degenerate_pixels,
    })
}
